"""Command-line pipeline: ``lexforge <command> [--config FILE] [--seed N] [--out DIR] [--key value ...]``.

Every command reads defaults, then the JSON config file, then command-line
overrides, and writes the resolved settings to ``<out>/manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, explain, hierbert, tasks, tokenizer, training
from .encoder import EncoderConfig
from .pretrain_data import chunk_corpus

log = logging.getLogger("lexforge")


class ConfigError(ValueError):
    pass


_ENCODER = {
    "layers": (4, int, "transformer layers"),
    "hidden": (128, int, "hidden size"),
    "heads": (4, int, "attention heads"),
    "ff_dim": (512, int, "feed-forward size"),
    "dropout": (0.1, float, "dropout rate"),
}

SETTINGS: dict[str, dict[str, tuple]] = {
    "prep": {
        "input": ("", str, "raw JSONL file or directory"),
        "rules": ("", str, "JSON cleaning rules (default rule set when empty)"),
        "train_share": (9, int, "train part of the split ratio"),
        "test_share": (1, int, "test part of the split ratio"),
    },
    "vocab": {
        "corpus": ("", str, "cleaned corpus JSONL"),
        "split": ("", str, "split.json; only train documents are used when given"),
        "vocab_limit": (30522, int, "maximum vocabulary size"),
        "min_frequency": (2, int, "minimum pair count for a merge"),
        "sample_fraction": (0.10, float, "fraction of documents sampled"),
    },
    "pretrain": {
        "corpus": ("", str, "cleaned corpus JSONL"),
        "split": ("", str, "split.json (recomputed from the seed when empty)"),
        "vocab": ("", str, "vocabulary file"),
        **_ENCODER,
        "chunk_len": (254, int, "tokens per chunk"),
        "batch_size": (8, int, "pairs per batch"),
        "lr": (5e-5, float, "AdamW learning rate"),
        "weight_decay": (0.01, float, "decoupled weight decay"),
        "steps": (1000, int, "total optimisation steps"),
        "checkpoint_every": (0, int, "checkpoint interval (0: steps // 10)"),
        "resume": ("", str, "checkpoint to resume from"),
        "prefetch": (2, int, "batches prepared ahead"),
    },
    "perplexity": {
        "corpus": ("", str, "cleaned corpus JSONL"),
        "split": ("", str, "split.json (recomputed from the seed when empty)"),
        "vocab": ("", str, "vocabulary file"),
        "checkpoints": ("", str, "checkpoint file or directory of *.lxfg"),
        "chunk_len": (254, int, "tokens per chunk"),
        "batch_size": (16, int, "pairs per batch"),
    },
    "finetune": {
        "task": ("lsi", str, "lsi | seg | cjpe"),
        "train": ("", str, "train JSONL"),
        "dev": ("", str, "dev JSONL"),
        "test": ("", str, "test JSONL (optional)"),
        "vocab": ("", str, "vocabulary file"),
        "checkpoint": ("", str, "pre-trained checkpoint (fresh encoder when empty)"),
        **_ENCODER,
        "epochs": (25, int, "maximum epochs (<= 25)"),
        "patience": (5, int, "early-stopping patience on dev macro-F1"),
        "batch_size": (2, int, "documents per step"),
        "lr_lower": (1e-5, float, "learning rate of the segment encoder"),
        "lr_upper": (1e-3, float, "learning rate of BiLSTM + attention"),
        "lr_head": (1e-3, float, "learning rate of the task head"),
        "max_segments": (128, int, "segments per document"),
        "segment_len": (128, int, "tokens per segment incl. [CLS]/[SEP]"),
        "lstm_hidden": (64, int, "BiLSTM hidden size per direction"),
        "attn_dim": (64, int, "attention projection size"),
        "num_labels": (8, int, "label-set size for lsi"),
    },
    "evaluate": {
        "task": ("lsi", str, "lsi | seg | cjpe"),
        "data": ("", str, "examples JSONL"),
        "vocab": ("", str, "vocabulary file"),
        "model": ("", str, "fine-tuned model file"),
    },
    "explain": {
        "annotations": ("", str, "expert annotation JSONL"),
        "texts": ("", str, "CJPE JSONL holding the annotated texts"),
        "runs": ("", str, "JSON list of {name, attention, vocab, chunk_size, window_k}"),
    },
    "compare-vocab": {
        "a": ("", str, "first vocabulary"),
        "b": ("", str, "second vocabulary"),
        "c": ("", str, "third vocabulary"),
    },
    "synth-data": {
        "kind": ("corpus", str, "corpus | lsi | seg | cjpe"),
        "size": (100, int, "number of records"),
        "noise": (0.0, float, "label noise rate"),
        "num_labels": (8, int, "label-set size for lsi"),
        "artifacts": (False, bool, "add page-number and separator artifacts (corpus)"),
    },
}

REQUIRED = {
    "prep": ["input"], "vocab": ["corpus"], "pretrain": ["corpus", "vocab"],
    "perplexity": ["corpus", "vocab", "checkpoints"], "finetune": ["train", "dev", "vocab"],
    "evaluate": ["data", "vocab", "model"], "explain": ["annotations", "texts", "runs"],
    "compare-vocab": ["a", "b", "c"],
}


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lexforge", description="Legal-domain language model pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, spec in SETTINGS.items():
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
        p.add_argument("--out", default=None, help="output directory (default out/<command>)")
        p.add_argument("--workers", type=int, default=None, help="worker count (default min(cores, 8))")
        for key, (default, typ, help_text) in spec.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           type=_bool if typ is bool else typ, help=f"{help_text} (default {default!r})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < command line; unknown or mistyped keys raise ConfigError."""
    spec = SETTINGS[command]
    cfg = {k: v[0] for k, v in spec.items()}
    cfg.update(seed=0, out=f"out/{command}", workers=default_workers())
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in data.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key '{key}' for command {command}")
            want = spec[key][1] if key in spec else (str if key == "out" else int)
            ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value, ok = float(value), True
            if not ok:
                raise ConfigError(f"config key '{key}' expects {want.__name__}, got {value!r}")
            cfg[key] = value
    for key in list(spec) + ["seed", "out", "workers"]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in REQUIRED.get(command, []):
        if not cfg[key]:
            raise ConfigError(f"missing required setting '{key}'")
    if cfg["workers"] < 1:
        raise ConfigError("setting 'workers' must be at least 1")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _split(cfg, docs) -> corpus.CorpusSplit:
    if cfg.get("split"):
        return corpus.CorpusSplit.from_json(json.loads(Path(cfg["split"]).read_text(encoding="utf-8")))
    return corpus.split_corpus(docs, seed=cfg["seed"])


def _encoder_config(cfg, vocab_size: int, max_position: int) -> EncoderConfig:
    return EncoderConfig(layers=cfg["layers"], hidden=cfg["hidden"], heads=cfg["heads"], ff_dim=cfg["ff_dim"],
                         max_position=max_position, vocab_size=vocab_size, dropout=cfg["dropout"])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_prep(cfg, out: Path) -> None:
    rules = corpus.CleaningRuleSet.load(cfg["rules"]) if cfg["rules"] else corpus.DEFAULT_RULES
    raw = corpus.ingest(cfg["input"])
    clean = corpus.clean_corpus(raw, rules)
    corpus.write_jsonl(clean, out / "clean.jsonl")
    split = corpus.split_corpus(clean, (cfg["train_share"], cfg["test_share"]), cfg["seed"])
    _write_json(out / "split.json", split.to_json())
    _write_json(out / "summary.json", {"raw": len(raw), "clean": len(clean), "dropped_empty": len(raw) - len(clean),
                                       "train": len(split.train), "test": len(split.test)})


def cmd_vocab(cfg, out: Path) -> None:
    docs = corpus.ingest(cfg["corpus"])
    if cfg["split"]:
        keep = set(_split(cfg, docs).train)
        docs = [d for d in docs if d.id in keep]
    vocab = tokenizer.train_wordpiece(docs, cfg["vocab_limit"], cfg["min_frequency"], cfg["sample_fraction"],
                                      cfg["seed"])
    vocab.save(out / "vocab.txt")


def _split_chunks(cfg, which: str):
    docs = corpus.ingest(cfg["corpus"])
    split = _split(cfg, docs)
    keep = set(getattr(split, which))
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    return vocab, chunk_corpus([d for d in docs if d.id in keep], vocab, cfg["chunk_len"])


def cmd_pretrain(cfg, out: Path) -> None:
    vocab, chunks = _split_chunks(cfg, "train")
    enc = _encoder_config(cfg, len(vocab), min(512, 2 * cfg["chunk_len"] + 3))
    pc = training.PretrainConfig(encoder=enc, batch_size=cfg["batch_size"], lr=cfg["lr"],
                                 weight_decay=cfg["weight_decay"], checkpoint_every=cfg["checkpoint_every"] or None,
                                 workers=cfg["workers"], prefetch=cfg["prefetch"])
    resume = training.Checkpoint.load(cfg["resume"]) if cfg["resume"] else None
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume is not None and metrics_path.exists() else "w"
    with metrics_path.open(mode, encoding="utf-8") as fh:
        def on_metrics(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")

        training.pretrain(chunks, vocab, pc, cfg["steps"], cfg["seed"], resume,
                          on_checkpoint=lambda c: c.save(ckdir / f"step_{c.step:07d}.lxfg"),
                          on_metrics=on_metrics)


def cmd_perplexity(cfg, out: Path) -> None:
    vocab, chunks = _split_chunks(cfg, "test")
    src = Path(cfg["checkpoints"])
    paths = sorted(src.glob("*.lxfg")) if src.is_dir() else [src]
    if not paths:
        raise ConfigError(f"no checkpoints found under {src}")
    rows = []
    for p in paths:
        ck = training.Checkpoint.load(p)
        ppl = training.evaluate_perplexity(ck, chunks, vocab, seed=cfg["seed"], batch_size=cfg["batch_size"])
        rows.append({"checkpoint": p.name, "step": ck.step, "perplexity": ppl})
    _write_jsonl(out / "perplexity.jsonl", rows)


def _finetune_config(cfg) -> tasks.FinetuneConfig:
    keys = ("epochs", "patience", "batch_size", "lr_lower", "lr_upper", "lr_head", "max_segments",
            "segment_len", "lstm_hidden", "attn_dim", "num_labels")
    return tasks.FinetuneConfig(**{k: cfg[k] for k in keys})


def _dump_predictions(path: Path, examples, preds, attn) -> None:
    rows = []
    for ex, p, a in zip(examples, preds, attn):
        rows.append({"doc_id": ex.id, "prediction": sorted(p) if isinstance(p, set) else p,
                     "attention": [float(x) for x in a]})
    _write_jsonl(path, rows)


def cmd_finetune(cfg, out: Path) -> None:
    kind = cfg["task"]
    if kind not in tasks.KINDS:
        raise ConfigError(f"setting 'task' must be one of {', '.join(tasks.KINDS)}")
    nl = cfg["num_labels"] if kind == "lsi" else None
    load = lambda key: tasks.load_task_data(cfg[key], kind, nl)[0] if cfg[key] else None
    train, dev, test = load("train"), load("dev"), load("test")
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    ckpt = training.Checkpoint.load(cfg["checkpoint"]) if cfg["checkpoint"] else None
    enc = None if ckpt else _encoder_config(cfg, len(vocab), cfg["segment_len"])
    with (out / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        res = tasks.run_finetune(kind, train, dev, test, ckpt, _finetune_config(cfg), vocab, cfg["seed"], enc,
                                 on_epoch=lambda r: fh.write(json.dumps(r, sort_keys=True) + "\n"))
    hierbert.save_model(res.model, out / "model.lxfg", res.best_epoch, cfg["seed"])
    report = {"best_epoch": res.best_epoch, "dev": res.dev.to_json()}
    if res.test is not None:
        report["test"] = res.test.to_json()
        preds, attn, _ = tasks.evaluate(res.model, test, vocab, kind)
        _dump_predictions(out / "predictions.jsonl", test, preds, attn)
    _write_json(out / "report.json", report)


def cmd_evaluate(cfg, out: Path) -> None:
    kind = cfg["task"]
    model = hierbert.load_model(cfg["model"])
    if tasks.HEAD_OF.get(kind) != model.task:
        raise ConfigError(f"model was trained for head {model.task!r}, not task {kind!r}")
    examples = tasks.load_task_data(cfg["data"], kind, model.num_labels if kind == "lsi" else None)[0]
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    preds, attn, report = tasks.evaluate(model, examples, vocab, kind)
    _write_json(out / "report.json", report.to_json())
    _dump_predictions(out / "predictions.jsonl", examples, preds, attn)


def cmd_explain(cfg, out: Path) -> None:
    anns = explain.load_annotations(cfg["annotations"])
    texts = {e.id: e.text for e in tasks.load_task_data(cfg["texts"], "cjpe")[0]}
    base = Path(cfg["runs"]).parent
    runs = []
    for spec in json.loads(Path(cfg["runs"]).read_text(encoding="utf-8")):
        unknown = set(spec) - {"name", "attention", "vocab", "chunk_size", "window_k"}
        if unknown:
            raise ConfigError(f"unknown run key '{sorted(unknown)[0]}' in {cfg['runs']}")
        runs.append(explain.ModelRun(
            spec["name"], tokenizer.Vocabulary.load(base / spec["vocab"]),
            explain.load_attention(base / spec["attention"]), int(spec.get("chunk_size", 126)),
            ("last", int(spec.get("window_k", 128)))))
    report = explain.agreement_report(runs, anns, texts)
    _write_json(out / "report.json", report.to_json())
    (out / "report.txt").write_text(report.table(), encoding="utf-8")


def cmd_compare_vocab(cfg, out: Path) -> None:
    vs = [set(tokenizer.Vocabulary.load(cfg[k]).tokens) for k in ("a", "b", "c")]
    regions = tokenizer.vocab_overlap(*vs)
    _write_json(out / "overlap.json", {"regions": regions, "union": len(vs[0] | vs[1] | vs[2]),
                                       "sizes": {k: len(v) for k, v in zip("abc", vs)}})


def cmd_synth_data(cfg, out: Path) -> None:
    from . import synthetic

    kind = cfg["kind"]
    if kind == "corpus":
        _write_jsonl(out / "corpus.jsonl", synthetic.corpus_documents(cfg["size"], cfg["seed"],
                                                                      artifacts=cfg["artifacts"]))
        return
    if kind not in tasks.KINDS:
        raise ConfigError("setting 'kind' must be one of corpus, lsi, seg, cjpe")
    recs = tasks.generate_synthetic(kind, cfg["size"], cfg["seed"], noise=cfg["noise"], num_labels=cfg["num_labels"])
    _write_jsonl(out / f"{kind}.jsonl", recs)
    if kind == "cjpe":
        _write_jsonl(out / "annotations.jsonl", [{"doc_id": r["id"], "expert_id": "planted", "spans": r["rationale"]}
                                                 for r in recs])


COMMANDS = {
    "prep": cmd_prep, "vocab": cmd_vocab, "pretrain": cmd_pretrain, "perplexity": cmd_perplexity,
    "finetune": cmd_finetune, "evaluate": cmd_evaluate, "explain": cmd_explain,
    "compare-vocab": cmd_compare_vocab, "synth-data": cmd_synth_data,
}


def run(command: str, cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {"command": command, "config": cfg})
    COMMANDS[command](cfg, out)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LEXFORGE_LOG", "WARNING"), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        run(args.command, cfg)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"lexforge {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
