"""Shared oracles and fixtures for the test-suite (imported by test modules)."""

import itertools
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from lexforge import cli


# --------------------------------------------------------------------------
# brute-force oracles
# --------------------------------------------------------------------------


def brute_crf(emissions, trans, start, end):
    """(best path, log Z) by enumerating every label sequence."""
    T, L = emissions.shape
    best, best_score, scores = None, -np.inf, []
    for path in itertools.product(range(L), repeat=T):
        s = start[path[0]] + end[path[-1]] + sum(emissions[t, y] for t, y in enumerate(path))
        s += sum(trans[a, b] for a, b in zip(path[:-1], path[1:]))
        scores.append(s)
        if s > best_score:
            best, best_score = path, s
    m = max(scores)
    return np.array(best), m + np.log(np.sum(np.exp(np.array(scores) - m)))


def average_ranks(x):
    """Ranks from 1 with ties sharing their mean position, by counting."""
    x = list(x)
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def sign_enumeration_p(d, alternative):
    """Exact signed-rank p-value by visiting all 2^n sign patterns."""
    d = [v for v in d if v != 0]
    r = average_ranks([abs(v) for v in d])
    obs = sum(ri for ri, v in zip(r, d) if v > 0)
    ge = le = 0
    total = 2 ** len(d)
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = sum(ri for ri, b in zip(r, signs) if b)
        ge += s >= obs - 1e-9
        le += s <= obs + 1e-9
    pg, pl = ge / total, le / total
    return {"greater": pg, "less": pl, "two-sided": min(1.0, 2 * min(pg, pl))}[alternative]


def finite_difference_check(params, loss_fn, grads, h=1e-5, floor=1e-6):
    """Largest relative error per parameter (norm-wise, central differences)."""
    errors = {}
    for name, theta in params.items():
        num = np.zeros_like(theta)
        it = np.nditer(theta, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = theta[i]
            theta[i] = old + h
            up = loss_fn()
            theta[i] = old - h
            down = loss_fn()
            theta[i] = old
            num[i] = (up - down) / (2 * h)
        den = max(np.linalg.norm(grads[name]), np.linalg.norm(num), floor)
        errors[name] = float(np.linalg.norm(grads[name] - num) / den)
    return errors


# --------------------------------------------------------------------------
# CLI pipeline
# --------------------------------------------------------------------------


@contextmanager
def working_dir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield Path(path)
    finally:
        os.chdir(old)


TINY = ["--layers", "2", "--hidden", "32", "--heads", "2", "--ff-dim", "64"]


def lx(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"lexforge {' '.join(map(str, argv))} exited {code}"


def run_pipeline(root: Path) -> Path:
    """Every stage end to end on synthetic data, with relative paths under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    with working_dir(root):
        common = ["--seed", "7", "--workers", "1"]
        lx("synth-data", *common, "--kind", "corpus", "--size", "24", "--artifacts", "true", "--out", "raw")
        lx("prep", *common, "--input", "raw/corpus.jsonl", "--out", "prep")
        lx("vocab", *common, "--corpus", "prep/clean.jsonl", "--split", "prep/split.json",
           "--vocab-limit", "300", "--sample-fraction", "1.0", "--out", "vocab")
        lx("pretrain", *common, *TINY, "--corpus", "prep/clean.jsonl", "--split", "prep/split.json",
           "--vocab", "vocab/vocab.txt", "--chunk-len", "30", "--steps", "6", "--batch-size", "4",
           "--lr", "5e-4", "--out", "pretrain")
        lx("perplexity", *common, "--corpus", "prep/clean.jsonl", "--split", "prep/split.json",
           "--vocab", "vocab/vocab.txt", "--checkpoints", "pretrain/checkpoints", "--chunk-len", "30",
           "--out", "ppl")

        lx("synth-data", *common, "--kind", "cjpe", "--size", "12", "--out", "cjpe")
        records = Path("cjpe/cjpe.jsonl").read_text(encoding="utf-8").splitlines(keepends=True)
        for name, part in (("train", records[:6]), ("dev", records[6:9]), ("test", records[9:])):
            Path(f"cjpe/{name}.jsonl").write_text("".join(part), encoding="utf-8")
        lx("finetune", *common, "--task", "cjpe", "--train", "cjpe/train.jsonl", "--dev", "cjpe/dev.jsonl",
           "--test", "cjpe/test.jsonl", "--vocab", "vocab/vocab.txt", "--checkpoint",
           "pretrain/checkpoints/step_0000006.lxfg", "--epochs", "2", "--segment-len", "40",
           "--max-segments", "8", "--lstm-hidden", "8", "--attn-dim", "8", "--out", "ft")
        lx("evaluate", *common, "--task", "cjpe", "--data", "cjpe/test.jsonl", "--vocab", "vocab/vocab.txt",
           "--model", "ft/model.lxfg", "--out", "eval")

        test_ids = {json.loads(r)["id"] for r in records[9:]}
        anns = [a for a in Path("cjpe/annotations.jsonl").read_text(encoding="utf-8").splitlines()
                if json.loads(a)["doc_id"] in test_ids]
        Path("cjpe/test_annotations.jsonl").write_text("\n".join(anns) + "\n", encoding="utf-8")
        runs = [{"name": "tiny", "attention": "../ft/predictions.jsonl", "vocab": "../vocab/vocab.txt",
                 "chunk_size": 38, "window_k": 8}]
        Path("cjpe/runs.json").write_text(json.dumps(runs), encoding="utf-8")
        lx("explain", *common, "--annotations", "cjpe/test_annotations.jsonl", "--texts", "cjpe/test.jsonl",
           "--runs", "cjpe/runs.json", "--out", "explain")
        lx("compare-vocab", *common, "--a", "vocab/vocab.txt", "--b", "vocab/vocab.txt",
           "--c", "vocab/vocab.txt", "--out", "overlap")
    return root


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
