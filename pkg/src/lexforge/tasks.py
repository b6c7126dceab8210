"""End-task data, fine-tuning drivers, macro metrics, k-fold CV and the signed-rank test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from . import synthetic
from .encoder import EncoderConfig
from .hierbert import HierConfig, HierDocument, HierModel, finetune_step, init_params, label_weights, make_document
from .kernels import signed_rank_null
from .seeding import rng_for
from .tokenizer import Vocabulary, encode
from .training import Checkpoint, OptimizerState

KINDS = ("lsi", "seg", "cjpe")
HEAD_OF = {"lsi": "multilabel", "seg": "crf", "cjpe": "binary"}
NUM_ROLES = 7


class TaskError(ValueError):
    pass


@dataclass
class LsiExample:
    id: str
    sentences: list
    labels: frozenset


@dataclass
class SegExample:
    id: str
    sentences: list
    roles: list


@dataclass
class CjpeExample:
    id: str
    text: str
    label: int
    rationale: list = field(default_factory=list)


# --------------------------------------------------------------------------
# loading / generation
# --------------------------------------------------------------------------


def _str_list(obj, key, where):
    v = obj.get(key)
    if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
        raise TaskError(f"{where}: '{key}' must be a list of strings")
    return v


def _int_list(obj, key, where):
    v = obj.get(key)
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise TaskError(f"{where}: '{key}' must be a list of integers")
    return v


def parse_example(obj, kind: str, where: str = "record", num_labels: Optional[int] = None):
    if kind not in KINDS:
        raise TaskError(f"unknown task kind {kind!r}")
    if not isinstance(obj, dict):
        raise TaskError(f"{where}: expected a JSON object")
    ex_id = obj.get("id")
    if not isinstance(ex_id, str) or not ex_id:
        raise TaskError(f"{where}: missing or non-string 'id'")
    if kind == "lsi":
        sentences = _str_list(obj, "sentences", where)
        labels = _int_list(obj, "labels", where)
        bad = [x for x in labels if x < 0 or (num_labels is not None and x >= num_labels)]
        if bad:
            raise TaskError(f"{where}: labels out of range: {bad}")
        return LsiExample(ex_id, sentences, frozenset(labels))
    if kind == "seg":
        sentences = _str_list(obj, "sentences", where)
        roles = _int_list(obj, "roles", where)
        if len(roles) != len(sentences):
            raise TaskError(f"{where}: {len(roles)} roles for {len(sentences)} sentences")
        if any(r < 0 or r >= NUM_ROLES for r in roles):
            raise TaskError(f"{where}: roles must lie in 0..{NUM_ROLES - 1}")
        return SegExample(ex_id, sentences, list(roles))
    text = obj.get("text")
    if not isinstance(text, str):
        raise TaskError(f"{where}: 'text' must be a string")
    label = obj.get("label")
    if label not in (0, 1) or isinstance(label, bool):
        raise TaskError(f"{where}: 'label' must be 0 or 1")
    return CjpeExample(ex_id, text, int(label), [list(s) for s in obj.get("rationale", [])])


def load_task_data(path, kind: str, num_labels: Optional[int] = None):
    """Read a task JSONL file. Returns ``(examples, label_set)``."""
    path = Path(path)
    out, seen = [], {}
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{n}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise TaskError(f"{where}: invalid JSON ({e.msg})") from None
            ex = parse_example(obj, kind, where, num_labels)
            if ex.id in seen:
                raise TaskError(f"{where}: duplicate id {ex.id!r} (first at line {seen[ex.id]})")
            seen[ex.id] = n
            out.append(ex)
    return out, label_set(out, kind, num_labels)


def label_set(examples, kind: str, num_labels: Optional[int] = None) -> list[int]:
    if kind == "seg":
        return list(range(NUM_ROLES))
    if kind == "cjpe":
        return [0, 1]
    if num_labels is not None:
        return list(range(num_labels))
    top = max((max(e.labels) for e in examples if e.labels), default=-1)
    return list(range(top + 1))


def to_record(ex) -> dict:
    if isinstance(ex, LsiExample):
        return {"id": ex.id, "sentences": ex.sentences, "labels": sorted(ex.labels)}
    if isinstance(ex, SegExample):
        return {"id": ex.id, "sentences": ex.sentences, "roles": ex.roles}
    rec = {"id": ex.id, "text": ex.text, "label": ex.label}
    if ex.rationale:
        rec["rationale"] = ex.rationale
    return rec


def generate_synthetic(kind: str, size: int, seed: int, vocab: Optional[Sequence[str]] = None,
                       noise: float = 0.0, num_labels: int = 8, **kw) -> list[dict]:
    """Seeded task records with planted cue words (``vocab`` optionally replaces the filler lexicon)."""
    if size < 1:
        raise TaskError("size must be at least 1")
    if kind == "lsi":
        return synthetic.lsi_examples(size, seed, num_labels, noise, lexicon=vocab)
    if kind == "seg":
        return synthetic.seg_examples(size, seed, noise, lexicon=vocab)
    if kind == "cjpe":
        return synthetic.cjpe_examples(size, seed, noise, lexicon=vocab, **kw)
    raise TaskError(f"unknown task kind {kind!r}")


def cue_oracle(kind: str, record: dict, num_labels: int = 8):
    """Prediction of the planted-cue rule, the Bayes-optimal classifier on noiseless data."""
    if kind == "lsi":
        words = set(" ".join(record["sentences"]).split())
        return sorted(l for l in range(num_labels) if synthetic.STATUTE_TRIGGERS[l] in words)
    if kind == "seg":
        out = []
        for s in record["sentences"]:
            words = set(s.split())
            out.append(next(r for r, cues in enumerate(synthetic.ROLE_CUES) if words & set(cues)))
        return out
    words = set(record["text"].split())
    return int(bool(words & set(synthetic.ACCEPT_CUES)))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    per_label: dict          # label -> {"precision","recall","f1","support"}
    macro: dict              # {"precision","recall","f1"}

    def to_json(self) -> dict:
        return {"per_label": {str(k): v for k, v in self.per_label.items()}, "macro": self.macro}


def _div(a, b):
    return a / b if b else 0.0


def macro_metrics(gold, predicted, kind: str, labels: Optional[Sequence[int]] = None) -> MetricsReport:
    """Per-label P/R/F1 (0/0 = 0) and their unweighted mean over the full label set.

    ``lsi``: gold/predicted are label sets per document. ``seg``: role
    sequences per document, scored per sentence. ``cjpe``: one 0/1 label
    per document; both classes are scored one-vs-rest.
    """
    if len(gold) != len(predicted):
        raise TaskError(f"{len(gold)} gold items but {len(predicted)} predictions")
    if kind == "lsi":
        if labels is None:
            labels = sorted(set().union(*map(set, gold), *map(set, predicted)))
        pairs = [(set(g), set(p)) for g, p in zip(gold, predicted)]
    else:
        if kind == "seg":
            g_flat, p_flat = [], []
            for g, p in zip(gold, predicted):
                if len(g) != len(p):
                    raise TaskError(f"sequence of {len(g)} roles predicted with {len(p)} labels")
                g_flat.extend(g)
                p_flat.extend(p)
            labels = list(range(NUM_ROLES)) if labels is None else labels
        else:
            g_flat, p_flat = list(gold), list(predicted)
            labels = [0, 1] if labels is None else labels
        pairs = [({g}, {p}) for g, p in zip(g_flat, p_flat)]
    per = {}
    for lab in labels:
        tp = sum(1 for g, p in pairs if lab in g and lab in p)
        fp = sum(1 for g, p in pairs if lab not in g and lab in p)
        fn = sum(1 for g, p in pairs if lab in g and lab not in p)
        prec, rec = _div(tp, tp + fp), _div(tp, tp + fn)
        per[int(lab)] = {"precision": prec, "recall": rec, "f1": _div(2 * prec * rec, prec + rec),
                         "support": tp + fn}
    n = len(per)
    macro = {k: _div(sum(v[k] for v in per.values()), n) for k in ("precision", "recall", "f1")}
    return MetricsReport(per, macro)


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    epochs: int = 25
    patience: int = 5
    batch_size: int = 2
    lr_lower: float = 1e-5
    lr_upper: float = 1e-3
    lr_head: float = 1e-3
    weight_decay: float = 0.01
    max_segments: int = 128
    segment_len: int = 128
    lstm_hidden: int = 64
    attn_dim: int = 64
    num_labels: int = 8

    def hier(self, kind: str) -> HierConfig:
        return HierConfig(self.max_segments, self.segment_len, self.lstm_hidden, self.attn_dim,
                          "last" if kind == "cjpe" else "first")

    def lr_map(self) -> dict:
        return {"lower": self.lr_lower, "upper": self.lr_upper, "head": self.lr_head}


class EarlyStopper:
    """Tracks the best dev score; ``update`` returns True once patience is exhausted."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise TaskError("patience must be positive")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def cjpe_pieces(text: str, vocab: Vocabulary, content_len: int) -> list[np.ndarray]:
    """Contiguous non-overlapping groups of ``content_len`` tokens."""
    ids = encode(text, vocab).ids
    if len(ids) == 0:
        return [ids]
    return [ids[i : i + content_len] for i in range(0, len(ids), content_len)]


def to_document(ex, vocab: Vocabulary, config: HierConfig) -> HierDocument:
    if isinstance(ex, CjpeExample):
        return make_document(cjpe_pieces(ex.text, vocab, config.segment_len - 2), vocab, config, "last")
    pieces = [encode(s, vocab).ids for s in ex.sentences]
    if isinstance(ex, SegExample) and len(pieces) > config.max_segments:
        raise TaskError(f"{ex.id}: {len(pieces)} sentences exceed max_segments={config.max_segments}")
    return make_document(pieces, vocab, config, "first")


def target_of(ex, num_labels: int):
    if isinstance(ex, LsiExample):
        y = np.zeros(num_labels)
        y[sorted(ex.labels)] = 1.0
        return y
    if isinstance(ex, SegExample):
        return ex.roles
    return ex.label


def gold_of(ex):
    if isinstance(ex, LsiExample):
        return set(ex.labels)
    if isinstance(ex, SegExample):
        return list(ex.roles)
    return ex.label


def _kind_of(ex) -> str:
    return {LsiExample: "lsi", SegExample: "seg", CjpeExample: "cjpe"}[type(ex)]


def evaluate(model: HierModel, examples, vocab: Vocabulary, kind: str, docs=None):
    """Predictions, attention vectors and the metrics report for ``examples``."""
    docs = docs or [to_document(ex, vocab, model.config) for ex in examples]
    preds, attn = [], []
    for doc in docs:
        p, a = model.predict(doc)
        preds.append(set(p) if kind == "lsi" else p)
        attn.append(a)
    labels = list(range(model.num_labels)) if kind == "lsi" else None
    return preds, attn, macro_metrics([gold_of(e) for e in examples], preds, kind, labels)


def build_model(kind: str, train: Sequence, checkpoint: Optional[Checkpoint], config: FinetuneConfig,
                seed: int = 0, enc_config: Optional[EncoderConfig] = None) -> HierModel:
    """HierBERT for ``kind``: lower encoder from ``checkpoint`` (or fresh), label weights from ``train``."""
    hc = config.hier(kind)
    head = HEAD_OF[kind]
    num_labels = {"lsi": config.num_labels, "seg": NUM_ROLES, "cjpe": 1}[kind]
    if checkpoint is not None:
        enc_config, lower = checkpoint.config, checkpoint.params
    elif enc_config is None:
        raise TaskError("need a pre-trained checkpoint or an encoder config")
    else:
        lower = None
    params = init_params(enc_config, hc, head, num_labels, rng_for(seed, "finetune_init"), lower)
    weights = None
    if kind == "lsi":
        counts = np.zeros(num_labels)
        for e in train:
            counts[sorted(e.labels)] += 1
        weights = label_weights(counts)
    return HierModel(enc_config, hc, head, num_labels, params, weights)


def train_epoch(model: HierModel, docs, targets, state, lr_map: dict, batch_size: int, seed: int, epoch: int) -> float:
    """One shuffled pass of :func:`finetune_step`; returns the mean batch loss."""
    order = rng_for(seed, "finetune_order", epoch).permutation(len(docs))
    losses = []
    for b, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size]
        drop = rng_for(seed, "finetune_dropout", epoch, b)
        losses.append(finetune_step(model, [docs[i] for i in idx], [targets[i] for i in idx], state, lr_map, drop))
    return float(np.mean(losses))


@dataclass
class FinetuneResult:
    model: HierModel
    dev: MetricsReport
    test: Optional[MetricsReport]
    history: list        # per-epoch {"epoch","loss","dev_f1"}
    best_epoch: int


def run_finetune(
    kind: str,
    train: Sequence,
    dev: Sequence,
    test: Optional[Sequence],
    checkpoint: Optional[Checkpoint],
    config: FinetuneConfig,
    vocab: Vocabulary,
    seed: int = 0,
    enc_config: Optional[EncoderConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> FinetuneResult:
    """Fine-tune with early stopping on dev macro-F1; the best dev epoch is restored."""
    if kind not in KINDS:
        raise TaskError(f"unknown task kind {kind!r}")
    for name, split in (("train", train), ("dev", dev)):
        if not split:
            raise TaskError(f"{name} split is empty")
    if test is not None and not test:
        raise TaskError("test split is empty")
    ids = [{e.id for e in s} for s in (train, dev, test or [])]
    if ids[0] & ids[1] or ids[0] & ids[2] or (ids[1] & ids[2] and dev is not test):
        raise TaskError("train/dev/test splits overlap")
    if config.epochs > 25:
        raise TaskError("epochs must be at most 25")

    model = build_model(kind, train, checkpoint, config, seed, enc_config)
    hc = model.config
    train_docs = [to_document(e, vocab, hc) for e in train]
    dev_docs = [to_document(e, vocab, hc) for e in dev]
    targets = [target_of(e, model.num_labels) for e in train]
    state = OptimizerState(lr=config.lr_upper, weight_decay=config.weight_decay)
    stopper = EarlyStopper(config.patience)
    best_params = {k: v.copy() for k, v in model.params.items()}
    history = []
    for epoch in range(1, config.epochs + 1):
        loss = train_epoch(model, train_docs, targets, state, config.lr_map(), config.batch_size, seed, epoch)
        dev_f1 = evaluate(model, dev, vocab, kind, dev_docs)[2].macro["f1"]
        row = {"epoch": epoch, "loss": loss, "dev_f1": dev_f1}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        stop = stopper.update(dev_f1, epoch)
        if stopper.best_epoch == epoch:
            best_params = {k: v.copy() for k, v in model.params.items()}
        if stop:
            break
    model.params = best_params
    dev_report = evaluate(model, dev, vocab, kind, dev_docs)[2]
    test_report = evaluate(model, test, vocab, kind)[2] if test is not None else None
    return FinetuneResult(model, dev_report, test_report, history, stopper.best_epoch)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


def kfold_indices(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    if k < 2:
        raise TaskError("k must be at least 2")
    if n < k:
        raise TaskError(f"{n} examples cannot be split into {k} folds")
    perm = rng_for(seed, "cv_folds").permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class CrossValidation:
    folds: list
    reports: list
    mean: dict


def cross_validate(examples: Sequence, k: int = 5, seed: int = 0, kind: Optional[str] = None,
                   fit: Optional[Callable] = None, **finetune_kw) -> CrossValidation:
    """Each fold is the test set once; the following fold serves as dev.

    ``fit(train, dev, test, fold_seed)`` must return a MetricsReport for the
    test fold; by default it runs :func:`run_finetune` with ``finetune_kw``.
    """
    folds = kfold_indices(len(examples), k, seed)
    if fit is None:
        kind = kind or _kind_of(examples[0])

        def fit(train, dev, test, fold_seed):
            return run_finetune(kind, train, dev, test, seed=fold_seed, **finetune_kw).test

    reports = []
    for i in range(k):
        dev_i = (i + 1) % k
        train_idx = np.concatenate([folds[j] for j in range(k) if j not in (i, dev_i)])
        pick = lambda idx: [examples[int(t)] for t in idx]
        reports.append(fit(pick(train_idx), pick(folds[dev_i]), pick(folds[i]),
                           int(rng_for(seed, "cv_fold", i).integers(2**31))))
    mean = {m: float(np.mean([r.macro[m] for r in reports])) for m in ("precision", "recall", "f1")}
    return CrossValidation(folds, reports, mean)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank test
# --------------------------------------------------------------------------

EXACT_MAX_N = 12


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float      # W = min(R+, R-)
    pvalue: float
    n: int
    r_plus: float
    r_minus: float
    method: str           # "exact" | "normal"


def wilcoxon_signed_rank(a, b, alternative: str = "two-sided", method: str = "auto") -> WilcoxonResult:
    """Paired signed-rank test on ``a - b``; zero differences are dropped.

    ``alternative="greater"`` tests whether ``a`` tends to exceed ``b``.
    Exact p-values enumerate all sign patterns for n <= 12; larger samples use
    the normal approximation with tie correction.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise TaskError(f"unknown alternative {alternative!r}")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise TaskError("a and b must be paired 1-d samples of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise TaskError("all differences are zero; the test is undefined")
    if n < 5:
        raise TaskError(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    r_plus = float(ranks[d > 0].sum())
    r_minus = float(ranks[d < 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null(doubled)
        obs = int(doubled[d > 0].sum())
        total = float(counts.sum())
        p_greater = counts[obs:].sum() / total
        p_less = counts[: obs + 1].sum() / total
    elif method == "normal":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        z = (r_plus - mean) / math.sqrt(var)
        p_greater, p_less = float(norm.sf(z)), float(norm.cdf(z))
    else:
        raise TaskError(f"unknown method {method!r}")
    p = {"greater": p_greater, "less": p_less,
         "two-sided": min(1.0, 2.0 * min(p_greater, p_less))}[alternative]
    return WilcoxonResult(min(r_plus, r_minus), float(p), n, r_plus, r_minus, method)
