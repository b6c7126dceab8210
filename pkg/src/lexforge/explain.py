"""Agreement between chunk attention and expert rationale annotations.

Expert character spans are mapped to tokens, counted per model chunk
(restricted to the chunks the model actually sees) and compared with the
model's attention via KL(q || p).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kernels import span_flags
from .tokenizer import TokenizedText, Vocabulary, encode


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertAnnotation:
    doc_id: str
    expert_id: str
    spans: tuple  # ((begin, end), ...) half-open

    def canonical(self) -> "ExpertAnnotation":
        """Sorted, with overlapping or touching spans merged."""
        merged = []
        for b, e in sorted(self.spans):
            if merged and b <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([b, e])
        return ExpertAnnotation(self.doc_id, self.expert_id, tuple(map(tuple, merged)))


def load_annotations(path) -> list[ExpertAnnotation]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                spans = tuple((int(b), int(e)) for b, e in obj["spans"])
                out.append(ExpertAnnotation(str(obj["doc_id"]), str(obj["expert_id"]), spans))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ExplainError(f"{path}:{n}: bad annotation record ({e})") from None
    return out


def load_attention(path) -> dict[str, np.ndarray]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["doc_id"])] = np.asarray(obj["attention"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ExplainError(f"{path}:{n}: bad attention record ({e})") from None
    return out


def map_spans_to_tokens(text: str, spans, tokenized: TokenizedText) -> np.ndarray:
    """Flag 1 for every token whose offsets intersect an annotated span."""
    spans = np.asarray(list(spans), dtype=np.int64).reshape(-1, 2)
    for b, e in spans:
        if not 0 <= b < e <= len(text):
            raise ExplainError(f"span ({b}, {e}) outside text of length {len(text)}")
    return span_flags(tokenized.offsets, spans)


def chunk_boundaries(num_tokens: int, chunk_size: int) -> list[tuple[int, int]]:
    if chunk_size < 1:
        raise ExplainError("chunk_size must be positive")
    if num_tokens == 0:
        return [(0, 0)]
    return [(s, min(s + chunk_size, num_tokens)) for s in range(0, num_tokens, chunk_size)]


def window_indices(num_chunks: int, window: Optional[tuple[str, int]]) -> range:
    """Chunks visible to a model: ``None`` (all), ``("first", k)`` or ``("last", k)``."""
    if window is None:
        return range(num_chunks)
    policy, k = window
    if policy == "first":
        return range(min(k, num_chunks))
    if policy == "last":
        return range(max(0, num_chunks - k), num_chunks)
    raise ExplainError(f"unknown window policy {policy!r}")


@dataclass
class ChunkImportance:
    q: np.ndarray          # one entry per chunk in the window
    chunks: range          # indices of those chunks in the full document
    counts: np.ndarray
    dropped: int = 0       # annotated tokens outside the window


def chunk_importance(flags, boundaries, window=None, doc_id: str = "") -> ChunkImportance:
    """Share of the window's annotated tokens that fall in each visible chunk."""
    flags = np.asarray(flags)
    counts_all = np.array([int(flags[b:e].sum()) for b, e in boundaries], dtype=np.int64)
    idx = window_indices(len(boundaries), window)
    counts = counts_all[idx.start : idx.stop]
    total = int(counts.sum())
    if total == 0:
        raise ExplainError(f"document {doc_id or '?'}: no annotated tokens inside the model window")
    return ChunkImportance(counts / total, idx, counts, int(counts_all.sum()) - total)


def kl_divergence(q, p) -> float:
    """KL(q || p) in nats with 0 * ln 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ExplainError(f"length mismatch: q has {q.size} entries, p has {p.size}")
    if np.any(p <= 0):
        raise ExplainError("model attention has a zero entry; expected a softmax output")
    nz = q > 0
    return float(max(0.0, np.sum(q[nz] * np.log(q[nz] / p[nz]))))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass
class ModelRun:
    name: str
    vocab: Vocabulary
    attention: dict            # doc_id -> attention over visible chunks
    chunk_size: int = 126      # content tokens per chunk
    window: Optional[tuple] = ("last", 128)


@dataclass
class AgreementReport:
    kl: dict                   # (model, expert, doc_id) -> KL
    per_expert: dict           # model -> expert -> mean KL
    average: dict              # model -> mean over experts
    experts: list
    models: list
    excluded: list = field(default_factory=list)   # (model, expert, doc_id)

    def table(self, scale: float = 100.0) -> str:
        """Rows per model, one column per expert plus the average (values x100)."""
        head = ["Model"] + list(self.experts) + ["Avg"]
        rows = [[m] + [f"{self.per_expert[m][e] * scale:.2f}" if e in self.per_expert[m] else "-"
                       for e in self.experts] + [f"{self.average[m] * scale:.2f}"] for m in self.models]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        if self.excluded:
            lines.append(f"excluded (no annotated tokens in window): "
                         + ", ".join(f"{m}/{e}/{d}" for m, e, d in self.excluded))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "kl": [{"model": m, "expert": e, "doc_id": d, "kl": v} for (m, e, d), v in sorted(self.kl.items())],
            "per_expert": self.per_expert,
            "average": self.average,
            "excluded": [{"model": m, "expert": e, "doc_id": d} for m, e, d in self.excluded],
            "q_normalization": "window",
        }


def agreement_report(runs: Sequence[ModelRun], annotations: Sequence[ExpertAnnotation],
                     texts: dict[str, str]) -> AgreementReport:
    """KL(q || p) per (model, expert, document), averaged per expert and overall."""
    annotated = sorted({a.doc_id for a in annotations})
    missing_text = [d for d in annotated if d not in texts]
    if missing_text:
        raise ExplainError(f"no text for annotated documents: {', '.join(missing_text)}")
    for run in runs:
        missing = [d for d in annotated if d not in run.attention]
        if missing:
            raise ExplainError(f"model {run.name} has no attention for documents: {', '.join(missing)}")
    experts = sorted({a.expert_id for a in annotations})
    ordered = sorted(annotations, key=lambda a: (a.doc_id, a.expert_id))
    kl, excluded = {}, []
    for run in runs:
        cache = {}
        for ann in ordered:
            if ann.doc_id not in cache:
                tok = encode(texts[ann.doc_id], run.vocab)
                cache[ann.doc_id] = (tok, chunk_boundaries(len(tok), run.chunk_size))
            tok, bounds = cache[ann.doc_id]
            flags = map_spans_to_tokens(texts[ann.doc_id], ann.canonical().spans, tok)
            try:
                ci = chunk_importance(flags, bounds, run.window, ann.doc_id)
            except ExplainError:
                excluded.append((run.name, ann.expert_id, ann.doc_id))
                continue
            p = run.attention[ann.doc_id]
            if len(p) != len(ci.q):
                raise ExplainError(f"model {run.name}, document {ann.doc_id}: attention has {len(p)} "
                                   f"entries but the window holds {len(ci.q)} chunks")
            kl[(run.name, ann.expert_id, ann.doc_id)] = kl_divergence(ci.q, p)
    per_expert, average = {}, {}
    for run in runs:
        per_expert[run.name] = {}
        for e in experts:
            vals = [v for (m, x, _), v in kl.items() if m == run.name and x == e]
            if vals:
                per_expert[run.name][e] = float(np.mean(vals))
        vals = list(per_expert[run.name].values())
        average[run.name] = float(np.mean(vals)) if vals else math.nan
    return AgreementReport(kl, per_expert, average, experts, [r.name for r in runs], excluded)
