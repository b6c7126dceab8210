"""Court-document ingestion, artifact cleaning and length-stratified splitting."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .seeding import rng_for

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RawDocument:
    id: str
    text: str
    court: Optional[str] = None
    year: Optional[int] = None

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "court": self.court, "year": self.year}


@dataclass(frozen=True)
class CleaningRule:
    pattern: str
    replacement: str

    def compiled(self) -> re.Pattern:
        return re.compile(self.pattern)


@dataclass(frozen=True)
class CleaningRuleSet:
    rules: tuple[CleaningRule, ...]
    _compiled: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        compiled = []
        for i, rule in enumerate(self.rules):
            try:
                compiled.append((rule.compiled(), rule.replacement))
            except re.error as exc:
                raise CorpusError(f"rule {i}: pattern {rule.pattern!r} does not compile: {exc}") from exc
        object.__setattr__(self, "_compiled", tuple(compiled))

    def apply(self, text: str) -> str:
        for pattern, repl in self._compiled:
            text = pattern.sub(repl, text)
        return text

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "CleaningRuleSet":
        return cls(tuple(CleaningRule(p, r) for p, r in pairs))

    @classmethod
    def load(cls, path) -> "CleaningRuleSet":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise CorpusError(f"{path}: rule file must be a JSON array")
        pairs = []
        for i, item in enumerate(data):
            if not isinstance(item, dict) or not isinstance(item.get("pattern"), str) \
                    or not isinstance(item.get("replacement"), str):
                raise CorpusError(f"{path}: rule {i} needs string 'pattern' and 'replacement'")
            pairs.append((item["pattern"], item["replacement"]))
        return cls.from_pairs(pairs)

    def dump(self, path) -> None:
        data = [{"pattern": r.pattern, "replacement": r.replacement} for r in self.rules]
        Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


# Order matters: control characters go first so that later line-anchored
# rules see clean lines; whitespace collapsing runs last.
_SEP = r"[-_=]{4,}"
DEFAULT_RULES = CleaningRuleSet.from_pairs([
    # line endings
    (r"\r\n?", "\n"),
    # R3: non-printing control characters (tab and newline survive)
    (r"[\x00-\x08\x0b-\x1f\x7f-\x9f\u200b\ufeff]", ""),
    # R1: separator lines, optionally carrying a page marker between runs
    (rf"(?mi)^[^\S\n]*{_SEP}(?:[^\S\n]*(?:page[^\S\n]*)?\d+[^\S\n]*{_SEP})?[^\S\n]*(?:\n|\Z)", ""),
    # R1, inline remainder: separator runs inside text lines
    (_SEP, " "),
    # R2: bare page-number lines
    (r"(?mi)^[^\S\n]*(?:page[^\S\n]*)?\d+[^\S\n]*(?:\n|\Z)", ""),
    # R4: whitespace
    (r"[^\S\n]+", " "),
    (r"(?m)^ | $", ""),
    (r"\n{3,}", "\n\n"),
    (r"\A\s+|\s+\Z", ""),
])


def clean_text(raw: RawDocument | str, rules: CleaningRuleSet = DEFAULT_RULES) -> str:
    text = raw.text if isinstance(raw, RawDocument) else raw
    return rules.apply(text)


def clean_corpus(docs: Sequence[RawDocument], rules: CleaningRuleSet = DEFAULT_RULES) -> list[RawDocument]:
    """Clean every document; documents left empty by cleaning are dropped."""
    out = []
    for doc in docs:
        text = clean_text(doc, rules)
        if not text:
            logger.warning("document %s is empty after cleaning; dropped", doc.id)
            continue
        out.append(RawDocument(doc.id, text, doc.court, doc.year))
    return out


def _parse_record(obj, where: str) -> RawDocument:
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: record must be a JSON object")
    doc_id, text = obj.get("id"), obj.get("text")
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError(f"{where}: missing or empty string field 'id'")
    if not isinstance(text, str) or not text:
        raise CorpusError(f"{where}: missing or empty string field 'text'")
    court, year = obj.get("court"), obj.get("year")
    if court is not None and not isinstance(court, str):
        raise CorpusError(f"{where}: 'court' must be a string or null")
    if year is not None and (not isinstance(year, int) or isinstance(year, bool)):
        raise CorpusError(f"{where}: 'year' must be an integer or null")
    return RawDocument(doc_id, text, court, year)


def _iter_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix in (".jsonl", ".json") and p.is_file())
    return [path]


def ingest(path) -> list[RawDocument]:
    """Read JSON Lines corpus records from a file or every ``*.jsonl`` in a directory."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"{path}: no such file or directory")
    docs: list[RawDocument] = []
    seen: dict[str, str] = {}
    for file in _iter_files(path):
        with open(file, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                where = f"{file}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"{where}: malformed JSON ({exc.msg})") from exc
                doc = _parse_record(obj, where)
                if doc.id in seen:
                    raise CorpusError(f"duplicate id {doc.id!r} at {seen[doc.id]} and {where}")
                seen[doc.id] = where
                docs.append(doc)
    return docs


def write_jsonl(docs: Iterable[RawDocument], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

_SENT_END = re.compile(r"[.!?]+(?=\s|$)|\n+")


def count_sentences(text: str) -> int:
    parts = [p for p in _SENT_END.split(text) if p.strip()]
    return max(1, len(parts))


@dataclass
class CorpusSplit:
    train: list[str]
    test: list[str]
    length_buckets: list[float]

    def to_json(self) -> dict:
        return {"train": self.train, "test": self.test, "length_buckets": self.length_buckets}

    @classmethod
    def from_json(cls, data: dict) -> "CorpusSplit":
        return cls(list(data["train"]), list(data["test"]), list(data["length_buckets"]))


def split_corpus(docs: Sequence[RawDocument], ratio: tuple[int, int] = (9, 1), seed: int = 0) -> CorpusSplit:
    """Seeded train/test split stratified by sentence-count quintile.

    The overall test size is ``round(N * test_share)`` (at least one); it is
    spread across buckets by largest remainder so every bucket sits within one
    document of the exact ratio.
    """
    if len(docs) < 2:
        raise CorpusError("split_corpus needs at least 2 documents")
    n_train_part, n_test_part = ratio
    share = n_test_part / (n_train_part + n_test_part)
    counts = np.array([count_sentences(d.text) for d in docs], dtype=float)
    bounds = np.unique(np.quantile(counts, [0.2, 0.4, 0.6, 0.8]))
    bucket_of = np.searchsorted(bounds, counts, side="left")

    buckets = [np.flatnonzero(bucket_of == b) for b in range(len(bounds) + 1)]
    buckets = [b for b in buckets if len(b)]
    ideal = np.array([len(b) * share for b in buckets])
    n_test = np.floor(ideal).astype(int)
    total = max(1, int(round(len(docs) * share)))
    remainder = ideal - n_test
    for k in np.argsort(-remainder, kind="stable")[: max(0, total - n_test.sum())]:
        n_test[k] += 1

    rng = rng_for(seed, "split_corpus")
    train, test = [], []
    for members, k in zip(buckets, n_test):
        order = members[rng.permutation(len(members))]
        test.extend(docs[i].id for i in order[:k])
        train.extend(docs[i].id for i in order[k:])
    return CorpusSplit(train=train, test=test, length_buckets=[float(b) for b in bounds])
