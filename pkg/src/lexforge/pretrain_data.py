"""Chunking, dynamic NSP pair sampling and dynamic whole-word masking."""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .seeding import rng_for
from .tokenizer import Vocabulary, encode

IGNORE_INDEX = -100
MAX_SEQ = 512

# per-position masking actions recorded for inspection
ACT_NONE, ACT_MASK, ACT_KEEP, ACT_RANDOM = 0, 1, 2, 3


class BatchError(ValueError):
    pass


@dataclass
class Chunk:
    doc_id: str
    index: int
    ids: np.ndarray
    word_start: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class SequencePair:
    first: Chunk
    second: Chunk
    is_next: bool


@dataclass
class MaskedRow:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    mlm_labels: np.ndarray
    actions: np.ndarray
    word_id: np.ndarray     # word group per position, -1 on specials
    nsp_label: bool


@dataclass
class MaskedBatch:
    input_ids: np.ndarray       # int64 [B, S]
    segment_ids: np.ndarray     # int64 [B, S]
    attention_mask: np.ndarray  # int64 [B, S]
    mlm_labels: np.ndarray      # int64 [B, S], IGNORE_INDEX off-candidate
    nsp_labels: np.ndarray      # bool [B]
    actions: np.ndarray         # int8 [B, S]
    word_id: np.ndarray         # int64 [B, S]

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def num_masked(self) -> int:
        return int((self.mlm_labels != IGNORE_INDEX).sum())


def chunk_document(ids, chunk_len: int = 254, doc_id: str = "", word_start=None) -> list[Chunk]:
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    ids = np.asarray(ids, dtype=np.int64)
    if word_start is None:
        word_start = np.ones(len(ids), dtype=bool)
    word_start = np.asarray(word_start, dtype=bool)
    return [
        Chunk(doc_id, k, ids[s : s + chunk_len], word_start[s : s + chunk_len])
        for k, s in enumerate(range(0, len(ids), chunk_len))
    ]


def chunk_corpus(docs, vocab: Vocabulary, chunk_len: int = 254) -> dict[str, list[Chunk]]:
    """Tokenize and chunk documents, keyed by document id in input order."""
    out = {}
    for doc in docs:
        tok = encode(doc.text, vocab)
        out[doc.id] = chunk_document(tok.ids, chunk_len, doc.id, tok.word_start)
    return out


def sample_pair(chunks: Sequence[Chunk], i: int, rng: np.random.Generator) -> Optional[SequencePair]:
    """NSP pair for anchor ``i``; ``None`` when the document has a single chunk."""
    n = len(chunks)
    if n < 2:
        return None
    if not 0 <= i < n:
        raise IndexError(f"anchor {i} outside document of {n} chunks")
    can_pos = i + 1 < n
    negatives = n - (2 if can_pos else 1)
    if negatives <= 0:
        positive = True
    elif not can_pos:
        positive = False
    else:
        positive = bool(rng.random() < 0.5)
    if positive:
        return SequencePair(chunks[i], chunks[i + 1], True)
    j = int(rng.integers(negatives))
    # skip over i and i+1 in the index space
    for skip in sorted({i, i + 1} & set(range(n))):
        if j >= skip:
            j += 1
    return SequencePair(chunks[i], chunks[j], False)


def _word_groups(ws: np.ndarray, offset: int) -> list[np.ndarray]:
    if len(ws) == 0:
        return []
    starts = np.flatnonzero(ws)
    if len(starts) == 0 or starts[0] != 0:
        starts = np.concatenate([[0], starts])
    bounds = np.append(starts, len(ws))
    return [np.arange(b, e) + offset for b, e in zip(bounds[:-1], bounds[1:])]


def apply_masking(
    pair: SequencePair,
    vocab: Vocabulary,
    rng: np.random.Generator,
    mask_rate: float = 0.15,
) -> MaskedRow:
    """Lay out ``[CLS] first [SEP] second [SEP]`` and pick whole-word candidates.

    Words are visited in shuffled order and accepted while they fit in the
    token budget ``round(mask_rate * maskable)``; each candidate token then
    becomes [MASK] (80%), stays (10%) or becomes a random non-special id (10%).
    """
    a, b = pair.first, pair.second
    n1, n2 = len(a), len(b)
    length = n1 + n2 + 3
    if length > MAX_SEQ:
        raise BatchError(f"pair of {n1}+{n2} tokens exceeds {MAX_SEQ} with specials")
    ids = np.empty(length, dtype=np.int64)
    ids[0] = vocab.cls_id
    ids[1 : 1 + n1] = a.ids
    ids[1 + n1] = vocab.sep_id
    ids[2 + n1 : 2 + n1 + n2] = b.ids
    ids[-1] = vocab.sep_id
    segments = np.zeros(length, dtype=np.int64)
    segments[2 + n1 :] = 1

    groups = _word_groups(a.word_start, 1) + _word_groups(b.word_start, 2 + n1)
    word_id = np.full(length, -1, dtype=np.int64)
    for g, pos in enumerate(groups):
        word_id[pos] = g

    labels = np.full(length, IGNORE_INDEX, dtype=np.int64)
    actions = np.zeros(length, dtype=np.int8)
    maskable = n1 + n2
    target = int(np.floor(mask_rate * maskable + 0.5)) if maskable else 0
    target = max(1, target) if maskable else 0
    covered = 0
    chosen = []
    for g in rng.permutation(len(groups)):
        if covered >= target:
            break
        if covered + len(groups[g]) > target:
            continue
        chosen.append(groups[g])
        covered += len(groups[g])
    if chosen:
        pos = np.sort(np.concatenate(chosen))
        labels[pos] = ids[pos]
        u = rng.random(len(pos))
        act = np.where(u < 0.8, ACT_MASK, np.where(u < 0.9, ACT_KEEP, ACT_RANDOM)).astype(np.int8)
        actions[pos] = act
        ids[pos[act == ACT_MASK]] = vocab.mask_id
        n_rand = int((act == ACT_RANDOM).sum())
        if n_rand:
            ids[pos[act == ACT_RANDOM]] = rng.integers(vocab.num_specials, len(vocab), size=n_rand)
    return MaskedRow(ids, segments, labels, actions, word_id, pair.is_next)


def build_batch(
    pairs: Sequence[SequencePair],
    vocab: Vocabulary,
    rng: np.random.Generator,
    pad_to: int = MAX_SEQ,
    mask_rate: float = 0.15,
) -> MaskedBatch:
    """Mask every pair now (dynamic masking) and pad to the longest row."""
    if not pairs:
        raise BatchError("build_batch needs at least one pair")
    for p in pairs:
        if len(p.first) + len(p.second) + 3 > pad_to:
            raise BatchError(
                f"pair ({p.first.doc_id}:{p.first.index}, {p.second.index}) needs "
                f"{len(p.first) + len(p.second) + 3} positions, limit {pad_to}"
            )
    rows = [apply_masking(p, vocab, rng, mask_rate) for p in pairs]
    width = max(len(r.input_ids) for r in rows)
    B = len(rows)
    input_ids = np.full((B, width), vocab.pad_id, dtype=np.int64)
    segment_ids = np.zeros((B, width), dtype=np.int64)
    attention = np.zeros((B, width), dtype=np.int64)
    labels = np.full((B, width), IGNORE_INDEX, dtype=np.int64)
    actions = np.zeros((B, width), dtype=np.int8)
    word_id = np.full((B, width), -1, dtype=np.int64)
    for r, row in enumerate(rows):
        n = len(row.input_ids)
        input_ids[r, :n] = row.input_ids
        segment_ids[r, :n] = row.segment_ids
        attention[r, :n] = 1
        labels[r, :n] = row.mlm_labels
        actions[r, :n] = row.actions
        word_id[r, :n] = row.word_id
    nsp = np.array([row.nsp_label for row in rows], dtype=bool)
    return MaskedBatch(input_ids, segment_ids, attention, labels, nsp, actions, word_id)


# --------------------------------------------------------------------------
# epoch streams
# --------------------------------------------------------------------------


class PretrainStream:
    """Deterministic batch stream over a chunked corpus.

    Every chunk index ``0..n-2`` of every multi-chunk document is an anchor
    once per epoch; anchor order comes from a seeded per-epoch shuffle. Batch
    ``k`` of an epoch belongs to worker ``k % workers`` and draws its NSP and
    masking randomness from a stream keyed by (seed, worker, epoch, k), so
    output is fixed by (seed, workers, epoch) whatever the execution order.
    """

    def __init__(
        self,
        chunks_by_doc: dict[str, list[Chunk]],
        vocab: Vocabulary,
        batch_size: int,
        seed: int,
        workers: int = 1,
        pad_to: int = MAX_SEQ,
        mask_rate: float = 0.15,
    ):
        self.chunks_by_doc = chunks_by_doc
        self.vocab = vocab
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.workers = max(1, int(workers))
        self.pad_to = pad_to
        self.mask_rate = mask_rate
        self.anchors = [
            (doc_id, i)
            for doc_id, chunks in chunks_by_doc.items()
            if len(chunks) >= 2
            for i in range(len(chunks) - 1)
        ]
        if not self.anchors:
            raise BatchError("corpus has no document with two or more chunks")

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.anchors) // self.batch_size)

    def _order(self, epoch: int) -> np.ndarray:
        return rng_for(self.seed, "anchor_order", epoch).permutation(len(self.anchors))

    def batch(self, epoch: int, k: int, order: Optional[np.ndarray] = None) -> MaskedBatch:
        if order is None:
            order = self._order(epoch)
        worker = k % self.workers
        rng = rng_for(self.seed, "batch", self.workers, worker, epoch, k)
        sel = order[k * self.batch_size : (k + 1) * self.batch_size]
        pairs = []
        for a in sel:
            doc_id, i = self.anchors[a]
            pairs.append(sample_pair(self.chunks_by_doc[doc_id], i, rng))
        return build_batch(pairs, self.vocab, rng, self.pad_to, self.mask_rate)

    def epoch(self, epoch: int) -> Iterator[MaskedBatch]:
        order = self._order(epoch)
        for k in range(self.batches_per_epoch):
            yield self.batch(epoch, k, order)

    def at_step(self, step: int) -> MaskedBatch:
        """Batch consumed at global optimisation step ``step`` (0-based)."""
        epoch, k = divmod(step, self.batches_per_epoch)
        return self.batch(epoch, k)

    def steps(self, start: int, stop: int, prefetch: int = 0) -> Iterator[MaskedBatch]:
        gen = (self.at_step(s) for s in range(start, stop))
        return prefetched(gen, prefetch) if prefetch > 0 else gen


def prefetched(items: Iterable, size: int) -> Iterator:
    """Produce ``items`` on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=size)
    done = object()
    failure = []

    def run():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=run, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            if failure:
                raise failure[0]
            return
        yield item


# --------------------------------------------------------------------------
# chunk cache
# --------------------------------------------------------------------------

_CACHE_MAGIC = b"LXCC"


def write_chunk_cache(path, chunks: Iterable[Chunk]) -> None:
    """Length-prefixed records: doc_id, index, ids (int32), word-start flags."""
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        for c in chunks:
            name = c.doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<II", c.index, len(c.ids)))
            fh.write(np.asarray(c.ids, dtype="<i4").tobytes())
            fh.write(np.asarray(c.word_start, dtype=np.uint8).tobytes())


def read_chunk_cache(path) -> list[Chunk]:
    data = open(path, "rb").read()
    if data[:4] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a chunk cache file")
    pos, out = 4, []
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        doc_id = data[pos : pos + n].decode("utf-8")
        pos += n
        index, m = struct.unpack_from("<II", data, pos)
        pos += 8
        ids = np.frombuffer(data, dtype="<i4", count=m, offset=pos).astype(np.int64)
        pos += 4 * m
        ws = np.frombuffer(data, dtype=np.uint8, count=m, offset=pos).astype(bool)
        pos += m
        out.append(Chunk(doc_id, index, ids, ws))
    return out
