"""WordPiece vocabulary training and greedy longest-match encoding."""

from __future__ import annotations

import heapq
import math
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import rng_for

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PREFIX = "##"
MAX_WORD_CHARS = 100


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    id_of: dict = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3
    mask_id = 4
    continuation_prefix = PREFIX

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise TokenizerError(f"first {len(SPECIALS)} tokens must be {SPECIALS}")
        id_of = {}
        for i, tok in enumerate(tokens):
            if not tok or any(c.isspace() for c in tok):
                raise TokenizerError(f"invalid token {tok!r} at id {i}")
            if tok in id_of:
                raise TokenizerError(f"duplicate token {tok!r} at ids {id_of[tok]} and {i}")
            id_of[tok] = i
        object.__setattr__(self, "id_of", id_of)
        object.__setattr__(self, "_cache", {})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(SPECIALS)}

    @property
    def num_specials(self) -> int:
        return len(SPECIALS)

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < len(SPECIALS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass
class TokenizedText:
    ids: np.ndarray          # int64 [n]
    word_start: np.ndarray   # bool [n]
    offsets: np.ndarray      # int64 [n, 2], half-open character spans

    def __len__(self) -> int:
        return len(self.ids)

    def tokens(self, vocab: Vocabulary) -> list[str]:
        return [vocab.tokens[i] for i in self.ids]


# --------------------------------------------------------------------------
# pre-tokenization
# --------------------------------------------------------------------------


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    # ASCII symbols count as punctuation, matching the usual BERT basic tokenizer
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _is_dropped(ch: str) -> bool:
    if ch in "\t\n\r":
        return False
    return unicodedata.category(ch) in ("Cc", "Cf")


_ASCII_WORD = re.compile(r"[A-Za-z0-9]+|[!-/:-@\[-`{-~]")
_ASCII_PLAIN = re.compile(r"[\t\n\r -~]*\Z")


def pre_tokenize(text: str) -> list[tuple[str, list[int]]]:
    """Lowercase and split on whitespace and punctuation.

    Returns ``(word, src)`` pairs where ``src[k]`` is the index in ``text`` of
    the character that produced ``word[k]``.
    """
    if _ASCII_PLAIN.match(text):
        return [(m.group().lower(), list(range(m.start(), m.end()))) for m in _ASCII_WORD.finditer(text)]
    words: list[tuple[str, list[int]]] = []
    buf: list[str] = []
    src: list[int] = []

    def flush():
        if buf:
            words.append(("".join(buf), list(src)))
            buf.clear()
            src.clear()

    for i, ch in enumerate(text):
        if ch.isspace():
            flush()
        elif _is_dropped(ch):
            continue
        elif _is_punct(ch):
            flush()
            words.append((ch.lower(), [i]))
        else:
            for lc in ch.lower():
                buf.append(lc)
                src.append(i)
    flush()
    return words


# --------------------------------------------------------------------------
# encode / decode
# --------------------------------------------------------------------------


def _segment_word(word: str, vocab: Vocabulary):
    """Greedy longest-match-first pieces as ``(id, lc_begin, lc_end)``; None if impossible."""
    cached = vocab._cache.get(word)
    if cached is not None:
        return cached
    if len(word) > MAX_WORD_CHARS:
        vocab._cache[word] = ()
        return ()
    id_of = vocab.id_of
    pieces = []
    start, n = 0, len(word)
    while start < n:
        end = n
        found = None
        while start < end:
            sub = word[start:end] if start == 0 else PREFIX + word[start:end]
            tid = id_of.get(sub)
            if tid is not None:
                found = tid
                break
            end -= 1
        if found is None:
            pieces = ()
            break
        pieces.append((found, start, end))
        start = end
    pieces = tuple(pieces)
    vocab._cache[word] = pieces
    return pieces


def encode(text: str, vocab: Vocabulary) -> TokenizedText:
    ids: list[int] = []
    starts: list[bool] = []
    offsets: list[tuple[int, int]] = []
    for word, src in pre_tokenize(text):
        pieces = _segment_word(word, vocab)
        if not pieces:
            ids.append(vocab.unk_id)
            starts.append(True)
            offsets.append((src[0], src[-1] + 1))
            continue
        for k, (tid, b, e) in enumerate(pieces):
            ids.append(tid)
            starts.append(k == 0)
            offsets.append((src[b], src[e - 1] + 1))
    return TokenizedText(
        ids=np.asarray(ids, dtype=np.int64),
        word_start=np.asarray(starts, dtype=bool),
        offsets=np.asarray(offsets, dtype=np.int64).reshape(-1, 2),
    )


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    out: list[str] = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise TokenizerError(f"token id {i} outside vocabulary of size {n}")
        if vocab.is_special(i):
            continue
        tok = vocab.tokens[i]
        if tok.startswith(PREFIX) and out:
            out[-1] += tok[len(PREFIX):]
        else:
            out.append(tok[len(PREFIX):] if tok.startswith(PREFIX) else tok)
    return " ".join(out)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _join(a: str, b: str) -> str:
    return a + (b[len(PREFIX):] if b.startswith(PREFIX) else b)


def learn_merges(word_counts: dict[str, int], budget: int, min_frequency: int):
    """Likelihood-scored WordPiece merging.

    Pairs are ranked by ``count(ab) / (count(a) * count(b))`` with ties going
    to the higher pair count, then to the lexicographically smaller pair.
    Returns ``(alphabet, learned_tokens)`` where ``learned_tokens`` holds at
    most ``budget`` new token strings in the order they were learned.
    """
    words: list[list[str]] = []
    freqs: list[int] = []
    alphabet: set[str] = set()
    for word in sorted(word_counts):
        syms = [word[0]] + [PREFIX + c for c in word[1:]]
        alphabet.update(syms)
        words.append(syms)
        freqs.append(word_counts[word])

    tok_count: Counter = Counter()
    pair_count: dict = defaultdict(int)
    pair_words: dict = defaultdict(set)
    by_tok: dict = defaultdict(set)

    def add(w, sign):
        syms, f = words[w], freqs[w] * sign
        for s in syms:
            tok_count[s] += f
        for p in zip(syms, syms[1:]):
            pair_count[p] += f
            if sign > 0:
                pair_words[p].add(w)
                by_tok[p[0]].add(p)
                by_tok[p[1]].add(p)
            else:
                pair_words[p].discard(w)
            touched.add(p)

    version: dict = defaultdict(int)
    heap: list = []

    def push(p):
        c = pair_count.get(p, 0)
        if c >= min_frequency:
            score = c / (tok_count[p[0]] * tok_count[p[1]])
            heapq.heappush(heap, (-score, -c, p[0], p[1], version[p]))

    touched: set = set()
    for w in range(len(words)):
        add(w, +1)
    for p in sorted(touched):
        push(p)

    known = set(alphabet)
    learned: list[str] = []
    while len(learned) < budget:
        best = None
        while heap:
            _, negc, a, b, ver = heapq.heappop(heap)
            if ver == version[(a, b)] and pair_count.get((a, b), 0) >= min_frequency:
                best = (a, b)
                break
        if best is None:
            break
        a, b = best
        merged = _join(a, b)
        touched = set()
        for w in sorted(pair_words[best]):
            add(w, -1)
            syms, out, i = words[w], [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out
            add(w, +1)
        for t in (a, b, merged):
            touched |= by_tok[t]
        for p in touched:
            version[p] += 1
            if pair_count.get(p, 0) <= 0:
                pair_count.pop(p, None)
                pair_words.pop(p, None)
            else:
                push(p)
        if merged not in known:
            known.add(merged)
            learned.append(merged)
    return sorted(alphabet), learned


def word_counts_of(texts: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in texts:
        for word, _ in pre_tokenize(text):
            if len(word) <= MAX_WORD_CHARS:
                counts[word] += 1
    return counts


def train_wordpiece(
    docs: Sequence,
    vocab_limit: int = 30522,
    min_frequency: int = 2,
    sample_fraction: float = 0.10,
    seed: int = 0,
) -> Vocabulary:
    """Train a vocabulary on a seeded ``sample_fraction`` of ``docs``.

    ``docs`` may hold strings or objects with a ``text`` attribute. The
    vocabulary always contains the five specials and the full character
    alphabet of the sample (initial and ``##`` forms), so ``vocab_limit``
    below ``5 + len(alphabet)`` is rejected.
    """
    texts = [d if isinstance(d, str) else d.text for d in docs]
    if not texts:
        raise TokenizerError("cannot train a vocabulary on an empty sample")
    if not 0.0 < sample_fraction <= 1.0:
        raise TokenizerError(f"sample_fraction must be in (0, 1], got {sample_fraction}")
    k = max(1, math.ceil(len(texts) * sample_fraction))
    if k < len(texts):
        pick = np.sort(rng_for(seed, "wordpiece_sample").choice(len(texts), size=k, replace=False))
        texts = [texts[i] for i in pick]
    counts = word_counts_of(texts)
    if not counts:
        raise TokenizerError("sample contains no words")
    alphabet = sorted({s for w in counts for s in [w[0]] + [PREFIX + c for c in w[1:]]})
    floor = len(SPECIALS) + len(alphabet)
    if vocab_limit < floor:
        raise TokenizerError(
            f"vocab_limit {vocab_limit} below the minimum {floor} (5 specials + {len(alphabet)} alphabet symbols)"
        )
    alphabet, learned = learn_merges(dict(counts), vocab_limit - floor, min_frequency)
    return Vocabulary(SPECIALS + tuple(alphabet) + tuple(learned))


def vocab_overlap(a, b, c) -> dict[str, int]:
    """Seven-region Venn counts of three vocabularies (or token collections)."""
    sa, sb, sc = (set(v.tokens) if isinstance(v, Vocabulary) else set(v) for v in (a, b, c))
    return {
        "a_only": len(sa - sb - sc),
        "b_only": len(sb - sa - sc),
        "c_only": len(sc - sa - sb),
        "ab_only": len((sa & sb) - sc),
        "ac_only": len((sa & sc) - sb),
        "bc_only": len((sb & sc) - sa),
        "abc": len(sa & sb & sc),
    }
