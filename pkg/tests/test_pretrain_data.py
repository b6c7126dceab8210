import numpy as np
import pytest

from lexforge import pretrain_data as pd
from lexforge.pretrain_data import IGNORE_INDEX, BatchError, Chunk, SequencePair
from lexforge.tokenizer import SPECIALS, Vocabulary

VOCAB = Vocabulary(SPECIALS + ("play", "##ing", "the", "ball", "a", "b", "c", "d"))


def _chunk(n, index=0, doc="d", word_start=None):
    ids = np.arange(n, dtype=np.int64) % 8 + 5
    ws = np.ones(n, dtype=bool) if word_start is None else np.asarray(word_start, dtype=bool)
    return Chunk(doc, index, ids, ws)


def test_chunk_sizes():
    assert [len(c) for c in pd.chunk_document(np.arange(600), 254)] == [254, 254, 92]
    assert [len(c) for c in pd.chunk_document(np.arange(254), 254)] == [254]
    assert pd.chunk_document([], 254) == []


def test_two_chunks_always_positive():
    chunks = [_chunk(4, i) for i in range(2)]
    rng = np.random.default_rng(0)
    for _ in range(50):
        pair = pd.sample_pair(chunks, 0, rng)
        assert pair.is_next and pair.second.index == 1


class _ForceNegative:
    def random(self):
        return 0.99

    def integers(self, n):
        assert n == 1
        return 0


def test_three_chunks_forced_negative_takes_the_only_legal_index():
    chunks = [_chunk(4, i) for i in range(3)]
    pair = pd.sample_pair(chunks, 0, _ForceNegative())
    assert not pair.is_next and pair.second.index == 2


def test_single_chunk_document_has_no_pair():
    assert pd.sample_pair([_chunk(4)], 0, np.random.default_rng(0)) is None


def test_positive_fraction_monte_carlo():
    chunks = [_chunk(4, i) for i in range(5)]
    rng = np.random.default_rng(17)
    pos = sum(pd.sample_pair(chunks, 1, rng).is_next for _ in range(10_000))
    assert abs(pos / 10_000 - 0.5) <= 0.02


def test_negatives_never_reuse_anchor_or_successor():
    chunks = [_chunk(4, i) for i in range(6)]
    rng = np.random.default_rng(3)
    for i in range(5):
        for _ in range(200):
            p = pd.sample_pair(chunks, i, rng)
            if not p.is_next:
                assert p.second.index not in (i, i + 1)


def test_layout_and_reconstruction():
    pair = SequencePair(_chunk(5), _chunk(3, 1), True)
    row = pd.apply_masking(pair, VOCAB, np.random.default_rng(1))
    assert row.input_ids[0] == VOCAB.cls_id and row.input_ids[6] == VOCAB.sep_id and row.input_ids[-1] == VOCAB.sep_id
    assert (row.input_ids == VOCAB.sep_id).sum() == 2
    assert row.segment_ids.tolist() == [0] * 7 + [1] * 4
    restored = np.where(row.mlm_labels != IGNORE_INDEX, row.mlm_labels, row.input_ids)
    assert restored[1:6].tolist() == pair.first.ids.tolist()
    assert restored[7:10].tolist() == pair.second.ids.tolist()


def test_whole_word_pieces_are_masked_together():
    # "play ##ing" repeated: every word has two pieces
    ws = np.tile([True, False], 20)
    first = Chunk("d", 0, np.tile([5, 6], 20), ws)
    second = Chunk("d", 1, np.tile([5, 6], 20), ws)
    rng = np.random.default_rng(4)
    for _ in range(200):
        row = pd.apply_masking(SequencePair(first, second, True), VOCAB, rng)
        cand = row.mlm_labels != IGNORE_INDEX
        for g in np.unique(row.word_id[row.word_id >= 0]):
            flags = cand[row.word_id == g]
            assert flags.all() or not flags.any()


def test_zero_candidates_row_is_valid():
    # two two-piece words: the budget round(0.15 * 4) = 1 cannot hold either word
    word = Chunk("d", 0, np.array([5, 6]), np.array([True, False]))
    row = pd.apply_masking(SequencePair(word, word, True), VOCAB, np.random.default_rng(0))
    assert np.all(row.mlm_labels == IGNORE_INDEX) and np.all(row.actions == 0)
    assert row.input_ids.tolist() == [VOCAB.cls_id, 5, 6, VOCAB.sep_id, 5, 6, VOCAB.sep_id]


def test_batch_padding():
    long_pair = SequencePair(_chunk(253), _chunk(253, 1), True)
    short_pair = SequencePair(_chunk(150), _chunk(147, 1), False)
    batch = pd.build_batch([long_pair, short_pair], VOCAB, np.random.default_rng(0))
    assert batch.input_ids.shape == (2, 509)
    assert batch.attention_mask[1, 300:].sum() == 0 and batch.attention_mask[1, :300].all()
    assert np.all(batch.input_ids[1, 300:] == VOCAB.pad_id)
    assert batch.nsp_labels.tolist() == [True, False]
    per_row = (batch.mlm_labels == IGNORE_INDEX).sum(axis=1)
    assert per_row.tolist() == [509 - (batch.mlm_labels[r] != IGNORE_INDEX).sum() for r in range(2)]


def test_full_length_pairs_fit():
    pair = SequencePair(_chunk(254), _chunk(254, 1), True)
    batch = pd.build_batch([pair], VOCAB, np.random.default_rng(0))
    assert batch.input_ids.shape[1] == 511


def test_oversized_pair_is_rejected():
    with pytest.raises(BatchError):
        pd.build_batch([SequencePair(_chunk(300), _chunk(300, 1), True)], VOCAB, np.random.default_rng(0))


def _stream_chunks():
    return {f"d{k}": [_chunk(30, i, f"d{k}") for i in range(4)] for k in range(6)}


def test_dynamic_masking_differs_by_epoch():
    stream = pd.PretrainStream(_stream_chunks(), VOCAB, 4, seed=2)
    a = list(stream.epoch(1))
    b = list(stream.epoch(2))
    assert any(not np.array_equal(x.mlm_labels, y.mlm_labels) for x, y in zip(a, b))


def test_stream_is_deterministic():
    one = [b.input_ids for b in pd.PretrainStream(_stream_chunks(), VOCAB, 4, seed=5).steps(0, 7)]
    two = [b.input_ids for b in pd.PretrainStream(_stream_chunks(), VOCAB, 4, seed=5).steps(0, 7)]
    assert all(np.array_equal(x, y) for x, y in zip(one, two))


def test_every_anchor_once_per_epoch():
    stream = pd.PretrainStream(_stream_chunks(), VOCAB, 5, seed=0)
    rows = sum(b.size for b in stream.epoch(0))
    assert rows == 6 * 3


def test_batches_do_not_depend_on_schedule():
    stream = pd.PretrainStream(_stream_chunks(), VOCAB, 4, seed=8, workers=3)
    in_order = [b.input_ids for b in stream.epoch(0)]
    shuffled = {k: stream.batch(0, k).input_ids for k in reversed(range(stream.batches_per_epoch))}
    assert all(np.array_equal(in_order[k], shuffled[k]) for k in range(len(in_order)))


def test_prefetch_preserves_order():
    assert list(pd.prefetched(iter(range(50)), 3)) == list(range(50))


def test_chunk_cache_round_trip(tmp_path):
    chunks = [_chunk(7, 0, "x", [True, False] * 3 + [True]), _chunk(3, 1, "x")]
    pd.write_chunk_cache(tmp_path / "c.bin", chunks)
    back = pd.read_chunk_cache(tmp_path / "c.bin")
    assert [(c.doc_id, c.index) for c in back] == [("x", 0), ("x", 1)]
    assert all(np.array_equal(a.ids, b.ids) and np.array_equal(a.word_start, b.word_start)
               for a, b in zip(chunks, back))
