"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Budgets are the wall-clock limits of the contract; a criterion that runs over
fails even when its numbers are right.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from lexforge import corpus, explain, hierbert as hb, synthetic, tasks, tokenizer, training
from lexforge.encoder import EncoderConfig, init_params, loss_and_grads, log_softmax
from lexforge.pretrain_data import (
    ACT_KEEP, ACT_MASK, ACT_RANDOM, IGNORE_INDEX, MaskedBatch, PretrainStream, chunk_corpus,
)
from lexforge.seeding import rng_for

from helpers import brute_crf, finite_difference_check, run_pipeline, sign_enumeration_p, tree_bytes


def _documents(n, seed):
    return [corpus.RawDocument(d["id"], d["text"]) for d in synthetic.corpus_documents(n, seed)]


# --------------------------------------------------------------------------
# 1. masking statistics
# --------------------------------------------------------------------------


def test_masking_statistics(verdict):
    t0 = time.perf_counter()
    docs = _documents(60, 11)
    vocab = tokenizer.train_wordpiece(docs, vocab_limit=300, sample_fraction=1.0)
    chunks = chunk_corpus(docs, vocab, 126)
    stream = PretrainStream(chunks, vocab, 16, seed=3)
    maskable = candidates = violations = 0
    actions = np.zeros(4, dtype=np.int64)
    multi_piece = 0
    for epoch in range(2):
        for batch in stream.epoch(epoch):
            maskable += int((batch.word_id >= 0).sum())
            cand = batch.mlm_labels != IGNORE_INDEX
            candidates += int(cand.sum())
            actions += np.bincount(batch.actions[cand], minlength=4)
            for r in range(batch.size):
                w = batch.word_id[r]
                for g in np.unique(w[w >= 0]):
                    flags = cand[r, w == g]
                    multi_piece += len(flags) > 1
                    violations += bool(flags.any() and not flags.all())
    elapsed = time.perf_counter() - t0
    frac = candidates / maskable
    split = actions[[ACT_MASK, ACT_KEEP, ACT_RANDOM]] / candidates
    ok = (maskable >= 50_000 and abs(frac - 0.15) <= 0.01 and np.all(np.abs(split - [0.8, 0.1, 0.1]) <= 0.02)
          and violations == 0 and multi_piece > 0 and elapsed < 30)
    verdict(1, ok, f"tokens={maskable} fraction={frac:.4f} split={np.round(split, 4).tolist()} "
                   f"violations={violations} multi-piece words={multi_piece} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. perplexity identities
# --------------------------------------------------------------------------


class _OracleScorer:
    """Puts a logit of 1e4 on the true token of every masked position."""

    def __init__(self, vocab_size):
        self.vocab_size = vocab_size

    def masked_nll(self, batch):
        target = batch.mlm_labels[batch.mlm_labels != IGNORE_INDEX]
        logits = np.zeros((len(target), self.vocab_size))
        logits[np.arange(len(target)), target] = 1e4
        return -log_softmax(logits)[np.arange(len(target)), target]


def test_perplexity_identities(verdict):
    t0 = time.perf_counter()
    docs = _documents(6, 2)
    vocab = tokenizer.train_wordpiece(docs, vocab_limit=200, sample_fraction=1.0)
    chunks = chunk_corpus(docs, vocab, 40)
    cfg = EncoderConfig(layers=1, hidden=16, heads=2, ff_dim=32, max_position=83, vocab_size=len(vocab), dropout=0.1)
    params = init_params(cfg, rng_for(0, "init"))
    params["mlm.weight"][:] = 0.0
    params["mlm.bias"][:] = 0.0
    uniform = training.evaluate_perplexity(training.Checkpoint(cfg, params), chunks, vocab)
    oracle = training.evaluate_perplexity(_OracleScorer(len(vocab)), chunks, vocab)
    elapsed = time.perf_counter() - t0
    ok = abs(uniform / len(vocab) - 1) <= 0.005 and abs(oracle - 1.0) <= 1e-6 and elapsed < 10
    verdict(2, ok, f"uniform={uniform:.4f} |V|={len(vocab)} oracle={oracle:.9f} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. training effectiveness
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_training_effectiveness(verdict):
    t0 = time.perf_counter()
    docs = _documents(100, 0)
    split = corpus.split_corpus(docs, seed=0)
    by_id = {d.id: d for d in docs}
    train_docs = [by_id[i] for i in split.train]
    vocab = tokenizer.train_wordpiece(train_docs, vocab_limit=1000, sample_fraction=1.0)
    train = chunk_corpus(train_docs, vocab, 64)
    test = chunk_corpus([by_id[i] for i in split.test], vocab, 64)
    enc = EncoderConfig(layers=4, hidden=128, heads=4, ff_dim=512, max_position=131, vocab_size=len(vocab),
                        dropout=0.1)
    cfg = training.PretrainConfig(encoder=enc, batch_size=8, lr=5e-4)
    rows, ok = [], True
    for seed in (1, 2, 3):
        res = training.pretrain(train, vocab, cfg, 500, seed)
        curve = training.smoothed([m["mlm_loss"] for m in res.metrics], 20)
        before = training.evaluate_perplexity(res.checkpoints[0], test, vocab)
        after = training.evaluate_perplexity(res.final, test, vocab)
        good = curve[-1] < 0.5 * curve[0] and after < before
        ok &= good
        rows.append(f"seed {seed}: loss {curve[0]:.2f}->{curve[-1]:.2f} ppl {before:.1f}->{after:.1f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    verdict(3, ok, "; ".join(rows) + f" time={elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 4. gradient correctness
# --------------------------------------------------------------------------


def _encoder_gradcheck(seed):
    cfg = EncoderConfig(layers=2, hidden=8, heads=2, ff_dim=16, max_position=12, vocab_size=20, dropout=0.1)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, np.float64)
    for k in params:
        params[k] += rng.standard_normal(params[k].shape) * 0.1
    B, S = 2, 9
    ids = rng.integers(0, 20, (B, S))
    seg = np.zeros((B, S), dtype=np.int64)
    seg[:, 5:] = 1
    att = np.ones((B, S), dtype=np.int64)
    att[1, 7:] = 0
    labels = np.full((B, S), IGNORE_INDEX)
    labels[0, 3], labels[1, 2], labels[0, 6] = 7, 9, 1
    batch = MaskedBatch(ids, seg, att, labels, np.array([True, False]), np.zeros((B, S), np.int8),
                        np.zeros((B, S), np.int64))
    run = lambda: loss_and_grads(batch, params, cfg, True, np.random.default_rng(seed + 100))
    return finite_difference_check(params, lambda: run().total, run().grads)


def _head_gradcheck(task, seed):
    cfg = EncoderConfig(layers=1, hidden=8, heads=2, ff_dim=16, max_position=12, vocab_size=20, dropout=0.1)
    hc = hb.HierConfig(max_segments=4, segment_len=8, lstm_hidden=3, attn_dim=4)
    vocab = tokenizer.Vocabulary(tokenizer.SPECIALS + tuple(f"w{i}" for i in range(15)))
    rng = np.random.default_rng(seed)
    n_labels, target, weights = {"multilabel": (3, np.array([1, 0, 1]), np.array([0.5, 1.5, 1.0])),
                                 "binary": (1, 1, None), "crf": (3, [0, 2, 2, 1], None)}[task]
    params = hb.init_params(cfg, hc, task, n_labels, rng, dtype=np.float64)
    for k in params:
        params[k] += rng.standard_normal(params[k].shape) * 0.1
    model = hb.HierModel(cfg, hc, task, n_labels, params, weights)
    doc = hb.make_document([rng.integers(5, 20, size=n) for n in (3, 5, 2, 4)], vocab, hc)
    drop = lambda: np.random.default_rng(seed + 100)
    _, grads = model.document_loss(doc, target, True, drop())
    assert set(grads) == set(params)
    return finite_difference_check(params, lambda: model.document_loss(doc, target, True, drop(),
                                                                       with_grads=False)[0], grads)


def test_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = {}
    for seed in (0, 1, 2):
        checks = {"encoder": _encoder_gradcheck(seed)}
        for task in hb.TASKS:
            checks[task] = _head_gradcheck(task, seed)
        for part, errs in checks.items():
            name = max(errs, key=errs.get)
            if errs[name] > worst.get(part, (None, -1))[1]:
                worst[part] = (name, errs[name])
    elapsed = time.perf_counter() - t0
    ok = all(err < 1e-4 for _, err in worst.values()) and elapsed < 300
    verdict(4, ok, " ".join(f"{p}:{e:.1e}({n})" for p, (n, e) in worst.items()) + f" time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 5. CRF oracle equivalence
# --------------------------------------------------------------------------


def test_crf_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1234)
    viterbi_hits, worst_logz = 0, 0.0
    for _ in range(100):
        T, L = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        em = rng.normal(size=(T, L)) * 2
        head = hb.CrfHead(rng.normal(size=(L, L)), rng.normal(size=L), rng.normal(size=L))
        best, logz = brute_crf(em, head.trans, head.start, head.end)
        viterbi_hits += bool(np.array_equal(hb.crf_decode(em, head), best))
        worst_logz = max(worst_logz, abs(hb.crf_log_partition(em, head) - logz))
    elapsed = time.perf_counter() - t0
    ok = viterbi_hits == 100 and worst_logz < 1e-8 and elapsed < 30
    verdict(5, ok, f"viterbi {viterbi_hits}/100 max|dlogZ|={worst_logz:.1e} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 6. end-to-end overfit
# --------------------------------------------------------------------------


def _overfit(kind, size, stop_at):
    t0 = time.perf_counter()
    examples = [tasks.parse_example(r, kind) for r in tasks.generate_synthetic(kind, size, 0)]
    texts = [" ".join(e.sentences) for e in examples]
    vocab = tokenizer.train_wordpiece(texts, vocab_limit=400, sample_fraction=1.0)
    enc = EncoderConfig(layers=2, hidden=64, heads=2, ff_dim=128, max_position=64, vocab_size=len(vocab), dropout=0.0)
    fc = tasks.FinetuneConfig(batch_size=4, lr_lower=2e-3, lr_upper=3e-3, lr_head=3e-3, segment_len=48,
                              lstm_hidden=32, attn_dim=32, num_labels=8)
    model = tasks.build_model(kind, examples, None, fc, 0, enc)
    docs = [tasks.to_document(e, vocab, model.config) for e in examples]
    targets = [tasks.target_of(e, model.num_labels) for e in examples]
    state = training.OptimizerState(lr=fc.lr_upper, weight_decay=fc.weight_decay)
    score, epoch = 0.0, 0
    for epoch in range(1, 51):
        tasks.train_epoch(model, docs, targets, state, fc.lr_map(), fc.batch_size, 0, epoch)
        preds, _, report = tasks.evaluate(model, examples, vocab, kind, docs)
        if kind == "seg":
            score = float(np.mean(np.concatenate([np.equal(p, e.roles) for p, e in zip(preds, examples)])))
        else:
            score = report.macro["f1"]
        if score >= stop_at:
            break
    return score, epoch, time.perf_counter() - t0


@pytest.mark.slow
def test_overfit(verdict):
    f1, ep_lsi, t_lsi = _overfit("lsi", 32, 0.95)
    acc, ep_seg, t_seg = _overfit("seg", 16, 0.95)
    ok = f1 >= 0.95 and acc >= 0.95 and t_lsi < 900 and t_seg < 900
    verdict(6, ok, f"lsi macro-F1={f1:.3f} at epoch {ep_lsi} ({t_lsi:.0f}s); "
                   f"crf accuracy={acc:.3f} at epoch {ep_seg} ({t_seg:.0f}s)")
    assert ok


# --------------------------------------------------------------------------
# 7. explainability identities
# --------------------------------------------------------------------------


def test_explainability_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    q = rng.dirichlet(np.ones(7))
    self_kl = explain.kl_divergence(q, q)
    hand = explain.kl_divergence([1.0, 0.0], [0.5, 0.5])

    records = tasks.generate_synthetic("cjpe", 8, 3)
    texts = {r["id"]: r["text"] for r in records}
    vocab = tokenizer.train_wordpiece(list(texts.values()), vocab_limit=300, sample_fraction=1.0)
    chunk_size = 24
    anns = []
    for r in records:
        spans = [tuple(s) for s in r["rationale"]]
        anns.append(explain.ExpertAnnotation(r["id"], "e1", tuple(spans)))
        anns.append(explain.ExpertAnnotation(r["id"], "e2", tuple((b, b + max(1, (e - b) // 2)) for b, e in spans)))
        keep = spans[: max(1, len(spans) - 1)]
        anns.append(explain.ExpertAnnotation(r["id"], "e3", tuple(keep)))
    mixed, flat = {}, {}
    for doc_id, text in texts.items():
        tok = tokenizer.encode(text, vocab)
        bounds = explain.chunk_boundaries(len(tok), chunk_size)
        spans = [s for a in anns if a.doc_id == doc_id for s in a.spans]
        flags = explain.map_spans_to_tokens(text, spans, tok)
        q_doc = explain.chunk_importance(flags, bounds, doc_id=doc_id).q
        u = np.full(len(bounds), 1.0 / len(bounds))
        mixed[doc_id], flat[doc_id] = 0.9 * q_doc + 0.1 * u, u
    runs = [explain.ModelRun("mixed", vocab, mixed, chunk_size), explain.ModelRun("uniform", vocab, flat, chunk_size)]
    report = explain.agreement_report(runs, anns, texts)
    lower = all(report.per_expert["mixed"][e] < report.per_expert["uniform"][e] for e in report.experts)
    elapsed = time.perf_counter() - t0
    ok = abs(self_kl) <= 1e-12 and abs(hand - math.log(2)) <= 1e-9 and lower and elapsed < 10
    detail = " ".join(f"{e}:{report.per_expert['mixed'][e]:.3f}<{report.per_expert['uniform'][e]:.3f}"
                      for e in report.experts)
    verdict(7, ok, f"KL(q,q)={self_kl:.1e} hand={hand:.12f} {detail} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 8. Wilcoxon oracle
# --------------------------------------------------------------------------


def _wilcoxon_fixtures():
    rng = np.random.default_rng(8)
    out = []
    for n in range(5, 11):
        out.append((rng.normal(0.3, 1, n), np.zeros(n)))                       # no ties
        out.append((np.round(rng.normal(0.5, 1, n), 1), np.zeros(n)))          # ties likely
        a = np.round(rng.uniform(0, 1, n), 2)
        out.append((a, np.where(np.arange(n) < 2, a, a - np.round(rng.normal(0, 0.2, n), 1))))  # zeros dropped
    return out


def test_wilcoxon_oracle(verdict):
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for a, b in _wilcoxon_fixtures():
        if np.count_nonzero(a - b) < 5:
            continue
        for alt in ("two-sided", "greater", "less"):
            res = tasks.wilcoxon_signed_rank(a, b, alternative=alt, method="exact")
            worst = max(worst, abs(res.pvalue - sign_enumeration_p(a - b, alt)))
            checked += 1
    p5 = tasks.wilcoxon_signed_rank([1, 2, 3, 4, 5], [0] * 5, alternative="greater").pvalue
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and checked >= 40 and abs(p5 - 1 / 32) < 1e-15 and elapsed < 5
    verdict(8, ok, f"{checked} p-values, max diff {worst:.1e}; n=5 all-positive p={p5} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 9. reproducibility
# --------------------------------------------------------------------------


def test_cli_reproducibility(tmp_path, verdict):
    t0 = time.perf_counter()
    first = tree_bytes(run_pipeline(tmp_path / "a"))
    second = tree_bytes(run_pipeline(tmp_path / "b"))
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    kinds = {".lxfg": 0, ".jsonl": 0, ".json": 0, ".txt": 0}
    for name in first:
        suffix = Path(name).suffix
        if suffix in kinds:
            kinds[suffix] += 1
    elapsed = time.perf_counter() - t0
    ok = not differing and kinds[".lxfg"] > 0 and elapsed < 600
    verdict(9, ok, f"{len(first)} files compared ({kinds}); differing={differing[:3]} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 10. vocabulary contract
# --------------------------------------------------------------------------


def test_vocabulary_contract(verdict):
    t0 = time.perf_counter()
    docs = _documents(40, 4)
    limits_ok = True
    for limit in (120, 400, 30522):
        vocab = tokenizer.train_wordpiece(docs, vocab_limit=limit, sample_fraction=1.0)
        limits_ok &= len(vocab) <= limit
    fixture = "the appellant filed the appeal before the high court and the respondent denied the charge ."
    vocab = tokenizer.train_wordpiece(docs + [corpus.RawDocument("fixture", fixture)], vocab_limit=400,
                                      sample_fraction=1.0)
    enc = tokenizer.encode(fixture, vocab)
    round_trip = tokenizer.decode(enc.ids, vocab) == fixture and vocab.unk_id not in enc.ids
    small = tokenizer.train_wordpiece(docs[:10], vocab_limit=200, sample_fraction=1.0)
    other = tokenizer.train_wordpiece(docs[20:], vocab_limit=300, sample_fraction=1.0)
    regions = tokenizer.vocab_overlap(vocab, small, other)
    union = len(set(vocab.tokens) | set(small.tokens) | set(other.tokens))
    elapsed = time.perf_counter() - t0
    ok = limits_ok and round_trip and sum(regions.values()) == union and len(regions) == 7 and elapsed < 60
    verdict(10, ok, f"limits respected={limits_ok} round-trip={round_trip} "
                    f"regions sum={sum(regions.values())} union={union} time={elapsed:.1f}s")
    assert ok
