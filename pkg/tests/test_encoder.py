import math

import numpy as np
import pytest

from lexforge import encoder as E
from lexforge.pretrain_data import IGNORE_INDEX, MaskedBatch

from helpers import finite_difference_check

CFG = E.EncoderConfig(layers=2, hidden=32, heads=4, ff_dim=64, max_position=32, vocab_size=100, dropout=0.1)


def _inputs(B=2, S=16, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, CFG.vocab_size, (B, S))
    seg = np.zeros((B, S), dtype=np.int64)
    seg[:, S // 2:] = 1
    return ids, seg, np.ones((B, S), dtype=np.int64)


def test_hidden_state_shape():
    params = E.init_params(CFG, np.random.default_rng(0))
    H = E.forward(*_inputs(), params, CFG)
    assert H.shape == (2, 16, 32) and H.dtype == np.float32


def test_inference_is_deterministic():
    params = E.init_params(CFG, np.random.default_rng(0))
    a = E.forward(*_inputs(), params, CFG)
    b = E.forward(*_inputs(), params, CFG)
    assert np.array_equal(a, b)


def test_padding_does_not_leak():
    params = E.init_params(CFG, np.random.default_rng(1))
    ids, seg, att = _inputs(1, 12)
    base = E.forward(ids, seg, att, params, CFG)
    att2 = att.copy()
    att2[0, 9:] = 0
    ids_a, ids_b = ids.copy(), ids.copy()
    ids_b[0, 9:] = 7
    ha = E.forward(ids_a, seg, att2, params, CFG)
    hb = E.forward(ids_b, seg, att2, params, CFG)
    np.testing.assert_allclose(ha[0, :9], hb[0, :9], atol=1e-6)
    assert not np.allclose(base[0, :9], ha[0, :9], atol=1e-6)


def test_masked_key_gets_zero_attention():
    params = E.init_params(CFG, np.random.default_rng(2))
    ids, seg, att = _inputs(1, 8)
    att[0, 5] = 0
    _, cache = E.forward(ids, seg, att, params, CFG, return_cache=True)
    probs = cache["layers"][0]["probs"]
    assert np.all(probs[..., 5] == 0.0)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)


def test_out_of_range_id_is_rejected():
    params = E.init_params(CFG, np.random.default_rng(0))
    ids, seg, att = _inputs(1, 4)
    ids[0, 0] = CFG.vocab_size
    with pytest.raises(E.EncoderError):
        E.forward(ids, seg, att, params, CFG)


def test_position_limit():
    params = E.init_params(CFG, np.random.default_rng(0))
    ids, seg, att = _inputs(1, CFG.max_position + 1)
    with pytest.raises(E.EncoderError):
        E.forward(ids, seg, att, params, CFG)


def test_mlm_logits_linearity():
    h = np.random.default_rng(0).normal(size=(16, 32))
    params = {"mlm.weight": np.zeros((32, 100)), "mlm.bias": np.arange(100.0)}
    logits = E.mlm_logits(h, params)
    assert logits.shape == (16, 100) and np.all(logits == np.arange(100.0))
    np.testing.assert_allclose(E.softmax(logits).sum(-1), 1.0, atol=1e-6)


def test_pooler_and_nsp():
    params = E.init_params(CFG, np.random.default_rng(0), np.float64)
    params["pooler.weight"][:] = 0.0
    params["pooler.bias"][:] = 0.3
    h = np.random.default_rng(1).normal(size=(3, 32))
    pooled = E.pooled(h, params)
    assert np.allclose(pooled, math.tanh(0.3))
    params["nsp.weight"][:] = 0.0
    params["nsp.bias"][:] = 1.7
    np.testing.assert_allclose(E.softmax(E.nsp_logits(h, params)), 0.5)
    p2 = E.init_params(CFG, np.random.default_rng(0), np.float64)
    assert np.all(np.abs(E.pooled(h * 3, p2)) < 1)


def _batch(ids, seg, att, labels, nsp):
    B, S = ids.shape
    return MaskedBatch(ids, seg, att, labels, nsp, np.zeros((B, S), np.int8), np.zeros((B, S), np.int64))


def test_uniform_logits_give_log_vocab():
    params = E.init_params(CFG, np.random.default_rng(0), np.float64)
    params["mlm.weight"][:] = 0.0
    params["mlm.bias"][:] = 0.0
    ids, seg, att = _inputs()
    labels = np.full(ids.shape, IGNORE_INDEX)
    labels[0, 2], labels[1, 5] = 11, 40
    out = E.loss_and_grads(_batch(ids, seg, att, labels, np.array([True, False])), params, CFG, train_mode=False)
    assert out.mlm_loss == pytest.approx(math.log(100), abs=1e-12)
    assert out.num_masked == 2


def test_no_masked_positions_gives_zero_mlm():
    params = E.init_params(CFG, np.random.default_rng(0))
    ids, seg, att = _inputs()
    out = E.loss_and_grads(_batch(ids, seg, att, np.full(ids.shape, IGNORE_INDEX), np.array([True, True])),
                           params, CFG, train_mode=False)
    assert out.mlm_loss == 0.0 and not out.grads["mlm.weight"].any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    cfg = E.EncoderConfig(layers=2, hidden=16, heads=2, ff_dim=32, max_position=16, vocab_size=50, dropout=0.1)
    rng = np.random.default_rng(seed)
    params = E.init_params(cfg, rng, np.float64)
    for k in params:
        params[k] += rng.standard_normal(params[k].shape) * 0.1
    B, S = 2, 10
    ids = rng.integers(0, 50, (B, S))
    seg = np.zeros((B, S), dtype=np.int64)
    seg[:, 5:] = 1
    att = np.ones((B, S), dtype=np.int64)
    att[1, 8:] = 0
    labels = np.full((B, S), IGNORE_INDEX)
    labels[0, 3], labels[1, 2], labels[0, 6] = 7, 9, 1
    batch = _batch(ids, seg, att, labels, np.array([True, False]))
    run = lambda: E.loss_and_grads(batch, params, cfg, True, np.random.default_rng(5))
    errors = finite_difference_check(params, lambda: run().total, run().grads)
    assert max(errors.values()) < 1e-4, max(errors, key=errors.get)


def test_permuting_heads_permutes_output():
    """Reordering the heads of a layer consistently leaves the output unchanged."""
    cfg = E.EncoderConfig(layers=1, hidden=8, heads=2, ff_dim=16, max_position=8, vocab_size=20, dropout=0.0)
    params = E.init_params(cfg, np.random.default_rng(3), np.float64)
    ids, seg, att = np.array([[2, 7, 8, 9, 3]]), np.zeros((1, 5), np.int64), np.ones((1, 5), np.int64)
    base = E.forward(ids, seg, att, params, cfg)
    perm = np.r_[4:8, 0:4]
    swapped = dict(params)
    for part in ("query", "key", "value"):
        swapped[f"layer0.attn.{part}.weight"] = params[f"layer0.attn.{part}.weight"][:, perm]
        swapped[f"layer0.attn.{part}.bias"] = params[f"layer0.attn.{part}.bias"][perm]
    swapped["layer0.attn.output.weight"] = params["layer0.attn.output.weight"][perm]
    np.testing.assert_allclose(E.forward(ids, seg, att, swapped, cfg), base, atol=1e-12)


def test_no_decay_names():
    assert E.is_no_decay("layer0.attn.query.bias")
    assert E.is_no_decay("emb.ln.gain")
    assert not E.is_no_decay("layer0.attn.query.weight")
