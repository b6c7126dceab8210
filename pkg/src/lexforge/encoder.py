"""Bidirectional transformer encoder with MLM/NSP/pooler heads and analytic gradients.

Parameters live in a flat ``dict[str, np.ndarray]``; weights are stored
``[in, out]`` and applied as ``x @ W + b``. Computation runs in the dtype of
the parameters, so float64 parameters give a float64 forward/backward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .kernels import gelu_backward, gelu_forward
from .pretrain_data import IGNORE_INDEX, MaskedBatch

LN_EPS = 1e-12


class EncoderError(ValueError):
    pass


class NonFiniteActivations(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ff_dim: int = 512
    max_position: int = 512
    vocab_size: int = 8000
    dropout: float = 0.1
    type_vocab: int = 2

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ff_dim", "max_position", "vocab_size", "type_vocab"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise EncoderError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def layer_names(layer: int) -> list[str]:
    p = f"layer{layer}."
    return [
        p + "attn.query.weight", p + "attn.query.bias",
        p + "attn.key.weight", p + "attn.key.bias",
        p + "attn.value.weight", p + "attn.value.bias",
        p + "attn.output.weight", p + "attn.output.bias",
        p + "attn.ln.gain", p + "attn.ln.bias",
        p + "ff.in.weight", p + "ff.in.bias",
        p + "ff.out.weight", p + "ff.out.bias",
        p + "ff.ln.gain", p + "ff.ln.bias",
    ]


def init_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    d, f, V = config.hidden, config.ff_dim, config.vocab_size
    p: dict[str, np.ndarray] = {}

    def w(name, shape):
        p[name] = truncated_normal(rng, shape, dtype=dtype)

    def z(name, shape):
        p[name] = np.zeros(shape, dtype=dtype)

    w("emb.token", (V, d))
    w("emb.position", (config.max_position, d))
    w("emb.segment", (config.type_vocab, d))
    p["emb.ln.gain"] = np.ones(d, dtype=dtype)
    z("emb.ln.bias", d)
    for layer in range(config.layers):
        pre = f"layer{layer}."
        for proj in ("query", "key", "value", "output"):
            w(pre + f"attn.{proj}.weight", (d, d))
            z(pre + f"attn.{proj}.bias", d)
        p[pre + "attn.ln.gain"] = np.ones(d, dtype=dtype)
        z(pre + "attn.ln.bias", d)
        w(pre + "ff.in.weight", (d, f))
        z(pre + "ff.in.bias", f)
        w(pre + "ff.out.weight", (f, d))
        z(pre + "ff.out.bias", d)
        p[pre + "ff.ln.gain"] = np.ones(d, dtype=dtype)
        z(pre + "ff.ln.bias", d)
    w("pooler.weight", (d, d))
    z("pooler.bias", d)
    w("mlm.weight", (d, V))
    z("mlm.bias", V)
    w("nsp.weight", (d, 2))
    z("nsp.bias", 2)
    return p


def is_no_decay(name: str) -> bool:
    """Biases and layer-norm parameters are excluded from weight decay."""
    return name.endswith(".bias") or ".ln." in name


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def gelu(x):
    return gelu_forward(x)[0]


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy, cache, gain):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _dropout_mask(rng, shape, p, dtype):
    if p <= 0.0 or rng is None:
        return None
    keep = rng.random(shape, dtype=np.float32) >= np.float32(p)
    return keep.astype(dtype) * dtype.type(1.0 / (1.0 - p))


def _linear(x, W, b):
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(*x.shape[:-1], W.shape[1]) + b


def _linear_backward(dy, x, W):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ W.T).reshape(x.shape)
    return dx, dW, db


# --------------------------------------------------------------------------
# encoder forward / backward
# --------------------------------------------------------------------------


def _check_inputs(input_ids, segment_ids, attention_mask, config):
    input_ids = np.asarray(input_ids)
    if input_ids.ndim == 1:
        input_ids = input_ids[None]
    B, S = input_ids.shape
    segment_ids = np.zeros_like(input_ids) if segment_ids is None else np.asarray(segment_ids).reshape(B, S)
    attention_mask = np.ones_like(input_ids) if attention_mask is None else np.asarray(attention_mask).reshape(B, S)
    if S > config.max_position:
        raise EncoderError(f"sequence length {S} exceeds max_position {config.max_position}")
    if input_ids.size and (input_ids.min() < 0 or input_ids.max() >= config.vocab_size):
        bad = input_ids[(input_ids < 0) | (input_ids >= config.vocab_size)][0]
        raise EncoderError(f"token id {bad} out of range for vocab_size {config.vocab_size}")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= config.type_vocab):
        raise EncoderError("segment id out of range")
    return input_ids, segment_ids, attention_mask


def forward(
    input_ids,
    segment_ids,
    attention_mask,
    params: dict,
    config: EncoderConfig,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    return_cache: bool = False,
):
    """Hidden states ``[B, S, hidden]`` (and the backward cache on request).

    Dropout is active only when ``train_mode`` is set and an ``rng`` is given;
    the drawn masks are kept in the cache so gradients match that sample.
    """
    input_ids, segment_ids, attention_mask = _check_inputs(input_ids, segment_ids, attention_mask, config)
    dt = params["emb.token"].dtype
    B, S = input_ids.shape
    d, h, dh = config.hidden, config.heads, config.head_dim
    p_drop = config.dropout if train_mode else 0.0
    drng = rng if train_mode else None

    x0 = params["emb.token"][input_ids] + params["emb.position"][:S][None] + params["emb.segment"][segment_ids]
    x, ln0 = layer_norm(x0, params["emb.ln.gain"], params["emb.ln.bias"])
    m0 = _dropout_mask(drng, x.shape, p_drop, dt)
    if m0 is not None:
        x = x * m0
    cache = {"ids": input_ids, "segs": segment_ids, "ln0": ln0, "m0": m0, "layers": []}

    key_mask = attention_mask.astype(bool)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)
    for layer in range(config.layers):
        pre = f"layer{layer}."
        c = {"x_in": x}
        q = _linear(x, params[pre + "attn.query.weight"], params[pre + "attn.query.bias"])
        k = _linear(x, params[pre + "attn.key.weight"], params[pre + "attn.key.bias"])
        v = _linear(x, params[pre + "attn.value.weight"], params[pre + "attn.value.bias"])
        qh = q.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * dt.type(scale)
        scores = np.where(key_mask, scores, -np.inf)
        probs = softmax(scores, axis=-1)
        mp = _dropout_mask(drng, probs.shape, p_drop, dt)
        probs_d = probs * mp if mp is not None else probs
        ctx = (probs_d @ vh).transpose(0, 2, 1, 3).reshape(B, S, d)
        a = _linear(ctx, params[pre + "attn.output.weight"], params[pre + "attn.output.bias"])
        ma = _dropout_mask(drng, a.shape, p_drop, dt)
        if ma is not None:
            a = a * ma
        x1, ln1 = layer_norm(x + a, params[pre + "attn.ln.gain"], params[pre + "attn.ln.bias"])
        u = _linear(x1, params[pre + "ff.in.weight"], params[pre + "ff.in.bias"])
        g, cdf = gelu_forward(u)
        f = _linear(g, params[pre + "ff.out.weight"], params[pre + "ff.out.bias"])
        mf = _dropout_mask(drng, f.shape, p_drop, dt)
        if mf is not None:
            f = f * mf
        x, ln2 = layer_norm(x1 + f, params[pre + "ff.ln.gain"], params[pre + "ff.ln.bias"])
        c.update(qh=qh, kh=kh, vh=vh, probs=probs, mp=mp, probs_d=probs_d, ctx=ctx, ma=ma,
                 ln1=ln1, x1=x1, u=u, cdf=cdf, g=g, mf=mf, ln2=ln2)
        cache["layers"].append(c)

    if not np.all(np.isfinite(x)):
        raise NonFiniteActivations("non-finite hidden states")
    if return_cache:
        return x, cache
    return x


def backward(dH: np.ndarray, cache: dict, params: dict, config: EncoderConfig) -> dict[str, np.ndarray]:
    """Gradients of all encoder-body parameters given ``dL/dH``."""
    grads: dict[str, np.ndarray] = {}
    B, S, d = dH.shape
    h, dh = config.heads, config.head_dim
    scale = 1.0 / math.sqrt(dh)
    dx = dH
    for layer in reversed(range(config.layers)):
        pre = f"layer{layer}."
        c = cache["layers"][layer]
        dsum2, grads[pre + "ff.ln.gain"], grads[pre + "ff.ln.bias"] = layer_norm_backward(
            dx, c["ln2"], params[pre + "ff.ln.gain"])
        df = dsum2 * c["mf"] if c["mf"] is not None else dsum2
        dg, grads[pre + "ff.out.weight"], grads[pre + "ff.out.bias"] = _linear_backward(
            df, c["g"], params[pre + "ff.out.weight"])
        du = gelu_backward(dg, c["u"], c["cdf"])
        dx1, grads[pre + "ff.in.weight"], grads[pre + "ff.in.bias"] = _linear_backward(
            du, c["x1"], params[pre + "ff.in.weight"])
        dx1 = dx1 + dsum2
        dsum1, grads[pre + "attn.ln.gain"], grads[pre + "attn.ln.bias"] = layer_norm_backward(
            dx1, c["ln1"], params[pre + "attn.ln.gain"])
        da = dsum1 * c["ma"] if c["ma"] is not None else dsum1
        dctx, grads[pre + "attn.output.weight"], grads[pre + "attn.output.bias"] = _linear_backward(
            da, c["ctx"], params[pre + "attn.output.weight"])
        dctx_h = dctx.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        dprobs_d = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["probs_d"].transpose(0, 1, 3, 2) @ dctx_h
        dprobs = dprobs_d * c["mp"] if c["mp"] is not None else dprobs_d
        probs = c["probs"]
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dscores = dscores * dscores.dtype.type(scale)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        x_in = c["x_in"]
        dx_in = dsum1.copy()
        for name, dproj in (("query", dqh), ("key", dkh), ("value", dvh)):
            dproj = dproj.transpose(0, 2, 1, 3).reshape(B, S, d)
            dxi, grads[pre + f"attn.{name}.weight"], grads[pre + f"attn.{name}.bias"] = _linear_backward(
                dproj, x_in, params[pre + f"attn.{name}.weight"])
            dx_in += dxi
        dx = dx_in

    if cache["m0"] is not None:
        dx = dx * cache["m0"]
    dx0, grads["emb.ln.gain"], grads["emb.ln.bias"] = layer_norm_backward(dx, cache["ln0"], params["emb.ln.gain"])
    dtok = np.zeros_like(params["emb.token"])
    np.add.at(dtok, cache["ids"].reshape(-1), dx0.reshape(-1, d))
    grads["emb.token"] = dtok
    dpos = np.zeros_like(params["emb.position"])
    dpos[:S] = dx0.sum(axis=0)
    grads["emb.position"] = dpos
    dseg = np.zeros_like(params["emb.segment"])
    np.add.at(dseg, cache["segs"].reshape(-1), dx0.reshape(-1, d))
    grads["emb.segment"] = dseg
    return grads


# --------------------------------------------------------------------------
# heads and losses
# --------------------------------------------------------------------------


def mlm_logits(h: np.ndarray, params: dict) -> np.ndarray:
    """Vocabulary logits per position; softmax is left to the loss."""
    return h @ params["mlm.weight"] + params["mlm.bias"]


def pooled(h_cls: np.ndarray, params: dict) -> np.ndarray:
    return np.tanh(h_cls @ params["pooler.weight"] + params["pooler.bias"])


def nsp_logits(h_cls: np.ndarray, params: dict) -> np.ndarray:
    return pooled(h_cls, params) @ params["nsp.weight"] + params["nsp.bias"]


@dataclass
class LossOutput:
    mlm_loss: float
    nsp_loss: float
    grads: dict
    num_masked: int

    @property
    def total(self) -> float:
        return self.mlm_loss + self.nsp_loss


def masked_nll(batch: MaskedBatch, params: dict, config: EncoderConfig) -> np.ndarray:
    """Per-masked-position negative log-likelihood, inference mode."""
    H = forward(batch.input_ids, batch.segment_ids, batch.attention_mask, params, config, train_mode=False)
    bi, si = np.nonzero(batch.mlm_labels != IGNORE_INDEX)
    if len(bi) == 0:
        return np.zeros(0, dtype=np.float64)
    logp = log_softmax(mlm_logits(H[bi, si], params), axis=-1)
    return -logp[np.arange(len(bi)), batch.mlm_labels[bi, si]].astype(np.float64)


def loss_and_grads(
    batch: MaskedBatch,
    params: dict,
    config: EncoderConfig,
    train_mode: bool = True,
    rng: Optional[np.random.Generator] = None,
    with_grads: bool = True,
) -> LossOutput:
    """Mean MLM cross-entropy over masked positions plus mean NSP cross-entropy.

    A batch with no masked position contributes an MLM loss of exactly 0.
    NSP class 1 means "second chunk follows the first".
    """
    H, cache = forward(batch.input_ids, batch.segment_ids, batch.attention_mask, params, config,
                       train_mode=train_mode, rng=rng, return_cache=True)
    dt = H.dtype
    B = H.shape[0]
    dH = np.zeros_like(H)
    grads: dict[str, np.ndarray] = {}

    bi, si = np.nonzero(batch.mlm_labels != IGNORE_INDEX)
    M = len(bi)
    if M:
        hm = H[bi, si]
        logits = mlm_logits(hm, params)
        logp = log_softmax(logits, axis=-1)
        target = batch.mlm_labels[bi, si]
        mlm_loss = float(-logp[np.arange(M), target].mean())
        dlog = np.exp(logp)
        dlog[np.arange(M), target] -= 1.0
        dlog /= M
        grads["mlm.weight"] = hm.T @ dlog
        grads["mlm.bias"] = dlog.sum(axis=0)
        np.add.at(dH, (bi, si), dlog @ params["mlm.weight"].T)
    else:
        mlm_loss = 0.0
        grads["mlm.weight"] = np.zeros_like(params["mlm.weight"])
        grads["mlm.bias"] = np.zeros_like(params["mlm.bias"])

    hc = H[:, 0]
    pool = pooled(hc, params)
    nl = pool @ params["nsp.weight"] + params["nsp.bias"]
    y = batch.nsp_labels.astype(np.int64)
    lp = log_softmax(nl, axis=-1)
    nsp_loss = float(-lp[np.arange(B), y].mean())
    dnl = np.exp(lp)
    dnl[np.arange(B), y] -= 1.0
    dnl /= B
    grads["nsp.weight"] = pool.T @ dnl
    grads["nsp.bias"] = dnl.sum(axis=0)
    dz = (dnl @ params["nsp.weight"].T) * (1.0 - pool * pool)
    grads["pooler.weight"] = hc.T @ dz
    grads["pooler.bias"] = dz.sum(axis=0)
    dH[:, 0] += dz @ params["pooler.weight"].T

    if with_grads:
        grads.update(backward(dH.astype(dt), cache, params, config))
    else:
        grads = {}
    return LossOutput(mlm_loss, nsp_loss, grads, M)
