"""Hierarchical document encoder: per-segment transformer, BiLSTM, attention pooling.

Parameter names are prefixed by group: ``lower.*`` (the segment encoder,
same layout as :mod:`lexforge.encoder`), ``upper.*`` (BiLSTM and attention)
and ``head.*`` (task head, including CRF transitions).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import encoder
from .encoder import EncoderConfig, truncated_normal
from .kernels import crf_backward, crf_forward, crf_viterbi

TASKS = ("multilabel", "binary", "crf")
GROUPS = ("lower", "upper", "head")
_PRETRAIN_ONLY = ("pooler.", "mlm.", "nsp.")


class HierError(ValueError):
    pass


@dataclass(frozen=True)
class HierConfig:
    max_segments: int = 128
    segment_len: int = 128
    lstm_hidden: int = 64
    attn_dim: int = 64
    selection_policy: str = "first"

    def __post_init__(self):
        for name in ("max_segments", "segment_len", "lstm_hidden", "attn_dim"):
            if getattr(self, name) < 1:
                raise HierError(f"{name} must be positive")
        if self.segment_len < 3:
            raise HierError("segment_len must leave room for [CLS] and [SEP]")
        if self.selection_policy not in ("first", "last"):
            raise HierError(f"selection_policy must be 'first' or 'last', got {self.selection_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HierDocument:
    segments: list          # int64 arrays, each [CLS] ... [SEP]
    policy: str = "first"
    total_segments: int = 0  # before selection

    def __len__(self) -> int:
        return len(self.segments)


def make_document(pieces: Sequence, vocab, config: HierConfig, policy: Optional[str] = None) -> HierDocument:
    """Wrap content token sequences as segments and apply first-k / last-k selection.

    Each piece is right-truncated so that with [CLS] and [SEP] it fits
    ``segment_len``.
    """
    policy = policy or config.selection_policy
    room = config.segment_len - 2
    segs = [np.concatenate([[vocab.cls_id], np.asarray(p, dtype=np.int64)[:room], [vocab.sep_id]])
            for p in pieces]
    if not segs:
        raise HierError("document has no segments")
    total = len(segs)
    k = config.max_segments
    segs = segs[:k] if policy == "first" else segs[-k:]
    return HierDocument(segs, policy, total)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def group_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in GROUPS:
        raise HierError(f"parameter {name!r} belongs to no group")
    return group


def lower_view(params: dict) -> dict:
    return {k[6:]: v for k, v in params.items() if k.startswith("lower.")}


def init_params(
    enc_config: EncoderConfig,
    config: HierConfig,
    task: str,
    num_labels: int,
    rng: np.random.Generator,
    lower_params: Optional[dict] = None,
    dtype=np.float32,
) -> dict[str, np.ndarray]:
    """Fresh upper encoder and head; lower encoder copied from ``lower_params`` when given."""
    if task not in TASKS:
        raise HierError(f"unknown task {task!r}")
    if lower_params is None:
        lower_params = encoder.init_params(enc_config, rng, dtype)
    p = {f"lower.{k}": np.array(v, dtype=dtype) for k, v in lower_params.items()
         if not k.startswith(_PRETRAIN_ONLY)}
    d, h, a = enc_config.hidden, config.lstm_hidden, config.attn_dim
    for direction in ("fw", "bw"):
        p[f"upper.lstm.{direction}.wx"] = truncated_normal(rng, (d, 4 * h), 0.1, dtype)
        p[f"upper.lstm.{direction}.wh"] = truncated_normal(rng, (h, 4 * h), 0.1, dtype)
        bias = np.zeros(4 * h, dtype=dtype)
        bias[h : 2 * h] = 1.0  # forget gate
        p[f"upper.lstm.{direction}.bias"] = bias
    p["upper.attn.weight"] = truncated_normal(rng, (2 * h, a), 0.1, dtype)
    p["upper.attn.bias"] = np.zeros(a, dtype=dtype)
    p["upper.attn.context"] = truncated_normal(rng, (a,), 0.1, dtype)
    out = 1 if task == "binary" else num_labels
    p["head.weight"] = truncated_normal(rng, (2 * h, out), 0.1, dtype)
    p["head.bias"] = np.zeros(out, dtype=dtype)
    if task == "crf":
        p["head.trans"] = np.zeros((num_labels, num_labels), dtype=dtype)
        p["head.start"] = np.zeros(num_labels, dtype=dtype)
        p["head.end"] = np.zeros(num_labels, dtype=dtype)
    return p


# --------------------------------------------------------------------------
# BiLSTM
# --------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_forward(x: np.ndarray, wx, wh, bias):
    T = x.shape[0]
    H = wh.shape[0]
    zx = x @ wx + bias
    h = np.zeros(H, dtype=x.dtype)
    c = np.zeros(H, dtype=x.dtype)
    hs = np.empty((T, H), dtype=x.dtype)
    steps = []
    for t in range(T):
        z = zx[t] + h @ wh
        i, f = _sigmoid(z[:H]), _sigmoid(z[H : 2 * H])
        g, o = np.tanh(z[2 * H : 3 * H]), _sigmoid(z[3 * H :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        steps.append((i, f, g, o, c_prev, h_prev, tc))
    return hs, (x, steps)


def lstm_backward(dhs: np.ndarray, cache, wx, wh):
    x, steps = cache
    T, H = dhs.shape
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    dbias = np.zeros(4 * H, dtype=dhs.dtype)
    dz_all = np.empty((T, 4 * H), dtype=dhs.dtype)
    dh_next = np.zeros(H, dtype=dhs.dtype)
    dc_next = np.zeros(H, dtype=dhs.dtype)
    for t in reversed(range(T)):
        i, f, g, o, c_prev, h_prev, tc = steps[t]
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ])
        dz_all[t] = dz
        dwh += np.outer(h_prev, dz)
        dh_next = wh @ dz
        dc_next = dc * f
    dwx = x.T @ dz_all
    dbias = dz_all.sum(axis=0)
    dx = dz_all @ wx.T
    return dx, dwx, dwh, dbias


# --------------------------------------------------------------------------
# document encoding
# --------------------------------------------------------------------------


@dataclass
class DocumentEncoding:
    segment_cls: np.ndarray   # [T, d]
    contextual: np.ndarray    # [T, 2h]
    pooled: np.ndarray        # [2h]
    attention: np.ndarray     # [T]
    cache: dict = field(default_factory=dict, repr=False)


def _pad_segments(segments):
    width = max(len(s) for s in segments)
    ids = np.zeros((len(segments), width), dtype=np.int64)
    mask = np.zeros((len(segments), width), dtype=np.int64)
    for r, s in enumerate(segments):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = 1
    return ids, mask


def encode_document(
    doc: HierDocument,
    params: dict,
    enc_config: EncoderConfig,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> DocumentEncoding:
    if len(doc.segments) == 0:
        raise HierError("cannot encode an empty document")
    ids, mask = _pad_segments(doc.segments)
    H, enc_cache = encoder.forward(ids, None, mask, lower_view(params), enc_config,
                                   train_mode=train_mode, rng=rng, return_cache=True)
    cls = H[:, 0, :]
    hf, cf = lstm_forward(cls, params["upper.lstm.fw.wx"], params["upper.lstm.fw.wh"], params["upper.lstm.fw.bias"])
    hb_rev, cb = lstm_forward(cls[::-1], params["upper.lstm.bw.wx"], params["upper.lstm.bw.wh"],
                              params["upper.lstm.bw.bias"])
    ctx = np.concatenate([hf, hb_rev[::-1]], axis=1)
    u = np.tanh(ctx @ params["upper.attn.weight"] + params["upper.attn.bias"])
    scores = u @ params["upper.attn.context"]
    p = encoder.softmax(scores)
    pooled = p @ ctx
    cache = {"enc": enc_cache, "H_shape": H.shape, "fw": cf, "bw": cb, "u": u}
    return DocumentEncoding(cls, ctx, pooled, p, cache)


def encoding_backward(enc: DocumentEncoding, d_pooled, d_ctx, params: dict, enc_config: EncoderConfig) -> dict:
    """Gradients for lower and upper parameters from ``dL/d pooled`` and ``dL/d contextual``."""
    grads = {}
    ctx, p, u = enc.contextual, enc.attention, enc.cache["u"]
    d_ctx = np.zeros_like(ctx) if d_ctx is None else d_ctx.copy()
    if d_pooled is not None:
        d_ctx += np.outer(p, d_pooled)
        dp = ctx @ d_pooled
        ds = p * (dp - p @ dp)
        grads["upper.attn.context"] = u.T @ ds
        dz = np.outer(ds, params["upper.attn.context"]) * (1.0 - u * u)
        grads["upper.attn.weight"] = ctx.T @ dz
        grads["upper.attn.bias"] = dz.sum(axis=0)
        d_ctx += dz @ params["upper.attn.weight"].T
    else:
        for k in ("upper.attn.context", "upper.attn.weight", "upper.attn.bias"):
            grads[k] = np.zeros_like(params[k])
    h = params["upper.lstm.fw.wh"].shape[0]
    dcls_f, grads["upper.lstm.fw.wx"], grads["upper.lstm.fw.wh"], grads["upper.lstm.fw.bias"] = lstm_backward(
        d_ctx[:, :h], enc.cache["fw"], params["upper.lstm.fw.wx"], params["upper.lstm.fw.wh"])
    dcls_b, grads["upper.lstm.bw.wx"], grads["upper.lstm.bw.wh"], grads["upper.lstm.bw.bias"] = lstm_backward(
        d_ctx[::-1, h:], enc.cache["bw"], params["upper.lstm.bw.wx"], params["upper.lstm.bw.wh"])
    dcls = dcls_f + dcls_b[::-1]
    dH = np.zeros(enc.cache["H_shape"], dtype=dcls.dtype)
    dH[:, 0, :] = dcls
    lower = encoder.backward(dH, enc.cache["enc"], lower_view(params), enc_config)
    grads.update({f"lower.{k}": v for k, v in lower.items()})
    return grads


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def label_weights(label_counts) -> np.ndarray:
    """Inverse-frequency weights ``sum(n) / n_l`` rescaled to mean 1."""
    n = np.asarray(label_counts, dtype=np.float64)
    if np.any(n <= 0):
        bad = [int(i) for i in np.flatnonzero(n <= 0)]
        raise HierError(f"labels with zero count cannot be weighted: {bad}")
    w = n.sum() / n
    return w / w.mean()


def multilabel_forward(enc: DocumentEncoding, params: dict, weights, target=None):
    """Sigmoid probabilities and weighted BCE ``sum_l w_l * BCE_l``.

    Returns ``(probs, loss, d_pooled, head_grads)``; loss terms are ``None``
    without a target.
    """
    z = enc.pooled @ params["head.weight"] + params["head.bias"]
    probs = 1.0 / (1.0 + np.exp(-z))
    if target is None:
        return probs, None, None, None
    y = np.asarray(target, dtype=z.dtype)
    w = np.asarray(weights, dtype=z.dtype)
    loss = float(np.sum(w * (_softplus(z) - y * z)))
    dz = w * (probs - y)
    grads = {"head.weight": np.outer(enc.pooled, dz), "head.bias": dz}
    return probs, loss, dz @ params["head.weight"].T, grads


def binary_forward(enc: DocumentEncoding, params: dict, target=None):
    z = float((enc.pooled @ params["head.weight"] + params["head.bias"])[0])
    prob = 1.0 / (1.0 + np.exp(-z))
    if target is None:
        return prob, None, None, None
    y = float(target)
    loss = float(_softplus(z) - y * z)
    dz = np.array([prob - y], dtype=enc.pooled.dtype)
    grads = {"head.weight": np.outer(enc.pooled, dz), "head.bias": dz}
    return prob, loss, dz @ params["head.weight"].T, grads


@dataclass
class CrfHead:
    trans: np.ndarray   # [L, L], trans[i, j] scores i -> j
    start: np.ndarray   # [L]
    end: np.ndarray     # [L]

    @property
    def num_labels(self) -> int:
        return self.trans.shape[0]

    @classmethod
    def from_params(cls, params: dict) -> "CrfHead":
        return cls(params["head.trans"], params["head.start"], params["head.end"])


def path_score(emissions, path, head: CrfHead) -> float:
    path = np.asarray(path)
    s = head.start[path[0]] + head.end[path[-1]] + emissions[np.arange(len(path)), path].sum()
    s += head.trans[path[:-1], path[1:]].sum()
    return float(s)


def crf_log_partition(emissions, head: CrfHead) -> float:
    return crf_forward(emissions, head.trans, head.start, head.end)[1]


def crf_nll(emissions, gold, head: CrfHead) -> float:
    emissions = np.asarray(emissions)
    gold = np.asarray(gold, dtype=np.int64)
    if emissions.ndim != 2 or len(gold) != emissions.shape[0]:
        raise HierError(f"gold length {len(gold)} does not match {emissions.shape[0]} segments")
    return crf_log_partition(emissions, head) - path_score(emissions, gold, head)


def crf_nll_grad(emissions, gold, head: CrfHead):
    """Loss and gradients ``(loss, d_emissions, d_trans, d_start, d_end)`` via forward-backward."""
    emissions = np.asarray(emissions, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if len(gold) != emissions.shape[0]:
        raise HierError(f"gold length {len(gold)} does not match {emissions.shape[0]} segments")
    trans = np.asarray(head.trans, dtype=np.float64)
    alpha, log_z = crf_forward(emissions, trans, head.start, head.end)
    beta = crf_backward(emissions, trans, head.end)
    T, L = emissions.shape
    marg = np.exp(alpha + beta - log_z)
    d_em = marg.copy()
    d_em[np.arange(T), gold] -= 1.0
    d_trans = np.zeros((L, L))
    if T > 1:
        pair = alpha[:-1, :, None] + trans[None] + (emissions[1:] + beta[1:])[:, None, :] - log_z
        d_trans = np.exp(pair).sum(axis=0)
        np.add.at(d_trans, (gold[:-1], gold[1:]), -1.0)
    d_start = marg[0].copy()
    d_start[gold[0]] -= 1.0
    d_end = marg[-1].copy()
    d_end[gold[-1]] -= 1.0
    loss = log_z - path_score(emissions, gold, head)
    return loss, d_em, d_trans, d_start, d_end


def crf_decode(emissions, head: CrfHead) -> np.ndarray:
    emissions = np.asarray(emissions)
    if emissions.ndim != 2 or emissions.shape[0] < 1:
        raise HierError("crf_decode needs at least one segment")
    return crf_viterbi(emissions, head.trans, head.start, head.end)[0]


def crf_emissions(enc: DocumentEncoding, params: dict) -> np.ndarray:
    return enc.contextual @ params["head.weight"] + params["head.bias"]


# --------------------------------------------------------------------------
# model wrapper
# --------------------------------------------------------------------------


@dataclass
class HierModel:
    enc_config: EncoderConfig
    config: HierConfig
    task: str
    num_labels: int
    params: dict
    weights: Optional[np.ndarray] = None   # multilabel label weights

    def __post_init__(self):
        if self.task not in TASKS:
            raise HierError(f"unknown task {self.task!r}")
        if self.task == "multilabel" and self.weights is None:
            self.weights = np.ones(self.num_labels)

    def encode(self, doc: HierDocument, train_mode=False, rng=None) -> DocumentEncoding:
        return encode_document(doc, self.params, self.enc_config, train_mode, rng)

    def document_loss(self, doc: HierDocument, target, train_mode=False, rng=None, with_grads=True):
        """Loss of one document and (optionally) gradients for every parameter."""
        enc = self.encode(doc, train_mode, rng)
        d_pooled = d_ctx = None
        if self.task == "multilabel":
            _, loss, d_pooled, hg = multilabel_forward(enc, self.params, self.weights, target)
        elif self.task == "binary":
            _, loss, d_pooled, hg = binary_forward(enc, self.params, target)
        else:
            em = crf_emissions(enc, self.params)
            loss, d_em, d_tr, d_st, d_en = crf_nll_grad(em, target, CrfHead.from_params(self.params))
            dt = self.params["head.weight"].dtype
            d_em = d_em.astype(dt)
            hg = {"head.weight": enc.contextual.T @ d_em, "head.bias": d_em.sum(axis=0),
                  "head.trans": d_tr.astype(dt), "head.start": d_st.astype(dt), "head.end": d_en.astype(dt)}
            d_ctx = d_em @ self.params["head.weight"].T
        if not with_grads:
            return loss, None
        grads = encoding_backward(enc, d_pooled, d_ctx, self.params, self.enc_config)
        grads.update(hg)
        return loss, grads

    def batch_loss(self, docs, targets, train_mode=False, rng=None):
        """Mean document loss and mean gradients, reduced in document order."""
        total, acc = 0.0, None
        for doc, target in zip(docs, targets):
            loss, grads = self.document_loss(doc, target, train_mode, rng)
            total += loss
            if acc is None:
                acc = grads
            else:
                for k, g in grads.items():
                    acc[k] += g
        n = len(docs)
        return total / n, {k: g / n for k, g in acc.items()}

    def predict(self, doc: HierDocument):
        """Label set (multilabel), 0/1 (binary) or label path (crf), plus attention."""
        enc = self.encode(doc)
        if self.task == "multilabel":
            probs = multilabel_forward(enc, self.params, self.weights)[0]
            return [int(i) for i in np.flatnonzero(probs >= 0.5)], enc.attention
        if self.task == "binary":
            return int(binary_forward(enc, self.params)[0] >= 0.5), enc.attention
        path = crf_decode(crf_emissions(enc, self.params), CrfHead.from_params(self.params))
        return [int(x) for x in path], enc.attention

    def meta(self) -> dict:
        return {"kind": "finetuned", "task": self.task, "num_labels": self.num_labels,
                "hier": self.config.to_dict(),
                "label_weights": None if self.weights is None else [float(x) for x in self.weights]}


def finetune_step(model: HierModel, docs, targets, state, lr_map: dict, rng=None) -> float:
    """One AdamW step with per-group learning rates; returns the mean loss."""
    from .training import adamw_step

    missing = sorted({group_of(n) for n in model.params} - set(lr_map))
    if missing:
        raise HierError(f"lr_map has no rate for parameter groups: {', '.join(missing)}")
    loss, grads = model.batch_loss(docs, targets, train_mode=rng is not None, rng=rng)
    lrs = {n: float(lr_map[group_of(n)]) for n in model.params}
    adamw_step(model.params, grads, state, lrs)
    return loss


def save_model(model: HierModel, path, step: int = 0, seed: int = 0) -> None:
    """Fine-tuned model in the pre-training container, tagged with its task kind."""
    from .training import Checkpoint

    Checkpoint(model.enc_config, model.params, None, step, seed, model.meta()).save(path)


def load_model(path) -> HierModel:
    from .training import Checkpoint

    ckpt = Checkpoint.load(path)
    meta = ckpt.extra
    if meta.get("kind") != "finetuned":
        raise HierError(f"{path} is not a fine-tuned model checkpoint")
    w = meta.get("label_weights")
    return HierModel(ckpt.config, HierConfig(**meta["hier"]), meta["task"], int(meta["num_labels"]),
                     ckpt.params, None if w is None else np.asarray(w))
