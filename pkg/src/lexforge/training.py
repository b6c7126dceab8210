"""AdamW, checkpoint container, MLM+NSP pre-training loop and perplexity."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .encoder import EncoderConfig, NonFiniteActivations, init_params, is_no_decay, loss_and_grads, masked_nll
from .pretrain_data import Chunk, PretrainStream
from .seeding import rng_for
from .tokenizer import Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"LXFG"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t}


def adamw_step(params: dict, grads: dict, state: OptimizerState, lrs: Optional[dict] = None):
    """One decoupled-weight-decay Adam update, in place.

    ``lrs`` optionally maps parameter name to its own learning rate. Decay is
    skipped for biases and layer-norm parameters and is scaled by the
    learning rate, so a zero rate leaves a parameter exactly unchanged.
    """
    missing = [n for n in params if n not in grads]
    if missing:
        raise TrainingError(f"no gradient for parameters: {', '.join(missing)}")
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name].astype(theta.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        lr = state.lr if lrs is None else lrs[name]
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if state.weight_decay and not is_no_decay(name):
            update = update + state.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)
    return params, state


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def write_container(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = _canonical_json(meta)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise TrainingError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def read_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise TrainingError("not a checkpoint file (bad magic)")
    try:
        return _parse_container(data)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as e:
        raise TrainingError(f"truncated or corrupt checkpoint ({e})") from None


def _parse_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise TrainingError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, 8)
    pos = 12
    meta = json.loads(data[pos : pos + n].decode("ascii"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        tag, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _TAG_DTYPES[tag]
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=size, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += size * dt.itemsize
        tensors[name] = arr
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes")
    return meta, tensors


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict
    optimizer: Optional[OptimizerState] = None
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {
            "encoder": self.config.to_dict(),
            "step": self.step,
            "rng": {"seed": self.seed, "step": self.step},
            "extra": self.extra,
        }
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        if self.optimizer is not None:
            meta["optimizer"] = self.optimizer.hyper()
            tensors.update({f"adam.m/{k}": v for k, v in self.optimizer.m.items()})
            tensors.update({f"adam.v/{k}": v for k, v in self.optimizer.v.items()})
        return write_container(meta, tensors)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        meta, tensors = read_container(data)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        opt = None
        if "optimizer" in meta:
            opt = OptimizerState(**meta["optimizer"])
            opt.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
            opt.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        return cls(EncoderConfig.from_dict(meta["encoder"]), params, opt, int(meta["step"]),
                   int(meta["rng"]["seed"]), meta.get("extra", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def copy(self) -> "Checkpoint":
        opt = None
        if self.optimizer is not None:
            opt = OptimizerState(**self.optimizer.hyper())
            opt.m = {k: v.copy() for k, v in self.optimizer.m.items()}
            opt.v = {k: v.copy() for k, v in self.optimizer.v.items()}
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()}, opt,
                          self.step, self.seed, json.loads(json.dumps(self.extra)))


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    batch_size: int = 8
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    checkpoint_every: Optional[int] = None
    dtype: str = "float32"
    workers: int = 1
    prefetch: int = 0


@dataclass
class PretrainResult:
    checkpoints: list
    metrics: list

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def _fresh(cfg: PretrainConfig, seed: int) -> Checkpoint:
    params = init_params(cfg.encoder, rng_for(seed, "init"), np.dtype(cfg.dtype))
    opt = OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                         weight_decay=cfg.weight_decay)
    return Checkpoint(cfg.encoder, params, opt, 0, seed)


def pretrain(
    chunks_by_doc: dict[str, list[Chunk]],
    vocab: Vocabulary,
    cfg: PretrainConfig,
    steps: int,
    seed: int,
    resume: Optional[Checkpoint] = None,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    on_metrics: Optional[Callable[[dict], None]] = None,
) -> PretrainResult:
    """Run ``steps`` total optimisation steps of MLM+NSP training.

    The batch and dropout randomness of step ``s`` depend only on
    ``(seed, s)``, so resuming a checkpoint taken at step ``k`` reproduces an
    uninterrupted run exactly. On a non-finite loss the last good checkpoint
    is attached to the raised :class:`TrainingDiverged`.
    """
    if not chunks_by_doc:
        raise TrainingError("empty training corpus")
    if cfg.encoder.vocab_size != len(vocab):
        raise TrainingError(f"encoder vocab_size {cfg.encoder.vocab_size} != vocabulary size {len(vocab)}")
    state = resume.copy() if resume is not None else _fresh(cfg, seed)
    seed = state.seed
    stream = PretrainStream(chunks_by_doc, vocab, cfg.batch_size, seed, workers=cfg.workers,
                            pad_to=min(512, cfg.encoder.max_position))
    every = cfg.checkpoint_every or max(1, steps // 10)
    checkpoints = [state.copy()]
    if on_checkpoint:
        on_checkpoint(checkpoints[-1])
    metrics: list[dict] = []
    last_good = checkpoints[-1]
    for batch_step, batch in enumerate(stream.steps(state.step, steps, cfg.prefetch), start=state.step):
        try:
            out = loss_and_grads(batch, state.params, state.config, train_mode=True,
                                 rng=rng_for(seed, "dropout", batch_step))
            if not (math.isfinite(out.mlm_loss) and math.isfinite(out.nsp_loss)):
                raise TrainingDiverged(f"non-finite loss at step {batch_step + 1}", last_good)
            adamw_step(state.params, out.grads, state.optimizer)
        except (NonFiniteActivations, NonFiniteGradient) as e:
            raise TrainingDiverged(f"{e} at step {batch_step + 1}", last_good) from e
        state.step = batch_step + 1
        row = {"step": state.step, "mlm_loss": out.mlm_loss, "nsp_loss": out.nsp_loss}
        metrics.append(row)
        if on_metrics:
            on_metrics(row)
        if state.step % every == 0 or state.step == steps:
            last_good = state.copy()
            checkpoints.append(last_good)
            if on_checkpoint:
                on_checkpoint(last_good)
            logger.info("step %d mlm %.4f nsp %.4f", state.step, out.mlm_loss, out.nsp_loss)
    return PretrainResult(checkpoints, metrics)


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], x]))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------
# perplexity
# --------------------------------------------------------------------------


class EncoderScorer:
    def __init__(self, params: dict, config: EncoderConfig):
        self.params = params
        self.config = config

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EncoderScorer":
        return cls(ckpt.params, ckpt.config)

    def masked_nll(self, batch) -> np.ndarray:
        return masked_nll(batch, self.params, self.config)


def evaluate_perplexity(model, test_chunks: dict[str, list[Chunk]], vocab: Vocabulary,
                        seed: int = 0, batch_size: int = 16) -> float:
    """exp(mean NLL over every masked position of one evaluation epoch).

    ``model`` is a :class:`Checkpoint` or any object with ``masked_nll(batch)``.
    Masking uses ``seed`` so scores are comparable across checkpoints.
    """
    scorer = model if hasattr(model, "masked_nll") else EncoderScorer.from_checkpoint(model)
    if not test_chunks:
        raise TrainingError("empty test split")
    stream = PretrainStream(test_chunks, vocab, batch_size, seed)
    total, count = 0.0, 0
    for batch in stream.epoch(0):
        nll = scorer.masked_nll(batch)
        total += float(np.sum(nll, dtype=np.float64))
        count += len(nll)
    if count == 0:
        raise TrainingError("no masked positions in the evaluation split")
    return math.exp(total / count)
