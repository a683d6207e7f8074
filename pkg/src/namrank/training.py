"""Entire-space multi-task loss, the Adam training loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .dataio import ConfigError, TrainingSample
from .model import (Batch, ModelConfig, ParameterSet, Vocabulary, encode_samples, forward_batch,
                    init_params, trainable_names, update_running_stats)
from .numerics import AdamState, Tape, Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ctr_loss: float
    ctcvr_loss: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.epochs]

    def to_csv(self, include_time: bool = True) -> str:
        """One row per epoch; ``include_time=False`` drops the wall-clock column."""
        head = "epoch,loss,ctr_loss,ctcvr_loss"
        lines = [head + ",wall_time" if include_time else head]
        for r in self.epochs:
            row = f"{r.epoch},{r.loss!r},{r.ctr_loss!r},{r.ctcvr_loss!r}"
            lines.append(row + f",{r.wall_time:.3f}" if include_time else row)
        return "\n".join(lines) + "\n"


def _bce(y: np.ndarray, p: Tensor) -> Tensor:
    p = nx.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return nx.neg(nx.add(nx.mul(y, nx.log(p)), nx.mul(1.0 - y, nx.log(nx.sub(1.0, p)))))


def esmm_loss(p_ctr, p_ctcvr, click, conversion) -> tuple[Tensor, float, float]:
    """Mean over the batch of BCE(click, pCTR) + BCE(conversion, pCTR*pCVR).

    Both terms run over every impression; the CVR tower is only supervised
    through the product. Returns ``(loss, ctr_part, ctcvr_part)``.
    """
    p_ctr, p_ctcvr = nx.as_tensor(p_ctr), nx.as_tensor(p_ctcvr)
    click = np.asarray(click, dtype=np.float64)
    conversion = np.asarray(conversion, dtype=np.float64)
    if p_ctr.data.size == 0:
        raise ValueError("empty batch")
    ctr = nx.mean(_bce(click, p_ctr))
    ctcvr = nx.mean(_bce(conversion, p_ctcvr))
    return nx.add(ctr, ctcvr), float(ctr.data), float(ctcvr.data)


def loss_and_grads(batch: Batch, params: Mapping[str, np.ndarray], config: ModelConfig,
                   training: bool = True):
    """Loss, gradients of every trainable parameter, and batch-norm statistics."""
    tape = Tape()
    out = forward_batch(batch, params, config, tape=tape, training=training)
    loss, ctr, ctcvr = esmm_loss(out.p_ctr, out.p_ctcvr, batch.click, batch.conversion)
    return float(loss.data), nx.backward(tape, loss), (ctr, ctcvr), out.bn_stats


def batch_loss(batch: Batch, params: Mapping[str, np.ndarray], config: ModelConfig,
               training: bool = True) -> float:
    out = forward_batch(batch, params, config, training=training)
    loss, _, _ = esmm_loss(out.p_ctr, out.p_ctcvr, batch.click, batch.conversion)
    return float(loss.data)


def build_vocabularies(samples: Sequence[TrainingSample]) -> tuple[Vocabulary, Vocabulary, Vocabulary]:
    """Item/user/query vocabularies in first-seen order."""
    items, users, queries = Vocabulary(), Vocabulary(), Vocabulary()
    for s in samples:
        for it in s.behavior_item_ids:
            items.add(it)
        items.add(s.target_item_id)
        for u in s.user_feature_ids:
            users.add(u)
        for q in s.query_feature_ids:
            queries.add(q)
    return items, users, queries


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # batch statistics are undefined for one sample
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def fit_params(data: Batch, params: ParameterSet, model_config: ModelConfig,
               config: TrainConfig, rng: np.random.Generator,
               on_epoch: Callable[[int, ParameterSet], None] | None = None) -> TrainHistory:
    """Run ``config.epochs`` of mini-batch Adam in place on ``params``."""
    config.validate()
    n = len(data)
    if n == 0:
        raise ConfigError("empty training set")
    state = AdamState(learning_rate=config.learning_rate)
    names = trainable_names(params)
    history = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        tot = ctr_tot = ctcvr_tot = 0.0
        for idx in _batches(n, config.batch_size, order):
            batch = data.take(idx)
            loss, grads, (ctr, ctcvr), stats = loss_and_grads(batch, params, model_config)
            nx.adam_step(params, {k: grads[k] for k in names}, state)
            update_running_stats(params, stats)
            w = len(idx)
            tot += loss * w
            ctr_tot += ctr * w
            ctcvr_tot += ctcvr * w
        rec = EpochRecord(epoch + 1, tot / n, ctr_tot / n, ctcvr_tot / n, time.perf_counter() - t0)
        history.epochs.append(rec)
        logger.info("epoch %d loss %.5f (ctr %.5f, ctcvr %.5f) %.1fs",
                    rec.epoch, rec.loss, rec.ctr_loss, rec.ctcvr_loss, rec.wall_time)
        if on_epoch is not None:
            on_epoch(epoch + 1, params)
    return history


def train(train_samples: Sequence[TrainingSample], config: TrainConfig, model_config: ModelConfig,
          item_stats: Mapping) -> tuple[ParameterSet, TrainHistory]:
    """Initialise from ``config.seed`` and train on ``train_samples``.

    ``item_stats`` maps item id to an object with an ``iif`` attribute (or a
    float); unknown items get IIF 1.0.
    """
    if not train_samples:
        raise ConfigError("empty training set")
    config.validate()
    items, users, queries = build_vocabularies(train_samples)
    rng = np.random.default_rng(config.seed)
    params = init_params(model_config, len(items), len(users), len(queries), rng)
    data = encode_samples(train_samples, items, users, queries, iif_lookup(item_stats), model_config.n_max)
    history = fit_params(data, params, model_config, config, rng)
    return params, history


def iif_lookup(item_stats: Mapping) -> Callable[[str], float]:
    def lookup(item: str) -> float:
        st = item_stats.get(item)
        if st is None:
            return 1.0
        return float(getattr(st, "iif", st))
    return lookup


# --- checkpoints ------------------------------------------------------------------
#
# Layout: MAGIC, u32 version, u64 header length, UTF-8 JSON header, raw
# little-endian float64 payload. The header lists each tensor's name, shape
# and byte offset, the model config, free-form metadata and the payload's
# SHA-256.

MAGIC = b"NAMCKPT\n"
VERSION = 1
_PREFIX = struct.Struct("<IQ")


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(params: Mapping[str, np.ndarray], model_config: ModelConfig, path,
                    metadata: Mapping | None = None) -> None:
    index, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({
        "version": VERSION,
        "model_config": model_config.to_dict(),
        "metadata": dict(metadata or {}),
        "tensors": index,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path, with_metadata: bool = False):
    """Return ``(params, model_config)`` or, with ``with_metadata``, a triple."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = _PREFIX.unpack_from(blob, pos)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    pos += _PREFIX.size
    if len(blob) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[pos + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload digest mismatch (truncated or corrupt)")
    params = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    config = ModelConfig.from_dict(header["model_config"])
    if with_metadata:
        return params, config, header.get("metadata", {})
    return params, config


def history_to_dict(history: TrainHistory) -> list[dict]:
    return [asdict(r) for r in history.epochs]
