"""NAM forward pass: IIF-normalized self/target attention, IIF gate, CTR/CVR towers.

All functions operate on padded mini-batches. Behavior sequences are
left-aligned; ``valid[b, t]`` marks real positions. A sample with an empty
history keeps one dummy valid position so the softmax is defined, and its
personalization vector is zeroed afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .dataio import TrainingSample
from .numerics import Tape, Tensor

logger = logging.getLogger(__name__)

ParameterSet = dict[str, np.ndarray]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
RUNNING_SUFFIXES = ("running_mean", "running_var")


@dataclass
class ModelConfig:
    d_e: int = 16
    n_heads: int = 4
    d_k: int = 8
    d_v: int = 8
    d_k_ta: int = 16
    d_v_ta: int = 16
    d_user: int = 8
    d_query: int = 8
    tower_sizes: list[int] = field(default_factory=lambda: [32, 16, 8])
    n_max: int = 30
    use_global_norm: bool = True
    use_iif_gate: bool = True
    activation: str = "silu"
    embedding_scale: float = 0.1

    def validate(self) -> None:
        for name in ("d_e", "n_heads", "d_k", "d_v", "d_k_ta", "d_v_ta", "d_user", "d_query", "n_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.tower_sizes or min(self.tower_sizes) < 1:
            raise ValueError("tower_sizes must be a nonempty list of positive widths")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_context(self) -> int:
        return self.d_user + self.d_query + self.d_e

    @property
    def d_seq_out(self) -> int:
        return self.n_heads * self.d_v

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        if "tower_sizes" in kw:
            ts = kw["tower_sizes"]
            if isinstance(ts, str):
                ts = [int(x) for x in ts.replace(",", " ").split()]
            kw["tower_sizes"] = [int(x) for x in ts]
        return cls(**kw)


ACTIVATIONS: dict[str, Callable] = {"silu": nx.silu, "relu": nx.relu}


# --- vocabulary and batch encoding -------------------------------------------


class Vocabulary:
    """Maps opaque ids to rows 1..n; row 0 is shared by unseen ids and padding."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: list[str] = []
        self._index: dict[str, int] = {}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            self.tokens.append(token)
            idx = self._index[token] = len(self.tokens)
        return idx

    def __len__(self) -> int:
        return len(self.tokens) + 1

    def __contains__(self, token) -> bool:
        return token in self._index

    def encode(self, token: str) -> int:
        return self._index.get(token, 0)


@dataclass
class Batch:
    user_ids: np.ndarray       # (B, Fu)
    user_mask: np.ndarray      # (B, Fu)
    query_ids: np.ndarray      # (B, Fq)
    query_mask: np.ndarray     # (B, Fq)
    target: np.ndarray         # (B,)
    target_iif: np.ndarray     # (B,)
    seq: np.ndarray            # (B, L)
    seq_iif: np.ndarray        # (B, L)
    valid: np.ndarray          # (B, L) bool
    has_hist: np.ndarray       # (B,)
    click: np.ndarray          # (B,)
    conversion: np.ndarray     # (B,)

    def __len__(self) -> int:
        return len(self.target)

    def take(self, idx) -> "Batch":
        """Sub-batch, trimmed to its longest sequence."""
        idx = np.asarray(idx)
        valid = self.valid[idx]
        width = max(1, int(valid.any(axis=0).nonzero()[0].max() + 1)) if valid.any() else 1
        return Batch(
            self.user_ids[idx], self.user_mask[idx], self.query_ids[idx], self.query_mask[idx],
            self.target[idx], self.target_iif[idx], self.seq[idx, :width],
            self.seq_iif[idx, :width], valid[:, :width], self.has_hist[idx],
            self.click[idx], self.conversion[idx],
        )


def _pad(rows: list[list[int]], width: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.zeros((len(rows), max(1, width)), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=np.float64)
    for r, row in enumerate(rows):
        ids[r, :len(row)] = row
        mask[r, :len(row)] = 1.0
    return ids, mask


def encode_samples(samples: Sequence[TrainingSample], items: Vocabulary, users: Vocabulary,
                   queries: Vocabulary, iif: Callable[[str], float], n_max: int) -> Batch:
    """Turn samples into padded integer/IIF arrays."""
    B = len(samples)
    u_rows = [[users.encode(x) for x in s.user_feature_ids] for s in samples]
    q_rows = [[queries.encode(x) for x in s.query_feature_ids] for s in samples]
    user_ids, user_mask = _pad(u_rows, max((len(r) for r in u_rows), default=1))
    query_ids, query_mask = _pad(q_rows, max((len(r) for r in q_rows), default=1))
    L = max(1, min(n_max, max((s.behavior_length for s in samples), default=1)))
    seq = np.zeros((B, L), dtype=np.int64)
    seq_iif = np.ones((B, L))
    valid = np.zeros((B, L), dtype=bool)
    cache: dict[str, float] = {}

    def lookup(item: str) -> float:
        v = cache.get(item)
        if v is None:
            v = cache[item] = float(iif(item))
            if not 0.0 < v <= 1.0:
                raise nx.ContractError(f"iif of {item!r} is {v}, outside (0, 1]")
        return v

    for b, s in enumerate(samples):
        hist = s.behavior_item_ids[-n_max:]
        for t, item in enumerate(hist):
            seq[b, t] = items.encode(item)
            seq_iif[b, t] = lookup(item)
        valid[b, :len(hist)] = True
    has_hist = valid.any(axis=1).astype(np.float64)
    return Batch(
        user_ids, user_mask, query_ids, query_mask,
        np.array([items.encode(s.target_item_id) for s in samples], dtype=np.int64),
        np.array([lookup(s.target_item_id) for s in samples], dtype=np.float64),
        seq, seq_iif, valid, has_hist,
        np.array([s.click_label for s in samples], dtype=np.float64),
        np.array([s.conversion_label for s in samples], dtype=np.float64),
    )


# --- parameters ----------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, n_items: int, n_users: int, n_queries: int,
                rng: np.random.Generator) -> ParameterSet:
    """Initial parameters; table sizes include the shared row 0."""
    config.validate()
    c = config
    s = c.embedding_scale
    p: ParameterSet = {
        "emb/item": rng.uniform(-s, s, size=(n_items, c.d_e)),
        "emb/user": rng.uniform(-s, s, size=(n_users, c.d_user)),
        "emb/query": rng.uniform(-s, s, size=(n_queries, c.d_query)),
        "mhsa/W_Q": _uniform(rng, (c.n_heads, c.d_e, c.d_k), c.d_e),
        "mhsa/W_K": _uniform(rng, (c.n_heads, c.d_e, c.d_k), c.d_e),
        "mhsa/W_V": _uniform(rng, (c.n_heads, c.d_e, c.d_v), c.d_e),
        "mhsa/w_mask": np.ones((1, 1)),
        "ta/W_Q": _uniform(rng, (c.d_context, c.d_k_ta), c.d_context),
        "ta/W_K": _uniform(rng, (c.d_seq_out, c.d_k_ta), c.d_seq_out),
        "ta/W_V": _uniform(rng, (c.d_seq_out, c.d_v_ta), c.d_seq_out),
        "ta/w_mask": np.ones((1, 1)),
        "gate/w_iif": np.ones((1, 1)),
    }
    for tower in ("ctr", "cvr"):
        width = c.d_context + c.d_v_ta
        for layer, size in enumerate(c.tower_sizes):
            pre = f"{tower}/{layer}/"
            p[pre + "W"] = _uniform(rng, (width, size), width)
            p[pre + "gamma"] = np.ones(size)
            p[pre + "beta"] = np.zeros(size)
            p[pre + "running_mean"] = np.zeros(size)
            p[pre + "running_var"] = np.ones(size)
            width = size
        p[f"{tower}/out/W"] = _uniform(rng, (width, 1), width)
        p[f"{tower}/out/b"] = np.zeros(1)
    return p


def trainable_names(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if not k.endswith(RUNNING_SUFFIXES)]


def _wrap(params: Mapping[str, np.ndarray], tape: Tape | None) -> dict[str, Tensor]:
    out = {}
    for name, arr in params.items():
        if tape is not None and not name.endswith(RUNNING_SUFFIXES):
            out[name] = tape.variable(arr, name)
        else:
            out[name] = Tensor(arr, name=name)
    return out


# --- components -------------------------------------------------------------------


def iif_mask(iif_q: np.ndarray, iif_k: np.ndarray, weight: Tensor) -> Tensor:
    """silu(sqrt(iif_q * iif_k^T) * w) for batched column/row IIF vectors.

    ``iif_q`` has shape (B, Lq) and ``iif_k`` (B, Lk); the result is (B, Lq, Lk).
    """
    for v in (iif_q, iif_k):
        if not np.all((v > 0.0) & (v <= 1.0)):
            raise nx.ContractError("iif values must lie in (0, 1]")
    root = np.sqrt(iif_q[:, :, None] * iif_k[:, None, :])
    M = nx.silu(nx.mul(root, weight))
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("iif mask range [%.4g, %.4g]", M.data.min(), M.data.max())
    return M


def _key_padding(valid: np.ndarray) -> np.ndarray:
    v = valid.copy()
    v[~v.any(axis=1), 0] = True
    return np.where(v, 0.0, -np.inf)


def embed_sequence(seq: np.ndarray, P: Mapping[str, Tensor]) -> Tensor:
    """Behavior item embeddings, (B, L, d_e)."""
    return nx.take_rows(P["emb/item"], seq)


def gn_mhsa(E_b: Tensor, seq_iif: np.ndarray, valid: np.ndarray, P: Mapping[str, Tensor],
            config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention with IIF-scaled logits.

    Returns the concatenated head outputs (B, L, H*d_v) and the attention
    weights (B, H, L, L).
    """
    B, L, _ = E_b.shape
    H = config.n_heads
    x = nx.reshape(E_b, (B, 1, L, config.d_e))
    Q = nx.matmul(x, nx.reshape(P["mhsa/W_Q"], (1, H, config.d_e, config.d_k)))
    K = nx.matmul(x, nx.reshape(P["mhsa/W_K"], (1, H, config.d_e, config.d_k)))
    V = nx.matmul(x, nx.reshape(P["mhsa/W_V"], (1, H, config.d_e, config.d_v)))
    logits = nx.mul(nx.matmul(Q, nx.swap_last(K)), 1.0 / np.sqrt(config.d_k))
    if config.use_global_norm:
        M = iif_mask(seq_iif, seq_iif, P["mhsa/w_mask"])
        logits = nx.mul(logits, nx.reshape(M, (B, 1, L, L)))
    pad = _key_padding(valid)[:, None, None, :]
    A = nx.softmax(logits, axis=-1, additive_mask=pad)
    heads = nx.matmul(A, V)                                     # (B, H, L, d_v)
    O = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (B, L, H * config.d_v))
    return O, A.data


def context_embedding(batch: Batch, P: Mapping[str, Tensor]) -> Tensor:
    """Concat(user, query, target item) embeddings, (B, d_C); feature groups are sum-pooled."""
    eu = nx.sum_(nx.mul(nx.take_rows(P["emb/user"], batch.user_ids), batch.user_mask[:, :, None]), axis=1)
    eq = nx.sum_(nx.mul(nx.take_rows(P["emb/query"], batch.query_ids), batch.query_mask[:, :, None]), axis=1)
    et = nx.take_rows(P["emb/item"], batch.target)
    return nx.concat([eu, eq, et], axis=-1)


def gn_ta(C: Tensor, O: Tensor, target_iif: np.ndarray, seq_iif: np.ndarray, valid: np.ndarray,
          has_hist: np.ndarray, P: Mapping[str, Tensor], config: ModelConfig
          ) -> tuple[Tensor, np.ndarray]:
    """Target attention of the context over the self-attention output.

    Returns O' (B, d_v') and the weights (B, L). Rows without history give
    a zero vector.
    """
    B, L, _ = O.shape
    Qt = nx.reshape(nx.matmul(C, P["ta/W_Q"]), (B, 1, config.d_k_ta))
    Kt = nx.matmul(O, P["ta/W_K"])
    Vt = nx.matmul(O, P["ta/W_V"])
    logits = nx.mul(nx.matmul(Qt, nx.swap_last(Kt)), 1.0 / np.sqrt(config.d_k_ta))   # (B, 1, L)
    if config.use_global_norm:
        logits = nx.mul(logits, iif_mask(target_iif[:, None], seq_iif, P["ta/w_mask"]))
    A = nx.softmax(logits, axis=-1, additive_mask=_key_padding(valid)[:, None, :])
    out = nx.reshape(nx.matmul(A, Vt), (B, config.d_v_ta))
    out = nx.mul(out, has_hist[:, None])
    return out, A.data[:, 0, :]


def iif_gate(O_ta: Tensor, target_iif: np.ndarray, P: Mapping[str, Tensor],
             config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """silu(iif_target * w) broadcast over O'; identity when the gate is off."""
    if not config.use_iif_gate:
        return O_ta, np.ones(len(target_iif))
    g = nx.silu(nx.mul(target_iif[:, None], P["gate/w_iif"]))      # (B, 1)
    return nx.mul(O_ta, g), g.data[:, 0]


def tower(x: Tensor, P: Mapping[str, Tensor], name: str, config: ModelConfig,
          training: bool, stats: dict) -> Tensor:
    """affine -> batch norm -> activation per layer, then a sigmoid unit."""
    act = ACTIVATIONS[config.activation]
    for layer in range(len(config.tower_sizes)):
        pre = f"{name}/{layer}/"
        z = nx.matmul(x, P[pre + "W"])
        if training:
            mu = nx.mean(z, axis=0, keepdims=True)
            centered = nx.sub(z, mu)
            var = nx.mean(nx.mul(centered, centered), axis=0, keepdims=True)
            zn = nx.mul(centered, nx.power(nx.add(var, BN_EPS), -0.5))
            stats[pre] = (mu.data[0], var.data[0])
        else:
            rm = P[pre + "running_mean"].data
            rv = P[pre + "running_var"].data
            zn = nx.mul(nx.sub(z, rm), 1.0 / np.sqrt(rv + BN_EPS))
        x = act(nx.add(nx.mul(zn, P[pre + "gamma"]), P[pre + "beta"]))
    logit = nx.add(nx.matmul(x, P[f"{name}/out/W"]), P[f"{name}/out/b"])
    return nx.sigmoid(nx.reshape(logit, (logit.shape[0],)))


@dataclass
class BatchOutput:
    p_ctr: Tensor
    p_cvr: Tensor
    p_ctcvr: Tensor
    mhsa_weights: np.ndarray
    ta_weights: np.ndarray
    gate: np.ndarray
    bn_stats: dict


def forward_batch(batch: Batch, params: Mapping[str, np.ndarray], config: ModelConfig,
                  tape: Tape | None = None, training: bool = False) -> BatchOutput:
    """Full forward pass. Pass a ``tape`` to record it for :func:`numerics.backward`."""
    P = _wrap(params, tape)
    E_b = embed_sequence(batch.seq, P)
    O, a_self = gn_mhsa(E_b, batch.seq_iif, batch.valid, P, config)
    C = context_embedding(batch, P)
    O_ta, a_ta = gn_ta(C, O, batch.target_iif, batch.seq_iif, batch.valid, batch.has_hist, P, config)
    O_p, gate = iif_gate(O_ta, batch.target_iif, P, config)
    x = nx.concat([C, O_p], axis=-1)
    stats: dict = {}
    p_ctr = tower(x, P, "ctr", config, training, stats)
    p_cvr = tower(x, P, "cvr", config, training, stats)
    p_ctcvr = nx.mul(p_ctr, p_cvr)
    return BatchOutput(p_ctr, p_cvr, p_ctcvr, a_self, a_ta, gate, stats)


def update_running_stats(params: ParameterSet, stats: Mapping[str, tuple], momentum: float = BN_MOMENTUM) -> None:
    for pre, (mu, var) in stats.items():
        params[pre + "running_mean"] *= 1.0 - momentum
        params[pre + "running_mean"] += momentum * mu
        params[pre + "running_var"] *= 1.0 - momentum
        params[pre + "running_var"] += momentum * var


@dataclass
class ForwardOutput:
    p_ctr: float
    p_cvr: float
    p_ctcvr: float
    attention_weights: dict = field(default_factory=dict)
