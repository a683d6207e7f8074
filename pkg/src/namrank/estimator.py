"""scikit-learn style wrapper around the NAM ranker."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import InteractionEvent, TrainingSample
from .evaluation import EvalRecord, MetricsReport, evaluate_records
from .model import (ForwardOutput, ModelConfig, Vocabulary, encode_samples, forward_batch,
                    init_params)
from .popularity import (DEFAULT_BOUNDARIES, ItemStats, PopularityBuckets, assign_buckets,
                         compute_item_stats, iif_value)
from .training import (TrainConfig, TrainHistory, build_vocabularies, fit_params,
                       load_checkpoint, save_checkpoint)

EVAL_BATCH = 512
TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "seed", "shuffle")


def check_samples(samples) -> list[TrainingSample]:
    """Validate a sample list; returns it as a list."""
    samples = list(samples)
    for k, s in enumerate(samples):
        if not isinstance(s, TrainingSample):
            raise TypeError(f"sample {k} is {type(s).__name__}, expected TrainingSample")
        if s.click_label not in (0, 1) or s.conversion_label not in (0, 1):
            raise ValueError(f"sample {k}: labels must be 0 or 1")
        if s.conversion_label and not s.click_label:
            raise ValueError(f"sample {k}: conversion without click")
    return samples


def stats_from_samples(samples: Iterable[TrainingSample],
                       boundaries: Sequence[float] = DEFAULT_BOUNDARIES) -> dict[str, ItemStats]:
    """Item statistics from the clicks observed in a sample set.

    Fallback when no event log is at hand: an item's users are the groups
    that clicked it as a target.
    """
    users: dict[str, set] = defaultdict(set)
    items = set()
    for s in samples:
        items.add(s.target_item_id)
        items.update(s.behavior_item_ids)
        if s.click_label:
            users[s.target_item_id].add(s.group_key)
    events = [InteractionEvent(u, i, None, 0, "click") for i, us in users.items() for u in us]
    events += [InteractionEvent("", i, None, 0, "impression") for i in items]
    return assign_buckets(compute_item_stats(events), PopularityBuckets(tuple(boundaries)))


class NAMRanker(BaseEstimator):
    """Normalization attention ranker with CTR/CVR towers.

    ``fit`` takes training samples plus item statistics (from
    :func:`popularity.compute_item_stats` on the training split);
    ``predict_proba`` returns columns ``[p_ctr, p_cvr, p_ctcvr]``.
    Setting both ``use_global_norm`` and ``use_iif_gate`` to False gives the
    plain attention baseline.
    """

    def __init__(self, d_e=16, n_heads=4, d_k=8, d_v=8, d_k_ta=16, d_v_ta=16, d_user=8,
                 d_query=8, tower_sizes=(32, 16, 8), n_max=30, use_global_norm=True,
                 use_iif_gate=True, activation="silu", embedding_scale=0.1, epochs=5,
                 batch_size=64, learning_rate=1e-3, seed=0, shuffle=True,
                 boundaries=DEFAULT_BOUNDARIES):
        self.d_e = d_e
        self.n_heads = n_heads
        self.d_k = d_k
        self.d_v = d_v
        self.d_k_ta = d_k_ta
        self.d_v_ta = d_v_ta
        self.d_user = d_user
        self.d_query = d_query
        self.tower_sizes = tower_sizes
        self.n_max = n_max
        self.use_global_norm = use_global_norm
        self.use_iif_gate = use_iif_gate
        self.activation = activation
        self.embedding_scale = embedding_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.shuffle = shuffle
        self.boundaries = boundaries

    @classmethod
    def from_configs(cls, model_config: ModelConfig, train_config: TrainConfig, **kw) -> "NAMRanker":
        mc = model_config.to_dict()
        mc["tower_sizes"] = tuple(mc["tower_sizes"])
        return cls(**mc, epochs=train_config.epochs, batch_size=train_config.batch_size,
                   learning_rate=train_config.learning_rate, seed=train_config.seed,
                   shuffle=train_config.shuffle, **kw)

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(
            d_e=self.d_e, n_heads=self.n_heads, d_k=self.d_k, d_v=self.d_v, d_k_ta=self.d_k_ta,
            d_v_ta=self.d_v_ta, d_user=self.d_user, d_query=self.d_query,
            tower_sizes=list(self.tower_sizes), n_max=self.n_max,
            use_global_norm=bool(self.use_global_norm), use_iif_gate=bool(self.use_iif_gate),
            activation=self.activation, embedding_scale=self.embedding_scale)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed, shuffle=self.shuffle)

    # --- fitting -----------------------------------------------------------------

    def fit(self, samples: Sequence[TrainingSample], item_stats: Mapping[str, ItemStats] | None = None,
            on_epoch=None):
        samples = check_samples(samples)
        if not samples:
            raise ValueError("cannot fit on an empty sample list")
        if item_stats is None:
            item_stats = stats_from_samples(samples, self.boundaries)
        self.config_ = self.model_config()
        self.buckets_ = PopularityBuckets(tuple(self.boundaries))
        self.item_counts_ = {k: int(v.user_count) for k, v in item_stats.items()}
        self.item_buckets_ = {k: int(v.bucket) for k, v in item_stats.items()}
        self.items_, self.users_, self.queries_ = build_vocabularies(samples)
        rng = np.random.default_rng(self.seed)
        self.params_ = init_params(self.config_, len(self.items_), len(self.users_),
                                   len(self.queries_), rng)
        data = self._encode(samples)
        self.metadata_ = {}
        self.history_: TrainHistory = fit_params(data, self.params_, self.config_,
                                                 self.train_config(), rng, on_epoch=on_epoch)
        return self

    def iif(self, item_id: str) -> float:
        return iif_value(self.item_counts_.get(item_id, 0))

    def bucket(self, item_id: str) -> int:
        return self.item_buckets_.get(item_id, len(self.buckets_) - 1)

    def _encode(self, samples):
        return encode_samples(samples, self.items_, self.users_, self.queries_, self.iif,
                              self.config_.n_max)

    # --- inference ------------------------------------------------------------------

    def predict_proba(self, samples: Sequence[TrainingSample]) -> np.ndarray:
        """Columns: p_ctr, p_cvr, p_ctcvr (evaluation-mode batch norm)."""
        check_is_fitted(self, "params_")
        samples = list(samples)
        out = np.zeros((len(samples), 3))
        for start in range(0, len(samples), EVAL_BATCH):
            chunk = samples[start:start + EVAL_BATCH]
            res = forward_batch(self._encode(chunk), self.params_, self.config_)
            out[start:start + len(chunk)] = np.stack(
                [res.p_ctr.data, res.p_cvr.data, res.p_ctcvr.data], axis=1)
        return out

    def predict(self, samples: Sequence[TrainingSample]) -> np.ndarray:
        """Predicted pCTCVR per sample."""
        return self.predict_proba(samples)[:, 2]

    def forward_sample(self, sample: TrainingSample) -> ForwardOutput:
        check_is_fitted(self, "params_")
        res = forward_batch(self._encode([sample]), self.params_, self.config_)
        n = sample.behavior_length
        return ForwardOutput(
            float(res.p_ctr.data[0]), float(res.p_cvr.data[0]), float(res.p_ctcvr.data[0]),
            {"self": res.mhsa_weights[0, :, :n, :n], "target": res.ta_weights[0, :n],
             "gate": float(res.gate[0])})

    def eval_records(self, samples: Sequence[TrainingSample]) -> list[EvalRecord]:
        probs = self.predict_proba(samples)
        return [EvalRecord(float(p[0]), float(p[2]), s.click_label, s.conversion_label,
                           s.group_key, self.bucket(s.target_item_id), s.target_item_id)
                for s, p in zip(samples, probs)]

    def evaluate(self, samples: Sequence[TrainingSample]) -> MetricsReport:
        return evaluate_records(self.eval_records(samples), self.buckets_.labels())

    def score(self, samples, y=None) -> float:
        """CTCVR AUC on ``samples``."""
        rep = self.evaluate(samples)
        return float("nan") if rep.auc_ctcvr is None else rep.auc_ctcvr

    # --- persistence --------------------------------------------------------------------

    def save(self, path, extra: Mapping | None = None) -> None:
        """Write a checkpoint; ``extra`` is stored verbatim in its metadata."""
        check_is_fitted(self, "params_")
        meta = {
            "extra": dict(extra or {}),
            "items": self.items_.tokens,
            "users": self.users_.tokens,
            "queries": self.queries_.tokens,
            "item_user_counts": self.item_counts_,
            "item_buckets": self.item_buckets_,
            "boundaries": list(self.buckets_.boundaries),
            "train": {k: getattr(self, k) for k in TRAIN_KEYS},
        }
        save_checkpoint(self.params_, self.config_, path, metadata=meta)

    @classmethod
    def load(cls, path) -> "NAMRanker":
        params, config, meta = load_checkpoint(path, with_metadata=True)
        mc = config.to_dict()
        mc["tower_sizes"] = tuple(mc["tower_sizes"])
        est = cls(**mc, boundaries=tuple(meta.get("boundaries", DEFAULT_BOUNDARIES)),
                  **meta.get("train", {}))
        est.config_ = config
        est.params_ = params
        est.buckets_ = PopularityBuckets(tuple(est.boundaries))
        est.items_ = Vocabulary(meta["items"])
        est.users_ = Vocabulary(meta["users"])
        est.queries_ = Vocabulary(meta["queries"])
        est.item_counts_ = {k: int(v) for k, v in meta["item_user_counts"].items()}
        est.item_buckets_ = {k: int(v) for k, v in meta["item_buckets"].items()}
        est.metadata_ = dict(meta.get("extra", {}))
        est.history_ = TrainHistory()
        return est
