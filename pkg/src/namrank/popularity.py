"""Item popularity statistics, inverse item frequency and similarity analyses."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import InteractionEvent, TrainingSample

logger = logging.getLogger(__name__)

DEFAULT_BOUNDARIES = (0.01, 0.05, 0.20, 1.0)
INTERACTIONS = ("click", "conversion")


class UndefinedSimilarityError(ValueError):
    pass


@dataclass
class ItemStats:
    item_id: str
    user_count: int
    iif: float
    rank_share: float = 1.0
    bucket: int = -1


@dataclass(frozen=True)
class PopularityBuckets:
    boundaries: tuple[float, ...] = DEFAULT_BOUNDARIES

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if not b or any(x >= y for x, y in zip(b, b[1:])) or b[-1] != 1.0 or b[0] <= 0:
            raise ValueError(f"bucket boundaries must be strictly increasing in (0, 1] "
                             f"and end at 1.0, got {self.boundaries}")
        object.__setattr__(self, "boundaries", b)

    def __len__(self) -> int:
        return len(self.boundaries)

    def labels(self) -> list[str]:
        out, lo = [], 0.0
        for i, hi in enumerate(self.boundaries):
            left = "[" if i == 0 else "("
            out.append(f"{left}{lo * 100:g}%,{hi * 100:g}%]")
            lo = hi
        return out

    def index(self, rank_share: float) -> int:
        for k, hi in enumerate(self.boundaries):
            if rank_share <= hi + 1e-12:
                return k
        return len(self.boundaries) - 1


def iif_value(user_count: int) -> float:
    return 1.0 / max(1, user_count)


def item_user_sets(events: Iterable[InteractionEvent]) -> dict[str, set[str]]:
    """Users with at least one click or conversion per item."""
    sets: dict[str, set[str]] = defaultdict(set)
    for ev in events:
        if ev.action in INTERACTIONS:
            sets[ev.item_id].add(ev.user_id)
    return dict(sets)


def compute_item_stats(events: Iterable[InteractionEvent]) -> dict[str, ItemStats]:
    """Per-item distinct interacting users, IIF and rank share.

    Items that only appear in impressions are kept with ``user_count = 0``.
    Ranking is by descending user count, ties by ascending item id.
    """
    events = list(events)
    sets = item_user_sets(events)
    items = set(sets) | {ev.item_id for ev in events}
    counts = {i: len(sets.get(i, ())) for i in items}
    order = sorted(items, key=lambda i: (-counts[i], i))
    total = len(order)
    return {
        item: ItemStats(item, counts[item], iif_value(counts[item]), (rank + 1) / total)
        for rank, item in enumerate(order)
    }


def assign_buckets(stats: Mapping[str, ItemStats],
                   buckets: PopularityBuckets = PopularityBuckets()) -> dict[str, ItemStats]:
    if not stats:
        raise ValueError("no item statistics to bucket")
    for st in stats.values():
        st.bucket = buckets.index(st.rank_share)
    return dict(stats)


class ItemPopularity(TransformerMixin, BaseEstimator):
    """Fit item statistics on a log; transform item ids into IIF values.

    Unknown items map to the zero-guard IIF of 1.0 and the last bucket.
    """

    def __init__(self, boundaries: Sequence[float] = DEFAULT_BOUNDARIES):
        self.boundaries = boundaries

    def fit(self, events: Iterable[InteractionEvent], y=None):
        self.buckets_ = PopularityBuckets(tuple(self.boundaries))
        self.stats_ = assign_buckets(compute_item_stats(events), self.buckets_)
        return self

    def transform(self, item_ids: Iterable[str]) -> np.ndarray:
        return np.array([self.iif(i) for i in item_ids], dtype=np.float64)

    def iif(self, item_id: str) -> float:
        check_is_fitted(self, "stats_")
        st = self.stats_.get(item_id)
        return 1.0 if st is None else st.iif

    def bucket(self, item_id: str) -> int:
        check_is_fitted(self, "stats_")
        st = self.stats_.get(item_id)
        return len(self.buckets_) - 1 if st is None else st.bucket


# --- similarities -------------------------------------------------------------


def _sets(i, j, user_sets: Mapping[str, set]) -> tuple[set, set]:
    try:
        return user_sets[i], user_sets[j]
    except KeyError as exc:
        raise KeyError(f"unknown item {exc.args[0]!r}") from None


def cooccurrence_sim(i, j, user_sets: Mapping[str, set]) -> int:
    ui, uj = _sets(i, j, user_sets)
    return len(ui & uj)


def jaccard_sim(i, j, user_sets: Mapping[str, set]) -> float:
    ui, uj = _sets(i, j, user_sets)
    union = len(ui | uj)
    if union == 0:
        raise UndefinedSimilarityError(f"both {i!r} and {j!r} have no users")
    return len(ui & uj) / union


def cosine_sim(i, j, user_sets: Mapping[str, set]) -> float:
    ui, uj = _sets(i, j, user_sets)
    if not ui or not uj:
        raise UndefinedSimilarityError(f"{i!r} or {j!r} has no users")
    # written through IIF so that cos = cooc * sqrt(iif_i * iif_j) holds bit for bit
    return len(ui & uj) * math.sqrt(iif_value(len(ui)) * iif_value(len(uj)))


SIMILARITIES: dict[str, Callable] = {
    "cooccurrence": cooccurrence_sim,
    "jaccard": jaccard_sim,
    "cosine": cosine_sim,
}


def similarity_matrix(items: Sequence[str], user_sets: Mapping[str, set], kind: str) -> np.ndarray:
    """Dense item-item similarity via the user incidence matrix."""
    users = sorted({u for i in items for u in user_sets.get(i, ())})
    uidx = {u: k for k, u in enumerate(users)}
    X = np.zeros((len(items), len(users)), dtype=np.float64)
    for r, i in enumerate(items):
        for u in user_sets.get(i, ()):
            X[r, uidx[u]] = 1.0
    inter = X @ X.T
    size = np.diag(inter).copy()
    if kind == "cooccurrence":
        sim = inter
    elif kind == "jaccard":
        union = size[:, None] + size[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(union > 0, inter / union, 0.0)
    elif kind == "cosine":
        iif = 1.0 / np.maximum(size, 1.0)
        sim = np.where(size[:, None] * size[None, :] > 0, inter * np.sqrt(iif[:, None] * iif[None, :]), 0.0)
    else:
        raise ValueError(f"unknown similarity {kind!r}")
    np.fill_diagonal(sim, 0.0)
    return sim


def _matrix_from_callable(items, user_sets, fn) -> np.ndarray:
    n = len(items)
    sim = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            try:
                sim[a, b] = sim[b, a] = fn(items[a], items[b], user_sets)
            except UndefinedSimilarityError:
                pass
    return sim


def top_k_neighbors(sim: np.ndarray, k: int) -> list[np.ndarray]:
    """Row-wise top-k positive-similarity indices.

    Ordered by descending similarity, then ascending index (items are passed
    in sorted-id order, so this is the item-id tie-break).
    """
    out = []
    for row in sim:
        cand = np.flatnonzero(row > 0)
        order = np.lexsort((cand, -row[cand]))
        out.append(cand[order[:k]])
    return out


def user_histories(events: Iterable[InteractionEvent]) -> dict[str, list[tuple[int, str]]]:
    """Per user, (first interaction time, item) in time order."""
    first: dict[str, dict[str, int]] = defaultdict(dict)
    for ev in events:
        if ev.action in INTERACTIONS:
            seen = first[ev.user_id]
            if ev.item_id not in seen or ev.timestamp < seen[ev.item_id]:
                seen[ev.item_id] = ev.timestamp
    return {u: sorted((t, i) for i, t in d.items()) for u, d in first.items()}


def hit_rate_at_k(events: Sequence[InteractionEvent], sim_fn, k: int | Sequence[int]):
    """Share of later interactions found among each earlier item's top-k neighbors.

    ``sim_fn`` is a name from :data:`SIMILARITIES` (vectorised) or any
    callable ``(i, j, user_sets) -> float``. Passing a list of ``k`` values
    returns a dict ``{k: rate}`` computed from one neighbor ranking.
    """
    ks = [k] if isinstance(k, int) else list(k)
    if any(kk < 1 for kk in ks):
        raise ValueError("k must be >= 1")
    events = list(events)
    user_sets = item_user_sets(events)
    items = sorted(user_sets)
    index = {i: n for n, i in enumerate(items)}
    if isinstance(sim_fn, str):
        sim = similarity_matrix(items, user_sets, sim_fn)
    else:
        sim = _matrix_from_callable(items, user_sets, sim_fn)
    neighbors = top_k_neighbors(sim, max(ks) if ks else 1)

    hits = dict.fromkeys(ks, 0)
    denom = 0
    for hist in user_histories(events).values():
        for pos, (t, item) in enumerate(hist):
            later = {index[j] for tj, j in hist[pos + 1:] if tj > t}
            if not later:
                continue
            denom += len(later)
            nb = neighbors[index[item]]
            for kk in ks:
                hits[kk] += len(later.intersection(nb[:kk].tolist()))
    if denom == 0:
        logger.warning("hit rate undefined: no later interactions; reporting 0")
        rates = dict.fromkeys(ks, 0.0)
    else:
        rates = {kk: hits[kk] / denom for kk in ks}
    return rates[ks[0]] if isinstance(k, int) else rates


# --- retarget analysis --------------------------------------------------------


@dataclass
class RetargetRow:
    bucket: int
    label: str
    is_retarget: int
    impressions: int
    exposure_rate: float
    ctcvr: float
    ratio: float | None


def retarget_analysis(samples: Sequence[TrainingSample], stats: Mapping[str, ItemStats],
                      buckets: PopularityBuckets = PopularityBuckets()) -> list[RetargetRow]:
    """Conversion rate of retargeted vs. fresh impressions per popularity bucket.

    Cells without impressions are omitted; a bucket's ratio is ``None`` when
    either of its cells is missing or has a zero conversion rate.
    """
    n_b = len(buckets)
    imps = np.zeros((n_b, 2), dtype=np.int64)
    convs = np.zeros((n_b, 2), dtype=np.int64)
    for s in samples:
        st = stats.get(s.target_item_id)
        b = n_b - 1 if st is None else st.bucket
        r = int(s.target_item_id in s.behavior_item_ids)
        imps[b, r] += 1
        convs[b, r] += s.conversion_label
    total = imps.sum()
    labels = buckets.labels()
    rows = []
    for b in range(n_b):
        rates = [convs[b, r] / imps[b, r] if imps[b, r] else None for r in (0, 1)]
        ratio = None
        if rates[0] and rates[1] is not None:
            ratio = rates[1] / rates[0]
        for r in (0, 1):
            if imps[b, r]:
                rows.append(RetargetRow(b, labels[b], r, int(imps[b, r]),
                                        imps[b, r] / total, rates[r], ratio))
    return rows


def retarget_ratios(rows: Sequence[RetargetRow]) -> dict[int, float | None]:
    return {row.bucket: row.ratio for row in rows}
