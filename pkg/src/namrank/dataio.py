"""Interaction logs, training samples and the synthetic log generator.

Log format: one event per line, five tab-separated fields::

    user_id <TAB> item_id <TAB> query_id <TAB> timestamp <TAB> action

``query_id`` is ``-`` for non-search events and ``action`` is one of
``impression``, ``click``, ``conversion``.
"""

from __future__ import annotations

import bisect
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)

ACTIONS = ("impression", "click", "conversion")
NO_QUERY = "-"


class LogParseError(ValueError):
    """Raised when a log cannot be parsed; ``diagnostics`` lists bad lines."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        head = "; ".join(diagnostics[:5])
        more = f" (+{len(diagnostics) - 5} more)" if len(diagnostics) > 5 else ""
        super().__init__(f"{len(diagnostics)} malformed line(s): {head}{more}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class InteractionEvent:
    user_id: str
    item_id: str
    query_id: str | None
    timestamp: int
    action: str

    def to_line(self) -> str:
        q = NO_QUERY if self.query_id is None else self.query_id
        return f"{self.user_id}\t{self.item_id}\t{q}\t{self.timestamp}\t{self.action}"


@dataclass
class TrainingSample:
    user_feature_ids: list[str]
    query_feature_ids: list[str]
    target_item_id: str
    behavior_item_ids: list[str]
    click_label: int
    conversion_label: int
    group_key: str
    timestamp: int = 0

    @property
    def behavior_length(self) -> int:
        return len(self.behavior_item_ids)


def parse_line(line: str) -> InteractionEvent:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
    user, item, query, ts, action = (p.strip() for p in parts)
    if not user or not item:
        raise ValueError("missing user_id or item_id")
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    try:
        timestamp = int(ts)
    except ValueError:
        raise ValueError(f"bad timestamp {ts!r}") from None
    return InteractionEvent(user, item, None if query in ("", NO_QUERY) else query, timestamp, action)


def parse_log(lines: Iterable[str], strict: bool = False) -> tuple[list[InteractionEvent], list[str]]:
    """Parse log lines, returning ``(events, diagnostics)``.

    Blank lines are skipped. Malformed lines produce a diagnostic naming the
    1-based line number; with ``strict=True`` they raise :class:`LogParseError`.
    """
    events, diagnostics = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(parse_line(line))
        except ValueError as exc:
            diagnostics.append(f"line {lineno}: {exc}")
    if diagnostics and strict:
        raise LogParseError(diagnostics)
    for d in diagnostics:
        logger.warning("skipping malformed log %s", d)
    return events, diagnostics


def read_log(path, strict: bool = True) -> list[InteractionEvent]:
    with open(path, encoding="utf-8") as fh:
        events, _ = parse_log(fh, strict=strict)
    return events


def serialize_log(events: Iterable[InteractionEvent]) -> Iterator[str]:
    for ev in events:
        yield ev.to_line() + "\n"


def write_log(events: Iterable[InteractionEvent], out: TextIO | str) -> int:
    if isinstance(out, str):
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            return write_log(events, fh)
    n = 0
    for line in serialize_log(events):
        out.write(line)
        n += 1
    return n


def _sort_key(ev: InteractionEvent):
    return (ev.timestamp, ACTIONS.index(ev.action), ev.user_id, ev.item_id, ev.query_id or "")


def build_samples(events: Sequence[InteractionEvent], n_max: int = 30,
                  split_timestamp: float = float("inf")
                  ) -> tuple[list[TrainingSample], list[TrainingSample]]:
    """One sample per impression, split by impression time.

    The behavior sequence holds the user's most recent ``n_max`` clicked
    items with click time strictly before the impression, oldest first. A
    click (or conversion) is credited to the latest impression of the same
    (user, item, query) at or before it.
    """
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    ordered = sorted(events, key=_sort_key)
    impressions = [ev for ev in ordered if ev.action == "impression"]

    by_key: dict[tuple, list[int]] = defaultdict(list)
    for idx, ev in enumerate(impressions):
        by_key[(ev.user_id, ev.item_id, ev.query_id)].append(idx)
    clicks = np.zeros(len(impressions), dtype=np.int64)
    convs = np.zeros(len(impressions), dtype=np.int64)
    user_clicks: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for ev in ordered:
        if ev.action == "impression":
            continue
        if ev.action == "click":
            user_clicks[ev.user_id].append((ev.timestamp, ev.item_id))
        cands = by_key.get((ev.user_id, ev.item_id, ev.query_id))
        if not cands:
            continue
        times = [impressions[i].timestamp for i in cands]
        pos = bisect.bisect_right(times, ev.timestamp) - 1
        if pos < 0:
            continue
        target = clicks if ev.action == "click" else convs
        target[cands[pos]] = 1

    train, test = [], []
    for idx, ev in enumerate(impressions):
        hist = user_clicks.get(ev.user_id, [])
        cut = bisect.bisect_left(hist, (ev.timestamp, ""))
        behavior = [item for _, item in hist[max(0, cut - n_max):cut]]
        conv = int(convs[idx])
        sample = TrainingSample(
            user_feature_ids=[ev.user_id],
            query_feature_ids=[ev.query_id or NO_QUERY],
            target_item_id=ev.item_id,
            behavior_item_ids=behavior,
            click_label=int(clicks[idx] or conv),
            conversion_label=conv,
            group_key=ev.user_id,
            timestamp=ev.timestamp,
        )
        (train if ev.timestamp < split_timestamp else test).append(sample)
    return train, test


def default_split_timestamp(events: Sequence[InteractionEvent], train_fraction: float = 0.8) -> int:
    """Impression-time quantile used when no split is given explicitly."""
    ts = sorted(ev.timestamp for ev in events if ev.action == "impression")
    if not ts:
        raise ConfigError("log contains no impressions")
    return int(ts[min(len(ts) - 1, int(train_fraction * len(ts)))])


# --- synthetic data -----------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_users: int = 1000
    n_items: int = 600
    n_queries: int = 24
    zipf_exponent: float = 1.0
    exposure_bias_strength: float = 1.0
    history_affinity_base: float = 0.0
    longtail_affinity_boost: float = 4.0
    sequence_length: int = 30
    seed: int = 0
    sessions_per_user: int = 8
    list_size: int = 8
    retarget_rate: float = 0.3
    query_focus: float = 0.85
    click_bias: float = -1.5
    conversion_bias: float = -1.8
    item_quality_scale: float = 0.5
    session_gap: int = 3600
    n_subtopics: int = 4
    taste_strength: float = 1.5
    taste_exposure: float = 2.0
    personalization_ramp: int = 8
    exposure_flattening: float = 0.7
    taste_longtail: float = 1.0

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_queries", "sequence_length",
                     "sessions_per_user", "list_size", "n_subtopics"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.zipf_exponent <= 0:
            raise ConfigError("zipf_exponent must be > 0")
        if self.exposure_bias_strength < 0:
            raise ConfigError("exposure_bias_strength must be >= 0")
        if not 0 <= self.retarget_rate <= 1 or not 0 <= self.query_focus <= 1:
            raise ConfigError("retarget_rate and query_focus must lie in [0, 1]")
        if not 0 <= self.taste_longtail <= 1:
            raise ConfigError("taste_longtail must lie in [0, 1]")
        if self.session_gap < 3:
            raise ConfigError("session_gap must be >= 3 seconds")

    @classmethod
    def from_dict(cls, values: dict) -> "SyntheticConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        defaults = asdict(cls())
        kwargs = {k: type(defaults[k])(v) for k, v in values.items()}
        return cls(**kwargs)


def history_overlap(history: Sequence[int], item: int, clusters: np.ndarray) -> float:
    """Similarity of a candidate to a click history, in [0, 1].

    1 for an item already in the history, otherwise half the share of
    history items from the candidate's cluster.
    """
    if not history:
        return 0.0
    if item in history:
        return 1.0
    same = sum(1 for h in history if clusters[h] == clusters[item])
    return 0.5 * same / len(history)


@dataclass
class _Catalog:
    popularity: np.ndarray
    percentile: np.ndarray
    clusters: np.ndarray
    subtopics: np.ndarray
    quality: np.ndarray
    members: list[np.ndarray] = field(default_factory=list)


def _catalog(cfg: SyntheticConfig, rng: np.random.Generator) -> _Catalog:
    ranks = np.arange(1, cfg.n_items + 1, dtype=np.float64)
    zipf = ranks ** (-cfg.zipf_exponent)
    popularity = zipf / zipf.sum()
    percentile = (ranks - 1) / max(1, cfg.n_items - 1)
    clusters = rng.integers(0, cfg.n_queries, size=cfg.n_items)
    subtopics = rng.integers(0, cfg.n_subtopics, size=cfg.n_items)
    quality = rng.normal(0.0, cfg.item_quality_scale, size=cfg.n_items)
    members = [np.flatnonzero(clusters == q) for q in range(cfg.n_queries)]
    return _Catalog(popularity, percentile, clusters, subtopics, quality, members)


def generate_synthetic(cfg: SyntheticConfig) -> list[InteractionEvent]:
    """Deterministic search log with Zipf exposure and popularity-dependent
    personalization.

    Item ``r`` (0 = most popular) is exposed in proportion to
    ``(r+1)^(-s * exposure_bias_strength)`` within the session's query
    cluster. Post-click conversion has logit
    ``conversion_bias + quality + affinity * overlap`` with
    ``affinity = history_affinity_base + longtail_affinity_boost * percentile``,
    where ``percentile`` is 0 for the most popular item and 1 for the least.
    Clicks use the same overlap at half the strength.

    Each user also has a preferred subtopic per query cluster. Matching items
    get ``taste_strength`` added to the click logit, scaled toward zero for
    popular items by ``taste_longtail``. As a user's click history grows
    (over ``personalization_ramp`` clicks) exposure is flattened by
    ``exposure_flattening`` and tilted toward the preferred subtopic by
    ``taste_exposure``, so later interactions drift from the head toward
    personally relevant tail items.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cat = _catalog(cfg, rng)
    affinity = cfg.history_affinity_base + cfg.longtail_affinity_boost * cat.percentile
    taste_weight = cfg.taste_strength * (1.0 - cfg.taste_longtail * (1.0 - cat.percentile))
    expo = cat.popularity ** cfg.exposure_bias_strength

    n_pref = min(3, cfg.n_queries)
    events: list[InteractionEvent] = []
    for u in range(cfg.n_users):
        user = f"u{u}"
        prefs = rng.choice(cfg.n_queries, size=n_pref, replace=False)
        taste = rng.integers(0, cfg.n_subtopics, size=cfg.n_queries)
        start = int(rng.integers(0, cfg.session_gap * cfg.sessions_per_user))
        gaps = rng.integers(cfg.session_gap, 3 * cfg.session_gap, size=cfg.sessions_per_user)
        times = start + np.cumsum(gaps)
        history: list[int] = []
        for t in times:
            t = int(t)
            q = int(prefs[rng.integers(n_pref)]) if rng.random() < cfg.query_focus \
                else int(rng.integers(cfg.n_queries))
            pool = cat.members[q]
            if pool.size == 0:
                pool = np.arange(cfg.n_items)
            ramp = min(1.0, len(history) / cfg.personalization_ramp)
            w = expo[pool] ** (1.0 - cfg.exposure_flattening * ramp) * np.where(
                cat.subtopics[pool] == taste[q], np.exp(cfg.taste_exposure * ramp), 1.0)
            w = w / w.sum()
            recent = history[-cfg.sequence_length:]
            shown: list[int] = []
            for _ in range(min(cfg.list_size, pool.size + len(set(recent)))):
                if recent and rng.random() < cfg.retarget_rate:
                    item = recent[int(rng.integers(len(recent)))]
                else:
                    item = int(pool[rng.choice(pool.size, p=w)])
                if item not in shown:
                    shown.append(item)
            query = f"q{q}"
            new_clicks = []
            for item in shown:
                events.append(InteractionEvent(user, f"i{item}", query, t, "impression"))
                ov = history_overlap(recent, item, cat.clusters)
                relevant = 0.5 if cat.clusters[item] == q else -0.5
                liked = taste_weight[item] if cat.subtopics[item] == taste[cat.clusters[item]] else 0.0
                click_logit = (cfg.click_bias + relevant + liked + cat.quality[item]
                               + 0.5 * affinity[item] * ov)
                if rng.random() < 1.0 / (1.0 + np.exp(-click_logit)):
                    events.append(InteractionEvent(user, f"i{item}", query, t + 1, "click"))
                    new_clicks.append(item)
                    conv_logit = cfg.conversion_bias + cat.quality[item] + affinity[item] * ov
                    if rng.random() < 1.0 / (1.0 + np.exp(-conv_logit)):
                        events.append(InteractionEvent(user, f"i{item}", query, t + 2, "conversion"))
            history.extend(new_clicks)
    events.sort(key=_sort_key)
    return events
