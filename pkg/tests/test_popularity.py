import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from namrank.dataio import TrainingSample
from namrank.popularity import (ItemPopularity, PopularityBuckets, UndefinedSimilarityError,
                                assign_buckets, compute_item_stats, cooccurrence_sim, cosine_sim,
                                hit_rate_at_k, jaccard_sim, retarget_analysis,
                                retarget_ratios, similarity_matrix, top_k_neighbors)

from conftest import ev

SETS = {"i": {"a", "b", "c"}, "j": {"b", "c", "d"}, "k": {"x"}, "e": set()}

user_sets_strategy = st.dictionaries(
    st.sampled_from(list("ABCDEFGH")),
    st.sets(st.integers(0, 15), min_size=1, max_size=10),
    min_size=2,
)


def clicks(item, users):
    return [ev(u, item, 0, "click") for u in users]


class TestItemStats:
    def test_count_and_iif(self):
        stats = compute_item_stats(clicks("x", "abcd"))
        assert stats["x"].user_count == 4
        assert stats["x"].iif == 0.25

    def test_impression_only_item_gets_unit_iif(self):
        stats = compute_item_stats([ev("a", "x", 0, "impression")])
        assert stats["x"].user_count == 0
        assert stats["x"].iif == 1.0

    def test_conversions_count_as_interactions(self):
        stats = compute_item_stats([ev("a", "x", 0, "conversion"), ev("a", "x", 1, "click"),
                                    ev("b", "x", 2, "impression")])
        assert stats["x"].user_count == 1

    def test_most_popular_item_on_generated_log(self, small_log):
        stats = compute_item_stats(small_log)
        top = min(stats.values(), key=lambda s: s.rank_share)
        assert all(top.user_count >= s.user_count for s in stats.values())

    def test_rank_share_ties_broken_by_item_id(self):
        stats = compute_item_stats(clicks("b", "uv") + clicks("a", "uv") + clicks("c", "u"))
        assert [stats[i].rank_share for i in "abc"] == pytest.approx([1 / 3, 2 / 3, 1.0])


class TestBuckets:
    def _stats(self, n):
        events = []
        for k in range(n):
            events += clicks(f"it{k:03d}", [f"u{m}" for m in range(n - k)])
        return assign_buckets(compute_item_stats(events))

    def test_hundred_items(self):
        sizes = np.bincount([s.bucket for s in self._stats(100).values()], minlength=4)
        assert sizes[0] == 1
        assert sizes[3] == 80
        assert sizes.sum() == 100

    def test_partition_and_order(self):
        stats = self._stats(37)
        buckets = sorted(stats.values(), key=lambda s: s.rank_share)
        assert [s.bucket for s in buckets] == sorted(s.bucket for s in buckets)

    def test_labels(self):
        assert PopularityBuckets().labels() == ["[0%,1%]", "(1%,5%]", "(5%,20%]", "(20%,100%]"]

    @pytest.mark.parametrize("bounds", [(0.5, 0.2, 1.0), (0.1, 0.9), ()])
    def test_invalid_boundaries(self, bounds):
        with pytest.raises(ValueError):
            PopularityBuckets(bounds)

    def test_transformer(self):
        est = ItemPopularity().fit(clicks("x", "ab") + clicks("y", "a"))
        np.testing.assert_allclose(est.transform(["x", "y", "unseen"]), [0.5, 1.0, 1.0])
        assert est.get_params() == {"boundaries": (0.01, 0.05, 0.20, 1.0)}


class TestSimilarities:
    def test_cooccurrence(self):
        assert cooccurrence_sim("i", "j", SETS) == 2
        assert cooccurrence_sim("i", "k", SETS) == 0

    def test_jaccard(self):
        assert jaccard_sim("i", "j", SETS) == 0.5
        assert jaccard_sim("i", "i", SETS) == 1.0

    def test_cosine(self):
        assert cosine_sim("i", "j", SETS) == pytest.approx(2 / 3)
        assert cosine_sim("i", "i", SETS) == 1.0

    def test_empty_sets(self):
        with pytest.raises(UndefinedSimilarityError):
            jaccard_sim("e", "e", SETS)
        with pytest.raises(UndefinedSimilarityError):
            cosine_sim("i", "e", SETS)
        assert jaccard_sim("i", "e", SETS) == 0.0

    def test_unknown_item(self):
        with pytest.raises(KeyError):
            cooccurrence_sim("i", "nope", SETS)

    @settings(max_examples=200, deadline=None)
    @given(user_sets_strategy, st.data())
    def test_symmetry(self, sets, data):
        i, j = data.draw(st.permutations(sorted(sets)))[:2]
        for fn in (cooccurrence_sim, jaccard_sim, cosine_sim):
            assert fn(i, j, sets) == fn(j, i, sets)

    @settings(max_examples=200, deadline=None)
    @given(user_sets_strategy, st.data())
    def test_ordering_and_cosine_identity(self, sets, data):
        i, j = data.draw(st.permutations(sorted(sets)))[:2]
        stats = compute_item_stats(
            [ev(str(u), item, 0, "click") for item, us in sets.items() for u in us])
        jac, cos = jaccard_sim(i, j, sets), cosine_sim(i, j, sets)
        assert jac <= cos <= 1.0
        expected = cooccurrence_sim(i, j, sets) * math.sqrt(stats[i].iif * stats[j].iif)
        assert cos == expected

    @pytest.mark.parametrize("kind, fn", [("cooccurrence", cooccurrence_sim),
                                          ("jaccard", jaccard_sim), ("cosine", cosine_sim)])
    def test_matrix_matches_pairwise(self, kind, fn):
        rng = np.random.default_rng(2)
        sets = {f"i{k}": set(rng.choice(20, size=rng.integers(1, 8), replace=False).tolist())
                for k in range(12)}
        items = sorted(sets)
        sim = similarity_matrix(items, sets, kind)
        for a in range(len(items)):
            assert sim[a, a] == 0
            for b in range(a + 1, len(items)):
                assert sim[a, b] == fn(items[a], items[b], sets)

    def test_top_k_tie_break(self):
        sim = np.array([[0, 2, 2, 1, 0], [2, 0, 0, 0, 0], [2, 0, 0, 0, 0],
                        [1, 0, 0, 0, 0], [0, 0, 0, 0, 0]], dtype=float)
        assert top_k_neighbors(sim, 2)[0].tolist() == [1, 2]
        assert top_k_neighbors(sim, 10)[0].tolist() == [1, 2, 3]
        assert top_k_neighbors(sim, 3)[4].tolist() == []


class TestHitRate:
    def test_single_interaction_is_zero(self, caplog):
        assert hit_rate_at_k([ev("u", "A", 1, "click")], "cosine", 5) == 0.0
        assert "undefined" in caplog.text

    def test_later_item_in_neighbors(self):
        events = [ev("u", "A", 1, "click"), ev("u", "B", 2, "click")]
        assert hit_rate_at_k(events, "cooccurrence", 1) == 1.0

    def test_k_larger_than_catalog(self):
        events = [ev("u", "A", 1, "click"), ev("u", "B", 2, "click"), ev("v", "A", 1, "click")]
        assert hit_rate_at_k(events, "jaccard", 1000) == 1.0

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            hit_rate_at_k([], "cosine", 0)

    def test_callable_matches_named(self, small_log):
        assert hit_rate_at_k(small_log, jaccard_sim, [3, 7]) == hit_rate_at_k(small_log, "jaccard", [3, 7])

    def test_monotone_in_k(self, small_log):
        rates = hit_rate_at_k(small_log, "cosine", [1, 5, 10, 20, 40])
        values = [rates[k] for k in (1, 5, 10, 20, 40)]
        assert values == sorted(values)

    def test_simultaneous_items_are_not_later(self):
        events = [ev("u", "A", 1, "click"), ev("u", "B", 1, "click")]
        assert hit_rate_at_k(events, "cosine", 5) == 0.0


def sample(target, history, conv, click=None):
    return TrainingSample(["u"], ["q"], target, history, conv if click is None else click, conv, "u")


class TestRetarget:
    def _stats(self):
        return assign_buckets(compute_item_stats(clicks("hot", [f"u{k}" for k in range(99)])
                                                 + [ev("z", f"c{k}", 0, "click") for k in range(99)]))

    def test_hand_fixture_ratio(self):
        samples = [sample("c98", ["c98"], 1), sample("c98", ["c98"], 0)]
        samples += [sample("c98", [], int(k == 0)) for k in range(8)]
        ratios = retarget_ratios(retarget_analysis(samples, self._stats()))
        assert ratios[3] == pytest.approx(4.0)

    def test_all_fresh_has_no_retarget_rows(self):
        rows = retarget_analysis([sample("hot", [], 1), sample("hot", ["x"], 0)], self._stats())
        assert [r.is_retarget for r in rows] == [0]
        assert rows[0].ratio is None
        assert rows[0].exposure_rate == 1.0

    def test_zero_conversion_cell_gives_no_ratio(self):
        samples = [sample("hot", ["hot"], 1), sample("hot", [], 0)]
        assert retarget_ratios(retarget_analysis(samples, self._stats()))[0] is None
