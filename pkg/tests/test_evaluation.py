import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_ap, brute_force_match, brute_force_pmap
from startnet.evaluation import EvalReport, compare_reports, depth_count, evaluate, match, p_ap
from startnet.fusion import StartPrediction
from startnet.streams import GroundTruthStart


def P(t, conf, c=1, stream=""):
    return StartPrediction(t, c, conf, stream)


def G(t, c=1, stream=""):
    return GroundTruthStart(t, c, stream)


def random_instance(rng, max_gt=6, max_pred=10, horizon=30, discrete=True):
    gts = sorted(rng.choice(horizon, rng.integers(1, max_gt + 1), replace=False).tolist())
    n = int(rng.integers(0, max_pred + 1))
    times = rng.integers(0, horizon, n).tolist()
    conf = (rng.integers(1, 5, n) / 4 if discrete else rng.random(n)).tolist()
    return gts, list(zip(times, conf))


class TestMatch:
    def test_duplicate_suppression(self):
        m = match([P(11, 0.9), P(12, 0.8)], [G(10)], 2)
        assert m.tp.tolist() == [True, False]
        assert m.gt_match == [0]

    def test_no_predictions(self):
        m = match([], [G(3)], 4)
        assert m.num_tp == 0 and m.gt_match == [None]

    def test_nearest_unmatched_and_tie_to_earlier(self):
        m = match([P(5, 0.9)], [G(3), G(7)], 2)
        assert m.gt_match == [0, None]

    def test_boundary_inclusive_unless_strict(self):
        assert match([P(14, 0.5)], [G(10)], 4).num_tp == 1
        assert match([P(14, 0.5)], [G(10)], 4, strict=True).num_tp == 0

    def test_streams_never_cross(self):
        assert match([P(10, 0.5, stream="a")], [G(10, stream="b")], 4).num_tp == 0

    def test_confidence_ties_rank_earlier_first(self):
        m = match([P(12, 0.5), P(9, 0.5)], [G(10)], 3)
        assert m.order == [1, 0]
        assert m.tp.tolist() == [True, False]

    def test_negative_offset(self):
        with pytest.raises(ValueError):
            match([], [G(1)], -1)

    @pytest.mark.parametrize("strict", [False, True])
    def test_oracle_on_random_instances(self, strict):
        rng = np.random.default_rng(0)
        for _ in range(250):
            gts, raw = random_instance(rng)
            offset = int(rng.integers(0, 6))
            m = match([P(t, c) for t, c in raw], [G(t) for t in gts], offset, strict)
            flags = brute_force_match(raw, gts, offset, strict)
            assert m.tp.tolist() == flags
            assert p_ap(m.tp, len(gts)) == pytest.approx(brute_force_ap(flags, len(gts)), abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_greedy_stability(self, seed):
        rng = np.random.default_rng(seed)
        gts, raw = random_instance(rng)
        preds = [P(t, c) for t, c in raw]
        base = match(preds, [G(t) for t in gts], 3)
        lowest = min((c for _, c in raw), default=1.0)
        extended = match(preds + [P(int(rng.integers(0, 30)), lowest / 2)], [G(t) for t in gts], 3)
        assert extended.tp[: len(preds)].tolist() == base.tp.tolist()

    @given(st.integers(0, 2**32 - 1))
    def test_matching_invariants(self, seed):
        rng = np.random.default_rng(seed)
        gts, raw = random_instance(rng)
        preds = [P(t, c) for t, c in raw]
        m = match(preds, [G(t) for t in gts], 2)
        ranks = [r for r in m.gt_match if r is not None]
        assert len(ranks) == len(set(ranks)) == m.num_tp
        for j, r in enumerate(m.gt_match):
            if r is not None:
                assert abs(preds[m.order[r]].time - gts[j]) <= 2


class TestPAP:
    def test_worked_examples(self):
        assert p_ap([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-15)
        assert p_ap([True, False, True], 2, depth=0.5) == 1.0
        assert p_ap([True, True], 2) == 1.0

    def test_depth_count(self):
        assert depth_count(10, 0.3) == 3
        assert depth_count(3, 0.1) == 1
        assert depth_count(7, 1.0) == 7
        with pytest.raises(ValueError):
            depth_count(5, 0.0)

    def test_no_ground_truth(self):
        with pytest.raises(ValueError):
            p_ap([], 0)

    @given(st.lists(st.booleans(), max_size=12), st.integers(1, 8), st.sampled_from([0.1, 0.3, 0.5, 0.7, 1.0]))
    def test_oracle(self, flags, num_gt, depth):
        flags = flags if sum(flags) <= num_gt else []
        assert p_ap(flags, num_gt, depth) == pytest.approx(brute_force_ap(flags, num_gt, depth), abs=1e-12)

    @given(st.lists(st.booleans(), max_size=12), st.integers(1, 8))
    def test_uses_only_ranks_up_to_depth(self, flags, num_gt):
        # appending anything after the N_X-th true positive cannot change p-AP at depth X
        depth = 0.5
        n = depth_count(num_gt, depth)
        hits = np.flatnonzero(flags)
        if len(hits) >= n:
            cut = hits[n - 1] + 1
            assert p_ap(flags[:cut] + [True, False], num_gt, depth) == p_ap(flags, num_gt, depth)


def random_corpus(rng, streams=3, classes=3):
    gts, preds = [], []
    for s in range(streams):
        name = f"s{s}"
        for t in rng.choice(40, rng.integers(1, 5), replace=False):
            gts.append(G(int(t), int(rng.integers(1, classes + 1)), name))
        for _ in range(rng.integers(0, 8)):
            preds.append(P(int(rng.integers(0, 40)), float(rng.random()), int(rng.integers(1, classes + 1)), name))
    return preds, gts


class TestEvaluate:
    def test_perfect_detector(self):
        gts = [G(5, 1, "a"), G(20, 2, "a"), G(7, 1, "b")]
        rep = evaluate([P(g.time, 0.9, g.class_id, g.stream) for g in gts], gts)
        np.testing.assert_array_equal(rep.ap, 1.0)
        np.testing.assert_array_equal(rep.average_pmap, 1.0)

    def test_classes_without_gt_are_excluded(self):
        rep = evaluate([P(5, 0.9, 1), P(5, 0.9, 3)], [G(5, 1)])
        assert rep.classes == [1]
        assert rep.counts == {1: {"num_gt": 1, "num_pred": 1}}

    def test_empty_gt(self):
        with pytest.raises(ValueError, match="undefined"):
            evaluate([P(1, 0.5)], [])

    def test_offsets_floor_to_chunks(self):
        rep = evaluate([], [G(1)], offsets_seconds=[1, 2.6], chunks_per_second=4)
        assert rep.offsets_chunks == [4, 10]
        assert evaluate([], [G(1)], offsets_seconds=[0.3], chunks_per_second=10).offsets_chunks == [3]

    def test_order_invariance(self):
        rng = np.random.default_rng(4)
        preds, gts = random_corpus(rng)
        a = evaluate(preds, gts)
        b = evaluate(preds[::-1], gts[::-1])
        np.testing.assert_array_equal(a.ap, b.ap)

    def test_oracle_on_random_corpora(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            preds, gts = random_corpus(rng)
            offset = int(rng.integers(1, 4))
            rep = evaluate(preds, gts, offsets_seconds=[offset], chunks_per_second=1.0, depths=[0.5, 1.0])
            for j, depth in enumerate([0.5, 1.0]):
                expected = brute_force_pmap(
                    [(p.stream, p.time, p.class_id, p.confidence) for p in preds],
                    [(g.stream, g.time, g.class_id) for g in gts],
                    offset,
                    depth,
                )
                assert rep.pmap[0, j] == pytest.approx(expected, abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_offset(self, seed):
        preds, gts = random_corpus(np.random.default_rng(seed))
        rep = evaluate(preds, gts)
        assert rep.monotone_in_offset()
        assert rep.ap.min() >= 0 and rep.ap.max() <= 1

    def test_report_files_round_trip(self, tmp_path):
        preds, gts = random_corpus(np.random.default_rng(2))
        rep = evaluate(preds, gts)
        rep.save_json(tmp_path / "r.json")
        back = EvalReport.load_json(tmp_path / "r.json")
        np.testing.assert_array_equal(back.ap, rep.ap)
        assert back.counts == rep.counts and back.offsets_chunks == rep.offsets_chunks
        rep.save_csv(tmp_path / "r.csv")
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0].startswith("offset_s,rec@0.1") and rows[-1].startswith("average,")
        assert len(rows) == 12

    def test_compare_reports(self):
        gts = [G(5)]
        good = evaluate([P(5, 0.9)], gts)
        bad = evaluate([], gts)
        text = compare_reports({"good": good, "bad": bad}, offsets=[1.0], depths=[1.0])
        assert text == "variant,1s@rec1\ngood,1.000000\nbad,0.000000\n"
        with pytest.raises(ValueError):
            compare_reports({})
