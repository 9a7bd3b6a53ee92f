import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_starts
from startnet.fusion import (
    StartPrediction,
    clsnet_only_starts,
    fuse,
    generate_starts,
    load_predictions,
    save_predictions,
    save_predictions_csv,
)
from startnet.streams import StreamFormatError


def one_hot_rows(classes, K=3, hot=0.8):
    rows = np.full((len(classes), K), (1 - hot) / (K - 1))
    rows[np.arange(len(classes)), classes] = hot
    return rows


class TestFuse:
    def test_worked_example(self):
        np.testing.assert_allclose(fuse([0.2, 0.5, 0.3], 0.8), [0.04, 0.40, 0.24], atol=1e-15)

    def test_boundaries(self):
        p = np.array([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(fuse(p, 1.0), [0.0, 0.5, 0.3])
        np.testing.assert_array_equal(fuse(p, 0.0), [0.2, 0.0, 0.0])

    def test_pure(self):
        p = np.array([0.2, 0.5, 0.3])
        fuse(p, 0.3)
        np.testing.assert_array_equal(p, [0.2, 0.5, 0.3])

    def test_mass_and_argmax_on_random_draws(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(5), size=10_000)
        s = rng.random(10_000)
        s[s == 0] = 0.5
        out = fuse(p, s)
        np.testing.assert_allclose(out.sum(axis=1), s * (1 - p[:, 0]) + (1 - s) * p[:, 0], rtol=0, atol=1e-12)
        np.testing.assert_array_equal(out[:, 1:].argmax(axis=1), p[:, 1:].argmax(axis=1))
        assert out.min() >= 0 and out.max() <= 1


class TestGenerateStarts:
    def test_condition_two(self):
        preds = generate_starts(one_hot_rows([0, 1, 1, 0, 1]))
        assert [p.time for p in preds] == [1, 4]

    def test_all_background(self):
        assert generate_starts(one_hot_rows([0] * 6)) == []

    def test_action_at_first_chunk(self):
        preds = generate_starts(one_hot_rows([2, 2]), stream="s")
        assert preds == [StartPrediction(0, 2, 0.8, "s")]

    def test_class_switch_without_background(self):
        assert [(p.time, p.class_id) for p in generate_starts(one_hot_rows([1, 2, 1]))] == [(0, 1), (1, 2), (2, 1)]

    def test_threshold_blocks_but_still_resets_previous(self):
        rows = one_hot_rows([0, 1, 1])
        rows[1] = [0.1, 0.5, 0.4]
        preds = generate_starts(rows, threshold=0.6)
        # the sub-threshold change at t=1 still makes class 1 the previous argmax
        assert preds == []

    def test_empty_stream(self):
        assert generate_starts(np.zeros((0, 3))) == []

    def test_clsnet_only_uses_raw_scores(self):
        rows = np.random.default_rng(0).dirichlet(np.ones(4), size=50)
        assert clsnet_only_starts(rows, 0.1, "x") == generate_starts(rows, 0.1, "x")

    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.2, 0.4]))
    def test_matches_brute_force(self, seed, threshold):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(4, 0.5), size=40)
        scores = fuse(p, rng.random(40))
        got = [(q.time, q.class_id, q.confidence) for q in generate_starts(scores, threshold)]
        assert got == brute_force_starts(scores.tolist(), threshold)

    @given(st.integers(0, 2**32 - 1))
    def test_no_consecutive_same_class(self, seed):
        rng = np.random.default_rng(seed)
        preds = generate_starts(rng.dirichlet(np.full(3, 0.3), size=60))
        for a, b in zip(preds, preds[1:]):
            if b.time == a.time + 1:
                assert a.class_id != b.class_id

    def test_causal(self):
        scores = np.random.default_rng(3).dirichlet(np.ones(4), size=500)
        full = generate_starts(scores)
        for t in (1, 100, 333):
            assert generate_starts(scores[:t]) == [p for p in full if p.time < t]


class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        preds = [StartPrediction(3, 1, 0.1 + 0.2, "a"), StartPrediction(9, 2, 1e-17, "b")]
        save_predictions(preds, tmp_path / "p.jsonl", meta={"v": 1})
        assert load_predictions(tmp_path / "p.jsonl") == preds

    def test_empty(self, tmp_path):
        save_predictions([], tmp_path / "p.jsonl")
        assert load_predictions(tmp_path / "p.jsonl") == []

    def test_missing_field(self, tmp_path):
        p = tmp_path / "p.jsonl"
        save_predictions([StartPrediction(3, 1, 0.5)], p)
        p.write_text(p.read_text().replace('"class": 1, ', ""))
        with pytest.raises(StreamFormatError, match=":2: missing field class"):
            load_predictions(p)

    def test_wrong_kind(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text('{"version": 1, "kind": "scores"}\n')
        with pytest.raises(StreamFormatError, match="not a version 1 predictions file"):
            load_predictions(p)

    def test_csv(self, tmp_path):
        save_predictions_csv([StartPrediction(3, 1, 0.25, "a")], tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text() == "stream,t,class,confidence\na,3,1,0.25\n"
