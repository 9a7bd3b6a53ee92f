import numpy as np
import pytest

from startnet.clsnet import ClsModel, cls_infer_stream
from startnet.evaluation import evaluate
from startnet.locnet import LocModel
from startnet.pipeline import (
    BenchmarkConfig,
    ValidationSelector,
    benchmark_seeds,
    detect_corpus,
    ground_truth,
    pmap_at,
    run_benchmark,
)
from startnet.streams import SyntheticConfig, generate_corpus

DATA = SyntheticConfig(stream_length=120)


@pytest.fixture(scope="module")
def corpus():
    streams = generate_corpus(DATA, 4, seed=11, prefix="v")
    cls_model = ClsModel.init(DATA.feature_dim, DATA.num_classes, 8, seed=0)
    return streams, [cls_infer_stream(cls_model, s) for s in streams], cls_model


class TestValidationSelector:
    def test_schedule_and_last(self, corpus):
        streams, scores, _ = corpus
        pick = ValidationSelector(scores, streams, every=3, last=7)
        model = LocModel.init(DATA.num_classes, 2, 4, seed=0)
        for it in range(7):
            pick(it, model)
        assert [k for k, _ in pick.history] == [3, 6, 7]

    def test_ties_keep_earlier(self, corpus):
        streams, scores, _ = corpus
        pick = ValidationSelector(scores, streams, every=1)
        a, b = LocModel.init(DATA.num_classes, 2, 4, seed=0), LocModel.init(DATA.num_classes, 2, 4, seed=0)
        pick(0, a)
        pick(1, b)
        assert pick.best_model is a and pick.best_iteration == 1
        assert pick.history[0][1] == pick.history[1][1]

    def test_score_is_pmap_at(self, corpus):
        streams, scores, _ = corpus
        model = LocModel.init(DATA.num_classes, 2, 4, seed=3)
        pick = ValidationSelector(scores, streams, every=1)
        pick(0, model)
        expected = pmap_at(model, scores, [s.name for s in streams], ground_truth(streams))
        assert pick.best_score == expected

    def test_bad_interval(self, corpus):
        streams, scores, _ = corpus
        with pytest.raises(ValueError, match="interval"):
            ValidationSelector(scores, streams, every=0)


class TestDetection:
    def test_clsnet_only_matches_pmap_at(self, corpus):
        streams, scores, cls_model = corpus
        rep = evaluate(detect_corpus(cls_model, None, streams), ground_truth(streams), [1.0], 4.0, [1.0])
        assert rep.value(1.0) == pmap_at(None, scores, [s.name for s in streams], ground_truth(streams))


class TestBenchmark:
    def test_seeds_are_distinct_and_stable(self):
        seeds = benchmark_seeds(7)
        assert seeds == benchmark_seeds(7)
        assert len(set(seeds.values())) == len(seeds)

    def test_tiny_run(self):
        cfg = BenchmarkConfig(
            data=SyntheticConfig(stream_length=80), train_streams=6, val_streams=2, test_streams=3,
            cls_hidden=8, cls_seq_len=16, cls_batch=4, cls_epochs=1, loc_hidden=8, t_loc=8, loc_batch=4,
            pg_iterations=4, ce_iterations=4, select_every=2,
        )
        res = run_benchmark(cfg, histories=(None, 0))
        assert set(res.reports) == {"clsnet-only", "startnet-pg", "startnet-pg@n0", "startnet-ce"}
        assert 0 <= res.cls_accuracy <= 1
        for name, (it, score, history) in res.selection.items():
            assert [k for k, _ in history] == [2, 4]
            assert score == max(v for _, v in history)
        assert np.isfinite(res.untrained_reward) and np.isfinite(res.trained_reward)
        again = run_benchmark(cfg, histories=(None, 0))
        for name in res.reports:
            np.testing.assert_array_equal(res.reports[name].ap, again.reports[name].ap)
