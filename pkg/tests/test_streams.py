import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import count_ratio
from startnet.streams import (
    BalancedSequenceSampler,
    ChunkStream,
    StreamFormatError,
    SyntheticConfig,
    balanced_sequence_sampler,
    derive_start_labels,
    generate_corpus,
    generate_stream,
    imbalance_ratio,
    load_stream,
    save_stream,
)


class TestDeriveStartLabels:
    @pytest.mark.parametrize(
        "labels, expected",
        [
            ([0, 0, 1, 1, 0, 2, 2], [0, 0, 1, 0, 0, 1, 0]),
            ([0, 0, 0, 0], [0, 0, 0, 0]),
            ([1, 1, 2, 2], [1, 0, 1, 0]),
            ([], []),
        ],
    )
    def test_examples(self, labels, expected):
        np.testing.assert_array_equal(derive_start_labels(labels), expected)

    @given(st.lists(st.integers(0, 3), max_size=60))
    def test_one_start_per_maximal_run(self, labels):
        runs = sum(1 for t, y in enumerate(labels) if y != 0 and (t == 0 or labels[t - 1] != y))
        assert derive_start_labels(labels).sum() == runs


class TestChunkStream:
    def test_rejects_inconsistent_flags(self):
        with pytest.raises(ValueError, match="disagree"):
            ChunkStream(np.zeros((3, 2)), [0, 1, 1], 2, start_flags=[0, 0, 1])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="labels has 2 entries"):
            ChunkStream(np.zeros((3, 2)), [0, 1], 2)

    def test_rejects_unknown_class(self):
        with pytest.raises(ValueError, match="labels must lie"):
            ChunkStream(np.zeros((2, 2)), [0, 4], 3)

    def test_ground_truth(self):
        s = ChunkStream(np.zeros((5, 1)), [0, 2, 2, 1, 0], 3, name="a")
        assert [(g.time, g.class_id, g.stream) for g in s.ground_truth()] == [(1, 2, "a"), (3, 1, "a")]


class TestGenerator:
    def test_noise_free_features_are_class_means(self):
        cfg = SyntheticConfig(noise_std=0.0, blur=0)
        s = generate_stream(cfg, 3)
        np.testing.assert_array_equal(s.features, cfg.class_means[s.labels])

    def test_blur_interpolates_from_background(self):
        cfg = SyntheticConfig(noise_std=0.0, blur=3, mean_segment=30)
        s = generate_stream(cfg, 4)
        bg = cfg.class_means[0]
        t = int(np.flatnonzero(s.start_flags)[0])
        k = s.labels[t]
        if s.labels[t + 1] == k:
            np.testing.assert_allclose(s.features[t + 1], bg + 0.5 * (cfg.class_means[k] - bg))
        np.testing.assert_allclose(s.features[t], bg + 0.25 * (cfg.class_means[k] - bg))

    def test_deterministic(self):
        cfg = SyntheticConfig()
        assert generate_stream(cfg, 9) == generate_stream(cfg, 9)
        assert generate_stream(cfg, 9) != generate_stream(cfg, 10)

    def test_positive_fraction(self):
        cfg = SyntheticConfig(stream_length=10_000, mean_segment=20, mean_gap=80)
        s = generate_stream(cfg, 0)
        assert abs(np.mean(s.labels != 0) - 0.2) <= 0.03

    @given(st.integers(0, 2**32 - 1))
    def test_flags_consistent_with_labels(self, seed):
        s = generate_stream(SyntheticConfig(stream_length=120), seed)
        np.testing.assert_array_equal(derive_start_labels(s.labels), s.start_flags)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SyntheticConfig(num_classes=1)
        with pytest.raises(ValueError):
            SyntheticConfig(noise_std=-1.0)
        with pytest.raises(ValueError, match="class_means has shape"):
            SyntheticConfig(class_means=np.zeros((2, 2)))


class TestImbalanceRatio:
    def test_examples(self):
        assert imbalance_ratio([[1, 0, 0, 0]]) == 3.0
        assert imbalance_ratio([[1, 1, 1]]) == 0.0

    def test_no_positives(self):
        with pytest.raises(ValueError, match="undefined"):
            imbalance_ratio([[0, 0]])

    def test_matches_direct_count(self):
        s = generate_stream(SyntheticConfig(stream_length=10_000, mean_segment=20, mean_gap=80), 0)
        corpus = [s.start_flags[i : i + 1000] for i in range(0, 10_000, 1000)]
        assert imbalance_ratio(corpus) == pytest.approx(count_ratio(corpus), abs=1e-12)


class TestBalancedSampler:
    @pytest.fixture
    def flags(self):
        return [s.start_flags for s in generate_corpus(SyntheticConfig(stream_length=200), 10, 1)]

    def test_half_positive(self, flags):
        sampler = BalancedSequenceSampler(flags, 16)
        rng = np.random.default_rng(0)
        for _ in range(50):
            batch = sampler.sample(4, rng)
            has_start = [flags[s][o : o + 16].any() for s, o in batch]
            assert has_start == [True, True, False, False]

    def test_seeded(self, flags):
        a = balanced_sequence_sampler(flags, 16, 8, seed=5)
        b = balanced_sequence_sampler(flags, 16, 8, seed=5)
        for _ in range(5):
            np.testing.assert_array_equal(next(a), next(b))

    def test_positive_pool_uniform(self):
        flags = [np.array([0] * 30 + [1] + [0] * 20), np.array([0] * 10 + [1] + [0] * 40)]
        sampler = BalancedSequenceSampler(flags, 16)
        rng = np.random.default_rng(11)
        n = len(sampler.positive)
        lookup = {tuple(p): i for i, p in enumerate(sampler.positive)}
        counts = np.zeros(n)
        batches, half = 1000, 16
        for _ in range(batches):
            for s, o in sampler.sample(2 * half, rng)[:half]:
                counts[lookup[(s, o)]] += 1
        expected = batches * half / n
        sd = np.sqrt(expected * (1 - 1 / n))
        assert np.all(np.abs(counts - expected) <= 3 * sd)
        chi2 = np.sum((counts - expected) ** 2 / expected)
        # dof = n - 1; mean n-1, sd sqrt(2(n-1))
        assert chi2 < (n - 1) + 5 * np.sqrt(2 * (n - 1))

    def test_empty_pool(self):
        with pytest.raises(ValueError, match="disable balanced sampling"):
            BalancedSequenceSampler([np.zeros(40, dtype=int)], 16).sample(4, np.random.default_rng(0))

    def test_odd_batch(self, flags):
        with pytest.raises(ValueError, match="even"):
            BalancedSequenceSampler(flags, 16).sample(3, np.random.default_rng(0))

    def test_balanced_ratio_matches_count(self, flags):
        sampler = BalancedSequenceSampler(flags, 16)
        positives = [flags[s][o : o + 16] for s, o in sampler.positive]
        negatives = [np.zeros(16, dtype=int)] * len(positives)
        assert sampler.imbalance_ratio() == pytest.approx(count_ratio(positives + negatives), abs=1e-12)


class TestStreamFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        s = generate_stream(SyntheticConfig(stream_length=150), 42, name="x")
        save_stream(s, tmp_path / "s.jsonl")
        back = load_stream(tmp_path / "s.jsonl")
        assert back == s
        np.testing.assert_array_equal(back.start_flags, s.start_flags)
        assert back.features.tobytes() == s.features.tobytes()

    def test_truncated(self, tmp_path):
        p = tmp_path / "s.jsonl"
        save_stream(generate_stream(SyntheticConfig(stream_length=30), 1), p)
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(StreamFormatError, match="truncated"):
            load_stream(p)

    def test_mismatched_feature_length_names_field(self, tmp_path):
        p = tmp_path / "s.jsonl"
        save_stream(generate_stream(SyntheticConfig(stream_length=10, feature_dim=3), 1), p)
        lines = p.read_text().splitlines()
        lines[4] = lines[4].replace('"f":[', '"f":[0.0,', 1)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(StreamFormatError, match=r"s\.jsonl:5: field f"):
            load_stream(p)

    def test_malformed_json_line_number(self, tmp_path):
        p = tmp_path / "s.jsonl"
        save_stream(generate_stream(SyntheticConfig(stream_length=10), 1), p)
        lines = p.read_text().splitlines()
        lines[2] = "{oops"
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(StreamFormatError, match=":3: malformed JSON"):
            load_stream(p)
