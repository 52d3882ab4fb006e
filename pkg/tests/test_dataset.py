import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memtl.dataset import (
    Dataset,
    bootstrap,
    bootstrap_indices,
    drift_scores,
    generate_dataset,
    sample_environment,
    shift_split,
    slot_rng,
)
from memtl.errors import InvalidParameterError, UnlabelableError
from memtl.features import (
    DEFAULT_INTERVALS,
    LabeledSample,
    SamplingRanges,
    env_from_arrays,
    featurize,
    raw_features,
    unfeaturize,
)
from memtl.mec import MT_FIELDS, check_feasible, total_cost

seeds = st.integers(0, 2**32 - 1)


def fixed_ranges(n=2, **overrides):
    intervals = {k: (lo, lo) for k, (lo, _) in DEFAULT_INTERVALS.items()}
    intervals.update(overrides)
    return SamplingRanges(n=n, intervals=intervals)


# -- sampling ranges and features -----------------------------------------------------


def test_ranges_validation():
    with pytest.raises(InvalidParameterError):
        SamplingRanges(intervals={**DEFAULT_INTERVALS, "c": (5.0, 1.0)})
    with pytest.raises(InvalidParameterError):
        SamplingRanges(intervals={**DEFAULT_INTERVALS, "u": (0.0, 1.0)})
    with pytest.raises(InvalidParameterError):
        SamplingRanges(n=0)
    with pytest.raises(InvalidParameterError):
        SamplingRanges(intervals={"c": (1.0, 2.0)})


def test_ranges_round_trip():
    r = SamplingRanges(n=4, alpha=0.2, seed=9)
    assert SamplingRanges.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_degenerate_intervals_give_fixed_environment():
    ranges = fixed_ranges()
    a = sample_environment(ranges, np.random.default_rng(1))
    b = sample_environment(ranges, np.random.default_rng(2))
    assert a == b
    assert all(m.c == DEFAULT_INTERVALS["c"][0] for m in a.mts)


def test_same_seed_same_environment():
    ranges = SamplingRanges(n=3)
    assert sample_environment(ranges, slot_rng(5, 2)) == sample_environment(ranges, slot_rng(5, 2))
    assert sample_environment(ranges, slot_rng(5, 2)) != sample_environment(ranges, slot_rng(5, 3))


def test_uniform_mean():
    ranges = SamplingRanges(n=1, intervals={**DEFAULT_INTERVALS, "u": (1.0, 2.0)})
    rng = np.random.default_rng(0)
    u = np.array([sample_environment(ranges, rng).mts[0].u for _ in range(10_000)])
    sigma = math.sqrt(1 / 12 / u.size)
    assert abs(u.mean() - 1.5) < 3 * sigma
    assert u.min() >= 1.0 and u.max() <= 2.0


def test_featurize_midpoint_and_low_end():
    ranges = SamplingRanges(n=1)
    mid = {k: (lo + hi) / 2 for k, (lo, hi) in DEFAULT_INTERVALS.items()}
    low = {k: lo for k, (lo, _) in DEFAULT_INTERVALS.items()}
    x_mid = featurize(env_from_arrays({k: [v] for k, v in mid.items()}, ranges), ranges)
    x_low = featurize(env_from_arrays({k: [v] for k, v in low.items()}, ranges), ranges)
    assert x_mid == pytest.approx([0.5] * 6, abs=1e-15)
    assert x_low.tolist() == [0.0] * 6


def test_featurize_shape_and_range_check():
    ranges = SamplingRanges(n=3)
    env = sample_environment(ranges, np.random.default_rng(0))
    assert featurize(env, ranges).shape == (18,)
    tight = SamplingRanges(n=3, intervals={**DEFAULT_INTERVALS, "c": (1.0, 1.5)})
    with pytest.raises(InvalidParameterError):
        featurize(sample_environment(SamplingRanges(n=3, intervals={**DEFAULT_INTERVALS, "c": (2.0, 3.0)}),
                                     np.random.default_rng(0)), tight)
    with pytest.raises(InvalidParameterError):
        featurize(env, SamplingRanges(n=2))


@given(seeds, st.integers(1, 5))
def test_featurize_inverts(seed, n):
    ranges = SamplingRanges(n=n)
    env = sample_environment(ranges, np.random.default_rng(seed))
    x = featurize(env, ranges)
    assert np.all((x >= 0) & (x <= 1))
    np.testing.assert_allclose(unfeaturize(x, ranges), raw_features(env), rtol=1e-12)


# -- generation ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ds100():
    return generate_dataset(SamplingRanges(n=2), 100, seed=11)


def test_generation_is_deterministic(ds100):
    again = generate_dataset(SamplingRanges(n=2), 100, seed=11)
    assert again.to_jsonl() == ds100.to_jsonl()
    assert generate_dataset(SamplingRanges(n=2), 100, seed=12).digest() != ds100.digest()


def test_generation_is_worker_count_independent(ds100):
    par = generate_dataset(SamplingRanges(n=2), 100, seed=11, workers=2)
    assert par.digest() == ds100.digest()


def test_generated_samples_satisfy_label_invariants(ds100):
    assert len(ds100) == 100
    for s in ds100.samples:
        assert check_feasible(s.raw_env, s.strategy).ok
        assert s.cost_star == pytest.approx(total_cost(s.raw_env, s.strategy), rel=1e-12)
        assert np.all(s.r_star[s.d_star == 0] == 0)
        assert s.x.shape == (12,)


def test_default_ranges_mix_both_classes():
    ds = generate_dataset(SamplingRanges(n=2), 1000, seed=0)
    frac = ds.D.mean()
    assert 0.0 < frac < 1.0


def test_count_must_be_positive():
    with pytest.raises(InvalidParameterError):
        generate_dataset(SamplingRanges(), 0)


def test_mostly_unlabelable_ranges_abort():
    # every local job misses its deadline and every upload takes longer than the deadline
    ranges = fixed_ranges(theta=(0.5, 0.6), p=(8.0, 8.0))
    with pytest.raises(UnlabelableError):
        generate_dataset(ranges, 5, seed=0)


def test_resampling_is_recorded():
    # a deadline range that makes a share of draws unlabelable but not most
    ranges = SamplingRanges(n=2, intervals={**DEFAULT_INTERVALS, "theta": (2.0, 12.0)})
    ds = generate_dataset(ranges, 200, seed=0)
    assert ds.meta["resampled"] > 0
    assert ds.meta["attempts"] == 200 + ds.meta["resampled"]


def test_save_load_round_trip(ds100, tmp_path):
    path = tmp_path / "d.jsonl"
    ds100.save(path)
    back = Dataset.load(path)
    assert back.to_jsonl() == ds100.to_jsonl()
    np.testing.assert_array_equal(back.X, ds100.X)
    np.testing.assert_array_equal(back.R, ds100.R)
    assert [s.cost_star for s in back.samples] == [s.cost_star for s in ds100.samples]
    record = json.loads(path.read_text().splitlines()[1])
    assert set(record) == {"version", "n", "x", "d_star", "r_star", "cost_star", "raw_env"}
    assert set(record["raw_env"]["mts"][0]) == set(MT_FIELDS)


def test_load_rejects_unknown_version(ds100, tmp_path):
    lines = ds100.to_jsonl().splitlines()
    head = json.loads(lines[0])
    head["meta"]["format_version"] = 99
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join([json.dumps(head), *lines[1:]]) + "\n")
    with pytest.raises(InvalidParameterError):
        Dataset.load(path)


def test_mixed_sizes_rejected(ds100):
    other = generate_dataset(SamplingRanges(n=3), 1, seed=0).samples
    with pytest.raises(InvalidParameterError):
        Dataset(ds100.samples[:2] + other, ds100.ranges)


def test_creation_stamp_only_from_environment(monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    assert generate_dataset(SamplingRanges(), 2, seed=0).meta["created"] is None
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert generate_dataset(SamplingRanges(), 2, seed=0).meta["created"] == "1970-01-01T00:00:00+00:00"


def test_sample_dict_round_trip(ds100):
    s = ds100.samples[0]
    back = LabeledSample.from_dict(json.loads(json.dumps(s.to_dict(1))))
    assert back.raw_env == s.raw_env and back.strategy == s.strategy


# -- shift split ------------------------------------------------------------------------


def test_split_sizes_and_separation():
    ds = generate_dataset(SamplingRanges(n=2), 100, seed=3)
    train, test = shift_split(ds, 0.25)
    assert len(test) == 25 and len(train) == 75
    assert drift_scores(train).max() <= drift_scores(test).min()


def test_split_of_identical_samples():
    ds = generate_dataset(fixed_ranges(), 8, seed=0)
    train, test = shift_split(ds, 0.25)
    assert len(train) == 6 and len(test) == 2
    assert test.samples == ds.samples[6:]


def test_split_drift_score_is_raw_mean_square():
    ds = generate_dataset(SamplingRanges(n=2), 5, seed=4)
    for s, m in zip(ds.samples, drift_scores(ds)):
        a = s.raw_env.arrays
        raw = np.array([a[k] for k in ("c", "r_local", "p", "q", "u", "d")])
        assert m == pytest.approx(np.mean(raw**2), rel=1e-14)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.5])
def test_split_fraction_validation(ds100, frac):
    with pytest.raises(InvalidParameterError):
        shift_split(ds100, frac)


DS60 = generate_dataset(SamplingRanges(n=2), 60, seed=21)


@settings(max_examples=25)
@given(st.floats(0.05, 0.95), st.integers(0, 99))
def test_split_is_a_partition(frac, start):
    ds = DS60.subset(range(start % 30, 60))
    train, test = shift_split(ds, frac)
    key = lambda s: s.x.tobytes()
    assert sorted(map(key, train.samples + test.samples)) == sorted(map(key, ds.samples))
    assert drift_scores(train).max() <= drift_scores(test).min()



# -- bootstrap ------------------------------------------------------------------------------


def test_bootstrap_sizes(ds100):
    reps = bootstrap(ds100.subset(range(100)), 3, seed=0)
    assert [len(r) for r in reps] == [100, 100, 100]


def test_bootstrap_single_sample(ds100):
    one = ds100.subset([4])
    for rep in bootstrap(one, 4, seed=1):
        assert rep.samples == [ds100.samples[4]]


def test_bootstrap_distinct_fraction():
    t = 10_000
    for idx in bootstrap_indices(t, 3, seed=5):
        assert abs(np.unique(idx).size / t - (1 - 1 / math.e)) < 0.02


def test_bootstrap_determinism_and_prefixes():
    a = bootstrap_indices(50, 3, [1, 4])
    b = bootstrap_indices(50, 5, [1, 4])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a[0], a[1])


def test_bootstrap_needs_a_replica():
    with pytest.raises(InvalidParameterError):
        bootstrap_indices(5, 0, 0)
