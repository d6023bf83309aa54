import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqlink.data import (CSVParseError, DataError, DatasetManifest, Normalizer, TimeSeriesBatch,
                          apply_sparsity, generate_gaussian_periodic, load_csv, normalize_01,
                          removal_count, split_shuffled)


def autocorrelation(series):
    """Normalized autocorrelation via zero-padded FFT."""
    s = series - series.mean()
    f = np.fft.rfft(s, 2 * s.size)
    acf = np.fft.irfft(f * np.conj(f))[: s.size]
    return acf / acf[0]


# generator --------------------------------------------------------------------------

def test_generator_shape_and_full_mask():
    b = generate_gaussian_periodic(1000, 100, 0)
    assert b.x.shape == (1000, 100, 1)
    assert (b.m == 1).all()
    assert b.target.shape == (1000, 1)
    assert np.all(np.diff(b.t) > 0)


def test_generator_is_deterministic():
    a, b = generate_gaussian_periodic(20, 30, 5), generate_gaussian_periodic(20, 30, 5)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.target, b.target)
    assert not np.array_equal(a.x, generate_gaussian_periodic(20, 30, 6).x)


def test_trajectories_are_periodic():
    b = generate_gaussian_periodic(50, 100, 1)
    freq = 4.0 * np.exp(0.25 * np.array(b.params["z_frequency"]))
    for k in range(b.K):
        acf = autocorrelation(b.x[k, :, 0])
        first_neg = int(np.argmax(acf < 0))
        lag = first_neg + int(np.argmax(acf[first_neg:60]))
        assert acf[lag] > 0.3
        assert abs(lag - 100 / freq[k]) <= 2.5


def test_generator_parameter_statistics():
    b = generate_gaussian_periodic(1000, 10, 0)
    for name in ("z_amplitude", "z_frequency", "z_phase"):
        z = np.array(b.params[name])
        assert abs(z.mean()) < 3 * z.std(ddof=1) / np.sqrt(z.size)


def test_generator_rejects_empty():
    with pytest.raises(DataError):
        generate_gaussian_periodic(0, 10, 0)


# sparsity --------------------------------------------------------------------------

def test_zero_fraction_is_identity():
    b = generate_gaussian_periodic(4, 20, 0)
    out = apply_sparsity(b, 0.0, 1)
    assert np.array_equal(out.x, b.x) and np.array_equal(out.m, b.m)


def test_thirty_percent_of_hundred_keeps_seventy():
    out = apply_sparsity(generate_gaussian_periodic(50, 100, 0), 0.3, 2)
    np.testing.assert_array_equal(out.m.sum(axis=(1, 2)), 70)


@settings(max_examples=60)
@given(n=st.integers(2, 120), fraction=st.floats(0, 0.95), seed=st.integers(0, 1000),
       pattern=st.sampled_from(["contiguous", "iid"]))
def test_sparsity_counts_and_coupling(n, fraction, seed, pattern):
    b = generate_gaussian_periodic(3, n, seed)
    out = apply_sparsity(b, fraction, seed, pattern)
    removed = int(np.floor(fraction * n + 1e-9))
    np.testing.assert_array_equal(out.m.sum(axis=(1, 2)), n - removed)
    assert (out.x[out.m == 0] == 0).all()
    kept = out.m > 0
    assert np.array_equal(out.x[kept], b.x[kept])


def test_contiguous_gaps_form_runs():
    out = apply_sparsity(generate_gaussian_periodic(30, 100, 0), 0.4, 0)
    iid = apply_sparsity(generate_gaussian_periodic(30, 100, 0), 0.4, 0, "iid")

    def runs(m):
        gaps = (m[:, :, 0] == 0).astype(int)
        return np.sum(np.diff(gaps, axis=1) == 1) + gaps[:, 0].sum()

    assert runs(out.m) < runs(iid.m) / 2


def test_sparsity_deterministic_per_seed():
    b = generate_gaussian_periodic(5, 40, 0)
    assert np.array_equal(apply_sparsity(b, 0.3, 4).m, apply_sparsity(b, 0.3, 4).m)


@pytest.mark.parametrize("bad", [1.0, 1.5, -0.1])
def test_bad_fraction_rejected(bad):
    with pytest.raises(DataError):
        apply_sparsity(generate_gaussian_periodic(2, 10, 0), bad, 0)


def test_removal_count_is_float_safe():
    assert removal_count(100, 0.3) == 30
    assert removal_count(10, 0.7) == 7


# batches ---------------------------------------------------------------------------

def test_batch_validation():
    with pytest.raises(DataError):
        TimeSeriesBatch(np.zeros((2, 3, 1)), np.zeros((2, 3, 2)), np.arange(3.0))
    with pytest.raises(DataError):
        TimeSeriesBatch(np.zeros((2, 3, 1)), np.full((2, 3, 1), 0.5), np.arange(3.0))
    with pytest.raises(DataError):
        TimeSeriesBatch(np.zeros((2, 3, 1)), np.ones((2, 3, 1)), np.array([0.0, 2.0, 1.0]))


def test_batch_npz_round_trip(tmp_path):
    b = apply_sparsity(generate_gaussian_periodic(4, 12, 0), 0.25, 0)
    b.save(tmp_path / "b.npz")
    back = TimeSeriesBatch.load(tmp_path / "b.npz")
    for name in ("x", "m", "t", "target", "ids"):
        assert np.array_equal(getattr(back, name), getattr(b, name))


# CSV --------------------------------------------------------------------------------

def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_csv_hand_fixture(tmp_path):
    path = write(tmp_path, "series_id,time,value_1,mask_1,target\n"
                           "a,0.0,1.5,1,9\n"
                           "b,0.0,2.0,1,8\n"
                           "a,1.0,0.0,0,9\n"
                           "b,2.0,-1.0,1,8\n"
                           "a,2.0,3.0,1,9\n"
                           "b,1.0,4.0,1,8\n")
    b = load_csv(path)
    assert (b.K, b.n, b.D) == (2, 3, 1)
    assert b.ids.tolist() == ["a", "b"]
    np.testing.assert_array_equal(b.t, [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(b.x[:, :, 0], [[1.5, 0.0, 3.0], [2.0, 4.0, -1.0]])
    np.testing.assert_array_equal(b.m[:, :, 0], [[1, 0, 1], [1, 1, 1]])
    np.testing.assert_array_equal(b.target[:, 0], [9, 8])


def test_csv_without_mask_columns_is_fully_observed(tmp_path):
    b = load_csv(write(tmp_path, "series_id,time,value_1,value_2\ns,0,1,2\ns,1,3,4\n"))
    assert (b.m == 1).all() and b.target is None and b.D == 2


def test_csv_missing_times_become_unobserved(tmp_path):
    b = load_csv(write(tmp_path, "series_id,time,value_1\na,0,1\nb,1,2\n"))
    np.testing.assert_array_equal(b.m[:, :, 0], [[1, 0], [0, 1]])


@pytest.mark.parametrize("text,line,pattern", [
    ("", None, "no data rows"),
    ("series_id,time,value_1\n", None, "no data rows"),
    ("series_id,value_1\na,1\n", 1, "time"),
    ("series_id,time,value_1\na,0,1\na,1,oops\n", 3, "non-numeric"),
    ("series_id,time,value_1\na,0,1\na,0,2\n", 3, "duplicated time"),
    ("series_id,time,value_1,mask_1\na,0,1,0.5\n", 2, "0 or 1"),
    ("series_id,time,value_1\na,0\n", 2, "expected 3 fields"),
    ("series_id,time,value_1\na,0,nan\n", 2, "non-finite"),
])
def test_csv_errors_carry_line_numbers(tmp_path, text, line, pattern):
    with pytest.raises(CSVParseError, match=pattern) as info:
        load_csv(write(tmp_path, text))
    assert info.value.line == line


# normalization and split ----------------------------------------------------------

def test_midpoint_maps_to_half():
    b = TimeSeriesBatch(np.array([[[2.0], [3.0], [4.0]]]), np.ones((1, 3, 1)), np.arange(3.0))
    out, _ = normalize_01(b)
    np.testing.assert_allclose(out.x[0, :, 0], [0.0, 0.5, 1.0])


def test_unobserved_stay_zero_and_train_bounds_apply_to_test():
    train = TimeSeriesBatch(np.array([[[1.0], [5.0], [0.0]]]), np.array([[[1.0], [1.0], [0.0]]]), np.arange(3.0))
    test = TimeSeriesBatch(np.array([[[7.0], [0.0], [3.0]]]), np.array([[[1.0], [0.0], [1.0]]]), np.arange(3.0))
    out, norm = normalize_01(test, fit_on=train)
    np.testing.assert_allclose(out.x[0, :, 0], [1.5, 0.0, 0.5])
    assert out.x[0, 1, 0] == 0.0


@settings(max_examples=30)
@given(seed=st.integers(0, 1000))
def test_normalize_round_trip(seed):
    b = apply_sparsity(generate_gaussian_periodic(6, 15, seed, D=2), 0.3, seed)
    out, norm = normalize_01(b)
    seen = b.m > 0
    assert np.abs(norm.invert(out.x)[seen] - b.x[seen]).max() < 1e-12


def test_constant_feature_maps_to_half_with_warning():
    b = TimeSeriesBatch(np.full((2, 3, 1), 4.0), np.ones((2, 3, 1)), np.arange(3.0))
    with pytest.warns(RuntimeWarning, match="constant"):
        out, norm = normalize_01(b)
    assert (out.x == 0.5).all()
    assert (norm.invert(out.x) == 4.0).all()


def test_feature_without_observations_rejected():
    b = TimeSeriesBatch(np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), np.arange(3.0))
    with pytest.raises(DataError):
        Normalizer.fit(b)


def test_split_sizes_and_disjointness():
    b = generate_gaussian_periodic(10, 5, 0)
    train, test = split_shuffled(b, 0.8, seed=3)
    assert (train.K, test.K) == (8, 2)
    assert set(train.ids) | set(test.ids) == set(range(10))
    assert not set(train.ids) & set(test.ids)
    again, _ = split_shuffled(b, 0.8, seed=3)
    assert np.array_equal(again.ids, train.ids)


def test_manifest_round_trip(tmp_path):
    man = DatasetManifest("synthetic", 100, 100, 1, 0.3, 7, lower=[0.1], upper=[0.9], warnings=["w"])
    man.save(tmp_path / "m.json")
    assert DatasetManifest.load(tmp_path / "m.json") == man
    assert json.loads(man.to_json())["format_version"] == 1
