import numpy as np
import pytest

from seqlink.autoencoder import (AEConfig, ODEAutoEncoder, TrajectoryBank, cut_out, default_removal_count,
                                 train_autoencoder)
from seqlink.data import TimeSeriesBatch, apply_sparsity, generate_gaussian_periodic
from seqlink.diffcore import ParameterStore
from seqlink.models import SequenceModel
from seqlink.recurrent import ode_rnn_forward


def small_batch(K=6, n=10, seed=0, sparsity=0.0):
    b = generate_gaussian_periodic(K, n, seed)
    return apply_sparsity(b, sparsity, seed) if sparsity else b


def test_cut_out_zero_is_identity():
    b = small_batch(sparsity=0.3)
    out, plan = cut_out(b, 0, seed=1)
    assert np.array_equal(out.x, b.x) and np.array_equal(out.m, b.m)
    assert plan.removal_count == 0


def test_cut_out_counts_and_coupling():
    b = small_batch(K=5, n=10)
    out, plan = cut_out(b, 3, seed=4)
    np.testing.assert_array_equal(out.m.sum(axis=(1, 2)), 7)
    zeroed = (b.m > 0) & (out.m == 0)
    assert (out.x[zeroed] == 0).all()
    for k in range(b.K):
        scan = [i for i in range(b.n) if out.m[k, i, 0] == 0]
        assert scan == plan.removed[k].tolist()
    untouched = out.m > 0
    assert np.array_equal(out.x[untouched], b.x[untouched])


def test_cut_out_only_removes_observed_points():
    b = small_batch(K=8, n=20, sparsity=0.4)
    out, plan = cut_out(b, 4, seed=2)
    for k, idx in enumerate(plan.removed):
        assert (b.m[k, idx] > 0).all()
        assert len(set(idx.tolist())) == 4


def test_cut_out_deterministic():
    b = small_batch()
    _, p1 = cut_out(b, 2, seed=9)
    _, p2 = cut_out(b, 2, seed=9)
    assert all(np.array_equal(a, c) for a, c in zip(p1.removed, p2.removed))


def test_cut_out_error_names_sample():
    b = small_batch(K=3, n=10, sparsity=0.5)
    with pytest.raises(ValueError, match=r"sample 0"):
        cut_out(b, 6, seed=0)


def test_encode_matches_ode_rnn_forward():
    b = small_batch()
    ae = ODEAutoEncoder(ParameterStore(), 1, latent=4, ode_hidden=(8,))
    u = ae.encode(b).data
    ref = np.stack([s.data for s in ode_rnn_forward(ae.dynamics, ae.cell, b.x, b.m, b.t)], axis=1)
    assert np.array_equal(u, ref)
    assert u.shape == (b.K, b.n, 4)


def test_zero_params_zero_input_zero_trajectory():
    b = small_batch()
    b = b.replace(x=np.zeros_like(b.x), m=np.zeros_like(b.m))
    store = ParameterStore()
    ae = ODEAutoEncoder(store, 1, latent=4, ode_hidden=(8,))
    for n in store:
        store[n].data[...] = 0.0
    assert (ae.encode(b).data == 0.0).all()


def test_loss_counts_cut_points_but_not_never_observed_ones():
    b = small_batch(sparsity=0.3)
    corrupted, _ = cut_out(b, 2, seed=3)
    ae = ODEAutoEncoder(ParameterStore(), 1, latent=4, ode_hidden=(8,))
    y = ae.decode(ae.encode(corrupted)).data
    seen = b.m > 0
    expected = np.mean((y[seen] - b.x[seen]) ** 2)
    assert float(ae.reconstruction_loss(corrupted, b).data) == pytest.approx(expected, rel=1e-12)


def test_bank_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    bank = TrajectoryBank(rng.normal(size=(4, 6, 3)), np.arange(4), np.linspace(0, 1, 6))
    path = tmp_path / "bank.json"
    bank.save(path)
    back = TrajectoryBank.load(path)
    assert np.array_equal(back.trajectories, bank.trajectories)
    assert np.array_equal(back.sample_ids, bank.sample_ids)
    assert np.array_equal(back.time_grid, bank.time_grid)
    assert back.latent_dim == 3


def test_bank_rejects_bad_shapes():
    with pytest.raises(ValueError):
        TrajectoryBank(np.zeros((3, 5, 2)), np.arange(4), np.arange(5.0))
    with pytest.raises(ValueError):
        TrajectoryBank(np.full((1, 2, 2), np.nan), np.arange(1), np.arange(2.0))


def test_constant_dataset_reconstructs():
    K, n = 8, 10
    b = TimeSeriesBatch(np.full((K, n, 1), 0.7), np.ones((K, n, 1)), np.arange(n, dtype=float),
                        np.full((K, 1), 0.7), np.arange(K))
    res = train_autoencoder(b, AEConfig(epochs=60, batch_size=2, latent=4, ode_hidden=(8,), seed=0))
    assert res.final_loss < 1e-3


def test_training_progress_median_over_seeds():
    b = small_batch(K=20, n=20, sparsity=0.2)
    drops = []
    for seed in range(3):
        res = train_autoencoder(b, AEConfig(epochs=50, batch_size=10, latent=4, ode_hidden=(16,), seed=seed))
        drops.append(res.history.epoch_loss[-1] - res.history.epoch_loss[0])
    assert np.median(drops) <= 0


def test_zero_removal_still_builds_bank():
    b = small_batch()
    res = train_autoencoder(b, AEConfig(epochs=1, batch_size=6, latent=3, ode_hidden=(4,), removal_fraction=0.0))
    assert res.bank.trajectories.shape == (b.K, b.n, 3)
    assert np.array_equal(res.bank.sample_ids, b.ids)
    assert np.array_equal(res.bank.time_grid, b.t)


def test_default_removal_count_uses_sparsest_sample():
    b = small_batch(K=4, n=20, sparsity=0.25)
    assert default_removal_count(b, 0.2) == 3


def test_namespaces_disjoint_from_model():
    b = small_batch()
    res = train_autoencoder(b, AEConfig(epochs=1, batch_size=6, latent=3, ode_hidden=(4,)))
    model = SequenceModel("seqlink", 1, 1, hidden=4, ode_hidden=(4,), levels=2, latent=3)
    assert not set(res.model.store) & set(model.store)
    assert all(n.startswith("ae.") for n in res.model.store)
