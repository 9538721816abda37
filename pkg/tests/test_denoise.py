import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dens.checks import finite_difference_grads, grad_rel_error, mixed_batch_setup
from dens.denoise import (CorruptionRecord, DensHyper, NormStats, batch_loss, compute_norm_stats, corrupt,
                          lambda_dens_schedule, loss_dens, loss_original, plan_batch, structure_rng, training_step)
from dens.model import ModelOutput, as_tensors
from dens.numcore import Tensor


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.floats(0, 1), st.floats(0.0, 0.3), st.integers(0, 2 ** 31))
def test_corrupt_properties(n, r, sigma, seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n, 3))
    free = rng.random(n) < 0.7
    rec = corrupt(pos, sigma, r, np.random.default_rng(seed + 1), free)
    m = rec.mask.astype(bool)
    assert not (m & ~free).any()
    np.testing.assert_array_equal(rec.positions[~m], pos[~m])
    assert not rec.noise[~m].any()
    np.testing.assert_array_equal(rec.positions, pos + rec.noise)


def test_corrupt_draw_count_is_fixed():
    a, b = np.random.default_rng(0), np.random.default_rng(0)
    corrupt(np.zeros((5, 3)), 0.1, 0.0, a)
    corrupt(np.zeros((5, 3)), 0.1, 1.0, b)
    assert a.random() == b.random()


def test_corrupt_full_ratio_masks_all_free():
    rec = corrupt(np.zeros((4, 3)), 0.1, 1.0, np.random.default_rng(0))
    assert rec.mask.sum() == 4


def test_structure_rng_keyed():
    a = structure_rng(1, 2, 3).random(4)
    np.testing.assert_array_equal(a, structure_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, structure_rng(1, 2, 4).random(4))
    assert not np.array_equal(a, structure_rng(1, 3, 3).random(4))


def test_lambda_schedules():
    assert lambda_dens_schedule(50, 100, 4.0, "constant") == 4.0
    assert lambda_dens_schedule(25, 100, 4.0, "linear-to-zero") == 3.0
    assert lambda_dens_schedule(100, 100, 4.0, "linear-to-zero") == 0.0
    with pytest.raises(ValueError):
        lambda_dens_schedule(0, 100, 4.0, "cosine")


@pytest.mark.parametrize("kw", [{"p_dens": 1.5}, {"r_dens": -0.1}, {"sigma": -1.0}, {"lambda_schedule": "x"}])
def test_hyper_validation(kw):
    with pytest.raises(ValueError):
        DensHyper(**kw)


def test_norm_stats_population_std():
    from dens.data import Structure
    frames = [Structure(np.array([1, 1]), np.zeros((2, 3)), e, np.full((2, 3), e), np.ones(2, dtype=bool))
              for e in (1.0, 3.0)]
    s = compute_norm_stats(frames)
    assert (s.mu_e, s.sigma_e, s.sigma_f) == (2.0, 1.0, 1.0)


def test_batch_loss_hand_computed():
    out = ModelOutput(Tensor(np.array([0.5, -1.0])), Tensor(np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 1.0]])),
                      Tensor(np.array([[0.0, 0, 0], [1.0, 1.0, 0], [0, 0, 0]])))
    segment = np.array([0, 1, 1])
    mask = np.array([0.0, 1.0, 0.0])
    target = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 0, 0]])
    t = batch_loss(out, segment, np.array([0.0, 0.0]), np.zeros((3, 3)), mask, np.array([False, True]), target,
                   np.array([2.0, 2.0]), 10.0, 3.0)
    # structure 0: 2*0.5 + 10*1 ; structure 1: 2*1 + 10*(1/2)*1 + 3*(1/2)*1
    expect = ((1.0 + 10.0) + (2.0 + 5.0 + 1.5)) / 2
    assert abs(t.total.item() - expect) < 1e-14
    assert abs(t.dens - 0.25) < 1e-14


def test_loss_dens_zero_sigma_rejected():
    out = ModelOutput(Tensor(np.zeros(1)), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    rec = CorruptionRecord(np.zeros((2, 3)), np.array([1.0, 0.0]), np.zeros((2, 3)), 0.0)
    with pytest.raises(ValueError, match="sigma"):
        loss_dens(out, rec, 0.0, np.zeros((2, 3)), NormStats(0, 1, 1), 1, 1, 1)


def test_loss_original_needs_labels():
    out = ModelOutput(Tensor(np.zeros(1)), Tensor(np.zeros((2, 3))), None)
    with pytest.raises(ValueError):
        loss_original(out, None, np.zeros((2, 3)), NormStats(0, 1, 1), 1, 1)


def test_plan_batch_is_deterministic_and_order_free():
    _, _, batch, hyper, stats, seed = mixed_batch_setup(0)
    a = plan_batch(batch, hyper, stats, seed, 0)
    b = plan_batch(batch, hyper, stats, seed, 0)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.force_inputs, b.force_inputs)
    # structures on the plain objective get no force input
    for j, sl in enumerate(batch.atom_slices()):
        if not a.dens_struct[j]:
            assert not a.force_inputs[sl].any()
            np.testing.assert_array_equal(a.positions[sl], batch.positions[sl])


def test_no_encoding_drops_force_inputs():
    _, _, batch, hyper, stats, seed = mixed_batch_setup(0)
    from dataclasses import replace
    plan = plan_batch(batch, replace(hyper, encode_forces=False), stats, seed, 0)
    assert plan.force_inputs is None


def test_gradient_mode_parameter_gradients_match_fd():
    model, params, batch, hyper, stats, seed = mixed_batch_setup(0)

    def loss_of(p):
        return training_step(model, as_tensors(p, True), batch, hyper, stats, seed, 0, mode="gradient").loss

    res = training_step(model, as_tensors(params, True), batch, hyper, stats, seed, 0, mode="gradient",
                        hvp_step=1e-5)
    small = {k: v for k, v in params.items() if k.startswith(("energy", "block1.lin", "embed"))}

    def partial_loss(sub):
        return loss_of({**params, **sub})

    fd = finite_difference_grads(partial_loss, {k: v.copy() for k, v in small.items()}, h=1e-3)
    err = grad_rel_error({k: res.grads[k] for k in small}, fd, res.loss)
    assert err < 1e-5, err


def test_corrupt_zero_sigma_full_ratio():
    pos = np.arange(12.0).reshape(4, 3)
    rec = corrupt(pos, 0.0, 1.0, np.random.default_rng(0))
    assert rec.mask.all()
    np.testing.assert_array_equal(rec.positions, pos)
    assert not rec.noise.any()


def test_corrupt_zero_ratio_is_identity():
    pos = np.arange(12.0).reshape(4, 3)
    rec = corrupt(pos, 0.1, 0.0, np.random.default_rng(0))
    assert not rec.mask.any()
    np.testing.assert_array_equal(rec.positions, pos)


def test_corrupted_fraction_concentrates():
    rec = corrupt(np.zeros((100_000, 3)), 0.05, 0.5, np.random.default_rng(0))
    assert abs(rec.mask.mean() - 0.5) < 0.01


def _out(energy, forces, noise=None):
    return ModelOutput(Tensor(np.atleast_1d(energy)), Tensor(forces), None if noise is None else Tensor(noise))


def test_loss_original_examples():
    stats = NormStats(0.0, 1.0, 1.0)
    f = np.zeros((4, 3))
    assert loss_original(_out(0.0, f), 0.0, f, stats, 2.0, 100.0).total.item() == 0.0
    assert loss_original(_out(0.5, f), 0.0, f, stats, 2.0, 100.0).total.item() == 1.0
    f_hat = f.copy()
    f_hat[2, 0] = 1.0
    assert loss_original(_out(0.0, f_hat), 0.0, f, stats, 2.0, 100.0).total.item() == 25.0


def test_loss_dens_examples():
    stats = NormStats(0.0, 1.0, 1.0)
    f = np.zeros((4, 3))
    noise = np.zeros((4, 3))
    noise[1] = 0.1
    rec = CorruptionRecord(noise.copy(), np.array([0.0, 1.0, 0.0, 0.0]), noise, 0.1)
    exact = loss_dens(_out(0.0, f, noise / 0.1), rec, 0.0, f, stats, 2.0, 10.0, 100.0)
    assert exact.total.item() == 0.0
    blind = loss_dens(_out(0.0, f, np.zeros((4, 3))), rec, 0.0, f, stats, 2.0, 10.0, 100.0)
    assert abs(blind.total.item() - 7.5) < 1e-12


def test_norm_stats_examples():
    from dens.data import Structure
    frames = [Structure(np.array([1, 1]), np.zeros((2, 3)), e, np.ones((2, 3)) * e, np.ones(2, dtype=bool))
              for e in (1.0, 2.0, 3.0)]
    s = compute_norm_stats(frames)
    assert s.mu_e == 2.0 and abs(s.sigma_e - np.sqrt(2 / 3)) < 1e-15
    zero = [Structure(f.species, f.positions, f.energy, np.zeros((2, 3)), f.free) for f in frames]
    with pytest.raises(ValueError, match="degenerate"):
        compute_norm_stats(zero)


def test_norm_stats_match_streaming_recompute(small_dataset):
    frames = small_dataset.split("train")
    s = compute_norm_stats(frames)

    def welford(values):
        n, mean, m2 = 0, 0.0, 0.0
        for x in values:
            n += 1
            d = x - mean
            mean += d / n
            m2 += d * (x - mean)
        return mean, np.sqrt(m2 / n)

    mu, sd = welford(f.energy for f in frames)
    _, sf = welford(x for f in frames for x in f.forces.ravel())
    assert abs(mu - s.mu_e) <= 1e-12 * max(1, abs(mu))
    assert abs(sd - s.sigma_e) <= 1e-12 * sd
    assert abs(sf - s.sigma_f) <= 1e-12 * sf
