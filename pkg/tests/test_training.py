import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdmr import equalizers as eq
from tdmr.channel import ChannelConfig, ReadbackSector, generate_dataset, random_bits
from tdmr.training import (
    Minibatch, NearTieError, TrainConfig, TrainingDiverged, ce_grad, ce_loss, ce_pointwise,
    estimate_noise_var, fit, gradient_check, minibatch, mse_loss, objective, solve_lmmse,
    solve_output_layer, target_windows)
from tdmr.trellis import PRTarget, pr_reference_with_history

STATIONARY = ChannelConfig(downtrack_pulse_width=1.0, jitter_sigma_t=0.0, jitter_sigma_w=0.0,
                           awgn_sigma=0.3)


def test_mse_loss_examples():
    assert mse_loss([1, 2, 3], [1, 2, 3]) == 0.0
    assert mse_loss([0, 0], [1, -3]) == 5.0
    with pytest.raises(ValueError):
        mse_loss([1], [1, 2])


def test_ce_pointwise_at_zero_is_ln2():
    assert abs(ce_pointwise(1, 0.0) - math.log(2)) < 1e-12
    assert abs(ce_pointwise(-1, 0.0) - math.log(2)) < 1e-12


def test_ce_pointwise_is_stable():
    assert ce_pointwise(1, 800.0) == 0.0
    assert ce_pointwise(1, -800.0) == pytest.approx(800.0)
    assert np.isfinite(ce_grad(np.array([1, -1]), np.array([-800.0, 800.0]))).all()


@given(st.sampled_from([-1, 1]), st.floats(-30, 30))
def test_ce_grad_matches_derivative(u, x):
    eps = 1e-6
    num = (ce_pointwise(u, x + eps) - ce_pointwise(u, x - eps)) / (2 * eps)
    assert ce_grad(u, x) == pytest.approx(num, abs=1e-6)
    # pushes the LLR toward the written bit and fades once it is confidently right
    assert np.sign(ce_grad(u, x)) == -u
    assert abs(ce_grad(u, u * 40.0)) < 1e-17


@given(st.lists(st.tuples(st.sampled_from([-1, 1]), st.floats(-20, 20)), min_size=1, max_size=100))
def test_ce_bounds_sign_error_rate(pairs):
    u = np.array([p[0] for p in pairs])
    llr = np.array([p[1] for p in pairs])
    errors = np.mean(u * llr <= 0)
    assert ce_loss(u, llr) >= math.log(2) * errors - 1e-12


def test_target_windows_layout():
    U = target_windows([1, -1, -1], [1, 1], 3)
    assert U.tolist() == [[1, 1, 1], [-1, 1, 1], [-1, -1, 1]]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss="L1")
    with pytest.raises(ValueError):
        TrainConfig(solver="closed_form", loss="CE")
    assert TrainConfig(loss="MSE", adapt_target=True, monic=False).monic


def test_empty_minibatch_rejected(small_dataset):
    spec = eq.EqualizerSpec("Linear2D", M=2)
    p = eq.init_params(spec, np.random.default_rng(0))
    mb = minibatch(small_dataset[0], 2, 3, 100, 100)
    with pytest.raises(ValueError):
        objective(spec, p, PRTarget((1.0, 0.5, 0.1)), mb, "MSE")
    with pytest.raises(ValueError):
        gradient_check(spec, p, PRTarget((1.0, 0.5, 0.1)), mb, "MSE")


def _realizable_sector(rng, g, n=3000):
    u = random_bits(n, rng)
    clean = pr_reference_with_history(u, [u[0]] * (len(g) - 1), g)
    return ReadbackSector(bits=u, adc=np.stack([clean, rng.normal(size=n)]))


def test_lmmse_realizable_case_is_exact(rng):
    g = (1.0, 0.6, -0.2)
    data = [_realizable_sector(rng, g) for _ in range(2)]
    p, tgt = solve_lmmse(data, 3, 3)
    assert tgt.monic and tgt.taps[0] == 1.0
    np.testing.assert_allclose(tgt.taps, g, atol=1e-8)
    spec = eq.EqualizerSpec("Linear2D", M=3)
    assert estimate_noise_var(spec, p, tgt, data) < 1e-10


def test_lmmse_fixed_target(rng):
    g = PRTarget((3.0, 7.0, 1.0))
    data = [_realizable_sector(rng, g.taps) for _ in range(2)]
    p, tgt = solve_lmmse(data, 2, fixed_target=g)
    assert tgt is g
    assert estimate_noise_var(eq.EqualizerSpec("Linear2D", M=2), p, g, data) < 1e-10


def test_monic_target_is_preserved(small_dataset):
    spec = eq.EqualizerSpec("RCMLP2", M=3, K=3)
    p0 = eq.init_params(spec, np.random.default_rng(0))
    rep = fit(spec, p0, small_dataset[:2], PRTarget((1.0, 0.3, 0.0), monic=True),
              TrainConfig(loss="MSE", learning_rate=0.02, epochs=3, minibatch_N=256))
    assert rep.final_target.taps[0] == 1.0 and rep.final_target.monic
    assert rep.final_target.taps[1:] != (0.3, 0.0)


def test_zero_learning_rate_is_null_update(small_dataset):
    spec = eq.EqualizerSpec("MLP", M=2, K=3)
    p0 = eq.init_params(spec, np.random.default_rng(0))
    g0 = PRTarget((1.0, 0.5, 0.1))
    rep = fit(spec, p0, small_dataset[:1], g0, TrainConfig(loss="CE", learning_rate=0.0, epochs=1,
                                                           noise_var=0.5))
    assert all(np.array_equal(rep.final_params[k], p0[k]) for k in p0)
    assert rep.final_target.taps == g0.taps
    assert len(rep.loss_history) > 0


def test_fit_is_seed_deterministic(small_dataset):
    spec = eq.EqualizerSpec("RCMLP3", M=3, K=5)
    p0 = eq.init_params(spec, np.random.default_rng(0))
    lin, g0 = solve_lmmse(small_dataset[:2], 3, 3)
    p0["f"] = lin["f"]
    cfg = TrainConfig(loss="CE", learning_rate=0.01, epochs=2, minibatch_N=512, seed=4)
    a = fit(spec, p0, small_dataset[:2], g0, cfg)
    b = fit(spec, p0, small_dataset[:2], g0, cfg)
    assert a.loss_history == b.loss_history
    assert all(np.array_equal(a.final_params[k], b.final_params[k]) for k in p0)


def test_ce_training_lowers_loss(small_dataset):
    spec = eq.EqualizerSpec("Linear2D", M=4)
    lin, g0 = solve_lmmse(small_dataset[:2], 4, 3)
    rep = fit(spec, lin, small_dataset[:2], g0,
              TrainConfig(loss="CE", learning_rate=0.01, epochs=4, minibatch_N=512))
    h = np.array(rep.loss_history)
    n = len(h) // 4
    assert h[-n:].mean() < h[:n].mean()
    assert rep.noise_var > 0


def test_divergence_is_reported(small_dataset):
    spec = eq.EqualizerSpec("Linear2D", M=2)
    p0 = eq.init_params(spec, np.random.default_rng(0))
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            fit(spec, p0, small_dataset[:1], PRTarget((1.0, 0.5, 0.1), monic=True),
                TrainConfig(loss="MSE", learning_rate=1e3, epochs=5, minibatch_N=256))


def test_sgd_converges_to_closed_form():
    data = generate_dataset(STATIONARY, 4, 20000, seed=3)
    M = 2
    p_cf, g_cf = solve_lmmse(data, M, 3)
    spec = eq.EqualizerSpec("Linear2D", M=M)
    p0 = {"f": np.eye(2, 2 * M + 1, M) * 0.5}
    rep = fit(spec, p0, data, PRTarget((1.0, 0.0, 0.0), monic=True),
              TrainConfig(loss="MSE", learning_rate=0.1, epochs=60, lr_decay=0.9, minibatch_N=1024))
    theta = np.concatenate([rep.final_params["f"].ravel(), rep.final_target.array[1:]])
    theta_cf = np.concatenate([p_cf["f"].ravel(), g_cf.array[1:]])
    assert np.linalg.norm(theta - theta_cf) / np.linalg.norm(theta_cf) < 1e-3


@pytest.mark.parametrize("arch", eq.ARCHS)
def test_gradient_check_both_losses(arch, small_dataset):
    rng = np.random.default_rng(7)
    spec = eq.EqualizerSpec(arch, M=2, K=4, M_prime=1)
    lin, g = solve_lmmse(small_dataset[:2], 2, 3)
    p = eq.init_params(spec, rng, sample_r=small_dataset[0].adc,
                       linear_taps=None if arch == "MLP" else lin["f"])
    C = eq.context(spec)
    assert gradient_check(spec, p, g, minibatch(small_dataset[2], C, 3, 50, 80), "MSE") <= 1e-6
    for a in range(100, 2000, 97):
        try:
            err = gradient_check(spec, p, g, minibatch(small_dataset[2], C, 3, a, a + 30), "CE",
                                 noise_var=0.4)
            break
        except NearTieError:
            continue
    assert err <= 1e-4


def test_minibatch_geometry(small_dataset):
    s = small_dataset[0]
    mb = minibatch(s, 4, 3, 10, 30)
    assert isinstance(mb, Minibatch)
    assert mb.r.shape == (2, 28) and len(mb) == 20
    assert mb.history.tolist() == [s.bits[9], s.bits[8]]


@pytest.mark.parametrize("arch", ["RBFNN", "FIRRBFNN"])
def test_output_layer_solve_is_least_squares(arch, small_dataset, rng):
    spec = eq.EqualizerSpec(arch, M=2, K=3, M_prime=1)
    lin, g = solve_lmmse(small_dataset, 2, 3)
    p0 = eq.init_params(spec, rng, sample_r=small_dataset[0].adc, linear_taps=lin["f"],
                        input_gain=0.3)
    p = solve_output_layer(spec, p0, g, small_dataset, max_samples=10**9, ridge=0.0)
    best = estimate_noise_var(spec, p, g, small_dataset)
    assert best < estimate_noise_var(spec, p0, g, small_dataset)
    for _ in range(5):
        q = eq.copy_params(p)
        q["v"] = q["v"] + 1e-3 * rng.normal(size=q["v"].shape)
        q["b1"] = q["b1"] + 1e-3 * rng.normal()
        assert estimate_noise_var(spec, q, g, small_dataset) >= best
    with pytest.raises(ValueError):
        solve_output_layer(eq.EqualizerSpec("MLP", M=2, K=2), {}, g, small_dataset)
