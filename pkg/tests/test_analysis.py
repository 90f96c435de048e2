"""Bias calibration, BN alignment, bound calculator, toy experiment, rate report."""
import math
import time

import numpy as np
import pytest

from atpfl.adaptation import AdaptationRates
from atpfl.analysis import (BoundInput, ToyConfig, alpha_report, bn_align_check,
                            calibrate_last_layer, gaussian_bayes_model, generalization_bound,
                            group_mean, prop31_check, toy_accuracy_exact, toy_experiment,
                            write_rows_csv)
from atpfl.errors import DomainError
from atpfl.nn import RUNNING_STAT, build_model, mlp_layers, predict

from conftest import random_model


# -- calibration ------------------------------------------------------------------

def test_calibration_identity_and_binary_example():
    model = gaussian_bayes_model(np.array([[1.0, 0.0], [0.0, 1.0]]), 1.0, [0.5, 0.5])
    same = calibrate_last_layer(model, [0.5, 0.5], [0.5, 0.5])
    assert same.w.tobytes() == model.w.tobytes()
    x = np.array([[0.3, 0.3]])  # equidistant: posterior (0.5, 0.5) under p
    np.testing.assert_allclose(predict(model, x), [[0.5, 0.5]], atol=1e-15)
    shifted = calibrate_last_layer(model, [0.5, 0.5], [0.2, 0.8])
    np.testing.assert_allclose(predict(shifted, x), [[0.2, 0.8]], atol=1e-15)


def test_calibration_round_trip_is_identity(rng):
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
        model = random_model(rng, 3, (5,), 4)
        back = calibrate_last_layer(calibrate_last_layer(model, p, q), q, p)
        np.testing.assert_allclose(back.w, model.w, rtol=0, atol=1e-14)


def test_calibration_rejects_zero_prior(rng):
    model = random_model(rng)
    with pytest.raises(DomainError):
        calibrate_last_layer(model, [0.5, 0.5, 0.0], [1 / 3] * 3)
    with pytest.raises(DomainError):
        calibrate_last_layer(model, [0.5, 0.5], [0.5, 0.5])


def test_prop31_check_passes():
    rep = prop31_check([0.5, 0.5], [0.2, 0.8])
    assert rep.max_pointwise_dev < 1e-6
    assert abs(rep.ce_calibrated - rep.ce_bayes) < 1e-3
    assert rep.ce_uncalibrated > rep.ce_calibrated
    rep = prop31_check(np.full(5, 0.2), [0.6, 0.1, 0.1, 0.1, 0.1], num_samples=20_000)
    assert rep.passed()


# -- BN alignment -----------------------------------------------------------------

def test_alignment_no_shift():
    rep = bn_align_check(1.0, 0.0)
    assert abs(rep.adapted_mean) < 0.05 and abs(rep.adapted_std - 1) < 0.05
    assert rep.ks_after < 0.02 and rep.aligned


def test_alignment_affine_shift():
    rep = bn_align_check(2.0, 3.0, 10_000)
    assert rep.adapted_mean == pytest.approx(3.0, abs=0.05)
    assert rep.adapted_std == pytest.approx(2.0, abs=0.05)
    assert rep.ks_before > 0.5
    assert rep.ks_after < 0.02


def test_alignment_fails_for_non_affine_shift():
    rep = bn_align_check(shift="cube")
    assert rep.ks_after > 0.1 and not rep.aligned


# -- generalization bound ---------------------------------------------------------

def test_bound_reference_value():
    r = generalization_bound(BoundInput(1, 1, 1, 2, 100, 4, 0.5))
    assert r.value == pytest.approx(24 ** 2 * 4 * math.exp(-100 / 18), rel=1e-12)
    assert r.value == pytest.approx(8.91, abs=0.01)
    assert r.probability == 1.0


def test_bound_vanishes_for_huge_N():
    r = generalization_bound(BoundInput(1, 1, 1, 2, 10**9, 4, 0.5))
    assert r.log_value < math.log(1e-100)
    assert r.probability == r.value < 1e-100


def test_bound_log_space_avoids_overflow():
    r = generalization_bound(BoundInput(1e3, 1e3, 1e3, 500, 10, 4, 1e-3))
    assert math.isfinite(r.log_value) and r.value == math.inf and r.probability == 1.0


def test_bound_inputs_must_be_positive():
    with pytest.raises(DomainError):
        BoundInput(1, 1, 1, 0, 100, 4, 0.5)
    with pytest.raises(DomainError):
        BoundInput(1, 1, -1, 2, 100, 4, 0.5)


def _monotone_grid(seed, points=100):
    rng = np.random.default_rng(seed)
    fails = []
    for _ in range(points):
        L, H, R = rng.uniform(0.5, 3, 3)
        eps = rng.uniform(0.05, 1.0)
        # keep the covering factor 12LHR/eps >= 1; below that larger d shrinks the bound
        while 12 * L * H * R / eps < 1:
            eps /= 2
        d, N, K = int(rng.integers(1, 20)), int(rng.integers(1, 10**4)), int(rng.integers(1, 50))
        lv = lambda **kw: generalization_bound(BoundInput(**{**dict(L=L, H=H, R=R, d=d, N=N,
                                                                    K=K, eps=eps), **kw})).log_value
        base = lv()
        checks = [lv(N=N + 1 + N // 2) < base, lv(eps=min(eps * 1.5, 12 * L * H * R)) < base,
                  lv(d=d + 1) >= base, lv(R=R * 1.5) >= base, lv(L=L * 1.5) >= base,
                  lv(H=H * 1.5) >= base]
        if not all(checks):
            fails.append((L, H, R, d, N, K, eps, checks))
    return fails


def test_bound_monotonicity_grid():
    assert _monotone_grid(0) == []


# -- toy experiment ---------------------------------------------------------------

def test_toy_experiment_reproduces_reported_accuracies():
    t0 = time.perf_counter()
    res = toy_experiment(ToyConfig())
    assert time.perf_counter() - t0 < 10
    reported = {0.0: 0.89, 1.0: 0.73, 0.5: 0.83, -0.5: 0.92}
    for a, acc in reported.items():
        assert res.accuracy(a) == pytest.approx(acc, abs=0.02)
    assert res.train_accuracy == pytest.approx(0.89, abs=0.02)


def test_toy_experiment_matches_closed_form():
    cfg = ToyConfig()
    res = toy_experiment(cfg)
    for a, acc, mean, var in res.rows:
        exact = toy_accuracy_exact(cfg, a)
        assert abs(acc - exact) < 5 * math.sqrt(exact * (1 - exact) / cfg.samples)
    _, _, m0, v0 = res.rows[cfg.alphas.index(0.0)]
    assert (m0, v0) == (0.0, pytest.approx(1.64))


def test_toy_config_validation():
    with pytest.raises(DomainError):
        ToyConfig(std=0)
    with pytest.raises(DomainError):
        ToyConfig(test_prior=1.0)


# -- rate report ------------------------------------------------------------------

def test_alpha_report_zero_and_grouping(tmp_path):
    layers = mlp_layers(3, (4, 4), 2)
    man = build_model(layers).manifest
    zero = alpha_report(AdaptationRates.zeros(man), layers)
    assert all(r["alpha"] == 0 and r["sign"] == 0 for r in zero["modules"])
    assert all(g["mean"] == 0 for g in zero["groups"])
    alpha = np.arange(len(man), dtype=float) - 5
    rep = alpha_report(AdaptationRates(man, alpha, np.ones(len(man), bool)), layers)
    assert [r["module"] for r in rep["modules"]] == list(man.names)
    stat = man.module_mask(RUNNING_STAT)
    assert group_mean(rep, "kind", RUNNING_STAT) == pytest.approx(alpha[stat].mean())
    assert group_mean(rep, "depth:kind", "2:running_stat") == pytest.approx(
        alpha[[man.index("layer4.running_mean"), man.index("layer4.running_var")]].mean())
    assert group_mean(rep, "role", "running_var") == pytest.approx(
        alpha[[man.index("layer1.running_var"), man.index("layer4.running_var")]].mean())
    write_rows_csv(rep["groups"], tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().startswith("group_by,group,mean")
