"""Test-time sessions (batch and online) and the baseline adapters."""
import inspect
import json

import numpy as np
import pytest
from scipy import stats as sps

from atpfl import runtime
from atpfl.adaptation import AdaptationRates, compute_update_direction
from atpfl.analysis import _bn_probe, gaussian_bayes_model
from atpfl.errors import DegenerateBatchError, UsageError
from atpfl.fedsim import ClientSpec, Corruption, ShiftConfig, fedavg_pretrain, sample_population
from atpfl.nn import TRAIN_STATS, entropy_loss, forward, loss_and_grad, predict
from atpfl.runtime import (AdaptationSession, aggregate_table, baseline_bn_adapt,
                           baseline_em_prior, baseline_none, baseline_tent, bn_affine_mask,
                           em_prior_adjust, evaluate_client, run_method, write_aggregate_csv,
                           write_client_report)

from conftest import central_diff, random_model


def _rates(model, rng, scale=0.5):
    return AdaptationRates(model.manifest, scale * rng.standard_normal(model.d),
                           np.ones(model.d, bool))


@pytest.mark.parametrize("mode", ["batch", "online"])
def test_zero_rates_match_frozen_model(rng, mode):
    model = random_model(rng)
    s = AdaptationSession(model, AdaptationRates.zeros(model.manifest), mode)
    for _ in range(3):
        X = rng.standard_normal((6, 4)) * 3 + 1
        np.testing.assert_array_equal(s.step(X), predict(model, X))


def test_online_first_step_equals_batch(rng):
    model = random_model(rng)
    r = _rates(model, rng)
    X = rng.standard_normal((6, 4))
    a = AdaptationSession(model, r, "batch").step(X)
    b = AdaptationSession(model, r, "online").step(X)
    np.testing.assert_array_equal(a, b)


def test_online_same_batch_twice_is_fixed_point(rng):
    model = random_model(rng)
    s = AdaptationSession(model, _rates(model, rng), "online")
    X = rng.standard_normal((6, 4))
    p1 = s.step(X)
    h1 = s.h_history.copy()
    p2 = s.step(X)
    np.testing.assert_allclose(s.h_history, h1, rtol=0, atol=1e-15)
    np.testing.assert_allclose(p2, p1, rtol=0, atol=1e-14)


def test_online_history_is_exact_mean(rng):
    model = random_model(rng)
    s = AdaptationSession(model, _rates(model, rng), "online")
    hs = []
    for k in range(1, 101):
        X = rng.standard_normal((5, 4)) * rng.uniform(0.5, 3)
        hs.append(compute_update_direction(model, X)[0].h)
        s.step(X)
        assert s.k == k
        np.testing.assert_allclose(s.h_history, np.mean(hs, axis=0), rtol=0, atol=1e-12)
    assert s.h_history.shape == (model.D,)


def test_batch_mode_is_order_independent(rng):
    model = random_model(rng)
    r = _rates(model, rng)
    Xs = [rng.standard_normal((5, 4)) + i for i in range(6)]
    a = run_method("atp-batch", model, Xs, r)
    perm = [3, 0, 5, 1, 4, 2]
    b = run_method("atp-batch", model, [Xs[i] for i in perm], r)
    for j, i in enumerate(perm):
        assert b[j].tobytes() == a[i].tobytes()
    one = run_method("atp-batch", model, [Xs[4]], r)[0]
    assert one.tobytes() == a[4].tobytes()


def test_session_errors(rng):
    model = random_model(rng)
    s = AdaptationSession(model, _rates(model, rng), "online")
    with pytest.raises(DegenerateBatchError):
        s.step(np.zeros((1, 4)))
    s.close()
    with pytest.raises(UsageError):
        s.step(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        AdaptationSession(model, _rates(model, rng), "streaming")
    with pytest.raises(UsageError):
        run_method("atp-online", model, [np.zeros((2, 4))], None)


def test_adaptation_interfaces_take_no_labels():
    for fn in (AdaptationSession.step, runtime.adapt_and_predict_batch, run_method,
               baseline_bn_adapt, baseline_tent, baseline_em_prior, compute_update_direction):
        params = set(inspect.signature(fn).parameters)
        assert not params & {"y", "labels", "Y"}, fn.__name__


# -- BN-Adapt ---------------------------------------------------------------------

def test_bn_adapt_equals_none_when_stats_match(rng):
    model = random_model(rng)
    X = rng.standard_normal((7, 4))
    _, cache = forward(model, X, TRAIN_STATS)
    for k, v in cache.batch_stats.items():
        model.view(k)[...] = v
    np.testing.assert_allclose(baseline_bn_adapt(model, X), baseline_none(model, X),
                               rtol=1e-12, atol=1e-14)


def test_bn_adapt_aligns_affine_shift():
    # source features are N(0, 1) and the probe stores exactly those statistics, so
    # normalized source features are standard normal; compare against that law directly
    rng = np.random.default_rng(0)
    model = _bn_probe(0.0, 1.0)
    tgt = 2.0 * rng.standard_normal((1000, 1)) + 3.0
    _, c_tgt = forward(model, tgt, TRAIN_STATS)
    z = c_tgt.aux[0][0].ravel()
    assert sps.kstest(z, sps.norm.cdf).statistic < 0.05
    _, c_raw = forward(model, tgt)
    assert sps.kstest(c_raw.aux[0][0].ravel(), sps.norm.cdf).statistic > 0.5


def test_bn_adapt_hurts_under_pure_label_shift():
    cfg = ShiftConfig(kind="label", num_classes=4, dim=6, major_classes=1, major_count=60,
                      minor_classes=3, minor_count=5, pool_per_class=1000)
    gaps = []
    for seed in range(5):
        pop = sample_population(cfg, 10, 4, seed)
        w, _ = fedavg_pretrain(pop.sources, (16,), 20, 10, 0.05, 20, seed=seed)
        none = np.mean([evaluate_client(c, w, "none").accuracy for c in pop.targets])
        bn = np.mean([evaluate_client(c, w, "bn-adapt").accuracy for c in pop.targets])
        gaps.append(bn - none)
    assert np.mean(gaps) <= 0


# -- Tent -------------------------------------------------------------------------

def test_tent_zero_lr_frozen_is_none(rng):
    model = random_model(rng)
    X = rng.standard_normal((6, 4))
    np.testing.assert_array_equal(baseline_tent(model, X, 0.0, replace_stats=False),
                                  predict(model, X))


def test_tent_step_lowers_entropy():
    for seed in range(10):
        r = np.random.default_rng(seed)
        model = random_model(r)
        X = r.standard_normal((8, 4))
        before = entropy_loss(forward(model, X, TRAIN_STATS)[0])
        after = entropy_loss(baseline_tent(model, X, 1e-3))
        assert after <= before + 1e-12


def test_tent_restricted_gradient_matches_finite_differences(rng):
    model = random_model(rng)
    X = rng.standard_normal((8, 4))
    mask = bn_affine_mask(model)
    assert mask.sum() == 2 * 5
    _, g, _ = loss_and_grad(model, X, "entropy", mode=TRAIN_STATS)
    f = lambda w: loss_and_grad(model.with_params(w), X, "entropy", mode=TRAIN_STATS)[0]
    fd = central_diff(f, model.w.copy())
    np.testing.assert_allclose(g[mask], fd[mask], atol=1e-8)


# -- EM prior adjustment ------------------------------------------------------------

def test_em_fixed_point():
    post = np.array([[0.9, 0.1], [0.1, 0.9]])
    res = em_prior_adjust(post, [0.5, 0.5])
    assert res.iterations == 1 and res.converged
    np.testing.assert_allclose(res.posteriors, post, atol=1e-15)


def test_em_uniform_predictions_stay_uniform():
    res = em_prior_adjust(np.full((50, 4), 0.25), np.full(4, 0.25))
    np.testing.assert_allclose(res.prior, 0.25, atol=1e-15)


def test_em_recovers_shifted_prior():
    rng = np.random.default_rng(3)
    means = np.eye(3) * 2.0
    p = np.full(3, 1 / 3)
    q = np.array([0.7, 0.2, 0.1])
    y = rng.choice(3, 1000, p=q)
    X = means[y] + rng.standard_normal((1000, 3))
    model = gaussian_bayes_model(means, 1.0, p)
    res = baseline_em_prior(model, X, train_prior=p)
    assert np.abs(res.prior - q).sum() < 0.05


# -- evaluation -------------------------------------------------------------------

def test_evaluate_client_and_reports(tmp_path, rng):
    model = random_model(rng)
    X = rng.standard_normal((45, 4))
    y = rng.integers(0, 3, 45)
    client = ClientSpec(0, "target", np.full(3, 1 / 3), Corruption.identity(4), X, y)
    res = evaluate_client(client, model, "none", batch_size=20)
    assert len(res.per_batch) == 2
    pred = predict(model, X[:40]).argmax(axis=1)
    assert res.accuracy == pytest.approx((pred == y[:40]).mean())
    write_client_report(res, tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text())["mode"] == "none"
    rows = aggregate_table({"none": [res, res]})
    assert rows[0]["sd_acc"] == 0.0 and rows[0]["clients"] == 2
    write_aggregate_csv(rows, tmp_path / "agg.csv")
    assert (tmp_path / "agg.csv").read_text().startswith("method,mean_acc,sd_acc,clients")
    for m in runtime.METHODS:
        r = evaluate_client(client, model, m, AdaptationRates.zeros(model.manifest))
        assert 0 <= r.accuracy <= 1
    with pytest.raises(ValueError):
        run_method("memo", model, [X[:5]])
