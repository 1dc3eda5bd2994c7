import math

import numpy as np
import pytest

from cplvm.counts import ContrastivePair
from cplvm.inference import (
    Adam,
    FitConfig,
    NumericalAbort,
    VariationalState,
    _rng,
    draw_noise,
    elbo_estimate,
    fit,
    init_state,
    log_q,
    posterior_mean,
    reparam_sample,
)
from cplvm.model import CountData, ModelSpec

from helpers import SPECS, fd_check, random_state, small_pair


@pytest.mark.parametrize("name", ["cplvm_full", "cplvm_global_null", "cplvm_geneset_null",
                                  "cglvm_full", "cglvm_geneset_null"])
def test_elbo_gradient_matches_finite_differences(name):
    pair = small_pair(seed=2, p=10, n=8, m=8)
    spec = SPECS[name].with_size_priors(pair)
    state = random_state(spec, pair, seed=1, scale=0.2)
    if spec.family == "cglvm":
        for b in ("Zb", "Zf", "T", "S", "W"):
            if b in state.loc:
                state.loc[b] *= 0.3
    noise = draw_noise(state, np.random.default_rng(5))
    assert fd_check(state, CountData(pair), spec, noise) < 1e-4


def test_reparam_and_log_q_against_scipy():
    from scipy import stats

    pair = small_pair(p=4, n=3, m=3)
    spec = SPECS["cplvm_full"].with_size_priors(pair)
    state = random_state(spec, pair)
    noise = draw_noise(state, np.random.default_rng(0))
    params, logs = reparam_sample(state, noise)
    expected = 0.0
    for name, loc in state.loc.items():
        sd = np.exp(state.log_scale[name])
        expected += stats.lognorm.logpdf(params[name], s=sd, scale=np.exp(loc)).sum()
        np.testing.assert_allclose(np.log(params[name]), logs[name], rtol=1e-12)
    assert log_q(state, noise) == pytest.approx(expected, rel=1e-10)


def test_posterior_mean_monte_carlo():
    pair = small_pair(p=4, n=3, m=3)
    for name in ("cplvm_full", "cglvm_full"):
        spec = SPECS[name].with_size_priors(pair)
        state = random_state(spec, pair)
        means = posterior_mean(state)
        rng = np.random.default_rng(8)
        draws = [reparam_sample(state, draw_noise(state, rng))[0] for _ in range(20000)]
        for block in ("S", "alpha_b"):
            mc = np.mean([d[block] for d in draws], axis=0)
            sd = np.std([d[block] for d in draws], axis=0) / math.sqrt(len(draws))
            assert np.all(np.abs(mc - means[block]) < 5 * sd + 1e-12)


def test_elbo_estimate_stderr_scales():
    pair = small_pair()
    spec = SPECS["cplvm_full"].with_size_priors(pair)
    state = random_state(spec, pair)
    data = CountData(pair)
    m1, s1 = elbo_estimate(state, data, spec, n_samples=100, seed=3)
    m2, s2 = elbo_estimate(state, data, spec, n_samples=400, seed=3)
    assert s2 == pytest.approx(s1 / 2, rel=0.35)
    assert abs(m1 - m2) < 4 * math.hypot(s1, s2)
    assert elbo_estimate(state, data, spec, 50, seed=9) == elbo_estimate(state, data, spec, 50, seed=9)
    with pytest.raises(ValueError):
        elbo_estimate(state, data, spec, 0)


def test_adam_matches_reference_update():
    x = {"a": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.4])
    opt.step(x, {"a": g1})
    # first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(x["a"], [1.1, -2.1], rtol=1e-6)
    x1 = np.array([1.0, -2.0]) + 0.1 * g1 / (np.abs(g1) + 1e-8)
    np.testing.assert_allclose(x["a"], x1, rtol=1e-14)
    opt.step(x, {"a": g2})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(x["a"], x1 + step, rtol=1e-12)


def test_adam_ascends_quadratic():
    x = {"a": np.array([3.0])}
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(x, {"a": -2.0 * (x["a"] - 1.0)})
    assert x["a"][0] == pytest.approx(1.0, abs=1e-2)


def test_fit_deterministic_and_improves():
    pair = small_pair(seed=4)
    spec = ModelSpec(k1=2, k2=2)
    cfg = FitConfig(steps=400, final_elbo_samples=100, seed=3)
    a, b = fit(pair, spec, cfg), fit(pair, spec, cfg)
    np.testing.assert_array_equal(a.elbo_trace, b.elbo_trace)
    assert a.final_elbo == b.final_elbo
    assert a.elbo_trace[-50:].mean() > a.elbo_trace[:50].mean()
    init = init_state(spec.with_size_priors(pair), pair, cfg.seed)
    start, _ = elbo_estimate(init, pair, spec.with_size_priors(pair), 100, seed=3)
    assert a.final_elbo > start
    c = fit(pair, spec, FitConfig(steps=400, final_elbo_samples=100, seed=4))
    assert c.final_elbo != a.final_elbo


def test_fit_result_serializes_full_w():
    pair = small_pair(seed=4)
    spec = SPECS["cplvm_geneset_null"]
    res = fit(pair, spec, FitConfig(steps=20, final_elbo_samples=5))
    d = res.to_dict()
    W = np.array(d["posterior_means"]["W"])
    assert W.shape == (2, pair.p)
    assert np.all(W[:, list(spec.mask.member_rows)] == 0)
    state = VariationalState.from_dict(d["state"])
    assert state.n_params() == res.state.n_params() > 0


def test_convergence_flag_and_early_stop():
    pair = small_pair(seed=4)
    spec = ModelSpec(k1=1, k2=1)
    loose = FitConfig(steps=1000, final_elbo_samples=5, convergence_tol=1e9, convergence_window=50)
    res = fit(pair, spec, loose)
    assert res.converged and res.converged_step == 100 and len(res.elbo_trace) == 1000
    stop = fit(pair, spec, FitConfig(steps=1000, final_elbo_samples=5, convergence_tol=1e9,
                                     convergence_window=50, early_stop=True))
    assert len(stop.elbo_trace) == 100
    strict = fit(pair, spec, FitConfig(steps=200, final_elbo_samples=5, convergence_tol=0.0))
    assert strict.converged in (True, False)


def test_numerical_abort():
    pair = small_pair(seed=4)
    with pytest.raises(NumericalAbort) as info:
        fit(pair, ModelSpec(k1=2, k2=2), FitConfig(steps=200, learning_rate=1e6, final_elbo_samples=5))
    diag = info.value.to_dict()
    assert "step" in diag and diag["step"] is not None


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(steps=0)
    with pytest.raises(ValueError):
        FitConfig(learning_rate=-1)


def test_rng_streams_independent():
    assert _rng(1, 0).standard_normal() != _rng(1, 1).standard_normal()
