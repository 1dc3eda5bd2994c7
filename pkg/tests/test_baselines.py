import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from cplvm.baselines import cai_statistic, cai_test, cpca, gumbel_quantile, pca, poisson_glm_de, write_glm_csv
from cplvm.counts import ContrastivePair

from oracles import cai_loop, glm_newton


# -- Poisson GLM -------------------------------------------------------------


def test_glm_hand_instance():
    # libraries: bg cells 10, 10; fg cells 20, 20 -> s = median = 15
    Y = np.array([[2, 3], [8, 7]])
    X = np.array([[10, 6], [10, 14]])
    res = poisson_glm_de(ContrastivePair.from_arrays(Y, X))
    off_b, off_f = 20 / 15, 40 / 15
    assert res[0].beta0 == pytest.approx(math.log(5 / off_b))
    assert res[0].beta1 == pytest.approx(math.log(16 / off_f) - math.log(5 / off_b))
    assert res[0].wald_z == pytest.approx(res[0].beta1 / math.sqrt(1 / 5 + 1 / 16))


def test_glm_newton_oracle():
    rng = np.random.default_rng(0)
    Y = rng.poisson(4.0, (6, 12)) + 1
    X = rng.poisson(6.0, (6, 9)) + 1
    pair = ContrastivePair.from_arrays(Y, X)
    s = 30.0
    res = poisson_glm_de(pair, s=s)
    off_b, off_f = Y.sum(axis=0) / s, X.sum(axis=0) / s
    for g in range(6):
        b, se = glm_newton(Y[g], X[g], off_b, off_f)
        assert res[g].beta0 == pytest.approx(b[0], rel=1e-10, abs=1e-10)
        assert res[g].beta1 == pytest.approx(b[1], rel=1e-10, abs=1e-10)
        assert res[g].wald_z == pytest.approx(b[1] / se, rel=1e-8)


def test_glm_zero_groups():
    Y = np.array([[0, 0], [1, 2], [0, 0]])
    X = np.array([[3, 1], [2, 2], [0, 0]])
    res = poisson_glm_de(ContrastivePair.from_arrays(Y + np.array([[0], [0], [0]]), X), s=1.0)
    assert res[0].flag == "zero_group" and res[0].p_value == 1.0 and res[0].beta1 == math.inf
    assert res[2].flag == "undefined"
    assert res[1].flag == "" and 0 <= res[1].p_value <= 1


def test_glm_csv(tmp_path):
    pair = ContrastivePair.from_arrays(np.array([[1, 2]]), np.array([[3, 4]]))
    write_glm_csv(poisson_glm_de(pair), pair.gene_ids, tmp_path / "glm.csv")
    lines = (tmp_path / "glm.csv").read_text().splitlines()
    assert lines[0] == "gene,beta0,beta1,z,p,flag" and len(lines) == 2


# -- Cai ---------------------------------------------------------------------


def test_gumbel_quantile_root_finding():
    def cdf(x):
        return math.exp(-math.exp(-x / 2) / math.sqrt(8 * math.pi))

    q = brentq(lambda x: cdf(x) - 0.95, -10, 50, xtol=1e-14)
    assert gumbel_quantile(0.05) == pytest.approx(q, abs=1e-10)
    assert gumbel_quantile(0.05) == pytest.approx(2.716, abs=1e-3)
    with pytest.raises(ValueError):
        gumbel_quantile(1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cai_statistic_matches_loops(seed):
    rng = np.random.default_rng(seed)
    bg = rng.poisson(3.0, (5, 12)).astype(float)
    fg = rng.poisson(3.0, (5, 9)).astype(float)
    fg[1] += fg[0]
    m_n, (k, l), _ = cai_statistic(bg, fg)
    assert m_n == pytest.approx(cai_loop(bg, fg), rel=1e-10)
    assert k <= l


def test_cai_identical_inputs_zero():
    rng = np.random.default_rng(0)
    A = rng.poisson(5.0, (4, 30)).astype(float)
    m_n, _, _ = cai_statistic(A, A.copy())
    assert m_n == 0.0


def test_cai_threshold_and_decision():
    rng = np.random.default_rng(3)
    bg = rng.normal(size=(10, 200))
    fg = rng.normal(size=(10, 200))
    fg[0] = fg[1] * 0.9 + 0.1 * fg[0]
    res = cai_test(bg, fg)
    assert res.threshold == pytest.approx(gumbel_quantile(0.05) + 4 * math.log(10) - math.log(math.log(10)))
    assert res.reject and set(res.argmax_pair) <= {0, 1}
    with pytest.raises(ValueError):
        cai_test(bg[:2], fg[:2])


def test_cai_zero_variance_pairs_skipped():
    bg = np.vstack([np.ones(10), np.arange(10.0), np.arange(10.0) ** 2])
    fg = np.vstack([np.ones(8), np.arange(8.0), np.arange(8.0) % 3])
    m_n, _, skipped = cai_statistic(bg, fg)
    assert skipped >= 1 and math.isfinite(m_n)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cai_feature_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    bg = rng.poisson(4.0, (5, 15)).astype(float)
    fg = rng.poisson(4.0, (5, 11)).astype(float)
    perm = rng.permutation(5)
    a, _, _ = cai_statistic(bg, fg)
    b, _, _ = cai_statistic(bg[perm], fg[perm])
    assert a == pytest.approx(b, rel=1e-10)


def test_cai_log1p_flag():
    rng = np.random.default_rng(0)
    bg = rng.poisson(4.0, (4, 20))
    fg = rng.poisson(4.0, (4, 20))
    assert cai_test(bg, fg, log1p=True).m_n == pytest.approx(cai_statistic(np.log1p(bg), np.log1p(fg))[0])


# -- PCA / CPCA --------------------------------------------------------------


def test_pca_recovers_dominant_axis():
    rng = np.random.default_rng(0)
    t = rng.normal(size=500)
    A = np.vstack([3 * t, 3 * t, 0.1 * rng.normal(size=500)])
    comps, scores = pca(A, 1)
    np.testing.assert_allclose(np.abs(comps[0]), [1 / math.sqrt(2), 1 / math.sqrt(2), 0], atol=0.01)
    assert comps[0][np.argmax(np.abs(comps[0]))] > 0
    assert scores.shape == (1, 500)


def test_pca_orthonormal_and_svd():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 40)) * np.arange(1, 7)[:, None]
    comps, _ = pca(A, 3)
    np.testing.assert_allclose(comps @ comps.T, np.eye(3), atol=1e-10)
    C = A - A.mean(axis=1, keepdims=True)
    u, _, _ = np.linalg.svd(C, full_matrices=False)
    for i in range(3):
        assert abs(abs(comps[i] @ u[:, i]) - 1) < 1e-8


def test_cpca_finds_foreground_direction():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(2, 400)) * np.array([[5.0], [5.0]])
    bg = np.vstack([base[0], base[0] + 0.1 * rng.normal(size=400)])
    shared = rng.normal(size=400) * 5
    contrast = rng.normal(size=400) * 2
    fg = np.vstack([shared + contrast, shared - contrast])
    comps, scores = cpca(bg, fg, 1)
    assert abs(abs(comps[0] @ np.array([1, -1]) / math.sqrt(2)) - 1) < 0.05
    pooled, _ = pca(np.hstack([bg, fg]), 1)
    assert abs(pooled[0] @ np.array([1, -1]) / math.sqrt(2)) < 0.2
    c0, _ = cpca(bg, fg, 2, gamma=0.0)
    p0, _ = pca(fg, 2)
    np.testing.assert_allclose(c0, p0, atol=1e-8)
    with pytest.raises(ValueError):
        cpca(bg, fg, 1, gamma=-1)
