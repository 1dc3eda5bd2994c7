"""Closed-form comparison methods.

* per-gene two-group Poisson GLM with library-size offsets,
* the max-type two-sample covariance test of Cai, Liu and Xia (2013),
* PCA and contrastive PCA projections.

All matrices are genes (features) x cells (samples).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from cplvm.counts import ContrastivePair


@dataclass(frozen=True)
class GlmGeneResult:
    beta0: float
    beta1: float
    wald_z: float
    p_value: float
    flag: str = ""


def poisson_glm_de(pair: ContrastivePair, s: float | None = None) -> list[GlmGeneResult]:
    """Per-gene Poisson GLM with a condition indicator and offsets log(n_i / s).

    The two-group design has a closed-form MLE, so no iterations are needed.
    ``s`` defaults to the median library size over all cells. Genes with a
    zero total in one condition get an infinite ``beta1`` and ``p_value = 1``
    with ``flag="zero_group"``; genes absent from both get ``flag="undefined"``.
    """
    Y, X = pair.Y.astype(float), pair.X.astype(float)
    lib_b, lib_f = Y.sum(axis=0), X.sum(axis=0)
    if lib_b.max() <= 0 or lib_f.max() <= 0:
        raise ValueError("each condition needs at least one cell with positive total")
    if s is None:
        s = float(np.median(np.concatenate([lib_b, lib_f])))
    if s <= 0:
        raise ValueError("s must be positive")
    off_b, off_f = lib_b.sum() / s, lib_f.sum() / s
    results = []
    for yb, xf in zip(Y.sum(axis=1), X.sum(axis=1)):
        if yb == 0 and xf == 0:
            results.append(GlmGeneResult(-math.inf, math.nan, math.nan, 1.0, "undefined"))
            continue
        beta0 = math.log(yb / off_b) if yb > 0 else -math.inf
        if yb == 0 or xf == 0:
            results.append(GlmGeneResult(beta0, math.inf if yb == 0 else -math.inf,
                                         math.nan, 1.0, "zero_group"))
            continue
        beta1 = math.log(xf / off_f) - beta0
        z = beta1 / math.sqrt(1.0 / yb + 1.0 / xf)
        results.append(GlmGeneResult(beta0, beta1, z, float(2.0 * norm.sf(abs(z)))))
    return results


def write_glm_csv(results: list[GlmGeneResult], gene_ids, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", "beta0", "beta1", "z", "p", "flag"])
        for g, r in zip(gene_ids, results):
            w.writerow([g, repr(r.beta0), repr(r.beta1), repr(r.wald_z), repr(r.p_value), r.flag])


@dataclass(frozen=True)
class CaiTestResult:
    m_n: float
    argmax_pair: tuple[int, int]
    threshold: float
    reject: bool
    alpha: float
    skipped_pairs: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["argmax_pair"] = list(self.argmax_pair)
        return d


def gumbel_quantile(alpha: float) -> float:
    """1 - alpha quantile of F(x) = exp(-exp(-x/2) / sqrt(8 pi))."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return -2.0 * math.log(-math.sqrt(8.0 * math.pi) * math.log1p(-alpha))


def _cov_and_theta(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    N = A.shape[1]
    C = A - A.mean(axis=1, keepdims=True)
    sigma = C @ C.T / N
    C2 = C * C
    theta = C2 @ C2.T / N - sigma * sigma
    return sigma, np.maximum(theta, 0.0)


def cai_statistic(background: np.ndarray, foreground: np.ndarray) -> tuple[float, tuple[int, int], int]:
    """Max standardized squared covariance difference over k <= l.

    Returns ``(M_n, argmax pair, number of pairs skipped for zero variance)``.
    """
    Yb = np.asarray(background, dtype=float)
    Xf = np.asarray(foreground, dtype=float)
    if Yb.shape[0] != Xf.shape[0]:
        raise ValueError("background and foreground need the same features")
    n_b, n_f = Yb.shape[1], Xf.shape[1]
    if n_b < 2 or n_f < 2:
        raise ValueError("need at least two samples per condition")
    sig_b, th_b = _cov_and_theta(Yb)
    sig_f, th_f = _cov_and_theta(Xf)
    denom = th_f / n_f + th_b / n_b
    iu = np.triu_indices(Yb.shape[0])
    num = (sig_f - sig_b)[iu] ** 2
    den = denom[iu]
    ok = den > 0
    if not ok.any():
        return 0.0, (0, 0), int(den.size)
    stat = np.full(num.shape, -np.inf)
    stat[ok] = num[ok] / den[ok]
    best = int(np.argmax(stat))
    return float(stat[best]), (int(iu[0][best]), int(iu[1][best])), int((~ok).sum())


def cai_test(background: np.ndarray, foreground: np.ndarray, alpha: float = 0.05,
             log1p: bool = False) -> CaiTestResult:
    """Two-sample covariance equality test with a Gumbel-law threshold.

    Rejects when ``M_n >= q_alpha + 4 log p - log log p``; ``p`` must exceed
    e so that ``log log p`` is defined.
    """
    Yb = np.asarray(background, dtype=float)
    Xf = np.asarray(foreground, dtype=float)
    if log1p:
        Yb, Xf = np.log1p(Yb), np.log1p(Xf)
    p = Yb.shape[0]
    if p < 3:
        raise ValueError("cai_test needs p >= 3")
    m_n, pair, skipped = cai_statistic(Yb, Xf)
    threshold = gumbel_quantile(alpha) + 4.0 * math.log(p) - math.log(math.log(p))
    return CaiTestResult(m_n, pair, threshold, bool(m_n >= threshold), alpha, skipped)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(vecs.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def _top_eigvecs(C: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1][:k]
    return vals[order], _fix_signs(vecs[:, order].T)


def _covariance(A: np.ndarray) -> np.ndarray:
    C = A - A.mean(axis=1, keepdims=True)
    return C @ C.T / A.shape[1]


def pca(matrix: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` principal axes of a features x samples matrix.

    Returns ``(components, scores)`` with components ``k x p`` (unit rows)
    and scores ``k x N`` of the centered data.
    """
    A = np.asarray(matrix, dtype=float)
    p, N = A.shape
    if not 1 <= k <= min(p, N):
        raise ValueError(f"k={k} out of range for a {p}x{N} matrix")
    _, comps = _top_eigvecs(_covariance(A), k)
    scores = comps @ (A - A.mean(axis=1, keepdims=True))
    return comps, scores


def cpca(background: np.ndarray, foreground: np.ndarray, k: int, gamma: float = 1.0
         ) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenvectors of cov(foreground) - gamma * cov(background).

    Returns ``(components, foreground_scores)``.
    """
    Yb = np.asarray(background, dtype=float)
    Xf = np.asarray(foreground, dtype=float)
    p = Xf.shape[0]
    if not 1 <= k <= p:
        raise ValueError(f"k={k} out of range for p={p}")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    C = _covariance(Xf) - gamma * _covariance(Yb)
    _, comps = _top_eigvecs(C, k)
    return comps, comps @ (Xf - Xf.mean(axis=1, keepdims=True))
