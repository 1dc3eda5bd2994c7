"""Synthetic scenarios and evaluation metrics.

Scenarios: the two-feature Gaussian-copula Poisson toy, the heterogeneous
foreground response, global-test suites (perturbed / unperturbed null /
shuffled), and the gene-set suite. Metrics: silhouette score and a
latent-recovery distance between pairwise-distance distributions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import norm, poisson

from cplvm.counts import ContrastivePair, CountMatrix, GeneSetCollection, save_counts, shuffle_conditions
from cplvm.model import GeneSetMask, ModelSpec, Params, apply_variant, sample_generative

INV_CDF_TAIL = 1e-12


@dataclass(frozen=True)
class CopulaSpec:
    """Two-condition copula-Poisson toy; defaults follow the two-subgroup example."""

    sigma: tuple[tuple[float, ...], ...] = ((2.7, 2.6), (2.6, 2.7))
    lam: float = 10.0
    n: int = 200
    m: int = 200
    background_shift: tuple[int, ...] = (4, 4)
    foreground_subgroup_shifts: tuple[tuple[int, ...], ...] = ((8, 0), (0, 8))
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "sigma": [list(r) for r in self.sigma], "lam": self.lam, "n": self.n, "m": self.m,
            "background_shift": list(self.background_shift),
            "foreground_subgroup_shifts": [list(s) for s in self.foreground_subgroup_shifts],
            "seed": self.seed,
        }


@dataclass
class LabeledDataset:
    pair: ContrastivePair
    truth: str
    subgroup_labels: np.ndarray | None = None
    true_latents: Params | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.truth not in ("alternative", "null"):
            raise ValueError(f"truth must be 'alternative' or 'null', got {self.truth!r}")
        if self.subgroup_labels is not None and len(self.subgroup_labels) != self.pair.m:
            raise ValueError("subgroup labels must cover every foreground cell")

    def write(self, out_dir, stem: str) -> list[Path]:
        """Write background/foreground CSVs plus a JSON provenance sidecar."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}_background.csv", out / f"{stem}_foreground.csv", out / f"{stem}.json"]
        save_counts(self.pair.background, paths[0])
        save_counts(self.pair.foreground, paths[1])
        meta = {
            "truth": self.truth,
            "provenance": self.provenance,
            "subgroup_labels": None if self.subgroup_labels is None else np.asarray(self.subgroup_labels).tolist(),
        }
        with open(paths[2], "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return paths


# -- copula toy --------------------------------------------------------------


def poisson_inverse_cdf(u: np.ndarray, lam: float) -> np.ndarray:
    """Smallest k with Poisson(lam) CDF >= u, by direct summation of the table."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    kmax = int(lam + 50.0 * math.sqrt(lam) + 50)
    cdf = poisson.cdf(np.arange(kmax + 1), lam)
    cut = int(np.searchsorted(cdf, 1.0 - INV_CDF_TAIL)) + 1
    cdf = cdf[:cut]
    return np.minimum(np.searchsorted(cdf, np.asarray(u), side="left"), cut - 1)


def copula_poisson(spec: CopulaSpec = CopulaSpec()) -> LabeledDataset:
    """Correlated Poisson counts through a Gaussian copula, then integer shifts.

    Foreground cells are split into equal consecutive subgroups (the first
    gets the extra cell when ``m`` is odd), one per subgroup shift.
    """
    sigma = np.asarray(spec.sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1] or not np.allclose(sigma, sigma.T):
        raise ValueError("sigma must be a symmetric square matrix")
    if np.linalg.eigvalsh(sigma).min() < -1e-10:
        raise ValueError("sigma must be positive semidefinite")
    d = sigma.shape[0]
    rng = np.random.default_rng(spec.seed)
    z = rng.multivariate_normal(np.zeros(d), sigma, size=spec.n + spec.m, method="eigh")
    counts = poisson_inverse_cdf(norm.cdf(z), spec.lam).T
    bg = counts[:, : spec.n] + np.asarray(spec.background_shift, dtype=int)[:, None]
    fg = counts[:, spec.n:].copy()
    groups = len(spec.foreground_subgroup_shifts)
    labels = np.repeat(np.arange(groups), [len(a) for a in np.array_split(np.arange(spec.m), groups)])
    for g, shift in enumerate(spec.foreground_subgroup_shifts):
        fg[:, labels == g] += np.asarray(shift, dtype=int)[:, None]
    if bg.min() < 0 or fg.min() < 0:
        raise ValueError("shifts produced negative counts")
    return LabeledDataset(
        ContrastivePair.from_arrays(bg, fg), "alternative", labels,
        provenance={"scenario": "copula", "spec": spec.to_dict()},
    )


# -- model-based scenarios ---------------------------------------------------

SIM_SPEC = ModelSpec(family="cplvm", k1=2, k2=2)


def generate_heterogeneous(p: int = 100, n: int = 200, m: int = 200, seed: int = 0,
                           k1: int = 2, low_rate: float = 0.01) -> LabeledDataset:
    """Two foreground subgroups with swapped foreground-specific latent scales.

    First half of the foreground: ``t1 ~ Gamma(1, 1)``, ``t2 ~ Gamma(1, low_rate)``;
    second half swapped (shape-rate, so ``low_rate = 0.01`` means mean 100).
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    spec = ModelSpec(family="cplvm", k1=k1, k2=2)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    half = (m + 1) // 2
    labels = np.r_[np.zeros(half, dtype=int), np.ones(m - half, dtype=int)]
    rates = np.where(labels == 0, 1.0, low_rate), np.where(labels == 0, low_rate, 1.0)
    T = np.vstack([rng.gamma(1.0, 1.0 / rates[0]), rng.gamma(1.0, 1.0 / rates[1])])
    pair, params = sample_generative(spec, p, n, m, seed, overrides={"T": T})
    pair, params, labels = drop_empty_cells(pair, params, labels)
    return LabeledDataset(
        pair, "alternative", labels, params,
        provenance={"scenario": "heterogeneous", "p": p, "n": n, "m": m, "seed": seed,
                    "spec": spec.to_dict(), "low_rate": low_rate},
    )


_BG_COLUMNS = ("Zb", "alpha_b")
_FG_COLUMNS = ("Zf", "T", "alpha_f")


def drop_empty_cells(pair: ContrastivePair, params: Params, labels: np.ndarray | None = None
                     ) -> tuple[ContrastivePair, Params, np.ndarray | None]:
    """Remove cells whose total count is zero, with their latent columns and labels.

    Such cells carry no information about the size factors and cannot be
    fitted; small ``p`` draws produce them occasionally.
    """
    keep_b = np.flatnonzero(pair.background.totals > 0)
    keep_f = np.flatnonzero(pair.foreground.totals > 0)
    if keep_b.size == pair.n and keep_f.size == pair.m:
        return pair, params, labels
    if keep_b.size == 0 or keep_f.size == 0:
        raise ValueError("every cell of a condition has zero total count")
    params = dict(params)
    for names, keep in ((_BG_COLUMNS, keep_b), (_FG_COLUMNS, keep_f)):
        for name in names:
            if name in params:
                params[name] = params[name][..., keep]
    pair = ContrastivePair(pair.background.subset_cells(keep_b.tolist()),
                           pair.foreground.subset_cells(keep_f.tolist()))
    return pair, params, None if labels is None else np.asarray(labels)[keep_f]


def _sim_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([abs(seed), *key]).generate_state(1)[0])


def generate_model_dataset(spec: ModelSpec, p: int, n: int, m: int, seed: int, truth: str,
                           scenario: str) -> LabeledDataset:
    pair, params, _ = drop_empty_cells(*sample_generative(spec, p, n, m, seed))
    return LabeledDataset(pair, truth, None, params,
                          provenance={"scenario": scenario, "p": p, "n": n, "m": m, "seed": seed,
                                      "spec": spec.to_dict()})


def shuffled_control(ds: LabeledDataset, seed: int) -> LabeledDataset:
    prov = dict(ds.provenance, scenario=ds.provenance.get("scenario", "") + "-shuffled",
                shuffle_seed=seed)
    return LabeledDataset(shuffle_conditions(ds.pair, seed), "null", None, None, prov)


def generate_global_suite(p: int = 100, n_datasets: int = 10, n: int = 200, m: int = 200,
                          seed: int = 0, spec: ModelSpec = SIM_SPEC) -> dict[str, list[LabeledDataset]]:
    """Perturbed (full model), unperturbed (global null) and shuffled-perturbed datasets."""
    null_spec = apply_variant(spec, "global_null")
    out: dict[str, list[LabeledDataset]] = {"perturbed": [], "unperturbed": [], "shuffled": []}
    for i in range(n_datasets):
        pert = generate_model_dataset(spec, p, n, m, _sim_seed(seed, p, i, 1), "alternative", "perturbed")
        out["perturbed"].append(pert)
        out["unperturbed"].append(
            generate_model_dataset(null_spec, p, n, m, _sim_seed(seed, p, i, 2), "null", "unperturbed"))
        out["shuffled"].append(shuffled_control(pert, _sim_seed(seed, p, i, 3)))
    return out


def generate_roc_suite(p_values: Sequence[int] = (10, 100), n_datasets: int = 20, seed: int = 0,
                       n: int = 200, m: int = 200, spec: ModelSpec = SIM_SPEC) -> list[LabeledDataset]:
    """Per ``p``: alternative draws from the full model, each followed by its shuffled control."""
    suite = []
    for p in p_values:
        for i in range(n_datasets):
            alt = generate_model_dataset(spec, p, n, m, _sim_seed(seed, p, i, 1), "alternative", "roc")
            suite.append(alt)
            suite.append(shuffled_control(alt, _sim_seed(seed, p, i, 3)))
    return suite


def generate_geneset_suite(seed: int = 0, p: int = 500, n_sets: int = 10, set_size: int = 25,
                           n_signal: int | None = None, n: int = 200, m: int = 200,
                           spec: ModelSpec = SIM_SPEC) -> tuple[LabeledDataset, GeneSetCollection, str]:
    """Gene-set scenario: only the first set's genes carry foreground-specific loadings.

    Sets are consecutive blocks of ``set_size`` rows starting at row 0; the
    remaining genes belong to no set. With ``n_signal < set_size`` only the
    first ``n_signal`` genes of the perturbed set carry signal.
    """
    if n_sets * set_size > p:
        raise ValueError("gene sets do not fit in p genes")
    n_signal = set_size if n_signal is None else n_signal
    if not 1 <= n_signal <= set_size:
        raise ValueError("n_signal must lie in [1, set_size]")
    signal = set(range(n_signal))
    gen_spec = apply_variant(spec, GeneSetMask(tuple(r for r in range(p) if r not in signal)))
    pair, params, _ = drop_empty_cells(*sample_generative(gen_spec, p, n, m, _sim_seed(seed, p, 5)))
    gene_ids = pair.gene_ids
    sets = {f"set{i + 1}": tuple(gene_ids[i * set_size:(i + 1) * set_size]) for i in range(n_sets)}
    ds = LabeledDataset(pair, "alternative", None, params, provenance={
        "scenario": "geneset", "p": p, "n_sets": n_sets, "set_size": set_size,
        "n_signal": n_signal, "n": n, "m": m, "seed": seed, "spec": gen_spec.to_dict()})
    return ds, GeneSetCollection(sets), "set1"


# -- metrics -----------------------------------------------------------------


def silhouette(points: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette with Euclidean distances; singleton clusters score 0."""
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    labels = np.asarray(labels)
    if P.shape[0] < 2 or len(labels) != P.shape[0]:
        raise ValueError("need >= 2 points with one label each")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = cdist(P, P)
    scores = np.zeros(P.shape[0])
    for i in range(P.shape[0]):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == other].mean() for other in uniq if other != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def latent_recovery_distance(est_latents: np.ndarray, true_latents: np.ndarray) -> float:
    """1-D Wasserstein-2 distance between mean-normalized pairwise distances.

    Rows are samples. Each set's pairwise Euclidean distances are divided by
    their mean, and the two resulting samples are compared through their
    sorted values (equal-size quantile matching).
    """
    A = np.asarray(est_latents, dtype=float)
    B = np.asarray(true_latents, dtype=float)
    A = A[:, None] if A.ndim == 1 else A
    B = B[:, None] if B.ndim == 1 else B
    if A.shape[0] != B.shape[0]:
        raise ValueError("both latent sets need the same number of samples")
    if A.shape[0] < 2:
        raise ValueError("need at least two samples")

    def normalized(M):
        d = pdist(M)
        mean = d.mean()
        return np.sort(d / mean) if mean > 0 else np.zeros_like(d)

    return float(np.sqrt(np.mean((normalized(A) - normalized(B)) ** 2)))
