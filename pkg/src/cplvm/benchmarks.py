"""Benchmark runners over the simulated scenarios.

Each runner generates its datasets from a single seed, fits the models it
needs, and returns plain tables (lists of dicts) that :func:`write_table`
serializes deterministically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cplvm.baselines import cai_statistic, cpca, pca
from cplvm.counts import ContrastivePair
from cplvm.hypothesis import (
    EbfResult,
    RocCurve,
    calibrate_tau,
    geneset_tests,
    global_test,
    random_gene_sets,
    replicate_seeds,
    roc,
    run_jobs,
)
from cplvm.inference import FitConfig, fit
from cplvm.model import ModelSpec
from cplvm.simulation import (
    SIM_SPEC,
    _sim_seed,
    generate_geneset_suite,
    generate_global_suite,
    generate_heterogeneous,
    generate_model_dataset,
    generate_roc_suite,
    latent_recovery_distance,
    silhouette,
)


def write_table(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> None:
    """CSV with LF line endings and ``repr`` floats, so reruns are byte-identical."""
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c]
                        for c in columns])


def _log1p(A: np.ndarray) -> np.ndarray:
    return np.log1p(np.asarray(A, dtype=float))


# -- global calibration ------------------------------------------------------


def global_calibration(p: int = 100, n_datasets: int = 10, n: int = 200, m: int = 200, seed: int = 0,
                       config: FitConfig = FitConfig(), replicates: int = 1, spec: ModelSpec = SIM_SPEC,
                       workers: int = 1) -> dict[str, list[EbfResult]]:
    """Global EBFs on perturbed, unperturbed-null and shuffled datasets."""
    suite = generate_global_suite(p, n_datasets, n, m, seed, spec)
    return {
        kind: [global_test(ds.pair, spec, config, replicates, label=f"{kind}_{i}", workers=workers)
               for i, ds in enumerate(datasets)]
        for kind, datasets in suite.items()
    }


def calibration_rows(results: dict[str, list[EbfResult]]) -> list[dict]:
    return [{"dataset": kind, "index": i, "ebf": r.ebf, "elbo_alt": r.elbo_alt, "elbo_null": r.elbo_null}
            for kind, lst in results.items() for i, r in enumerate(lst)]


# -- ROC ---------------------------------------------------------------------


@dataclass
class RocBenchmark:
    p: int
    cplvm: RocCurve
    cai: RocCurve
    scores: list[dict] = field(default_factory=list)


def roc_benchmark(p_values: Sequence[int] = (10, 100), n_datasets: int = 20, seed: int = 0,
                  config: FitConfig = FitConfig(), replicates: int = 1, n: int = 200, m: int = 200,
                  spec: ModelSpec = SIM_SPEC, workers: int = 1) -> list[RocBenchmark]:
    """CPLVM global EBF against Cai's ``M_n`` on alternative vs shuffled datasets.

    Both methods are scored continuously, so each ROC sweeps its own
    statistic. Cai's test runs on the raw counts.
    """
    out = []
    for p in p_values:
        suite = generate_roc_suite([p], n_datasets, seed, n, m, spec)
        rows = []
        for i, ds in enumerate(suite):
            res = global_test(ds.pair, spec, config, replicates, label=f"p{p}_{i}", workers=workers)
            m_n, _, _ = cai_statistic(ds.pair.Y, ds.pair.X)
            rows.append({"p": p, "index": i // 2, "truth": ds.truth, "ebf": res.ebf, "cai_m_n": m_n})
        alt = [r for r in rows if r["truth"] == "alternative"]
        null = [r for r in rows if r["truth"] == "null"]
        out.append(RocBenchmark(
            p,
            roc([r["ebf"] for r in alt], [r["ebf"] for r in null]),
            roc([r["cai_m_n"] for r in alt], [r["cai_m_n"] for r in null]),
            rows,
        ))
    return out


# -- gene sets ---------------------------------------------------------------


@dataclass
class GenesetBenchmark:
    perturbed_set: str
    set_ebfs: dict[str, EbfResult]
    shuffled_ebfs: list[EbfResult]
    tau95: float

    def rows(self) -> list[dict]:
        rows = [{"kind": "set", "label": k, "ebf": r.ebf, "spread": r.replicate_spread}
                for k, r in self.set_ebfs.items()]
        rows += [{"kind": "shuffled", "label": r.label, "ebf": r.ebf, "spread": r.replicate_spread}
                 for r in self.shuffled_ebfs]
        return rows


def geneset_benchmark(seed: int = 0, p: int = 500, n_sets: int = 10, set_size: int = 25,
                      n_signal: int | None = None, n_shuffled: int = 20, n: int = 200, m: int = 200,
                      config: FitConfig = FitConfig(), replicates: int = 3, spec: ModelSpec = SIM_SPEC,
                      workers: int = 1) -> GenesetBenchmark:
    """Gene-set EBFs for every set plus shuffled-null sets drawn from the in-set genes.

    All nulls share the same alternative fits.
    """
    ds, coll, perturbed = generate_geneset_suite(seed, p, n_sets, set_size, n_signal, n, m, spec)
    gene_index = {g: i for i, g in enumerate(ds.pair.gene_ids)}
    named = {name: [gene_index[g] for g in genes] for name, genes in coll.sets.items()}
    universe = sorted({r for rows in named.values() for r in rows})
    shuffled = random_gene_sets(universe, set_size, n_shuffled, seed=_sim_seed(seed, 13)) if n_shuffled else {}
    results = geneset_tests(ds.pair, spec, {**named, **shuffled}, config, replicates, workers)
    sets = {k: results[k] for k in named}
    null = [results[k] for k in shuffled]
    tau = calibrate_tau([r.ebf for r in null], 95.0) if null else math.nan
    return GenesetBenchmark(perturbed, sets, null, tau)


def set_size_sweep(sizes: Sequence[int] = (1, 5, 10, 15, 20, 25), seed: int = 0, p: int = 500,
                   n: int = 200, m: int = 200, config: FitConfig = FitConfig(), replicates: int = 3,
                   spec: ModelSpec = SIM_SPEC, workers: int = 1) -> list[dict]:
    """Perturbed-set EBF as the gene-set size varies."""
    rows = []
    for size in sizes:
        res = geneset_benchmark(seed, p, 10, size, None, 0, n, m, config, replicates, spec, workers)
        r = res.set_ebfs[res.perturbed_set]
        rows.append({"set_size": size, "ebf": r.ebf, "spread": r.replicate_spread})
    return rows


# -- latent dimension --------------------------------------------------------


def latent_dim_sweep(pair: ContrastivePair, k_values: Sequence[int], config: FitConfig = FitConfig(),
                     repeats: int = 3, family: str = "cplvm", workers: int = 1) -> list[dict]:
    """Final ELBO of ``k1 = k2 = k`` fits, averaged over ``repeats`` fit seeds."""
    seeds = replicate_seeds(config, repeats)
    jobs = [(fit, (pair, ModelSpec(family=family, k1=k, k2=k), replace(config, seed=s)), {})
            for k in k_values for s in seeds]
    fits = run_jobs(jobs, workers)
    rows = []
    for i, k in enumerate(k_values):
        elbos = np.array([f.final_elbo for f in fits[i * repeats:(i + 1) * repeats]])
        stderr = float(elbos.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else 0.0
        rows.append({"k": k, "mean_elbo": float(elbos.mean()), "stderr": stderr})
    return rows


def dimsweep_benchmark(true_k: int = 5, k_values: Sequence[int] = (1, 3, 5, 7, 9), p: int = 100,
                       n: int = 200, m: int = 200, seed: int = 0, config: FitConfig = FitConfig(),
                       repeats: int = 3, workers: int = 1) -> list[dict]:
    """Sweep on one dataset drawn with ``k1 = k2 = true_k``."""
    spec = ModelSpec(family="cplvm", k1=true_k, k2=true_k)
    ds = generate_model_dataset(spec, p, n, m, _sim_seed(seed, p, true_k, 17), "alternative", "dimsweep")
    return latent_dim_sweep(ds.pair, k_values, config, repeats, workers=workers)


# -- clustering and latent recovery ------------------------------------------


def _cluster_repeat(r: int, p: int, n: int, m: int, seed: int, config: FitConfig) -> dict:
    ds = generate_heterogeneous(p, n, m, _sim_seed(seed, r, 19))
    Yl, Xl = _log1p(ds.pair.Y), _log1p(ds.pair.X)
    labels = ds.subgroup_labels
    k = ds.true_latents["T"].shape[0]
    k1 = ds.true_latents["Zb"].shape[0]
    cp = fit(ds.pair, ModelSpec(family="cplvm", k1=k1, k2=k), config)
    cg = fit(ds.pair, ModelSpec(family="cglvm", k1=k1, k2=k), config)
    _, fg_pca = pca(Xl, k)
    _, fg_cpca = cpca(Yl, Xl, k)
    _, bg_pca = pca(Yl, k1)
    comps_b, _ = cpca(Yl, Xl, k1)
    bg_cpca = comps_b @ (Yl - Yl.mean(axis=1, keepdims=True))
    true_zb = ds.true_latents["Zb"].T
    return {
        "repeat": r,
        "silhouette_pca": silhouette(fg_pca.T, labels),
        "silhouette_cpca": silhouette(fg_cpca.T, labels),
        "silhouette_cplvm": silhouette(cp.posterior_means["T"].T, labels),
        "recovery_pca": latent_recovery_distance(bg_pca.T, true_zb),
        "recovery_cpca": latent_recovery_distance(bg_cpca.T, true_zb),
        "recovery_cglvm": latent_recovery_distance(cg.posterior_means["Zb"].T, true_zb),
        "recovery_cplvm": latent_recovery_distance(cp.posterior_means["Zb"].T, true_zb),
    }


def cluster_benchmark(n_repeats: int = 10, p: int = 100, n: int = 200, m: int = 200, seed: int = 0,
                      config: FitConfig = FitConfig(), workers: int = 1) -> list[dict]:
    """Silhouette of foreground latents and background latent-recovery distances.

    Runs on :func:`generate_heterogeneous` data. PCA and CPCA act on
    ``log1p`` counts with two components; CPLVM uses the posterior mean of
    ``T`` for clustering and of ``Zb`` for recovery.
    """
    jobs = [(_cluster_repeat, (r, p, n, m, seed, config), {}) for r in range(n_repeats)]
    return run_jobs(jobs, workers)


def write_roc(bench: RocBenchmark, out_dir) -> list[Path]:
    """One ROC file per ``p`` holding both methods, with an AUC footer row per method."""
    out = Path(out_dir)
    path = out / f"roc_p{bench.p}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tau", "tpr", "fpr"])
        curves = (("cplvm", bench.cplvm), ("cai", bench.cai))
        for name, curve in curves:
            for row in zip(curve.thresholds, curve.tpr, curve.fpr):
                w.writerow([name] + [repr(float(x)) for x in row])
        for name, curve in curves:
            w.writerow(["auc", name, repr(float(curve.auc)), ""])
    scores = out / f"scores_p{bench.p}.csv"
    write_table(bench.scores, scores)
    return [path, scores]
