"""ELBO-based Bayes factor (EBF) tests, empirical-null calibration and ROC."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from cplvm.counts import ContrastivePair, CountDataError, resolve_gene_set, shuffle_conditions
from cplvm.inference import FitConfig, FitResult, fit
from cplvm.model import GeneSetMask, ModelSpec, apply_variant


@dataclass
class EbfResult:
    """Paired alternative/null ELBOs for one test, over fit replicates."""

    elbo_alt: float
    elbo_null: float
    stderr_alt: float
    stderr_null: float
    ebf: float
    replicate_ebfs: list[float]
    label: str = ""
    replicate_elbo_alt: list[float] = field(default_factory=list)
    replicate_elbo_null: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def from_fits(cls, alt: Sequence[FitResult], null: Sequence[FitResult], label: str = "") -> "EbfResult":
        if len(alt) != len(null) or not alt:
            raise ValueError("need the same, nonzero number of alternative and null fits")
        ea = [f.final_elbo for f in alt]
        en = [f.final_elbo for f in null]
        r = len(alt)
        return cls(
            elbo_alt=float(np.mean(ea)),
            elbo_null=float(np.mean(en)),
            stderr_alt=float(math.sqrt(sum(f.final_elbo_stderr ** 2 for f in alt)) / r),
            stderr_null=float(math.sqrt(sum(f.final_elbo_stderr ** 2 for f in null)) / r),
            ebf=float(np.mean(ea) - np.mean(en)),
            replicate_ebfs=[a - b for a, b in zip(ea, en)],
            label=label,
            replicate_elbo_alt=ea,
            replicate_elbo_null=en,
            seeds=[f.config.seed for f in alt],
        )

    @property
    def replicate_spread(self) -> float:
        return float(np.std(self.replicate_ebfs, ddof=1)) if len(self.replicate_ebfs) > 1 else 0.0

    def swapped(self) -> "EbfResult":
        """The same fits with the null and alternative roles exchanged."""
        return EbfResult(
            self.elbo_null, self.elbo_alt, self.stderr_null, self.stderr_alt, -self.ebf,
            [-x for x in self.replicate_ebfs], self.label,
            list(self.replicate_elbo_null), list(self.replicate_elbo_alt), list(self.seeds),
        )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["replicate_spread"] = self.replicate_spread
        return d


@dataclass
class RocCurve:
    """ROC operating points over decreasing thresholds."""

    thresholds: list[float]
    tpr: list[float]
    fpr: list[float]
    auc: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "tpr", "fpr"])
        for row in zip(self.thresholds, self.tpr, self.fpr):
            w.writerow([repr(float(x)) for x in row])
        w.writerow(["auc", repr(float(self.auc)), ""])
        return buf.getvalue()


# -- scheduling --------------------------------------------------------------


def _call(job):
    fn, args, kwargs = job
    return fn(*args, **kwargs)


def run_jobs(jobs: Sequence[tuple[Callable, tuple, dict]], workers: int = 1) -> list:
    """Run independent jobs, optionally across processes, keeping input order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, jobs))


def replicate_seeds(config: FitConfig, replicates: int) -> list[int]:
    """Seed for each replicate; the null and alternative fits of a replicate share it."""
    return [config.seed + 1000 * r for r in range(replicates)]


# -- tests -------------------------------------------------------------------


def _fit_pairs(pair, specs_by_role: Sequence[ModelSpec], config: FitConfig, replicates: int,
               workers: int) -> list[list[FitResult]]:
    seeds = replicate_seeds(config, replicates)
    jobs = [(fit, (pair, spec, replace(config, seed=s)), {}) for spec in specs_by_role for s in seeds]
    results = run_jobs(jobs, workers)
    return [results[i * replicates:(i + 1) * replicates] for i in range(len(specs_by_role))]


def global_test(pair: ContrastivePair, spec: ModelSpec, config: FitConfig = FitConfig(),
                replicates: int = 5, label: str = "", workers: int = 1) -> EbfResult:
    """Full model against the model with no foreground-specific structure."""
    if spec.variant != "full":
        raise ValueError("global_test expects a full-model spec")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    alt, null = _fit_pairs(pair, [spec, apply_variant(spec, "global_null")], config, replicates, workers)
    return EbfResult.from_fits(alt, null, label)


def _resolve(pair: ContrastivePair, gene_set: Sequence) -> list[int]:
    items = list(gene_set)
    if not items:
        raise CountDataError("gene set is empty")
    if all(isinstance(g, str) for g in items):
        return resolve_gene_set(items, pair.gene_ids)
    rows = sorted({int(g) for g in items})
    bad = [r for r in rows if not 0 <= r < pair.p]
    if bad:
        raise CountDataError(f"gene-set rows out of range: {bad}")
    return rows


def geneset_tests(pair: ContrastivePair, spec: ModelSpec, gene_sets: Mapping[str, Sequence],
                  config: FitConfig = FitConfig(), replicates: int = 5,
                  workers: int = 1) -> dict[str, EbfResult]:
    """One EBF per named gene set; the alternative fits are shared across sets.

    Each set's null pins that set's rows of ``W`` to zero. Because fits are
    deterministic per seed, sharing the alternative fits gives the same
    numbers as calling :func:`geneset_test` set by set.
    """
    if spec.variant != "full":
        raise ValueError("geneset tests expect a full-model spec")
    resolved = {name: _resolve(pair, genes) for name, genes in gene_sets.items()}
    specs = [spec] + [apply_variant(spec, GeneSetMask(tuple(rows))) for rows in resolved.values()]
    groups = _fit_pairs(pair, specs, config, replicates, workers)
    alt = groups[0]
    return {name: EbfResult.from_fits(alt, null, name) for name, null in zip(resolved, groups[1:])}


def geneset_test(pair: ContrastivePair, spec: ModelSpec, gene_set: Sequence,
                 config: FitConfig = FitConfig(), replicates: int = 5, label: str = "",
                 workers: int = 1) -> EbfResult:
    """EBF for one gene set, given as row indices or gene ids."""
    return geneset_tests(pair, spec, {label: gene_set}, config, replicates, workers)[label]


def shuffled_null_global(pair: ContrastivePair, spec: ModelSpec, config: FitConfig = FitConfig(),
                         n_shuffles: int = 10, replicates: int = 5, seed: int = 0,
                         workers: int = 1) -> list[EbfResult]:
    """Global EBFs after randomly repartitioning cells between conditions."""
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be >= 1")
    return [
        global_test(shuffle_conditions(pair, seed=_shuffle_seed(seed, s)), spec, config,
                    replicates, label=f"shuffle_{s}", workers=workers)
        for s in range(n_shuffles)
    ]


def _shuffle_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([abs(seed), index, 7]).generate_state(1)[0])


def random_gene_sets(universe: Sequence[int], set_size: int, n_sets: int, seed: int = 0) -> dict[str, list[int]]:
    """``n_sets`` random sets of ``set_size`` distinct rows drawn from ``universe``."""
    universe = list(universe)
    if not universe:
        raise ValueError("gene universe is empty")
    if set_size < 1 or set_size > len(universe):
        raise ValueError(f"set_size {set_size} not in [1, {len(universe)}]")
    rng = np.random.default_rng(np.random.SeedSequence([abs(seed), 11]))
    return {
        f"shuffled_{i}": sorted(rng.choice(universe, size=set_size, replace=False).tolist())
        for i in range(n_sets)
    }


def shuffled_null_genesets(pair: ContrastivePair, spec: ModelSpec, universe: Sequence[int], set_size: int,
                           n_sets: int, config: FitConfig = FitConfig(), replicates: int = 5,
                           seed: int = 0, workers: int = 1) -> list[EbfResult]:
    """Gene-set EBFs for randomly assembled sets: the empirical null."""
    sets = random_gene_sets(universe, set_size, n_sets, seed)
    return list(geneset_tests(pair, spec, sets, config, replicates, workers).values())


def decide(ebf: float, tau: float) -> str:
    """``"reject"`` when the EBF strictly exceeds ``tau``."""
    return "reject" if ebf > tau else "accept"


def calibrate_tau(null_ebfs: Iterable[float], percentile: float = 95.0) -> float:
    """Threshold at a percentile of an empirical-null EBF list."""
    values = np.asarray(list(null_ebfs), dtype=float)
    if values.size == 0:
        raise ValueError("empty null distribution")
    return float(np.percentile(values, percentile))


def null_summary(null_ebfs: Iterable[float]) -> dict:
    values = np.asarray(list(null_ebfs), dtype=float)
    lo, hi = np.percentile(values, [2.5, 97.5])
    return {"mean": float(values.mean()), "lower_95": float(lo), "upper_95": float(hi), "n": int(values.size)}


def roc(alt_ebfs: Sequence[float], null_ebfs: Sequence[float]) -> RocCurve:
    """ROC over thresholds at every pooled EBF value; AUC by the trapezoid rule."""
    alt = np.asarray(alt_ebfs, dtype=float)
    null = np.asarray(null_ebfs, dtype=float)
    if alt.size == 0 or null.size == 0:
        raise ValueError("roc needs nonempty alternative and null lists")
    pooled = np.unique(np.concatenate([alt, null]))[::-1]
    taus = np.append(pooled, pooled[-1] - 1.0)
    tpr = np.array([(alt > t).mean() for t in taus])
    fpr = np.array([(null > t).mean() for t in taus])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(taus.tolist(), tpr.tolist(), fpr.tolist(), auc)


def ebf_rows(results: Iterable[EbfResult], tau: float | None = None) -> list[dict]:
    rows = []
    for res in results:
        for r, (a, n, e) in enumerate(zip(res.replicate_elbo_alt, res.replicate_elbo_null, res.replicate_ebfs)):
            row = {"label": res.label, "replicate": r, "elbo_alt": a, "elbo_null": n, "ebf": e}
            if tau is not None:
                row["decision"] = decide(e, tau)
            rows.append(row)
    return rows


def write_ebf_csv(results: Iterable[EbfResult], path, tau: float | None = None) -> None:
    rows = ebf_rows(results, tau)
    fields = ["label", "replicate", "elbo_alt", "elbo_null", "ebf"] + (["decision"] if tau is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
