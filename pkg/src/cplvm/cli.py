"""Command-line entry point: ``cplvm {simulate,fit,test,benchmark}``.

Settings resolve in the order built-in default < TOML config file < flag.
The global seed falls back to the ``CPLVM_SEED`` environment variable when
neither the file nor a flag sets it. Every run writes ``run_config.json``
(resolved settings plus the package version) into its output directory.

Exit codes: 0 success, 1 usage error, 2 numerical abort (diagnostics in
``abort.json``), 3 I/O or input-data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import tomli

from cplvm import __version__
from cplvm.benchmarks import (
    calibration_rows,
    cluster_benchmark,
    dimsweep_benchmark,
    geneset_benchmark,
    global_calibration,
    roc_benchmark,
    write_roc,
    write_table,
)
from cplvm.counts import ContrastivePair, CountDataError, load_counts, load_gene_sets, save_gene_sets, \
    select_top_genes, shuffle_conditions
from cplvm.hypothesis import (
    calibrate_tau,
    decide,
    geneset_tests,
    global_test,
    null_summary,
    random_gene_sets,
    _shuffle_seed,
)
from cplvm.inference import FitConfig, NumericalAbort, fit
from cplvm.model import ModelError, ModelSpec, expand_W
from cplvm.simulation import CopulaSpec, copula_poisson, generate_geneset_suite, generate_heterogeneous, \
    generate_roc_suite

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# (flag, type, default, help). Defaults live here, not in argparse, so that
# "flag given" and "flag omitted" stay distinguishable when merging a config.
COMMON = [
    ("seed", int, None, "global seed (falls back to $CPLVM_SEED, then 0)"),
    ("out", str, None, "output directory (created if missing; required)"),
    ("workers", int, 1, "worker processes for independent fits"),
]
FIT_OPTS = [
    ("model", str, "cplvm", "model family: cplvm or cglvm"),
    ("k1", int, 2, "shared latent dimension"),
    ("k2", int, 2, "foreground-specific latent dimension"),
    ("steps", int, 3000, "optimizer steps per fit"),
    ("lr", float, 0.01, "Adam learning rate"),
    ("mc_samples", int, 1, "Monte Carlo samples per gradient step"),
    ("final_samples", int, 1000, "Monte Carlo samples for the reported ELBO"),
    ("window", int, 100, "convergence window (steps)"),
    ("tol", float, 0.1, "convergence tolerance on the windowed ELBO change"),
    ("early_stop", bool, False, "stop once the convergence check passes"),
]
DATA_OPTS = [
    ("bg", str, None, "background counts (.csv or .mtx, genes x cells)"),
    ("fg", str, None, "foreground counts (.csv or .mtx, genes x cells)"),
    ("genes", int, None, "keep this many highest-deviance genes"),
    ("drop_zero_cells", bool, False, "drop cells with zero total count instead of failing"),
]
TEST_OPTS = [
    ("replicates", int, 5, "fit replicates per model"),
    ("shuffles", int, 0, "shuffled-null EBFs to compute for calibration"),
    ("percentile", float, 95.0, "null percentile used as the decision threshold"),
    ("tau", float, None, "explicit decision threshold (overrides --percentile)"),
    ("gmt", str, None, "gene sets in GMT format (geneset tests)"),
    ("set", str, None, "name of the gene set to test"),
    ("all", bool, False, "test every gene set in the GMT file"),
    ("shuffle_size", int, None, "size of shuffled-null gene sets (default: tested set size)"),
]
SIM_OPTS = [
    ("p", int, None, "number of genes (scenario default when omitted)"),
    ("n", int, 200, "background cells"),
    ("m", int, 200, "foreground cells"),
    ("p_values", _int_list, (10, 100), "roc-suite gene counts, comma-separated"),
    ("datasets", int, 20, "roc-suite datasets per p"),
    ("set_size", int, 25, "geneset-suite genes per set"),
    ("n_sets", int, 10, "geneset-suite number of sets"),
    ("n_signal", int, None, "geneset-suite signal genes in the perturbed set (default: all)"),
    ("lam", float, 10.0, "copula Poisson rate"),
]
BENCH_OPTS = [
    ("p", _int_list, None, "gene counts; roc takes a list, other suites one value"),
    ("n", int, 200, "background cells"),
    ("m", int, 200, "foreground cells"),
    ("datasets", int, 20, "datasets per p (roc) or per kind (calibration)"),
    ("replicates", int, 1, "fit replicates per model"),
    ("repeats", int, 3, "repeats (dimsweep fit seeds, cluster datasets)"),
    ("true_k", int, 5, "dimsweep generative latent dimension"),
    ("k_values", _int_list, (1, 3, 5, 7, 9), "dimsweep latent dimensions"),
    ("set_size", int, 25, "geneset genes per set"),
    ("n_signal", int, None, "geneset signal genes in the perturbed set"),
    ("shuffles", int, 20, "geneset shuffled-null sets"),
] + [o for o in FIT_OPTS if o[0] in ("steps", "lr", "mc_samples", "final_samples", "window", "tol",
                                     "early_stop")]

COMMANDS = {
    "simulate": (["copula", "heterogeneous", "roc-suite", "geneset-suite"], SIM_OPTS),
    "fit": (None, DATA_OPTS + FIT_OPTS),
    "test": (["global", "geneset"], DATA_OPTS + FIT_OPTS + TEST_OPTS),
    "benchmark": (["roc", "dimsweep", "cluster", "calibration", "geneset"], BENCH_OPTS),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cplvm", description="Contrastive Poisson latent variable models.")
    parser.add_argument("--version", action="version", version=f"cplvm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, (kinds, opts) in COMMANDS.items():
        sp = sub.add_parser(command)
        if kinds:
            sp.add_argument("kind", choices=kinds)
        sp.add_argument("--config", default=None, help="TOML file with settings (flags override it)")
        for name, typ, default, text in COMMON + opts:
            help_text = f"{text} [default: {default}]"
            if typ is bool:
                sp.add_argument(_flag(name), dest=name, action="store_const", const=True, default=None,
                                help=help_text)
            else:
                sp.add_argument(_flag(name), dest=name, type=typ, default=None, help=help_text)
    return parser


def resolve_config(args: argparse.Namespace, env: Mapping | None = None) -> dict[str, Any]:
    """Merge defaults, the TOML file (top level, then the command's table) and flags."""
    env = os.environ if env is None else env
    kinds, opts = COMMANDS[args.command]
    spec = {name: (typ, default) for name, typ, default, _ in COMMON + opts}
    cfg = {name: default for name, (_, default) in spec.items()}
    file_values: dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise UsageError(f"invalid TOML in {args.config}: {exc}")
        file_values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        file_values.update(doc.get(args.command, {}))
    for key, value in file_values.items():
        name = key.replace("-", "_")
        if name not in spec:
            raise UsageError(f"unknown setting {key!r} for {args.command}")
        typ = spec[name][0]
        try:
            cfg[name] = typ(value) if value is not None else None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key!r}: {exc}")
    for name in spec:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    if cfg["seed"] is None:
        raw = env.get("CPLVM_SEED")
        try:
            cfg["seed"] = int(raw) if raw not in (None, "") else 0
        except ValueError:
            raise UsageError(f"CPLVM_SEED must be an integer, got {raw!r}")
    if not cfg["out"]:
        raise UsageError("--out is required")
    if cfg["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    cfg["command"] = args.command
    if kinds:
        cfg["kind"] = args.kind
    return cfg


# -- helpers -----------------------------------------------------------------


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _fit_config(cfg: dict) -> FitConfig:
    return FitConfig(
        steps=cfg["steps"], learning_rate=cfg["lr"], mc_samples_per_step=cfg["mc_samples"],
        final_elbo_samples=cfg["final_samples"], seed=cfg["seed"], convergence_window=cfg["window"],
        convergence_tol=cfg["tol"], early_stop=bool(cfg["early_stop"]),
    )


def _model_spec(cfg: dict) -> ModelSpec:
    return ModelSpec(family=cfg["model"], k1=cfg["k1"], k2=cfg["k2"])


def _load_pair(cfg: dict) -> ContrastivePair:
    if not cfg["bg"] or not cfg["fg"]:
        raise UsageError("--bg and --fg are required")
    drop = bool(cfg["drop_zero_cells"])
    pair = ContrastivePair(load_counts(cfg["bg"], condition_tag="background", drop_zero_cells=drop),
                           load_counts(cfg["fg"], condition_tag="foreground", drop_zero_cells=drop))
    if cfg["genes"] is not None:
        pair = select_top_genes(pair, cfg["genes"])
    return pair


# -- simulate ----------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path) -> None:
    kind, seed = cfg["kind"], cfg["seed"]
    if kind == "copula":
        p = cfg["p"] or 2
        if p != 2:
            raise UsageError("the copula scenario has p = 2")
        copula_poisson(CopulaSpec(lam=cfg["lam"], n=cfg["n"], m=cfg["m"], seed=seed)).write(out, "copula")
    elif kind == "heterogeneous":
        ds = generate_heterogeneous(cfg["p"] or 100, cfg["n"], cfg["m"], seed)
        ds.write(out, "heterogeneous")
        _write_json(out / "heterogeneous_latents.json",
                    {k: np.asarray(v).tolist() for k, v in ds.true_latents.items()})
    elif kind == "roc-suite":
        suite = generate_roc_suite(cfg["p_values"], cfg["datasets"], seed, cfg["n"], cfg["m"])
        per_p = 2 * cfg["datasets"]
        for i, ds in enumerate(suite):
            p = cfg["p_values"][i // per_p]
            ds.write(out, f"p{p}_{(i % per_p) // 2:03d}_{'alt' if ds.truth == 'alternative' else 'null'}")
    else:
        ds, coll, perturbed = generate_geneset_suite(seed, cfg["p"] or 500, cfg["n_sets"], cfg["set_size"],
                                                     cfg["n_signal"], cfg["n"], cfg["m"])
        ds.provenance["perturbed_set"] = perturbed
        ds.write(out, "geneset")
        save_gene_sets(coll, out / "gene_sets.gmt")


# -- fit ---------------------------------------------------------------------


def write_fit(result, pair: ContrastivePair, out: Path) -> None:
    means = result.posterior_means
    p = pair.p
    k1 = means["S"].shape[0]
    header = ["gene"] + [f"S{i + 1}" for i in range(k1)]
    cols = [means["S"].T]
    if "W" in means:
        W = expand_W(means["W"], result.spec, p)
        header += [f"W{i + 1}" for i in range(W.shape[0])]
        cols.append(W.T)
    for name in ("delta", "mu_b", "mu_f"):
        if name in means:
            header.append(name)
            cols.append(means[name][:, None])
    L = np.hstack(cols)
    _write_rows(out / "loadings.csv", header, ([g] + list(row) for g, row in zip(pair.gene_ids, L)))

    def scores(names, cell_ids, path):
        blocks = [(nm, means[nm]) for nm in names if nm in means]
        hdr = ["cell"] + [f"{nm}{i + 1}" for nm, b in blocks for i in range(b.shape[0])]
        hdr.append("alpha")
        M = np.vstack([b for _, b in blocks] + [means["alpha_b" if "Zb" in names else "alpha_f"][None, :]]).T
        _write_rows(path, hdr, ([c] + list(row) for c, row in zip(cell_ids, M)))

    scores(("Zb",), pair.background.cell_ids, out / "background_scores.csv")
    scores(("Zf", "T"), pair.foreground.cell_ids, out / "foreground_scores.csv")
    _write_rows(out / "elbo_trace.csv", ["step", "elbo"], enumerate(result.elbo_trace.tolist()))
    d = result.to_dict()
    d["gene_ids"] = list(pair.gene_ids)
    _write_json(out / "fit_result.json", d)


def cmd_fit(cfg: dict, out: Path) -> None:
    pair = _load_pair(cfg)
    result = fit(pair, _model_spec(cfg), _fit_config(cfg))
    write_fit(result, pair, out)


# -- test --------------------------------------------------------------------


def _threshold(cfg: dict, null_ebfs: list[float]) -> float | None:
    if cfg["tau"] is not None:
        return float(cfg["tau"])
    if null_ebfs:
        return calibrate_tau(null_ebfs, cfg["percentile"])
    return None


def _report(results, kinds, tau, out: Path, extra: dict | None = None) -> None:
    rows = []
    for res, kind in zip(results, kinds):
        row = [res.label, kind, res.ebf, res.elbo_alt, res.elbo_null, res.replicate_spread]
        if tau is not None:
            row.append(decide(res.ebf, tau) if kind == "observed" else "")
        rows.append(row)
    header = ["label", "kind", "ebf", "elbo_alt", "elbo_null", "replicate_spread"]
    _write_rows(out / "ebf.csv", header + (["decision"] if tau is not None else []), rows)
    null = [r.ebf for r, k in zip(results, kinds) if k != "observed"]
    report = {
        "tau": tau,
        "results": [dict(r.to_dict(), kind=k) for r, k in zip(results, kinds)],
        "null_summary": null_summary(null) if null else None,
    }
    report.update(extra or {})
    _write_json(out / "ebf.json", report)


def cmd_test(cfg: dict, out: Path) -> None:
    pair = _load_pair(cfg)
    spec, config = _model_spec(cfg), _fit_config(cfg)
    if spec.k2 < 1:
        raise UsageError("tests need k2 >= 1")
    R, workers = cfg["replicates"], cfg["workers"]
    if cfg["kind"] == "global":
        observed = global_test(pair, spec, config, R, label="observed", workers=workers)
        null = [global_test(shuffle_conditions(pair, _shuffle_seed(cfg["seed"], s)), spec, config, R,
                            label=f"shuffle_{s}", workers=workers) for s in range(cfg["shuffles"])]
        results = [observed] + null
        kinds = ["observed"] + ["shuffled"] * len(null)
        _report(results, kinds, _threshold(cfg, [r.ebf for r in null]), out)
        return
    if not cfg["gmt"]:
        raise UsageError("geneset tests need --gmt")
    if bool(cfg["set"]) == bool(cfg["all"]):
        raise UsageError("give exactly one of --set NAME or --all")
    coll = load_gene_sets(cfg["gmt"])
    names = list(coll) if cfg["all"] else [cfg["set"]]
    if cfg["set"] and cfg["set"] not in coll.sets:
        raise CountDataError(f"gene set {cfg['set']!r} not in {cfg['gmt']}")
    resolved, unmatched = {}, {}
    for name in coll:
        rows, missing = coll.resolve(name, pair.gene_ids)
        resolved[name], unmatched[name] = rows, len(missing)
    empty = [nm for nm in names if not resolved[nm]]
    if empty:
        raise CountDataError(f"unresolved gene sets (no genes in the data): {empty}")
    tested = {nm: resolved[nm] for nm in names}
    shuffled = {}
    if cfg["shuffles"]:
        universe = sorted({r for rows in resolved.values() for r in rows})
        size = cfg["shuffle_size"] or int(np.median([len(r) for r in tested.values()]))
        shuffled = random_gene_sets(universe, size, cfg["shuffles"], seed=cfg["seed"])
    results = geneset_tests(pair, spec, {**tested, **shuffled}, config, R, workers)
    kinds = ["observed"] * len(tested) + ["shuffled"] * len(shuffled)
    null = [results[k].ebf for k in shuffled]
    _report(list(results.values()), kinds, _threshold(cfg, null), out,
            {"unmatched_genes": {nm: unmatched[nm] for nm in tested},
             "set_sizes": {nm: len(r) for nm, r in tested.items()}})


# -- benchmark ---------------------------------------------------------------


def _single_p(cfg: dict, default: int) -> int:
    if not cfg["p"]:
        return default
    if len(cfg["p"]) != 1:
        raise UsageError("this suite takes a single --p value")
    return cfg["p"][0]


def cmd_benchmark(cfg: dict, out: Path) -> None:
    kind, seed, workers = cfg["kind"], cfg["seed"], cfg["workers"]
    config = _fit_config(dict(cfg, model="cplvm"))
    n, m = cfg["n"], cfg["m"]
    summary: dict[str, Any] = {}
    if kind == "roc":
        benches = roc_benchmark(cfg["p"] or (10, 100), cfg["datasets"], seed, config, cfg["replicates"],
                                n, m, workers=workers)
        for b in benches:
            write_roc(b, out)
            summary[f"p{b.p}"] = {"auc_cplvm": b.cplvm.auc, "auc_cai": b.cai.auc}
    elif kind == "dimsweep":
        rows = dimsweep_benchmark(cfg["true_k"], cfg["k_values"], _single_p(cfg, 100), n, m, seed, config,
                                  cfg["repeats"], workers)
        write_table(rows, out / "dimsweep.csv")
        best = max(rows, key=lambda r: r["mean_elbo"])
        summary = {"true_k": cfg["true_k"], "argmax_k": best["k"]}
    elif kind == "cluster":
        rows = cluster_benchmark(cfg["repeats"], _single_p(cfg, 100), n, m, seed, config, workers)
        write_table(rows, out / "cluster.csv")
        summary = {k: float(np.median([r[k] for r in rows])) for k in rows[0] if k != "repeat"}
    elif kind == "calibration":
        res = global_calibration(_single_p(cfg, 100), cfg["datasets"], n, m, seed, config, cfg["replicates"],
                                 workers=workers)
        rows = calibration_rows(res)
        write_table(rows, out / "calibration.csv")
        summary = {k: float(np.median([r.ebf for r in v])) for k, v in res.items()}
    else:
        res = geneset_benchmark(seed, _single_p(cfg, 500), 10, cfg["set_size"], cfg["n_signal"],
                                cfg["shuffles"], n, m, config, cfg["replicates"], workers=workers)
        write_table(res.rows(), out / "geneset.csv")
        summary = {"perturbed_set": res.perturbed_set, "tau95": res.tau95}
    _write_json(out / "summary.json", summary)


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "test": cmd_test, "benchmark": cmd_benchmark}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    out = None
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "run_config.json", {"version": __version__,
                                              "config": {k: (list(v) if isinstance(v, tuple) else v)
                                                         for k, v in sorted(cfg.items())}})
        HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"cplvm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        diag = dict(exc.to_dict(), command=args.command)
        if out is not None:
            _write_json(out / "abort.json", diag)
        print(f"cplvm: numerical abort: {exc}", file=sys.stderr)
        print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return EXIT_ABORT
    except (CountDataError, OSError) as exc:
        print(f"cplvm: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ModelError, ValueError) as exc:
        print(f"cplvm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
