"""Shared fixtures-in-code for the unit tests."""

import numpy as np

from cplvm.counts import ContrastivePair
from cplvm.inference import elbo_gradient, elbo_term, init_state
from cplvm.model import ModelSpec, apply_variant, sample_generative

SPECS = {
    "cplvm_full": ModelSpec(family="cplvm", k1=2, k2=2),
    "cplvm_global_null": apply_variant(ModelSpec(family="cplvm", k1=2, k2=2), "global_null"),
    "cplvm_geneset_null": apply_variant(ModelSpec(family="cplvm", k1=2, k2=2), (1, 4, 7)),
    "cglvm_full": ModelSpec(family="cglvm", k1=2, k2=2),
    "cglvm_geneset_null": apply_variant(ModelSpec(family="cglvm", k1=2, k2=2), (0, 3)),
}


def small_pair(seed=0, p=10, n=20, m=20):
    pair, _ = sample_generative(ModelSpec(k1=2, k2=2), p, n, m, seed)
    # keep every cell total positive for the size priors
    Y, X = pair.Y.copy(), pair.X.copy()
    Y[0] += 1
    X[0] += 1
    return ContrastivePair.from_arrays(Y, X)


def random_state(spec, pair, seed=0, scale=0.3):
    """A non-trivial variational state (not the fit's initialization)."""
    state = init_state(spec, pair, seed)
    rng = np.random.default_rng(seed + 99)
    for name in state.loc:
        state.loc[name] = state.loc[name] + rng.normal(0, scale, state.loc[name].shape)
        state.log_scale[name] = state.log_scale[name] + rng.normal(0, scale, state.loc[name].shape)
    return state


def fd_check(state, data, spec, noise, h=1e-5, stats=False):
    """Largest failure of analytic vs central-difference ELBO gradients.

    A coordinate passes when its relative error is below 1e-4 or its
    absolute error below 1e-6. With ``stats`` also returns the largest
    absolute error, largest relative error and coordinate count.
    """
    _, g_loc, g_rho = elbo_gradient(state, data, spec, noise)
    worst = max_abs = max_rel = 0.0
    count = 0
    for table, grads in ((state.loc, g_loc), (state.log_scale, g_rho)):
        for name, arr in table.items():
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = elbo_term(state, data, spec, noise)
                arr[idx] = orig - h
                dn = elbo_term(state, data, spec, noise)
                arr[idx] = orig
                fd = (up - dn) / (2 * h)
                g = grads[name][idx]
                err = abs(g - fd)
                rel = err / max(abs(fd), abs(g)) if err > 0 else 0.0
                max_abs, max_rel, count = max(max_abs, err), max(max_rel, rel), count + 1
                if err >= 1e-6:
                    worst = max(worst, rel)
    return (worst, max_abs, max_rel, count) if stats else worst


ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail, elapsed, budget=None):
    """Record and print one acceptance line; runtime over budget counts as a failure."""
    in_time = budget is None or elapsed <= budget
    status = "PASS" if ok and in_time else "FAIL"
    timing = f"{elapsed:.1f}s" + ("" if budget is None else f" of {budget:.0f}s") + ("" if in_time else " OVER BUDGET")
    line = f"criterion {number}: {status} | {detail} | {timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return status == "PASS"
