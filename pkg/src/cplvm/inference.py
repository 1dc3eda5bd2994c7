"""Mean-field stochastic variational inference for the contrastive models.

Every latent block gets a fully factorized variational family: log-normal
for positive blocks (all CPLVM blocks, and the size factors of both
families) and Gaussian for the unconstrained CGLVM blocks. A draw is
``exp(loc + exp(log_scale) * eps)`` or ``loc + exp(log_scale) * eps``, and
the single-sample objective ``log p(data, draw) - log q(draw)`` is
differentiated through that map. Optimization is Adam ascent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from cplvm.counts import ContrastivePair
from cplvm.model import (
    LOG_2PI,
    CountData,
    ModelSpec,
    Params,
    block_shapes,
    expand_W,
    log_joint_and_grad,
    positive_blocks,
)

logger = logging.getLogger(__name__)

INIT_SCALE = 0.1


class NumericalAbort(RuntimeError):
    """A non-finite objective or gradient was hit during fitting."""

    def __init__(self, message: str, step: int | None = None, block: str | None = None):
        super().__init__(message)
        self.step = step
        self.block = block

    def to_dict(self) -> dict:
        return {"error": str(self), "step": self.step, "block": self.block}


@dataclass
class VariationalState:
    """Location and log-scale arrays per latent block."""

    loc: dict[str, np.ndarray]
    log_scale: dict[str, np.ndarray]
    families: dict[str, str]

    @property
    def blocks(self) -> list[str]:
        return list(self.loc)

    def n_params(self) -> int:
        return sum(v.size for v in self.loc.values()) + sum(v.size for v in self.log_scale.values())

    def copy(self) -> "VariationalState":
        return VariationalState(
            {k: v.copy() for k, v in self.loc.items()},
            {k: v.copy() for k, v in self.log_scale.items()},
            dict(self.families),
        )

    def to_dict(self) -> dict:
        return {
            "loc": {k: v.tolist() for k, v in self.loc.items()},
            "log_scale": {k: v.tolist() for k, v in self.log_scale.items()},
            "families": dict(self.families),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariationalState":
        return cls(
            {k: np.asarray(v, dtype=float) for k, v in d["loc"].items()},
            {k: np.asarray(v, dtype=float) for k, v in d["log_scale"].items()},
            dict(d["families"]),
        )


@dataclass(frozen=True)
class FitConfig:
    """Optimizer and Monte Carlo settings for one fit."""

    steps: int = 3000
    learning_rate: float = 0.01
    mc_samples_per_step: int = 1
    final_elbo_samples: int = 1000
    seed: int = 0
    convergence_window: int = 100
    convergence_tol: float = 0.1
    early_stop: bool = False
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("steps", "mc_samples_per_step", "final_elbo_samples", "convergence_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be nonnegative")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: np.ndarray
    final_elbo: float
    final_elbo_stderr: float
    converged: bool
    posterior_means: dict[str, np.ndarray]
    spec: ModelSpec
    config: FitConfig
    converged_step: int | None = None

    def to_dict(self) -> dict:
        p = self.posterior_means["S"].shape[1]
        means = dict(self.posterior_means)
        if "W" in means:
            means["W"] = expand_W(means["W"], self.spec, p)
        return {
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "final_elbo": self.final_elbo,
            "final_elbo_stderr": self.final_elbo_stderr,
            "converged": self.converged,
            "converged_step": self.converged_step,
            "elbo_trace": self.elbo_trace.tolist(),
            "posterior_means": {k: np.asarray(v).tolist() for k, v in means.items()},
            "state": self.state.to_dict(),
        }


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([abs(int(k)) for k in key]))


def init_state(spec: ModelSpec, pair: ContrastivePair, seed: int) -> VariationalState:
    """Small random locations, scales of 0.1, size factors at relative library size."""
    rng = _rng(seed, 0)
    positive = positive_blocks(spec)
    loc, log_scale, families = {}, {}, {}
    for name, shape in block_shapes(spec, pair.p, pair.n, pair.m).items():
        loc[name] = rng.normal(0.0, INIT_SCALE, size=shape)
        log_scale[name] = np.full(shape, math.log(INIT_SCALE))
        families[name] = "lognormal" if name in positive else "gaussian"
    for name, matrix in (("alpha_b", pair.background), ("alpha_f", pair.foreground)):
        log_tot = np.log(np.maximum(matrix.totals, 1).astype(float))
        loc[name] = log_tot - log_tot.mean()
    return VariationalState(loc, log_scale, families)


def draw_noise(state: VariationalState, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {name: rng.standard_normal(v.shape) for name, v in state.loc.items()}


def reparam_sample(state: VariationalState, noise: Mapping[str, np.ndarray]
                   ) -> tuple[Params, dict[str, np.ndarray]]:
    """Map standard-normal noise to a draw from q.

    Returns the draw and, for log-normal blocks, its logarithm.
    """
    params, logs = {}, {}
    for name, loc in state.loc.items():
        eps = noise[name]
        if eps.shape != loc.shape:
            raise ValueError(f"noise for {name} has shape {eps.shape}, expected {loc.shape}")
        u = loc + np.exp(state.log_scale[name]) * eps
        if state.families[name] == "lognormal":
            logs[name] = u
            params[name] = np.exp(u)
        else:
            params[name] = u
    return params, logs


def log_q(state: VariationalState, noise: Mapping[str, np.ndarray]) -> float:
    """log q evaluated at the draw that ``noise`` maps to."""
    total = 0.0
    for name, loc in state.loc.items():
        eps, rho = noise[name], state.log_scale[name]
        val = -rho - 0.5 * LOG_2PI - 0.5 * eps * eps
        if state.families[name] == "lognormal":
            val = val - (loc + np.exp(rho) * eps)
        total += float(np.sum(val))
    return total


def elbo_term(state: VariationalState, data: CountData, spec: ModelSpec,
              noise: Mapping[str, np.ndarray]) -> float:
    params, logs = reparam_sample(state, noise)
    value, _ = log_joint_and_grad(params, data, spec, logs, need_grad=False)
    return value - log_q(state, noise)


def _as_data(pair_or_data) -> CountData:
    return pair_or_data if isinstance(pair_or_data, CountData) else CountData(pair_or_data)


def elbo_estimate(state: VariationalState, pair: ContrastivePair | CountData, spec: ModelSpec,
                  n_samples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo ELBO and its standard error (sample std / sqrt(n))."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    data = _as_data(pair)
    rng = _rng(seed, 2)
    terms = np.array([elbo_term(state, data, spec, draw_noise(state, rng)) for _ in range(n_samples)])
    stderr = float(terms.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(terms.mean()), stderr


def elbo_gradient(state: VariationalState, pair: ContrastivePair | CountData, spec: ModelSpec,
                  noise: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Single-sample ELBO and its exact gradient for fixed noise.

    Returns ``(value, grad_loc, grad_log_scale)``. Blocks absent from the
    state (e.g. masked ``W`` genes) are absent from the gradient too.
    """
    data = _as_data(pair)
    params, logs = reparam_sample(state, noise)
    value, g = log_joint_and_grad(params, data, spec, logs)
    value -= log_q(state, noise)
    g_loc, g_rho = {}, {}
    for name in state.loc:
        gu = g[name] * params[name] + 1.0 if state.families[name] == "lognormal" else g[name]
        g_loc[name] = gu
        g_rho[name] = gu * np.exp(state.log_scale[name]) * noise[name] + 1.0
    return value, g_loc, g_rho


def posterior_mean(state: VariationalState) -> dict[str, np.ndarray]:
    """Mean of q per block."""
    means = {}
    for name, loc in state.loc.items():
        if state.families[name] == "lognormal":
            means[name] = np.exp(loc + 0.5 * np.exp(2.0 * state.log_scale[name]))
        else:
            means[name] = loc.copy()
    return means


class Adam:
    """Adam ascent over a dict of arrays, updated in place."""

    def __init__(self, lr: float = 0.01, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[k] += (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def _first_nonfinite(*bundles: Mapping[str, np.ndarray]) -> str | None:
    for bundle in bundles:
        for name, arr in bundle.items():
            if not np.all(np.isfinite(arr)):
                return name
    return None


def fit(pair: ContrastivePair, spec: ModelSpec, config: FitConfig = FitConfig()) -> FitResult:
    """Fit ``spec`` to ``pair`` by stochastic variational inference.

    Unset size priors are estimated from the data. ``converged`` reports
    whether the mean ELBO over the last ``convergence_window`` steps improved
    on the previous window by less than ``convergence_tol``; training only
    stops there when ``config.early_stop`` is set.

    Raises
    ------
    NumericalAbort
        On a non-finite objective or gradient, naming the step and block.
    """
    # non-finite values are detected explicitly and raised as NumericalAbort
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _fit(pair, spec, config)


def _fit(pair: ContrastivePair, spec: ModelSpec, config: FitConfig) -> FitResult:
    spec = spec.with_size_priors(pair)
    data = CountData(pair)
    state = init_state(spec, pair, config.seed)
    noise_rng = _rng(config.seed, 1)
    flat: dict[str, np.ndarray] = {}
    for name in state.loc:
        flat[f"loc:{name}"] = state.loc[name]
        flat[f"rho:{name}"] = state.log_scale[name]
    opt = Adam(config.learning_rate, config.adam_betas, config.adam_eps)
    trace = np.empty(config.steps)
    window = config.convergence_window
    converged, converged_step = False, None
    S = config.mc_samples_per_step
    steps_run = 0
    for step in range(config.steps):
        value = 0.0
        grads: dict[str, np.ndarray] = {}
        for _ in range(S):
            v, g_loc, g_rho = elbo_gradient(state, data, spec, draw_noise(state, noise_rng))
            value += v / S
            for name in g_loc:
                for key, g in ((f"loc:{name}", g_loc[name]), (f"rho:{name}", g_rho[name])):
                    grads[key] = grads[key] + g / S if key in grads else g / S
        if not math.isfinite(value):
            raise NumericalAbort(f"non-finite ELBO at step {step}", step=step,
                                 block=_first_nonfinite(state.loc, state.log_scale))
        bad = _first_nonfinite(grads)
        if bad is not None:
            raise NumericalAbort(f"non-finite gradient for {bad.split(':')[1]} at step {step}",
                                 step=step, block=bad.split(":")[1])
        opt.step(flat, grads)
        trace[step] = value
        steps_run = step + 1
        if steps_run >= 2 * window and steps_run % window == 0:
            recent = trace[steps_run - window:steps_run].mean()
            previous = trace[steps_run - 2 * window:steps_run - window].mean()
            now_converged = recent - previous < config.convergence_tol
            if now_converged and not converged:
                converged_step = steps_run
            converged = now_converged
            if converged and config.early_stop:
                break
    final, stderr = elbo_estimate(state, data, spec, config.final_elbo_samples, seed=config.seed)
    if not math.isfinite(final):
        raise NumericalAbort("non-finite final ELBO", step=steps_run)
    return FitResult(
        state=state,
        elbo_trace=trace[:steps_run].copy(),
        final_elbo=final,
        final_elbo_stderr=stderr,
        converged=converged,
        posterior_means=posterior_mean(state),
        spec=spec,
        config=config,
        converged_step=converged_step if converged else None,
    )
