"""Generative models: the nonnegative CPLVM and the log-link CGLVM.

Parameters are passed around as plain ``dict[str, np.ndarray]`` keyed by
block name. Shapes, with ``p`` genes, ``n`` background and ``m`` foreground
cells:

=========  ===========  =========================================
block      shape        meaning
=========  ===========  =========================================
Zb         (k1, n)      shared latents, background cells
Zf         (k1, m)      shared latents, foreground cells
T          (k2, m)      foreground-specific latents
S          (k1, p)      shared loadings
W          (k2, p_free) foreground-specific loadings (free genes only)
delta      (p,)         background gene scale (CPLVM)
mu_b/mu_f  (p,)         per-condition gene intercepts (CGLVM)
alpha_b    (n,)         background size factors
alpha_f    (m,)         foreground size factors
=========  ===========  =========================================

Under the gene-set null the masked genes have no ``W`` column at all, so
``W`` only spans the free genes; :func:`expand_W` scatters it back to ``p``.
Gamma priors use the shape-rate convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from cplvm.counts import ContrastivePair, SizeFactorPrior, empirical_size_prior

LOG_2PI = math.log(2.0 * math.pi)

FAMILIES = ("cplvm", "cglvm")
VARIANTS = ("full", "global_null", "geneset_null")

Params = dict[str, np.ndarray]


class ModelError(ValueError):
    """Raised for inconsistent specs or parameter bundles."""


@dataclass(frozen=True)
class GeneSetMask:
    """Rows of ``W`` pinned to zero under the gene-set null."""

    member_rows: tuple[int, ...]

    def __post_init__(self):
        rows = tuple(int(r) for r in self.member_rows)
        if len(set(rows)) != len(rows):
            raise ModelError("gene-set mask rows must be distinct")
        if any(r < 0 for r in rows):
            raise ModelError("gene-set mask rows must be nonnegative")
        object.__setattr__(self, "member_rows", tuple(sorted(rows)))

    def __len__(self):
        return len(self.member_rows)

    def validate(self, p: int) -> None:
        if self.member_rows and self.member_rows[-1] >= p:
            raise ModelError(f"mask row {self.member_rows[-1]} out of range for p={p}")

    def selector(self, p: int) -> np.ndarray:
        """The G x p binary matrix picking out the member rows."""
        self.validate(p)
        Q = np.zeros((len(self), p))
        Q[np.arange(len(self)), list(self.member_rows)] = 1.0
        return Q

    def free_rows(self, p: int) -> np.ndarray:
        keep = np.ones(p, dtype=bool)
        keep[list(self.member_rows)] = False
        return np.flatnonzero(keep)


@dataclass(frozen=True)
class ModelSpec:
    """Model family, latent dimensions, hyperparameters and test variant.

    ``gamma_hyper``/``beta_hyper`` are the Gamma shapes/rates for
    (Zb, Zf, T, W, S) in that order; they are ignored by the CGLVM, whose
    priors are standard normal. Size priors left as ``None`` are estimated
    from the data at fit time (and mean ``alpha == 1`` when sampling).
    """

    family: str = "cplvm"
    k1: int = 2
    k2: int = 2
    gamma_hyper: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    beta_hyper: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    variant: str = "full"
    mask: GeneSetMask | None = None
    size_prior_b: SizeFactorPrior | None = None
    size_prior_f: SizeFactorPrior | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}")
        if self.k1 < 1:
            raise ModelError("k1 must be >= 1")
        if self.k2 < 0:
            raise ModelError("k2 must be >= 0")
        if (self.k2 == 0) != (self.variant == "global_null"):
            raise ModelError("k2 = 0 exactly when the variant is global_null")
        if self.variant == "geneset_null" and self.mask is None:
            raise ModelError("geneset_null needs a mask")
        if self.variant != "geneset_null" and self.mask is not None:
            raise ModelError("a mask is only meaningful for geneset_null")
        g, b = tuple(map(float, self.gamma_hyper)), tuple(map(float, self.beta_hyper))
        if len(g) != 5 or len(b) != 5:
            raise ModelError("gamma_hyper and beta_hyper need five entries each")
        if min(g + b) <= 0:
            raise ModelError("all hyperparameters must be positive")
        object.__setattr__(self, "gamma_hyper", g)
        object.__setattr__(self, "beta_hyper", b)

    @property
    def has_foreground_specific(self) -> bool:
        return self.variant != "global_null"

    def n_free_genes(self, p: int) -> int:
        if self.mask is None:
            return p
        self.mask.validate(p)
        return p - len(self.mask)

    def free_rows(self, p: int) -> np.ndarray:
        return np.arange(p) if self.mask is None else self.mask.free_rows(p)

    def with_size_priors(self, pair: ContrastivePair) -> "ModelSpec":
        """Fill unset size priors from the pair's log library sizes."""
        return replace(
            self,
            size_prior_b=self.size_prior_b or empirical_size_prior(pair.background),
            size_prior_f=self.size_prior_f or empirical_size_prior(pair.foreground),
        )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "k1": self.k1,
            "k2": self.k2,
            "gamma_hyper": list(self.gamma_hyper),
            "beta_hyper": list(self.beta_hyper),
            "variant": self.variant,
            "mask": list(self.mask.member_rows) if self.mask is not None else None,
            "size_prior_b": self.size_prior_b.to_dict() if self.size_prior_b else None,
            "size_prior_f": self.size_prior_f.to_dict() if self.size_prior_f else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        def prior(x):
            return SizeFactorPrior(**x) if x else None

        return cls(
            family=d["family"], k1=int(d["k1"]), k2=int(d["k2"]),
            gamma_hyper=tuple(d["gamma_hyper"]), beta_hyper=tuple(d["beta_hyper"]),
            variant=d["variant"],
            mask=GeneSetMask(tuple(d["mask"])) if d.get("mask") is not None else None,
            size_prior_b=prior(d.get("size_prior_b")), size_prior_f=prior(d.get("size_prior_f")),
        )


def apply_variant(spec: ModelSpec, variant: str | GeneSetMask | Sequence[int]) -> ModelSpec:
    """Return ``spec`` turned into the requested hypothesis variant.

    ``variant`` is ``"full"``, ``"global_null"``, or a gene-set mask (a
    :class:`GeneSetMask` or a sequence of row indices). An empty mask gives
    back the full model. ``"full"`` cannot resurrect a dropped ``k2``.
    """
    if isinstance(variant, str):
        if variant == "global_null":
            return replace(spec, k2=0, variant="global_null", mask=None)
        if variant == "full":
            if spec.k2 == 0:
                raise ModelError("cannot restore the full model from k2 = 0")
            return replace(spec, variant="full", mask=None)
        raise ModelError(f"unknown variant {variant!r}")
    mask = variant if isinstance(variant, GeneSetMask) else GeneSetMask(tuple(variant))
    if spec.k2 < 1:
        raise ModelError("geneset_null requires k2 >= 1")
    if len(mask) == 0:
        return replace(spec, variant="full", mask=None)
    return replace(spec, variant="geneset_null", mask=mask)


# -- block layout ------------------------------------------------------------


def block_shapes(spec: ModelSpec, p: int, n: int, m: int) -> dict[str, tuple[int, ...]]:
    """Ordered block name -> shape for the latent quantities of ``spec``."""
    shapes: dict[str, tuple[int, ...]] = {
        "Zb": (spec.k1, n),
        "Zf": (spec.k1, m),
    }
    if spec.has_foreground_specific:
        shapes["T"] = (spec.k2, m)
    shapes["S"] = (spec.k1, p)
    if spec.has_foreground_specific:
        shapes["W"] = (spec.k2, spec.n_free_genes(p))
    if spec.family == "cplvm":
        shapes["delta"] = (p,)
    else:
        shapes["mu_b"] = (p,)
        shapes["mu_f"] = (p,)
    shapes["alpha_b"] = (n,)
    shapes["alpha_f"] = (m,)
    return shapes


def positive_blocks(spec: ModelSpec) -> set[str]:
    """Blocks constrained to be strictly positive."""
    if spec.family == "cplvm":
        return {"Zb", "Zf", "T", "S", "W", "delta", "alpha_b", "alpha_f"}
    return {"alpha_b", "alpha_f"}


def expand_W(W: np.ndarray, spec: ModelSpec, p: int) -> np.ndarray:
    """Scatter the free-gene ``W`` columns into a k2 x p matrix."""
    if spec.mask is None:
        return W
    full = np.zeros((W.shape[0], p))
    full[:, spec.free_rows(p)] = W
    return full


def check_params(params: Mapping[str, np.ndarray], spec: ModelSpec, p: int, n: int, m: int) -> None:
    shapes = block_shapes(spec, p, n, m)
    missing = set(shapes) - set(params)
    if missing:
        raise ModelError(f"missing parameter blocks: {sorted(missing)}")
    for name, shape in shapes.items():
        if np.shape(params[name]) != shape:
            raise ModelError(f"block {name} has shape {np.shape(params[name])}, expected {shape}")
    for name in positive_blocks(spec) & set(shapes):
        if np.size(params[name]) and not np.all(np.asarray(params[name]) > 0):
            raise ModelError(f"block {name} must be strictly positive")


# -- rates -------------------------------------------------------------------


def rate_background(params: Mapping[str, np.ndarray], spec: ModelSpec, i: int | None = None) -> np.ndarray:
    """Background Poisson rates; column ``i`` only when given (CPLVM or CGLVM)."""
    Zb, alpha = params["Zb"], params["alpha_b"]
    if i is not None:
        if not 0 <= i < Zb.shape[1]:
            raise IndexError(f"background cell {i} out of range [0, {Zb.shape[1]})")
        Zb, alpha = Zb[:, [i]], alpha[[i]]
    if spec.family == "cplvm":
        R = params["delta"][:, None] * (params["S"].T @ Zb) * alpha[None, :]
    else:
        R = np.exp(params["S"].T @ Zb + params["mu_b"][:, None] + np.log(alpha)[None, :])
    return R[:, 0] if i is not None else R


def rate_foreground(params: Mapping[str, np.ndarray], spec: ModelSpec, j: int | None = None) -> np.ndarray:
    """Foreground Poisson rates; masked genes get no ``W`` contribution."""
    Zf, alpha = params["Zf"], params["alpha_f"]
    p = params["S"].shape[1]
    T = params.get("T") if spec.has_foreground_specific else None
    if j is not None:
        if not 0 <= j < Zf.shape[1]:
            raise IndexError(f"foreground cell {j} out of range [0, {Zf.shape[1]})")
        Zf, alpha = Zf[:, [j]], alpha[[j]]
        T = T[:, [j]] if T is not None else None
    lin = params["S"].T @ Zf
    if T is not None:
        lin = lin + expand_W(params["W"], spec, p).T @ T
    if spec.family == "cplvm":
        R = lin * alpha[None, :]
    else:
        R = np.exp(lin + params["mu_f"][:, None] + np.log(alpha)[None, :])
    return R[:, 0] if j is not None else R


# -- densities ---------------------------------------------------------------


def _gamma_logpdf(x, shape, rate):
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * np.log(x) - rate * x


def _normal_logpdf(x, mean=0.0, var=1.0):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _lognormal_logpdf(x, mean, var):
    lx = np.log(x)
    return -lx - 0.5 * (LOG_2PI + math.log(var)) - 0.5 * (lx - mean) ** 2 / var


def _poisson_loglik(counts, rate, log_factorial):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(counts > 0, counts * np.log(rate), 0.0)
    return float(np.sum(term - rate) - log_factorial)


# block -> index into gamma_hyper/beta_hyper
_GAMMA_INDEX = {"Zb": 0, "Zf": 1, "T": 2, "W": 3, "S": 4}


def _size_priors(spec: ModelSpec) -> tuple[SizeFactorPrior, SizeFactorPrior]:
    if spec.size_prior_b is None or spec.size_prior_f is None:
        raise ModelError("size priors unset; call spec.with_size_priors(pair) first")
    for prior in (spec.size_prior_b, spec.size_prior_f):
        if prior.log_var <= 0:
            raise ModelError("size prior variance must be > 0 for density evaluation")
    return spec.size_prior_b, spec.size_prior_f


def log_joint_terms(params: Mapping[str, np.ndarray], pair: ContrastivePair, spec: ModelSpec) -> dict[str, float]:
    """Each additive term of the log joint density, keyed by name.

    ``lik_b``/``lik_f`` are the Poisson log-likelihoods; ``prior_<block>``
    the prior log-densities.
    """
    check_params(params, spec, pair.p, pair.n, pair.m)
    Y, X = pair.Y.astype(float), pair.X.astype(float)
    terms = {
        "lik_b": _poisson_loglik(Y, rate_background(params, spec), float(gammaln(Y + 1).sum())),
        "lik_f": _poisson_loglik(X, rate_foreground(params, spec), float(gammaln(X + 1).sum())),
    }
    sb, sf = _size_priors(spec)
    for name in block_shapes(spec, pair.p, pair.n, pair.m):
        x = np.asarray(params[name], dtype=float)
        if name == "alpha_b":
            lp = _lognormal_logpdf(x, sb.log_mean, sb.log_var)
        elif name == "alpha_f":
            lp = _lognormal_logpdf(x, sf.log_mean, sf.log_var)
        elif name == "delta":
            lp = _lognormal_logpdf(x, 0.0, 1.0)
        elif spec.family == "cplvm":
            k = _GAMMA_INDEX[name]
            lp = _gamma_logpdf(x, spec.gamma_hyper[k], spec.beta_hyper[k])
        else:
            lp = _normal_logpdf(x)
        terms[f"prior_{name}"] = float(np.sum(lp))
    return terms


def log_joint(params: Mapping[str, np.ndarray], pair: ContrastivePair, spec: ModelSpec) -> float:
    """log p(Y, X, latents) under ``spec``."""
    value = sum(log_joint_terms(params, pair, spec).values())
    if not np.isfinite(value):
        raise ModelError("log joint is not finite")
    return value


class CountData:
    """Float copies of the counts plus the constant ``sum log y!`` terms."""

    def __init__(self, pair: ContrastivePair):
        self.Y = pair.Y.astype(float)
        self.X = pair.X.astype(float)
        self.p, self.n, self.m = pair.p, pair.n, pair.m
        self.log_fact = float(gammaln(self.Y + 1).sum() + gammaln(self.X + 1).sum())
        self.Y_pos = self.Y > 0
        self.X_pos = self.X > 0


def log_joint_and_grad(params: Mapping[str, np.ndarray], data: CountData, spec: ModelSpec,
                       log_values: Mapping[str, np.ndarray] | None = None,
                       need_grad: bool = True) -> tuple[float, Params]:
    """Log joint and its gradient with respect to every block's natural value.

    ``log_values`` may supply ``log(x)`` for positive blocks to avoid
    recomputing it; the returned gradients are with respect to ``x`` itself.
    With ``need_grad=False`` only the value is computed and the gradient
    dict comes back empty.
    """
    p = data.p
    logs = dict(log_values or {})
    for name in positive_blocks(spec):
        if name in params and name not in logs:
            logs[name] = np.log(params[name])
    grads: Params = {}
    S = params["S"]
    fg_specific = spec.has_foreground_specific
    if fg_specific:
        W_full = expand_W(params["W"], spec, p)
        T = params["T"]

    if spec.family == "cplvm":
        delta, ab, af = params["delta"], params["alpha_b"], params["alpha_f"]
        A = S.T @ params["Zb"]
        Rb = delta[:, None] * A * ab[None, :]
        B = S.T @ params["Zf"]
        if fg_specific:
            B = B + W_full.T @ T
        Rf = B * af[None, :]
        log_Rb = np.log(Rb)
        log_Rf = np.log(Rf)
        value = float(np.sum(data.Y * log_Rb - Rb) + np.sum(data.X * log_Rf - Rf)) - data.log_fact
        if not need_grad:
            return value + _prior_value(params, logs, spec), {}
        Gb = data.Y / Rb - 1.0
        Gf = data.X / Rf - 1.0
        grads["delta"] = np.sum(Gb * A * ab[None, :], axis=1)
        grads["alpha_b"] = np.sum(Gb * A * delta[:, None], axis=0)
        grads["alpha_f"] = np.sum(Gf * B, axis=0)
        Hb = Gb * delta[:, None] * ab[None, :]
        Hf = Gf * af[None, :]
    else:
        lin_b = S.T @ params["Zb"] + params["mu_b"][:, None] + logs["alpha_b"][None, :]
        lin_f = S.T @ params["Zf"] + params["mu_f"][:, None] + logs["alpha_f"][None, :]
        if fg_specific:
            lin_f = lin_f + W_full.T @ T
        Rb, Rf = np.exp(lin_b), np.exp(lin_f)
        value = float(np.sum(data.Y * lin_b - Rb) + np.sum(data.X * lin_f - Rf)) - data.log_fact
        if not need_grad:
            return value + _prior_value(params, logs, spec), {}
        Hb = data.Y - Rb
        Hf = data.X - Rf
        grads["mu_b"] = Hb.sum(axis=1)
        grads["mu_f"] = Hf.sum(axis=1)
        grads["alpha_b"] = Hb.sum(axis=0) / params["alpha_b"]
        grads["alpha_f"] = Hf.sum(axis=0) / params["alpha_f"]

    grads["Zb"] = S @ Hb
    grads["Zf"] = S @ Hf
    grads["S"] = params["Zb"] @ Hb.T + params["Zf"] @ Hf.T
    if fg_specific:
        grads["T"] = W_full @ Hf
        gW = T @ Hf.T
        grads["W"] = gW if spec.mask is None else gW[:, spec.free_rows(p)]

    value += _prior_value(params, logs, spec)
    sb, sf = _size_priors(spec)
    for name, prior in (("alpha_b", sb), ("alpha_f", sf)):
        grads[name] = grads[name] - (1.0 + (logs[name] - prior.log_mean) / prior.log_var) / params[name]
    if spec.family == "cplvm":
        grads["delta"] = grads["delta"] - (1.0 + logs["delta"]) / params["delta"]
        for name in _prior_blocks(spec):
            k = _GAMMA_INDEX[name]
            grads[name] = grads[name] + (spec.gamma_hyper[k] - 1.0) / params[name] - spec.beta_hyper[k]
    else:
        for name in _prior_blocks(spec):
            grads[name] = grads[name] - params[name]
    return value, grads


def _prior_blocks(spec: ModelSpec) -> tuple[str, ...]:
    """Blocks carrying a Gamma (CPLVM) or standard-normal (CGLVM) prior."""
    names = ("Zb", "Zf", "T", "W", "S") if spec.has_foreground_specific else ("Zb", "Zf", "S")
    return names if spec.family == "cplvm" else names + ("mu_b", "mu_f")


def _prior_value(params: Mapping[str, np.ndarray], logs: Mapping[str, np.ndarray], spec: ModelSpec) -> float:
    sb, sf = _size_priors(spec)
    value = 0.0
    for name, prior in (("alpha_b", sb), ("alpha_f", sf)):
        lx = logs[name]
        value += float(np.sum(-lx - 0.5 * (LOG_2PI + math.log(prior.log_var))
                              - 0.5 * (lx - prior.log_mean) ** 2 / prior.log_var))
    if spec.family == "cplvm":
        lx = logs["delta"]
        value += float(np.sum(-lx - 0.5 * LOG_2PI - 0.5 * lx ** 2))
        for name in _prior_blocks(spec):
            a, b = spec.gamma_hyper[_GAMMA_INDEX[name]], spec.beta_hyper[_GAMMA_INDEX[name]]
            x = params[name]
            value += float(x.size * (a * math.log(b) - math.lgamma(a))
                           + np.sum((a - 1.0) * logs[name] - b * x))
    else:
        for name in _prior_blocks(spec):
            x = params[name]
            value += float(-0.5 * x.size * LOG_2PI - 0.5 * np.sum(x * x))
    return value


# -- sampling ----------------------------------------------------------------


def sample_generative(spec: ModelSpec, p: int, n: int, m: int, seed: int,
                      overrides: Mapping[str, np.ndarray] | None = None
                      ) -> tuple[ContrastivePair, Params]:
    """Draw latents from their priors, then Poisson counts.

    ``overrides`` replaces any latent block with caller-supplied values (of
    the shape :func:`block_shapes` reports). Every block is drawn, in a fixed
    order, even when overridden, so the random stream does not depend on
    which blocks are replaced.
    """
    if n < 1 or m < 1 or p < 1:
        raise ModelError("n, m and p must all be >= 1")
    rng = np.random.default_rng(seed)
    shapes = block_shapes(spec, p, n, m)
    params: Params = {}
    for name, shape in shapes.items():
        if name in ("alpha_b", "alpha_f"):
            prior = spec.size_prior_b if name == "alpha_b" else spec.size_prior_f
            if prior is None:
                draw = np.ones(shape)
            else:
                draw = np.exp(rng.normal(prior.log_mean, math.sqrt(prior.log_var), size=shape))
        elif name == "delta":
            draw = np.exp(rng.standard_normal(shape))
        elif spec.family == "cplvm":
            k = _GAMMA_INDEX[name]
            draw = rng.gamma(spec.gamma_hyper[k], 1.0 / spec.beta_hyper[k], size=shape)
        else:
            draw = rng.standard_normal(shape)
        params[name] = draw
    for name, value in (overrides or {}).items():
        if name not in shapes:
            raise ModelError(f"override for unknown block {name!r}")
        value = np.asarray(value, dtype=float)
        if value.shape != shapes[name]:
            raise ModelError(f"override {name} has shape {value.shape}, expected {shapes[name]}")
        params[name] = value.copy()
    Y = rng.poisson(rate_background(params, spec))
    X = rng.poisson(rate_foreground(params, spec))
    return ContrastivePair.from_arrays(Y, X), params


def params_to_json(params: Mapping[str, np.ndarray]) -> dict:
    return {k: np.asarray(v).tolist() for k, v in params.items()}
