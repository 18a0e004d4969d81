"""Diagonal Gaussians, categoricals and the weighted Gaussian-mixture posterior.

Every function works on plain arrays (returning floats/arrays) and on
:class:`~mvfusion.diffcore.Tensor` fields (returning Tensors), through one code
path, so a bound term computed inside a model is bitwise the same number as
the standalone call on the same inputs. Leading axes broadcast as a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import VARIANCE_FLOOR, Tensor, as_tensor, gauss_log_density, stack
from .errors import ContractError, DimensionError

SIMPLEX_TOL = 1e-9
LOG_2PI_E = math.log(2.0 * math.pi * math.e)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _out(t: Tensor, keep: bool):
    if keep:
        return t
    return float(t.data) if t.data.ndim == 0 else t.data


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class DiagGaussian:
    """N(mean, diag(var)); ``mean``/``var`` may carry leading batch axes."""
    mean: object
    var: object

    def __post_init__(self):
        m, v = _data(self.mean), _data(self.var)
        if m.shape[-1:] != v.shape[-1:]:
            raise DimensionError(f"mean dim {m.shape} vs var dim {v.shape}")
        if not np.all(v >= VARIANCE_FLOOR):
            raise ContractError(f"variances must be >= {VARIANCE_FLOOR}")

    @property
    def dim(self) -> int:
        return _data(self.mean).shape[-1]


def _check_simplex(p: np.ndarray, what: str) -> np.ndarray:
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractError(f"{what} is not on the probability simplex")
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, init=False)
class CategoricalDist:
    """Cat(pi). Stored as log-probabilities; ``probs`` is derived."""
    log_probs: object

    def __init__(self, probs=None, log_probs=None):
        if (probs is None) == (log_probs is None):
            raise ContractError("give exactly one of probs / log_probs")
        if probs is not None:
            p = _check_simplex(np.asarray(probs, dtype=np.float64), "categorical probs")
            with np.errstate(divide="ignore"):
                log_probs = np.log(p)
        object.__setattr__(self, "log_probs", log_probs)

    @classmethod
    def from_logits(cls, logits) -> "CategoricalDist":
        if isinstance(logits, Tensor):
            return cls(log_probs=logits.log_softmax(axis=-1))
        return cls(log_probs=Tensor(logits).log_softmax(axis=-1).data)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(_data(self.log_probs))

    @property
    def n_classes(self) -> int:
        return _data(self.log_probs).shape[-1]

    def argmax(self):
        # np.argmax returns the lowest index among ties
        return np.argmax(_data(self.log_probs), axis=-1)


@dataclass(frozen=True, init=False)
class GaussianMixture:
    """sum_v lambda_v N(mean_v, diag(var_v)) with strictly positive weights."""
    components: tuple
    log_weights: object

    def __init__(self, components: Sequence[DiagGaussian], weights=None, log_weights=None):
        if (weights is None) == (log_weights is None):
            raise ContractError("give exactly one of weights / log_weights")
        comps = tuple(components)
        if len(comps) < 1:
            raise ContractError("mixture needs at least one component")
        if len({c.dim for c in comps}) != 1:
            raise DimensionError("mixture components differ in dimension")
        if weights is not None:
            w = _check_simplex(np.asarray(weights, dtype=np.float64), "mixture weights")
            if np.any(w <= 0):
                raise ContractError("mixture weights must be strictly positive")
            log_weights = np.log(w)
        if _data(log_weights).shape[-1] != len(comps):
            raise DimensionError("one weight per component required")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "log_weights", log_weights)

    @classmethod
    def from_logits(cls, components, logits) -> "GaussianMixture":
        lw = (logits.log_softmax(axis=-1) if isinstance(logits, Tensor)
              else Tensor(logits).log_softmax(axis=-1).data)
        return cls(components, log_weights=lw)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(_data(self.log_weights))


def gauss_log_pdf(x, g: DiagGaussian):
    """sum_i [-1/2 log(2 pi var_i) - (x_i - mean_i)^2 / (2 var_i)]."""
    keep = _any_tensor(x, g.mean, g.var)
    if _data(x).shape[-1] != g.dim:
        raise DimensionError(f"x dim {_data(x).shape[-1]} != gaussian dim {g.dim}")
    return _out(gauss_log_density(x, g.mean, g.var), keep)


def gauss_reparam_sample(g: DiagGaussian, eps):
    """mean + sqrt(var) * eps."""
    keep = _any_tensor(g.mean, g.var, eps)
    if _data(eps).shape[-1] != g.dim:
        raise DimensionError("noise dim does not match gaussian dim")
    z = as_tensor(g.mean) + as_tensor(g.var).sqrt() * as_tensor(eps)
    return _out(z, keep)


def pair_convolution_logpdf(a: DiagGaussian, b: DiagGaussian):
    """log N(mean_a | mean_b, diag(var_a + var_b))."""
    if a.dim != b.dim:
        raise DimensionError("convolved gaussians differ in dimension")
    keep = _any_tensor(a.mean, a.var, b.mean, b.var)
    t = gauss_log_density(a.mean, b.mean, as_tensor(a.var) + as_tensor(b.var))
    return _out(t, keep)


def mog_entropy_lower_bound(m: GaussianMixture):
    """Jensen lower bound on mixture entropy: -sum_v w_v log sum_l w_l omega_vl.

    The inner sum is a log-sum-exp over log w_l + log omega_vl.
    """
    comps = m.components
    keep = _any_tensor(m.log_weights, *[c.mean for c in comps], *[c.var for c in comps])
    lw = as_tensor(m.log_weights)
    rows = []
    for cv in comps:
        log_omega = stack([as_tensor(pair_convolution_logpdf(cv, cl)) for cl in comps],
                          axis=-1)
        rows.append((lw + log_omega).logsumexp(axis=-1))
    inner = stack(rows, axis=-1)
    h = -(lw.exp() * inner).sum(axis=-1)
    return _out(h, keep)


def categorical_log_pmf(y, c: CategoricalDist):
    """log pi_y."""
    k = c.n_classes
    y_arr = np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr >= k):
        raise ContractError(f"class index out of range [0, {k})")
    keep = isinstance(c.log_probs, Tensor)
    lp = as_tensor(c.log_probs)
    if lp.ndim == 1:
        return _out(lp[int(y_arr)], keep)
    return _out(lp[np.arange(lp.shape[0]), y_arr], keep)


def gauss_entropy(g: DiagGaussian):
    """sum_i 1/2 log(2 pi e var_i)."""
    keep = _any_tensor(g.var)
    v = as_tensor(g.var)
    h = (v.log() + LOG_2PI_E).sum(axis=-1) * 0.5
    return _out(h, keep)


def categorical_entropy(c: CategoricalDist):
    keep = isinstance(c.log_probs, Tensor)
    lp = as_tensor(c.log_probs)
    return _out(-(lp.exp() * lp).sum(axis=-1), keep)


def mc_mixture_entropy(m: GaussianMixture, n_samples: int, rng: np.random.Generator):
    """Monte-Carlo estimate of the mixture entropy and its standard error.

    Plain numpy; independent of the bound's code path.
    """
    w = m.weights
    means = np.stack([np.asarray(_data(c.mean)) for c in m.components])
    vars_ = np.stack([np.asarray(_data(c.var)) for c in m.components])
    comp = rng.choice(len(w), size=n_samples, p=w)
    z = means[comp] + np.sqrt(vars_[comp]) * rng.standard_normal((n_samples, means.shape[1]))
    logp = np.stack([
        -0.5 * np.sum(np.log(2 * np.pi * vars_[l]) + (z - means[l]) ** 2 / vars_[l], axis=1)
        for l in range(len(w))], axis=1) + np.log(w)
    mx = logp.max(axis=1, keepdims=True)
    logq = (mx + np.log(np.exp(logp - mx).sum(axis=1, keepdims=True)))[:, 0]
    return float(-logq.mean()), float(logq.std(ddof=1) / math.sqrt(n_samples))


__all__ = [
    "VARIANCE_FLOOR", "DiagGaussian", "CategoricalDist", "GaussianMixture",
    "gauss_log_pdf", "gauss_reparam_sample", "pair_convolution_logpdf",
    "mog_entropy_lower_bound", "categorical_log_pmf", "gauss_entropy",
    "categorical_entropy", "mc_mixture_entropy",
]
