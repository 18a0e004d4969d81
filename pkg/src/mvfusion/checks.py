"""Self-check suites: gradients against finite differences, the mixture
entropy bound against Monte Carlo, degenerate-classifier identities, and
bound domination of a quadrature log-likelihood on a one-dimensional toy."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from .diffcore import ParamStore, backprop_grads, finite_diff_gradient, mlp_forward
from .genmodels import (
    Batch,
    Noise,
    SiMVAEModel,
    _elbo_rows,
    _enumerate_y,
    _incomplete_rows,
    build_model,
    objective_tensor,
)
from .probdist import (
    DiagGaussian,
    GaussianMixture,
    mc_mixture_entropy,
    mog_entropy_lower_bound,
)

GRAD_TOL = 1e-4
ESTIMATORS = ("ELBO", "L", "U", "LC", "LI", "UC", "UI", "F_SMVAE", "F_SIMVAE")


@dataclass
class CheckResult:
    family: str
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Report:
    results: list = field(default_factory=list)

    def add(self, family, name, passed, detail=""):
        self.results.append(CheckResult(family, name, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def families(self) -> list:
        return sorted({r.family for r in self.results})

    def lines(self) -> list[str]:
        return [f"{'PASS' if r.passed else 'FAIL'} [{r.family}] {r.name}"
                + (f": {r.detail}" if r.detail else "") for r in self.results]


# ---------------------------------------------------------------------------
# gradients


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over a block, scaled by the block's largest |n|."""
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def tiny_model(kind: str, seed: int = 0, view_dims=(3, 2), n_classes: int = 2,
               latent_dim: int = 2, hidden=(3,)):
    rng = np.random.default_rng(seed)
    model = build_model(kind, view_dims, n_classes, latent_dim, hidden, rng)
    # move the mixture weights off the symmetric point
    model.params["mix.logits"] = rng.normal(size=model.params["mix.logits"].shape)
    return model


def estimator_losses(seed: int = 0) -> dict[str, tuple]:
    """Per-estimator (model, loss(P) -> Tensor) pairs for one sample, frozen noise."""
    rng = np.random.default_rng(seed + 1)
    out = {}
    mv = tiny_model("mvae", seed)
    sm = tiny_model("smvae", seed)
    si = tiny_model("simvae", seed)
    X = [rng.normal(size=(1, d)) for d in (3, 2)]
    y = np.array([1])
    nz = {k: Noise.draw(rng, 1, m, T=1, T_m=1) for k, m in
          (("mvae", mv), ("smvae", sm), ("simvae", si))}
    z_s, z_i = nz["smvae"].z[:, 0], nz["simvae"].z[:, 0]
    out["ELBO"] = (mv, lambda P: -_elbo_rows(mv, P, X, None, nz["mvae"].z[:, 0]).total().sum())
    out["L"] = (sm, lambda P: -_elbo_rows(sm, P, X, y, z_s).total().sum())
    out["U"] = (sm, lambda P: -_enumerate_y(sm, P, X, z_s).total().sum())
    out["LC"] = (si, lambda P: -_elbo_rows(si, P, X, y, z_i).total().sum())
    out["UC"] = (si, lambda P: -_enumerate_y(si, P, X, z_i).total().sum())
    x_o = X[si.observed_view]
    out["LI"] = (si, lambda P: -_incomplete_rows(si, P, x_o, y, nz["simvae"]).total().sum())
    out["UI"] = (si, lambda P: -_incomplete_rows(si, P, x_o, None, nz["simvae"]).total().sum())

    n = 4
    Xb = [rng.normal(size=(n, d)) for d in (3, 2)]
    labels = np.array([0, -1, 1, -1])
    nb_s = Noise.draw(rng, n, sm)
    nb_i = Noise.draw(rng, n, si)
    bs = Batch(Xb, labels)
    bi = Batch(Xb, labels, present=np.array([True, False, False, True]))
    out["F_SMVAE"] = (sm, lambda P: objective_tensor(sm, P, bs, nb_s, c=0.5).value)
    out["F_SIMVAE"] = (si, lambda P: objective_tensor(si, P, bi, nb_i, c1=0.5, c2=1.0).value)
    return out


def check_gradients(report: Report, seed: int = 0, h: float = 1e-5,
                    corrupt: str | None = None) -> None:
    """Every parameter block of every estimator against central differences.

    ``corrupt`` names an estimator whose analytic gradient is deliberately
    perturbed (fault-injection hook).
    """
    if corrupt is not None and corrupt not in ESTIMATORS:
        raise ValueError(f"unknown estimator {corrupt!r}")
    for name, (model, loss) in estimator_losses(seed).items():
        leaves = model.params.leaves()
        analytic = backprop_grads(loss(leaves), leaves)
        if name == corrupt:
            analytic = ParamStore({k: g * 1.01 + 1e-3 for k, g in analytic.items()})
        numeric = finite_diff_gradient(lambda P: float(loss(P).data), model.params, h=h)
        worst, where = 0.0, ""
        for k in model.params.keys():
            err = relative_error(analytic[k], numeric[k])
            if err > worst:
                worst, where = err, k
        report.add("gradient", f"estimator {name} ({model.params.size} params)",
                   worst <= GRAD_TOL, f"max rel err {worst:.2e} at {where}")


# ---------------------------------------------------------------------------
# entropy bound


def random_mixture(rng: np.random.Generator, d: int, n_comp: int = 2) -> GaussianMixture:
    comps = [DiagGaussian(rng.normal(scale=2.0, size=d), np.exp(rng.uniform(-2, 1.5, size=d)))
             for _ in range(n_comp)]
    w = rng.dirichlet(np.ones(n_comp))
    w = np.clip(w, 1e-3, None)
    return GaussianMixture(comps, weights=w / w.sum())


def check_entropy_bound(report: Report, seed: int = 0, n_mixtures: int = 200,
                        n_samples: int = 100_000) -> None:
    rng = np.random.default_rng(seed)
    violations = []
    for i in range(n_mixtures):
        m = random_mixture(rng, int(rng.integers(1, 9)))
        lb = mog_entropy_lower_bound(m)
        est, se = mc_mixture_entropy(m, n_samples, rng)
        if lb > est + 3 * se:
            violations.append(i)
    report.add("entropy", f"bound <= MC entropy + 3 SE on {n_mixtures} mixtures",
               not violations, f"{len(violations)} violations")
    g = DiagGaussian(np.zeros(1), np.ones(1))
    val = mog_entropy_lower_bound(GaussianMixture([g, g], weights=[0.5, 0.5]))
    exact = 0.5 * math.log(4 * math.pi)
    report.add("entropy", "identical unit components, d=1",
               abs(val - exact) <= 1e-9 and round(val, 7) == 1.2655121,
               f"value {val:.10f}")


# ---------------------------------------------------------------------------
# degenerate classifiers


def _set_classifier(model, logits: np.ndarray) -> None:
    for k in model.params.keys():
        if k.startswith("clf.logp."):
            model.params[k] = np.zeros_like(model.params[k])
    model.params["clf.logp.b"] = np.asarray(logits, dtype=np.float64)


def _drop_label_inputs(model) -> None:
    """Zero the one-hot input rows so every bound term is class-constant."""
    K = model.n_classes
    for v in range(model.n_views):
        w = model.params[f"enc{v}.h0.W"].copy()
        d = model.view_dims[v]
        w[d:d + K] = 0.0
        model.params[f"enc{v}.h0.W"] = w
        w = model.params[f"dec{v}.h0.W"].copy()
        w[:K] = 0.0
        model.params[f"dec{v}.h0.W"] = w


def check_degenerate(report: Report, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for kind in ("smvae", "simvae"):
        model = tiny_model(kind, seed, n_classes=3)
        X = [rng.normal(size=(1, d)) for d in model.view_dims]
        eps = Noise.draw(rng, 1, model).z[:, 0]
        y_star = 2
        logits = np.full(3, -1e4)
        logits[y_star] = 0.0
        _set_classifier(model, logits)
        P = model.params
        u = float(_enumerate_y(model, P, X, eps).total().data[0])
        lab = float(_elbo_rows(model, P, X, np.array([y_star]), eps).total().data[0])
        tag = "U vs L" if kind == "smvae" else "UC vs LC"
        report.add("degenerate", f"one-hot classifier, {tag}", abs(u - lab) <= 1e-10,
                   f"diff {abs(u - lab):.1e}")

        _set_classifier(model, np.zeros(3))
        _drop_label_inputs(model)
        model.log_prior_y = np.full(3, -math.log(3))
        u = float(_enumerate_y(model, P, X, eps).total().data[0])
        lab = float(_elbo_rows(model, P, X, np.array([0]), eps).total().data[0])
        # losses: U = L - log K  <=>  bounds: -U = -L + log K
        diff = abs((-u) - ((-lab) - math.log(3)))
        report.add("degenerate", f"uniform classifier, class-constant bound ({kind})",
                   diff <= 1e-10, f"diff {diff:.1e}")


# ---------------------------------------------------------------------------
# quadrature domination


def quantile_nodes(T: int) -> np.ndarray:
    """Equal-weight normal quantile nodes, rescaled to unit second moment."""
    nd = NormalDist()
    e = np.array([nd.inv_cdf((t + 0.5) / T) for t in range(T)])
    if T == 1:
        return e
    return e / math.sqrt(np.mean(e * e))


def _log_normal(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def _decoder(model, v, y, z, extra=None):
    K = model.n_classes
    cols = [z]
    if model.label_conditioned:
        cols.insert(0, np.broadcast_to(np.eye(K)[y], (z.shape[0], K)))
    if extra is not None:
        cols.append(extra)
    out = mlp_forward(model.decoder_spec(v), model.params, np.concatenate(cols, axis=1),
                      f"dec{v}", model.variance_floor)
    return out["mean"].data[:, 0], out["var"].data[:, 0]


def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def quadrature_log_joint(model, x_o: float, x_m: float | None, y: int,
                         n_grid: int = 4001, n_hermite: int = 80) -> float:
    """log p(X, y) (or log p(x_o, y) with x_m = None) for a d_z = 1, scalar-view
    model, by trapezoid quadrature in z and Gauss-Hermite in x_m."""
    zg = np.linspace(-12.0, 12.0, n_grid)
    dz = zg[1] - zg[0]
    Z = zg[:, None]
    log_pz = _log_normal(zg, 0.0, 1.0)
    simvae = isinstance(model, SiMVAEModel)
    o = model.observed_view if simvae else 0
    m = model.missing_view if simvae else 1
    mu_m, var_m = _decoder(model, m, y, Z)
    if x_m is not None:
        xm_col = np.full((n_grid, 1), x_m)
        mu_o, var_o = _decoder(model, o, y, Z, xm_col if simvae else None)
        inner = _log_normal(x_m, mu_m, var_m) + _log_normal(x_o, mu_o, var_o)
    else:
        nodes, weights = np.polynomial.hermite.hermgauss(n_hermite)
        xs = mu_m[:, None] + np.sqrt(2.0 * var_m)[:, None] * nodes[None, :]   # (G, H)
        Zr = np.repeat(Z, n_hermite, axis=0)
        mu_o, var_o = _decoder(model, o, y, Zr, xs.reshape(-1, 1))
        lo = _log_normal(x_o, mu_o, var_o).reshape(n_grid, n_hermite)
        inner = _logsumexp(lo + np.log(weights / math.sqrt(math.pi))[None, :], axis=1)
    integrand = log_pz + inner
    trap = np.full(n_grid, math.log(dz))
    trap[[0, -1]] += math.log(0.5)
    log_py = model.log_prior_y[y] if model.label_conditioned else 0.0
    return float(log_py + _logsumexp(integrand + trap))


def toy_models(seed: int):
    rng = np.random.default_rng(seed)
    mv = build_model("mvae", (1, 1), 2, 1, (4,), rng)
    sm = build_model("smvae", (1, 1), 2, 1, (4,), rng)
    si = build_model("simvae", (1, 1), 2, 1, (4,), rng)
    for model in (mv, sm, si):
        for k in model.params.keys():
            model.params[k] = model.params[k] + rng.normal(scale=0.3, size=model.params[k].shape)
        model.log_prior_y = np.log(rng.dirichlet([4.0, 4.0]))
    return mv, sm, si


def _quantile_noise(model, T: int, T_m: int = 1) -> Noise:
    e = quantile_nodes(T)
    V = model.n_views
    z = np.broadcast_to(e[None, None, :, None, None], (1, T_m, T, V, 1)).copy()
    m = None
    if isinstance(model, SiMVAEModel):
        m = np.broadcast_to(quantile_nodes(T_m)[None, :, None], (1, T_m, 1)).copy()
    return Noise(z, m)


def domination_gaps(seed: int, T: int = 2000, T_m: int = 200, T_inner: int = 200) -> dict:
    """log-likelihood minus bound for every bound family on one random toy."""
    mv, sm, si = toy_models(seed)
    rng = np.random.default_rng(seed + 10_000)
    x = rng.normal(size=2)
    X = [x[:1][None], x[1:][None]]
    y = int(rng.integers(0, 2))
    gaps = {}
    nz = _quantile_noise(mv, T)
    gaps["ELBO"] = quadrature_log_joint(mv, x[0], x[1], 0) - float(
        _elbo_rows(mv, mv.params, X, None, nz.z[:, 0]).total().data[0])
    nz = _quantile_noise(sm, T)
    log_xy = quadrature_log_joint(sm, x[0], x[1], y)
    log_x = float(_logsumexp(np.array([quadrature_log_joint(sm, x[0], x[1], k)
                                       for k in range(2)])))
    gaps["L"] = log_xy - float(_elbo_rows(sm, sm.params, X, np.array([y]),
                                          nz.z[:, 0]).total().data[0])
    gaps["U"] = log_x - float(_enumerate_y(sm, sm.params, X, nz.z[:, 0]).total().data[0])

    o, m = si.observed_view, si.missing_view
    x_o, x_m = x[o], x[m]
    nz = _quantile_noise(si, T)
    lc = quadrature_log_joint(si, x_o, x_m, y)
    uc = float(_logsumexp(np.array([quadrature_log_joint(si, x_o, x_m, k) for k in range(2)])))
    li = quadrature_log_joint(si, x_o, None, y)
    ui = float(_logsumexp(np.array([quadrature_log_joint(si, x_o, None, k) for k in range(2)])))
    gaps["LC"] = lc - float(_elbo_rows(si, si.params, X, np.array([y]),
                                       nz.z[:, 0]).total().data[0])
    gaps["UC"] = uc - float(_enumerate_y(si, si.params, X, nz.z[:, 0]).total().data[0])
    ni = _quantile_noise(si, T_inner, T_m)
    xo = np.array([[x_o]])
    gaps["LI"] = li - float(_incomplete_rows(si, si.params, xo, np.array([y]),
                                             ni).total().data[0])
    gaps["UI"] = ui - float(_incomplete_rows(si, si.params, xo, None, ni).total().data[0])
    return gaps


def check_domination(report: Report, n_draws: int = 20, seed: int = 0) -> None:
    worst = {}
    for s in range(seed, seed + n_draws):
        for k, g in domination_gaps(s).items():
            worst[k] = min(worst.get(k, math.inf), g)
    for k, g in worst.items():
        report.add("domination", f"bound {k} <= quadrature log-likelihood ({n_draws} draws)",
                   g >= -1e-6, f"min gap {g:.3e}")


SUITES: dict[str, Callable] = {
    "gradient": check_gradients,
    "entropy": check_entropy_bound,
    "degenerate": check_degenerate,
    "domination": check_domination,
}


def run_all(corrupt: str | None = None, quick: bool = False) -> Report:
    report = Report()
    t0 = time.perf_counter()
    check_gradients(report, corrupt=corrupt)
    check_entropy_bound(report, n_mixtures=50 if quick else 200,
                        n_samples=20_000 if quick else 100_000)
    check_degenerate(report)
    check_domination(report, n_draws=3 if quick else 20)
    report.add("meta", "elapsed", True, f"{time.perf_counter() - t0:.1f} s")
    return report
