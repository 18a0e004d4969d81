"""Multi-view VAE family: MVAE, semi-supervised SMVAE and incomplete-data SiMVAE.

Each view v has an encoder q(z | x_v, y) and a decoder p(x_v | y, z). The
approximate posterior over the shared latent is the weighted mixture
``sum_v lambda_v N(mu_v, diag(var_v))``; its entropy is replaced by the
pairwise-convolution Jensen bound. A classifier q(y | X) covers unlabeled
samples by exact enumeration over classes, and for SiMVAE an imputer
q(x_m | x_o) covers samples whose missing view is absent.

Sign convention: :class:`BoundBreakdown` parts are contributions to the
*bound* (log-likelihood side); ``total`` is the bound and ``loss`` its
negative (the quantity minimised during training).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .diffcore import (
    VARIANCE_FLOOR,
    MLPSpec,
    ParamStore,
    Tensor,
    as_tensor,
    concat,
    gauss_log_density,
    init_mlp,
    mlp_forward,
    stack,
)
from .errors import ContractError, DimensionError, WeightingError
from .probdist import (
    CategoricalDist,
    DiagGaussian,
    GaussianMixture,
    gauss_entropy,
    mog_entropy_lower_bound,
)

MODEL_KINDS = ("mvae", "smvae", "simvae")


# ---------------------------------------------------------------------------
# models


@dataclass
class SMVAEModel:
    """Encoders ``enc{v}``, decoders ``dec{v}``, classifier ``clf`` and the
    free mixture logit(s) ``mix.logits`` (first logit pinned to zero).

    With ``label_conditioned=False`` the networks ignore y and there is no
    classifier: this is the unsupervised MVAE restriction.
    """
    view_dims: tuple[int, ...]
    n_classes: int
    latent_dim: int
    hidden_widths: tuple[int, ...]
    params: ParamStore
    log_prior_y: np.ndarray
    variance_floor: float = VARIANCE_FLOOR
    label_conditioned: bool = True

    kind = "smvae"

    @property
    def n_views(self) -> int:
        return len(self.view_dims)

    @property
    def label_width(self) -> int:
        return self.n_classes if self.label_conditioned else 0

    @property
    def has_classifier(self) -> bool:
        return self.label_conditioned

    def encoder_spec(self, v: int) -> MLPSpec:
        return MLPSpec(self.view_dims[v] + self.label_width, tuple(self.hidden_widths),
                       (("mean", self.latent_dim, "linear"),
                        ("var", self.latent_dim, "variance")))

    def decoder_input_dim(self, v: int) -> int:
        return self.label_width + self.latent_dim

    def decoder_spec(self, v: int) -> MLPSpec:
        return MLPSpec(self.decoder_input_dim(v), tuple(reversed(self.hidden_widths)),
                       (("mean", self.view_dims[v], "linear"),
                        ("var", self.view_dims[v], "variance")))

    def classifier_spec(self) -> MLPSpec:
        return MLPSpec(sum(self.view_dims), tuple(self.hidden_widths),
                       (("logp", self.n_classes, "log_softmax"),))

    def specs(self) -> dict[str, MLPSpec]:
        out = {}
        for v in range(self.n_views):
            out[f"enc{v}"] = self.encoder_spec(v)
            out[f"dec{v}"] = self.decoder_spec(v)
        if self.has_classifier:
            out["clf"] = self.classifier_spec()
        return out

    def lambdas(self) -> np.ndarray:
        return np.exp(_log_lambda(self.params).data)


@dataclass
class MVAEModel(SMVAEModel):
    label_conditioned: bool = False
    kind = "mvae"


@dataclass
class SiMVAEModel(SMVAEModel):
    """SMVAE plus the imputer ``imp`` for view ``missing_view``; the decoder of
    the observed view also receives x_m."""
    missing_view: int = 1

    kind = "simvae"

    @property
    def observed_view(self) -> int:
        return 1 - self.missing_view

    def decoder_input_dim(self, v: int) -> int:
        extra = self.view_dims[self.missing_view] if v == self.observed_view else 0
        return self.label_width + self.latent_dim + extra

    def imputer_spec(self) -> MLPSpec:
        d_m = self.view_dims[self.missing_view]
        return MLPSpec(self.view_dims[self.observed_view], tuple(self.hidden_widths),
                       (("mean", d_m, "linear"), ("var", d_m, "variance")))

    def specs(self) -> dict[str, MLPSpec]:
        out = super().specs()
        out["imp"] = self.imputer_spec()
        return out

    def as_smvae(self) -> SMVAEModel:
        """The SMVAE obtained by deleting the x_m -> x_o decoder inputs."""
        o = self.observed_view
        blocks = {k: v.copy() for k, v in self.params.items() if not k.startswith("imp.")}
        w = blocks[f"dec{o}.h0.W"]
        keep = self.label_width + self.latent_dim
        blocks[f"dec{o}.h0.W"] = w[:keep].copy()
        return SMVAEModel(self.view_dims, self.n_classes, self.latent_dim, self.hidden_widths,
                          ParamStore(blocks), self.log_prior_y.copy(), self.variance_floor)

    def xm_decoder_rows(self) -> tuple[str, slice]:
        """Block name and row range of the x_m -> x_o decoder weights."""
        o = self.observed_view
        start = self.label_width + self.latent_dim
        return f"dec{o}.h0.W", slice(start, start + self.view_dims[self.missing_view])


_MODEL_CLASSES = {"mvae": MVAEModel, "smvae": SMVAEModel, "simvae": SiMVAEModel}


def build_model(kind: str, view_dims: Sequence[int], n_classes: int, latent_dim: int = 30,
                hidden_widths: Sequence[int] = (100, 50), rng: np.random.Generator | None = None,
                missing_view: int = 1, prior_y=None,
                variance_floor: float = VARIANCE_FLOOR) -> SMVAEModel:
    if kind not in _MODEL_CLASSES:
        raise ContractError(f"unknown model kind {kind!r}")
    if len(view_dims) != 2 and kind == "simvae":
        raise ContractError("SiMVAE is defined for two views")
    rng = np.random.default_rng(0) if rng is None else rng
    prior = (np.full(n_classes, 1.0 / n_classes) if prior_y is None
             else np.asarray(prior_y, dtype=np.float64))
    if prior.shape != (n_classes,):
        raise DimensionError("prior_y must have one entry per class")
    common = dict(view_dims=tuple(int(d) for d in view_dims), n_classes=int(n_classes),
                  latent_dim=int(latent_dim), hidden_widths=tuple(int(h) for h in hidden_widths),
                  params=ParamStore(), log_prior_y=np.log(CategoricalDist(prior).probs),
                  variance_floor=variance_floor)
    if kind == "simvae":
        model = SiMVAEModel(**common, missing_view=int(missing_view))
    else:
        model = _MODEL_CLASSES[kind](**common)
    blocks = {}
    for prefix, spec in model.specs().items():
        blocks.update(init_mlp(spec, prefix, rng))
    blocks["mix.logits"] = np.zeros(model.n_views - 1)
    model.params = ParamStore(blocks)
    return model


# ---------------------------------------------------------------------------
# noise and batches


@dataclass(frozen=True)
class Noise:
    """Standard-normal draws for a batch of n samples.

    ``z`` has shape (n, T_m, T, V, d_z): one latent draw per (sample,
    imputation draw, t, mixture component). ``m`` has shape (n, T_m, d_m)
    and drives the reparameterised imputer samples. The same ``z`` draws are
    reused for every enumerated class y.
    """
    z: np.ndarray
    m: np.ndarray | None = None

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, model: SMVAEModel, T: int = 1,
             T_m: int = 1) -> "Noise":
        if T < 1 or T_m < 1:
            raise ContractError("T and T_m must be >= 1")
        z = rng.standard_normal((n, T_m, T, model.n_views, model.latent_dim))
        m = None
        if isinstance(model, SiMVAEModel):
            m = rng.standard_normal((n, T_m, model.view_dims[model.missing_view]))
        return cls(z, m)

    @property
    def T(self) -> int:
        return self.z.shape[2]

    @property
    def T_m(self) -> int:
        return self.z.shape[1]

    def take(self, idx) -> "Noise":
        return Noise(self.z[idx], None if self.m is None else self.m[idx])


@dataclass
class Batch:
    """Rows of a minibatch. ``labels`` uses -1 for unlabeled; ``present``
    flags whether the designated missing view is observed (None = all)."""
    views: list
    labels: np.ndarray
    present: np.ndarray | None = None

    def __post_init__(self):
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if any(v.shape[0] != n for v in self.views):
            raise DimensionError("views and labels disagree on row count")
        if self.present is not None:
            self.present = np.asarray(self.present, dtype=bool)

    def __len__(self):
        return len(self.labels)

    @property
    def complete(self) -> np.ndarray:
        return np.ones(len(self), bool) if self.present is None else self.present


# ---------------------------------------------------------------------------
# bound bookkeeping


TERM_NAMES = ("prior_z", "prior_y", "mixture_entropy", "classifier_entropy",
              "imputer_entropy")


@dataclass
class BoundBreakdown:
    """Per-term contributions to a variational lower bound."""
    recon: tuple
    prior_z: float = 0.0
    prior_y: float = 0.0
    mixture_entropy: float = 0.0
    classifier_entropy: float = 0.0
    imputer_entropy: float = 0.0
    total: float = 0.0

    @property
    def loss(self) -> float:
        return -self.total

    def parts_sum(self) -> float:
        return float(sum(self.recon) + sum(getattr(self, k) for k in TERM_NAMES))


class _Terms:
    """Per-row bound terms as Tensors sharing one shape."""

    def __init__(self, recon, shape, **parts):
        self.recon = list(recon)
        for k in TERM_NAMES:
            setattr(self, k, parts.get(k) if parts.get(k) is not None else Tensor(np.zeros(shape)))

    def map(self, fn) -> "_Terms":
        return _Terms([fn(r) for r in self.recon], None,
                      **{k: fn(getattr(self, k)) for k in TERM_NAMES})

    def total(self) -> Tensor:
        t = self.recon[0]
        for r in self.recon[1:]:
            t = t + r
        for k in TERM_NAMES:
            t = t + getattr(self, k)
        return t

    def breakdown(self, i=None) -> BoundBreakdown:
        def val(t):
            d = t.data if i is None else t.data[i]
            return float(np.sum(d))
        parts = {k: val(getattr(self, k)) for k in TERM_NAMES}
        bb = BoundBreakdown(tuple(val(r) for r in self.recon), **parts)
        bb.total = val(self.total())
        return bb


def _log_lambda(P: Mapping) -> Tensor:
    free = as_tensor(P["mix.logits"])
    return concat([Tensor(np.zeros(1)), free], axis=-1).log_softmax(axis=-1)


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[np.asarray(y, dtype=np.int64)]


def _rep_rows(x, k: int) -> Tensor:
    """(R, d) -> (R*k, d), each row repeated k times consecutively."""
    x = as_tensor(x)
    r, d = x.shape
    return x.reshape(r, 1, d).broadcast_to((r, k, d)).reshape(r * k, d)


def encoder_mixture(model: SMVAEModel, P: Mapping, views: Sequence,
                    onehot: np.ndarray | None) -> GaussianMixture:
    comps = []
    for v in range(model.n_views):
        inp = views[v] if onehot is None else concat([views[v], onehot], axis=-1)
        h = mlp_forward(model.encoder_spec(v), P, inp, f"enc{v}", model.variance_floor)
        comps.append(DiagGaussian(h["mean"], h["var"]))
    return GaussianMixture(comps, log_weights=_log_lambda(P))


def _elbo_rows(model: SMVAEModel, P: Mapping, views: Sequence, y: np.ndarray | None,
               eps: np.ndarray) -> _Terms:
    """Bound terms given label y for R rows.

    ``views`` are (R, d_v) arrays or Tensors; ``eps`` is (R, T, V, d_z).
    The reconstruction and prior-z expectations use, for component l, the
    T draws z = mu_l + sqrt(var_l) * eps[:, t, l], weighted by lambda_l.
    """
    R, T, V, dz = eps.shape
    if V != model.n_views or dz != model.latent_dim:
        raise DimensionError(f"noise shape {eps.shape} does not match model")
    onehot = None
    if model.label_conditioned:
        if y is None:
            raise ContractError("label-conditioned model needs y")
        onehot = _onehot(y, model.n_classes)
    mix = encoder_mixture(model, P, views, onehot)
    lam = mix.log_weights.exp()
    H = as_tensor(mog_entropy_lower_bound(mix))

    means = stack([c.mean for c in mix.components], axis=1)          # (R, V, dz)
    sds = stack([c.var for c in mix.components], axis=1).sqrt()
    z = means.reshape(R, 1, V, dz) + sds.reshape(R, 1, V, dz) * eps  # (R, T, V, dz)
    n = T * V
    zf = z.reshape(R * n, dz)

    def expect(logp_flat: Tensor) -> Tensor:
        per = logp_flat.reshape(R, T, V).mean(axis=1)   # (R, V)
        return (per * lam).sum(axis=-1)

    recon = []
    for v in range(V):
        parts = []
        if onehot is not None:
            parts.append(np.repeat(onehot, n, axis=0))
        parts.append(zf)
        if isinstance(model, SiMVAEModel) and v == model.observed_view:
            parts.append(_rep_rows(views[model.missing_view], n))
        out = mlp_forward(model.decoder_spec(v), P, concat(parts, axis=-1), f"dec{v}",
                          model.variance_floor)
        target = _rep_rows(views[v], n)
        recon.append(expect(gauss_log_density(target, out["mean"], out["var"])))
    prior_z = expect(gauss_log_density(zf, np.zeros(dz), np.ones(dz)))
    prior_y = Tensor(model.log_prior_y[y] if onehot is not None else np.zeros(R))
    return _Terms(recon, (R,), prior_z=prior_z, prior_y=prior_y, mixture_entropy=H)


def classifier_log_probs(model: SMVAEModel, P: Mapping, views: Sequence) -> Tensor:
    if not model.has_classifier:
        raise ContractError(f"{model.kind} has no classifier")
    h = mlp_forward(model.classifier_spec(), P, concat(list(views), axis=-1), "clf",
                    model.variance_floor)
    return h["logp"]


def _enumerate_y(model: SMVAEModel, P: Mapping, views: Sequence, eps: np.ndarray) -> _Terms:
    """Unlabeled bound terms: exact expectation over y under q(y | X)."""
    R = eps.shape[0]
    K = model.n_classes
    rows = [_rep_rows(v, K) for v in views]
    y = np.tile(np.arange(K), R)
    terms = _elbo_rows(model, P, rows, y, np.repeat(eps, K, axis=0))
    logq = classifier_log_probs(model, P, views)      # (R, K)
    q = logq.exp()
    agg = terms.map(lambda t: (t.reshape(R, K) * q).sum(axis=1))
    agg.classifier_entropy = -(q * logq).sum(axis=1)
    return agg


def _imputer(model: SiMVAEModel, P: Mapping, x_o) -> DiagGaussian:
    h = mlp_forward(model.imputer_spec(), P, x_o, "imp", model.variance_floor)
    return DiagGaussian(h["mean"], h["var"])


def _views(model: SiMVAEModel, x_o, x_m) -> list:
    out = [None, None]
    out[model.observed_view] = x_o
    out[model.missing_view] = x_m
    return out


def _incomplete_rows(model: SiMVAEModel, P: Mapping, x_o: np.ndarray, y: np.ndarray | None,
                     noise: Noise, q_imp: DiagGaussian | None = None) -> _Terms:
    """LI (y given) or UI (y None) terms for rows missing x_m.

    x_m is drawn T_m times from the imputer by reparameterisation; the
    expectation of -log q(x_m | x_o) is the closed-form Gaussian entropy.
    """
    R, Tm = noise.z.shape[:2]
    if noise.m is None:
        raise ContractError("incomplete rows need imputer noise")
    q_imp = _imputer(model, P, x_o) if q_imp is None else q_imp
    d_m = q_imp.dim
    mean = as_tensor(q_imp.mean).reshape(R, 1, d_m)
    sd = as_tensor(q_imp.var).sqrt().reshape(R, 1, d_m)
    xm = (mean + sd * noise.m).reshape(R * Tm, d_m)
    xo = _rep_rows(x_o, Tm)
    eps = noise.z.reshape((R * Tm,) + noise.z.shape[2:])
    views = _views(model, xo, xm)
    if y is None:
        terms = _enumerate_y(model, P, views, eps)
    else:
        terms = _elbo_rows(model, P, views, np.repeat(y, Tm), eps)
    agg = terms.map(lambda t: t.reshape(R, Tm).mean(axis=1))
    agg.imputer_entropy = as_tensor(gauss_entropy(q_imp))
    return agg


# ---------------------------------------------------------------------------
# single-sample public bounds


def _as_rows(X) -> list:
    return [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in X]


def _single_noise(noise: Noise) -> Noise:
    if noise.z.ndim == 4:
        return Noise(noise.z[None], None if noise.m is None else noise.m[None])
    return noise


def _check_label(model, y):
    if not (0 <= int(y) < model.n_classes):
        raise ContractError(f"label {y} outside [0, {model.n_classes})")


def _check_complete(X):
    if any(x is None or not np.isfinite(np.asarray(x, dtype=np.float64)).all() for x in X):
        raise ContractError("this bound needs every view present")


def mvae_elbo(model: SMVAEModel, X, noise: Noise) -> BoundBreakdown:
    """ELBO of the unsupervised multi-view VAE for one complete sample."""
    _check_complete(X)
    if model.label_conditioned:
        raise ContractError("mvae_elbo needs the unsupervised (MVAE) model")
    noise = _single_noise(noise)
    return _elbo_rows(model, model.params, _as_rows(X), None, noise.z[:, 0]).breakdown(0)


def smvae_labeled_bound(model: SMVAEModel, X, y: int, noise: Noise) -> BoundBreakdown:
    """-L(X, y) with its breakdown (``.loss`` is L)."""
    _check_complete(X)
    _check_label(model, y)
    noise = _single_noise(noise)
    return _elbo_rows(model, model.params, _as_rows(X), np.array([y]),
                      noise.z[:, 0]).breakdown(0)


def smvae_unlabeled_bound(model: SMVAEModel, X, noise: Noise) -> BoundBreakdown:
    """-U(X): expectation of -L(X, y) - log q(y|X) under q(y|X), all K classes."""
    _check_complete(X)
    noise = _single_noise(noise)
    return _enumerate_y(model, model.params, _as_rows(X), noise.z[:, 0]).breakdown(0)


def _require_simvae(model):
    if not isinstance(model, SiMVAEModel):
        raise ContractError("this bound needs a SiMVAE model")


def simvae_bound_lc(model: SiMVAEModel, X, y: int, noise: Noise) -> BoundBreakdown:
    """-LC(X, y): labeled, complete; the x_o decoder sees the true x_m."""
    _require_simvae(model)
    _check_complete(X)
    _check_label(model, y)
    noise = _single_noise(noise)
    return _elbo_rows(model, model.params, _as_rows(X), np.array([y]),
                      noise.z[:, 0]).breakdown(0)


def simvae_bound_li(model: SiMVAEModel, x_o, y: int, noise: Noise) -> BoundBreakdown:
    """-LI(x_o, y): labeled, x_m integrated out under the imputer."""
    _require_simvae(model)
    _check_label(model, y)
    noise = _single_noise(noise)
    return _incomplete_rows(model, model.params, np.atleast_2d(x_o), np.array([y]),
                            noise).breakdown(0)


def simvae_bound_uc(model: SiMVAEModel, X, noise: Noise) -> BoundBreakdown:
    """-UC(X): unlabeled, complete."""
    _require_simvae(model)
    _check_complete(X)
    noise = _single_noise(noise)
    return _enumerate_y(model, model.params, _as_rows(X), noise.z[:, 0]).breakdown(0)


def simvae_bound_ui(model: SiMVAEModel, x_o, noise: Noise) -> BoundBreakdown:
    """-UI(x_o): unlabeled and incomplete; both y and x_m are latent."""
    _require_simvae(model)
    noise = _single_noise(noise)
    return _incomplete_rows(model, model.params, np.atleast_2d(x_o), None, noise).breakdown(0)


# ---------------------------------------------------------------------------
# objectives


@dataclass
class ObjectiveResult:
    value: Tensor
    breakdown: BoundBreakdown
    alphas: tuple
    counts: dict = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return float(self.value.data)


def _sum_terms(chunks: list, n_views: int) -> BoundBreakdown:
    bb = BoundBreakdown(tuple(0.0 for _ in range(n_views)))
    for t in chunks:
        part = t.breakdown()
        bb.recon = tuple(a + b for a, b in zip(bb.recon, part.recon))
        for k in TERM_NAMES + ("total",):
            setattr(bb, k, getattr(bb, k) + getattr(part, k))
    return bb


def _nll_labels(logq: Tensor, y: np.ndarray) -> Tensor:
    return -logq[np.arange(len(y)), y].sum()


def mvae_objective_tensor(model: SMVAEModel, P: Mapping, batch: Batch,
                          noise: Noise) -> ObjectiveResult:
    terms = _elbo_rows(model, P, batch.views, None, noise.z[:, 0])
    return ObjectiveResult(-terms.total().sum(), _sum_terms([terms], model.n_views), ())


def smvae_objective_tensor(model: SMVAEModel, P: Mapping, batch: Batch, c: float,
                           noise: Noise, use_unlabeled: bool = True) -> ObjectiveResult:
    """F = sum L + sum U + alpha * sum[-log q(y|X)], alpha = c (N_l + N_u) / N_l.

    With ``use_unlabeled=False`` the U terms are dropped (labeled-only
    ablation) while alpha keeps its minibatch value.
    """
    lab = batch.labels >= 0
    n_l, n_u = int(lab.sum()), int((~lab).sum())
    if n_l == 0:
        raise WeightingError("minibatch has no labeled sample")
    alpha = c * (n_l + n_u) / n_l
    chunks = []
    li = np.flatnonzero(lab)
    xl = [v[li] for v in batch.views]
    lt = _elbo_rows(model, P, xl, batch.labels[li], noise.z[li, 0])
    chunks.append(lt)
    bound = lt.total().sum()
    if n_u and use_unlabeled:
        ui = np.flatnonzero(~lab)
        ut = _enumerate_y(model, P, [v[ui] for v in batch.views], noise.z[ui, 0])
        chunks.append(ut)
        bound = bound + ut.total().sum()
    clf = _nll_labels(classifier_log_probs(model, P, xl), batch.labels[li])
    value = -bound + alpha * clf
    return ObjectiveResult(value, _sum_terms(chunks, model.n_views), (alpha,),
                           {"N_l": n_l, "N_u": n_u, "classification_nll": float(clf.data)})


def simvae_objective_tensor(model: SiMVAEModel, P: Mapping, batch: Batch, c1: float,
                            c2: float, noise: Noise) -> ObjectiveResult:
    """F = sum LC + LI + UC + UI + alpha1 * sum_{S_c}[-log q(x_m|x_o)]
    + alpha2 * sum_{S_l}[-log q(y|X)].

    The classifier term fills x_m of incomplete labeled rows with the imputer
    mean.
    """
    _require_simvae(model)
    o, m = model.observed_view, model.missing_view
    lab = batch.labels >= 0
    comp = batch.complete
    n_l, n_u = int(lab.sum()), int((~lab).sum())
    n_c, n_i = int(comp.sum()), int((~comp).sum())
    if n_l == 0:
        raise WeightingError("minibatch has no labeled sample")
    if n_c == 0:
        raise WeightingError("minibatch has no complete sample")
    alpha1 = c1 * (n_c + n_i) / n_c
    alpha2 = c2 * (n_l + n_u) / n_l
    x_o, x_m = batch.views[o], batch.views[m]
    q_imp = _imputer(model, P, x_o)
    imp_mean, imp_var = as_tensor(q_imp.mean), as_tensor(q_imp.var)

    chunks, bound = [], None

    def add(t):
        nonlocal bound
        chunks.append(t)
        s = t.total().sum()
        bound = s if bound is None else bound + s

    idx = {
        "lc": np.flatnonzero(lab & comp), "li": np.flatnonzero(lab & ~comp),
        "uc": np.flatnonzero(~lab & comp), "ui": np.flatnonzero(~lab & ~comp),
    }
    if idx["lc"].size:
        r = idx["lc"]
        add(_elbo_rows(model, P, _views(model, x_o[r], x_m[r]), batch.labels[r], noise.z[r, 0]))
    if idx["uc"].size:
        r = idx["uc"]
        add(_enumerate_y(model, P, _views(model, x_o[r], x_m[r]), noise.z[r, 0]))
    for key in ("li", "ui"):
        r = idx[key]
        if r.size:
            q_r = DiagGaussian(imp_mean[r], imp_var[r])
            y = batch.labels[r] if key == "li" else None
            add(_incomplete_rows(model, P, x_o[r], y, noise.take(r), q_imp=q_r))

    ci = np.flatnonzero(comp)
    imp_nll = -gauss_log_density(x_m[ci], imp_mean[ci], imp_var[ci]).sum()

    li_all = np.flatnonzero(lab)
    filled_m = concat([Tensor(x_m[li_all][comp[li_all]]), imp_mean[li_all[~comp[li_all]]]],
                      axis=0)
    order = np.concatenate([np.flatnonzero(comp[li_all]), np.flatnonzero(~comp[li_all])])
    labels = batch.labels[li_all][order]
    xo_l = Tensor(x_o[li_all][order])
    clf_views = _views(model, xo_l, filled_m)
    clf = _nll_labels(classifier_log_probs(model, P, clf_views), labels)

    value = -bound + alpha1 * imp_nll + alpha2 * clf
    counts = {"N_l": n_l, "N_u": n_u, "N_c": n_c, "N_i": n_i,
              "imputation_nll": float(imp_nll.data), "classification_nll": float(clf.data)}
    return ObjectiveResult(value, _sum_terms(chunks, model.n_views), (alpha1, alpha2), counts)


def smvae_objective(model: SMVAEModel, labeled: Batch, unlabeled: Batch | None, c: float,
                    noise: Noise) -> tuple[float, BoundBreakdown]:
    """Objective over a labeled and an unlabeled set; noise rows follow
    labeled rows then unlabeled rows."""
    views = labeled.views if unlabeled is None else [
        np.concatenate([a, b]) for a, b in zip(labeled.views, unlabeled.views)]
    labels = labeled.labels if unlabeled is None else np.concatenate(
        [labeled.labels, np.full(len(unlabeled), -1)])
    res = smvae_objective_tensor(model, model.params, Batch(views, labels), c, noise)
    return res.scalar, res.breakdown


def simvae_objective(model: SiMVAEModel, batch: Batch, c1: float, c2: float,
                     noise: Noise) -> tuple[float, BoundBreakdown]:
    res = simvae_objective_tensor(model, model.params, batch, c1, c2, noise)
    return res.scalar, res.breakdown


def objective_tensor(model: SMVAEModel, P: Mapping, batch: Batch, noise: Noise, *,
                     c: float = 1.0, c1: float = 1.0, c2: float = 1.0,
                     use_unlabeled: bool = True) -> ObjectiveResult:
    """Dispatch on model kind."""
    if model.kind == "mvae":
        return mvae_objective_tensor(model, P, batch, noise)
    if model.kind == "smvae":
        return smvae_objective_tensor(model, P, batch, c, noise, use_unlabeled)
    return simvae_objective_tensor(model, P, batch, c1, c2, noise)


# ---------------------------------------------------------------------------
# prediction


def predict_log_proba(model: SMVAEModel, views: Sequence[np.ndarray]) -> np.ndarray:
    views = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in views]
    if any(not np.isfinite(v).all() for v in views):
        raise ContractError("classify needs every view slot filled; impute first")
    return classifier_log_probs(model, model.params, views).data


def classify(model: SMVAEModel, X) -> CategoricalDist:
    """q(y | X) for one sample (1-D views) or a batch (2-D views)."""
    single = np.asarray(X[0]).ndim == 1
    lp = predict_log_proba(model, X)
    return CategoricalDist(log_probs=lp[0] if single else lp)


def impute(model: SiMVAEModel, x_o) -> np.ndarray:
    """Conditional-mean imputation E[q(x_m | x_o)]."""
    _require_simvae(model)
    x = np.asarray(x_o, dtype=np.float64)
    single = x.ndim == 1
    mean = mlp_forward(model.imputer_spec(), model.params, np.atleast_2d(x), "imp",
                       model.variance_floor)["mean"].data
    return mean[0] if single else mean


def with_params(model: SMVAEModel, params: ParamStore) -> SMVAEModel:
    return replace(model, params=params)
