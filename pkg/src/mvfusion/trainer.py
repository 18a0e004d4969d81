"""Stratified minibatching, Monte-Carlo gradient estimation and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import datakit
from .datakit import MultiViewDataset
from .diffcore import AdamState, ParamStore, adam_step, backprop_grads, gauss_log_density
from .errors import ConfigError, NumericError
from .genmodels import (
    MODEL_KINDS,
    Batch,
    Noise,
    ObjectiveResult,
    SiMVAEModel,
    SMVAEModel,
    _elbo_rows,
    _enumerate_y,
    _imputer,
    _incomplete_rows,
    classifier_log_probs,
    build_model,
    impute,
    objective_tensor,
    predict_log_proba,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model_kind: str = "smvae"
    latent_dim: int = 30
    hidden_widths: tuple = (100, 50)
    lr: float = 3e-4
    batch_size: int = 64
    epochs: int = 100
    T: int = 1
    T_m: int = 1
    c: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    variance_floor: float = 1e-6
    seed: int = 0
    use_unlabeled: bool = True
    clip_norm: float | None = None
    record_time: bool = False

    def __post_init__(self):
        self.hidden_widths = tuple(int(h) for h in self.hidden_widths)
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if min(self.c, self.c1, self.c2) <= 0:
            raise ConfigError("c, c1, c2 must be positive")
        if self.T < 1 or self.T_m < 1 or self.epochs < 0:
            raise ConfigError("T, T_m >= 1 and epochs >= 0 required")


@dataclass
class MinibatchPlan:
    lc: np.ndarray
    li: np.ndarray
    uc: np.ndarray
    ui: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.lc, self.li, self.uc, self.ui])

    @property
    def counts(self) -> dict:
        n_l = len(self.lc) + len(self.li)
        n_c = len(self.lc) + len(self.uc)
        return {"N_l": n_l, "N_u": len(self.uc) + len(self.ui),
                "N_c": n_c, "N_i": len(self.li) + len(self.ui)}


@dataclass
class RunRecord:
    seed: int
    epochs: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [dict(seed=self.seed, **e) for e in self.epochs]


def plan_minibatches(ds: MultiViewDataset, cfg: TrainConfig,
                     rng: np.random.Generator) -> list[MinibatchPlan]:
    """One epoch of batches covering every row exactly once.

    Strata are dealt round-robin into B batches, labeled rows first, so every
    batch holds a labeled row; for SiMVAE unlabeled-complete rows start on the
    batches that no labeled-complete row reached, so every batch also holds a
    complete row.
    """
    lab = ds.labeled
    comp = ds.view_mask
    strata = {
        "lc": np.flatnonzero(lab & comp), "li": np.flatnonzero(lab & ~comp),
        "uc": np.flatnonzero(~lab & comp), "ui": np.flatnonzero(~lab & ~comp),
    }
    n_l = len(strata["lc"]) + len(strata["li"])
    n_c = len(strata["lc"]) + len(strata["uc"])
    n_batches = -(-ds.n // cfg.batch_size)
    if cfg.model_kind != "mvae":
        if n_l == 0:
            raise ConfigError("dataset has no labeled sample")
        n_batches = min(n_batches, n_l)
    if cfg.model_kind == "simvae":
        if n_c == 0:
            raise ConfigError("dataset has no complete sample")
        n_batches = min(n_batches, n_c)
    elif cfg.model_kind != "mvae" and not ds.is_complete:
        raise ConfigError(f"{cfg.model_kind} needs complete views; drop or impute first")
    n_batches = max(n_batches, 1)
    members = {k: [[] for _ in range(n_batches)] for k in strata}
    ptr = 0
    for key in ("lc", "li", "uc", "ui"):
        idx = rng.permutation(strata[key])
        if key == "uc" and len(strata["lc"]) < n_batches:
            ptr = len(strata["lc"])
        for i in idx:
            members[key][ptr % n_batches].append(i)
            ptr += 1
    plans = [MinibatchPlan(*(np.array(members[k][b], dtype=np.int64)
                             for k in ("lc", "li", "uc", "ui")))
             for b in range(n_batches)]
    return [plans[i] for i in rng.permutation(n_batches)]


def batch_noise(seed: int, epoch: int, batch_index: int, n: int, model: SMVAEModel,
                T: int = 1, T_m: int = 1) -> Noise:
    """Counter-based draws keyed by (seed, epoch, batch); sample, component
    and t are array coordinates, so evaluation order cannot reorder them."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, batch_index])))
    return Noise.draw(gen, n, model, T=T, T_m=T_m)


def make_batch(ds: MultiViewDataset, idx: np.ndarray) -> Batch:
    views = [np.nan_to_num(v[idx], nan=0.0) for v in ds.views]
    present = None if ds.is_complete else ds.view_mask[idx]
    return Batch(views, ds.labels[idx], present)


def _objective(model, params, batch, noise, cfg) -> ObjectiveResult:
    return objective_tensor(model, params, batch, noise, c=cfg.c, c1=cfg.c1, c2=cfg.c2,
                            use_unlabeled=cfg.use_unlabeled)


def _row_loss(model, P, batch: Batch, noise: Noise, i: int):
    """Unweighted negative bound of row i alone, plus its supervised terms."""
    x = [v[[i]] for v in batch.views]
    y = batch.labels[[i]]
    eps = noise.z[[i], 0]
    if model.kind == "mvae":
        return -_elbo_rows(model, P, x, None, eps).total().sum()
    if not batch.complete[i]:
        o = model.observed_view
        return -_incomplete_rows(model, P, x[o], y if y[0] >= 0 else None,
                                 noise.take([i])).total().sum()
    if y[0] < 0:
        loss = -_enumerate_y(model, P, x, eps).total().sum()
    else:
        loss = -_elbo_rows(model, P, x, y, eps).total().sum()
        loss = loss - classifier_log_probs(model, P, x)[0, int(y[0])]
    if isinstance(model, SiMVAEModel):
        q = _imputer(model, P, x[model.observed_view])
        loss = loss - gauss_log_density(x[model.missing_view], q.mean, q.var).sum()
    return loss


def _first_bad_sample(model, batch, noise) -> int:
    for i in range(len(batch)):
        try:
            leaves = model.params.leaves()
            g = backprop_grads(_row_loss(model, leaves, batch, noise, i), leaves)
        except NumericError:
            return i
        if not all(np.isfinite(a).all() for a in g.values()):
            return i
    return -1


def estimate_gradients(model: SMVAEModel, batch: Batch, cfg: TrainConfig,
                       noise: Noise) -> tuple[ParamStore, ObjectiveResult]:
    """Reparameterised gradient of the minibatch objective.

    One noise draw per (sample, component, t) feeds the decoder, encoder and
    mixture-weight paths alike, since all three differentiate the same
    sampled z = mu_l + sqrt(var_l) * eps.
    """
    leaves = model.params.leaves()
    res = _objective(model, leaves, batch, noise, cfg)
    try:
        grads = backprop_grads(res.value, leaves)
        finite = all(np.isfinite(g).all() for g in grads.values())
    except NumericError:
        finite = False
    if not finite:
        i = _first_bad_sample(model, batch, noise)
        raise NumericError(f"non-finite gradient (batch row {i})")
    return grads, res


def _clip(grads: ParamStore, max_norm: float) -> ParamStore:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return ParamStore({k: g * s for k, g in grads.items()})


def init_model(ds: MultiViewDataset, cfg: TrainConfig) -> SMVAEModel:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 2**31])))
    return build_model(cfg.model_kind, tuple(v.shape[1] for v in ds.views), ds.n_classes,
                       cfg.latent_dim, cfg.hidden_widths, rng, missing_view=ds.missing_view,
                       variance_floor=cfg.variance_floor)


def train(ds: MultiViewDataset, cfg: TrainConfig, val: MultiViewDataset | None = None,
          model: SMVAEModel | None = None) -> tuple[SMVAEModel, RunRecord]:
    """Fixed-epoch Adam training; deterministic given ``cfg.seed``."""
    model = init_model(ds, cfg) if model is None else model
    opt = AdamState.for_params(model.params, lr=cfg.lr)
    record = RunRecord(cfg.seed)
    plan_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 2**32])))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for b, plan in enumerate(plan_minibatches(ds, cfg, plan_rng)):
            idx = plan.indices
            batch = make_batch(ds, idx)
            noise = batch_noise(cfg.seed, epoch, b, len(idx), model, cfg.T, cfg.T_m)
            grads, res = estimate_gradients(model, batch, cfg, noise)
            if cfg.clip_norm is not None:
                grads = _clip(grads, cfg.clip_norm)
            adam_step(opt, model.params, grads)
            total += res.scalar
        row = {"epoch": epoch + 1, "objective": total / ds.n}
        metrics = evaluate(model, val, with_bound=False) if (val is not None and val.n) else {}
        row["val_acc"] = metrics.get("accuracy", float("nan"))
        nmse = (evaluate(model, ds, with_bound=False).get("nmse", float("nan"))
                if isinstance(model, SiMVAEModel) else float("nan"))
        row["val_nmse"] = nmse
        row["lambda"] = tuple(float(x) for x in model.lambdas())
        row["seconds"] = time.perf_counter() - t0 if cfg.record_time else 0.0
        record.epochs.append(row)
        log.debug("epoch %d objective %.4f val_acc %.4f", epoch + 1, row["objective"],
                  row["val_acc"])
    return model, record


def fill_missing(model: SMVAEModel, ds: MultiViewDataset) -> list[np.ndarray]:
    """Views with withheld rows replaced by the imputer's conditional mean."""
    views = [v.copy() for v in ds.views]
    miss = ~ds.view_mask
    if miss.any():
        if not isinstance(model, SiMVAEModel):
            raise ConfigError("rows are missing a view and the model cannot impute")
        views[ds.missing_view][miss] = impute(model, views[model.observed_view][miss])
    return views


def evaluate(model: SMVAEModel, ds: MultiViewDataset, with_bound: bool = True,
             seed: int = 0) -> dict:
    """Accuracy (argmax of q(y|X)), per-class accuracy, NMSE over rows whose
    missing view was withheld synthetically, and the mean per-sample bound."""
    if ds.n == 0:
        raise ConfigError("cannot evaluate an empty split")
    out = {}
    views = fill_missing(model, ds)
    if model.has_classifier:
        pred = np.argmax(predict_log_proba(model, views), axis=1)
        truth = ds.eval_labels
        ok = truth >= 0
        out["accuracy"] = float(np.mean(pred[ok] == truth[ok])) if ok.any() else float("nan")
        out["per_class_accuracy"] = [
            float(np.mean(pred[truth == k] == k)) if np.any(truth == k) else float("nan")
            for k in range(model.n_classes)]
        out["predictions"] = pred
    if isinstance(model, SiMVAEModel) and ds.ground_truth_missing is not None:
        rows = ~np.isnan(ds.ground_truth_missing).any(axis=1)
        if rows.any():
            out["nmse"] = datakit.metric_nmse(ds.ground_truth_missing[rows],
                                              views[ds.missing_view][rows])
    if with_bound:
        out["mean_bound"] = mean_bound(model, ds, seed)
    return out


def mean_bound(model: SMVAEModel, ds: MultiViewDataset, seed: int = 0) -> float:
    """Average per-sample bound treating every row as unlabeled (T = 1)."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    noise = Noise.draw(gen, ds.n, model)
    views = [np.nan_to_num(v, nan=0.0) for v in ds.views]
    P = model.params
    if model.kind == "mvae":
        return float(np.mean(_elbo_rows(model, P, views, None, noise.z[:, 0]).total().data))
    vals = np.empty(ds.n)
    comp = ds.view_mask
    ci = np.flatnonzero(comp)
    if ci.size:
        vals[ci] = _enumerate_y(model, P, [v[ci] for v in views],
                                noise.z[ci, 0]).total().data
    ii = np.flatnonzero(~comp)
    if ii.size:
        vals[ii] = _incomplete_rows(model, P, views[model.observed_view][ii], None,
                                    noise.take(ii)).total().data
    return float(vals.mean())
