"""Multi-view datasets: synthetic generation, CSV ingestion, label/view masking,
stratified splits, standardisation and the NMSE metric."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError, ParseError

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass(frozen=True)
class MultiViewDataset:
    """Two (or more) view matrices with labels and a presence mask.

    Rows of ``views[missing_view]`` whose ``view_mask`` is False hold NaN;
    when masking was synthetic their true values sit in
    ``ground_truth_missing`` (NaN everywhere else). ``true_labels`` keeps the
    labels removed by :func:`apply_label_mask`, for evaluation only.
    """
    views: tuple
    labels: np.ndarray
    n_classes: int
    view_mask: np.ndarray
    missing_view: int = 1
    ground_truth_missing: np.ndarray | None = None
    true_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.labels)
        if any(v.shape[0] != n for v in self.views) or len(self.view_mask) != n:
            raise DimensionError("row counts differ across dataset fields")
        if self.ground_truth_missing is not None and self.ground_truth_missing.shape[0] != n:
            raise DimensionError("ground truth rows differ from dataset rows")
        lab = self.labels[self.labels != UNLABELED]
        if np.any(lab < 0) or np.any(lab >= self.n_classes):
            raise ContractError("labels outside [0, K)")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def eval_labels(self) -> np.ndarray:
        return self.labels if self.true_labels is None else self.true_labels

    @property
    def is_complete(self) -> bool:
        return bool(self.view_mask.all())

    def subset(self, idx) -> "MultiViewDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            views=tuple(v[idx] for v in self.views),
            labels=self.labels[idx],
            view_mask=self.view_mask[idx],
            ground_truth_missing=(None if self.ground_truth_missing is None
                                  else self.ground_truth_missing[idx]),
            true_labels=None if self.true_labels is None else self.true_labels[idx],
        )


def from_arrays(view1, view2, labels, n_classes: int | None = None,
                present=None, missing_view: int = 1) -> MultiViewDataset:
    views = (np.array(view1, dtype=np.float64), np.array(view2, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if np.any(labels >= 0) else 1
    mask = np.ones(len(labels), bool) if present is None else np.asarray(present, bool)
    views[missing_view][~mask] = np.nan
    return MultiViewDataset(views, labels, int(n_classes), mask, missing_view)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Linear-Gaussian two-view generator with class means and a shared
    low-rank nuisance factor.

    x2 = M2 e_y + B2 z + sigma2 eps2
    x1 = M1 e_y + B1 z + C x2 + sigma1 eps1,   z ~ N(0, I_latent)

    ``separation`` scales the class means, ``nuisance`` the loadings B, and
    ``coupling`` the x2 -> x1 map C. With ``view2_informative=False`` view 2
    is pure noise (and C = 0).
    """
    n_classes: int = 3
    latent_dim: int = 4
    d1: int = 20
    d2: int = 8
    n: int = 5000
    separation: float = 0.5
    nuisance: float = 4.0
    coupling: float = 0.5
    sigma1: float = 0.6
    sigma2: float = 0.6
    view2_informative: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.latent_dim, self.d1, self.d2, self.n) < 1:
            raise ConfigError("synthetic dims must be >= 1")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ConfigError("noise sigma must be positive")


def _generator_params(spec: SyntheticSpec, rng: np.random.Generator) -> dict:
    K, q = spec.n_classes, spec.latent_dim
    m1 = rng.standard_normal((spec.d1, K)) * spec.separation
    b1 = rng.standard_normal((spec.d1, q)) * spec.nuisance / math.sqrt(q)
    if spec.view2_informative:
        m2 = rng.standard_normal((spec.d2, K)) * spec.separation
        b2 = rng.standard_normal((spec.d2, q)) * spec.nuisance / math.sqrt(q)
        c = rng.standard_normal((spec.d1, spec.d2)) * spec.coupling / math.sqrt(spec.d2)
    else:
        m2 = np.zeros((spec.d2, K))
        b2 = np.zeros((spec.d2, q))
        c = np.zeros((spec.d1, spec.d2))
    return {"M1": m1, "B1": b1, "M2": m2, "B2": b2, "C": c,
            "sigma1": spec.sigma1, "sigma2": spec.sigma2}


def generate_synthetic(spec: SyntheticSpec) -> MultiViewDataset:
    """Fully labeled, complete dataset; generator parameters and the latent
    draws are kept in ``meta``."""
    rng = np.random.default_rng(spec.seed)
    p = _generator_params(spec, rng)
    y = rng.integers(0, spec.n_classes, size=spec.n)
    z = rng.standard_normal((spec.n, spec.latent_dim))
    e1 = rng.standard_normal((spec.n, spec.d1))
    e2 = rng.standard_normal((spec.n, spec.d2))
    x2 = p["M2"].T[y] + z @ p["B2"].T + spec.sigma2 * e2
    x1 = p["M1"].T[y] + z @ p["B1"].T + x2 @ p["C"].T + spec.sigma1 * e1
    meta = {"generator": p, "z": z, "spec": spec}
    return MultiViewDataset((x1, x2), y.astype(np.int64), spec.n_classes,
                            np.ones(spec.n, bool), 1, None, None, meta)


def class_conditional_gaussians(params: dict) -> tuple[np.ndarray, np.ndarray]:
    """Means (K, d1+d2) and shared covariance of the joint [x1; x2] given y."""
    m1, b1, m2, b2, c = (params[k] for k in ("M1", "B1", "M2", "B2", "C"))
    d1, d2 = m1.shape[0], m2.shape[0]
    means = np.concatenate([(m1 + c @ m2).T, m2.T], axis=1)
    q = b1.shape[1]
    # x = mu_y + G [z; eps1; eps2]
    g = np.zeros((d1 + d2, q + d1 + d2))
    g[:d1, :q] = b1 + c @ b2
    g[:d1, q:q + d1] = params["sigma1"] * np.eye(d1)
    g[:d1, q + d1:] = params["sigma2"] * c
    g[d1:, :q] = b2
    g[d1:, q + d1:] = params["sigma2"] * np.eye(d2)
    return means, g @ g.T


def bayes_predict(params: dict, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Bayes-optimal (linear discriminant) class under uniform class prior."""
    means, cov = class_conditional_gaussians(params)
    x = np.concatenate([x1, x2], axis=1)
    prec_means = np.linalg.solve(cov, means.T)             # (d, K)
    scores = x @ prec_means - 0.5 * np.sum(means.T * prec_means, axis=0)
    return np.argmax(scores, axis=1)


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_matrix(path, what: str) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty {what} file")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} cells, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def _read_column(path, name: str) -> list[tuple[int, str]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != [name]:
            raise ParseError(f"{path}:1: expected single column header {name!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1:
                raise ParseError(f"{path}:{lineno}: expected one cell")
            out.append((lineno, row[0].strip()))
    return out


def load_csv_views(path_view1, path_view2, path_labels, n_classes: int | None = None,
                   path_mask=None, missing_view: int = 1) -> MultiViewDataset:
    """Read two view CSVs, a ``label`` CSV (-1 = unlabeled) and an optional
    ``present`` mask CSV for the designated missing view."""
    x1 = _read_matrix(path_view1, "view")
    x2 = _read_matrix(path_view2, "view")
    labels = []
    for lineno, cell in _read_column(path_labels, "label"):
        try:
            labels.append(int(cell))
        except ValueError:
            raise ParseError(f"{path_labels}:{lineno}: label {cell!r} is not an integer") from None
        if labels[-1] < -1 or (n_classes is not None and labels[-1] >= n_classes):
            raise ParseError(f"{path_labels}:{lineno}: label {labels[-1]} out of range")
    if not (len(x1) == len(x2) == len(labels)):
        raise ParseError(f"row counts differ: {len(x1)}, {len(x2)}, {len(labels)}")
    present = None
    if path_mask is not None:
        present = []
        for lineno, cell in _read_column(path_mask, "present"):
            if cell not in ("0", "1"):
                raise ParseError(f"{path_mask}:{lineno}: present must be 0 or 1")
            present.append(cell == "1")
        if len(present) != len(labels):
            raise ParseError("mask row count differs from views")
    labels = np.array(labels, dtype=np.int64)
    k = n_classes if n_classes is not None else (int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 1)
    return from_arrays(x1, x2, labels, k, present, missing_view)


def _atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_matrix_csv(path, x: np.ndarray) -> None:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lines = [",".join(f"f{j}" for j in range(x.shape[1]))]
    lines += [",".join(repr(float(v)) for v in row) for row in x]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def write_csv_views(ds: MultiViewDataset, path_view1, path_view2, path_labels,
                    path_mask=None) -> None:
    write_matrix_csv(path_view1, ds.views[0])
    write_matrix_csv(path_view2, ds.views[1])
    _atomic_write_text(path_labels, "label\n" + "".join(f"{int(v)}\n" for v in ds.labels))
    if path_mask is not None:
        _atomic_write_text(path_mask, "present\n" + "".join(f"{int(v)}\n" for v in ds.view_mask))


# ---------------------------------------------------------------------------
# masking


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quota = total * weights / weights.sum()
    base = np.floor(quota).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rem]] += 1
    return base


def apply_label_mask(ds: MultiViewDataset, fraction_labeled: float, rng) -> MultiViewDataset:
    """Keep round(fraction * n) labels, stratified by class (>= 1 per class)."""
    if not (0 < fraction_labeled <= 1):
        raise ContractError("fraction_labeled must be in (0, 1]")
    truth = ds.eval_labels
    if np.any(truth == UNLABELED):
        raise ContractError("label masking needs a fully labeled dataset")
    rng = _as_rng(rng)
    classes = np.arange(ds.n_classes)
    counts = np.array([(truth == k).sum() for k in classes])
    present_classes = counts > 0
    total = int(round(fraction_labeled * ds.n))
    need = int(present_classes.sum())
    if total < need:
        log.warning("fraction %.4f keeps %d labels for %d classes; raised to %d",
                    fraction_labeled, total, need, need)
        total = need
    alloc = _largest_remainder(total, counts.astype(float))
    # every class present in the data keeps at least one label
    for k in np.flatnonzero(present_classes & (alloc == 0)):
        alloc[np.argmax(alloc)] -= 1
        alloc[k] = 1
    keep = np.zeros(ds.n, bool)
    for k in classes:
        idx = np.flatnonzero(truth == k)
        keep[rng.permutation(idx)[:alloc[k]]] = True
    labels = np.where(keep, truth, UNLABELED)
    return replace(ds, labels=labels, true_labels=truth.copy())


def apply_view_mask(ds: MultiViewDataset, fraction_missing: float, rng,
                    which_view: int | None = None) -> MultiViewDataset:
    """Withhold ``which_view`` for round(fraction * n) rows chosen uniformly,
    independently of labels."""
    if not (0 <= fraction_missing < 1):
        raise ContractError("fraction_missing must be in [0, 1)")
    which = ds.missing_view if which_view is None else which_view
    if which != ds.missing_view and not ds.is_complete:
        raise ContractError("dataset already masks a different view")
    rng = _as_rng(rng)
    k = int(round(fraction_missing * ds.n))
    chosen = rng.permutation(ds.n)[:k]
    newly = np.zeros(ds.n, bool)
    newly[chosen] = True
    newly &= ds.view_mask
    d_m = ds.views[which].shape[1]
    gt = (np.full((ds.n, d_m), np.nan) if ds.ground_truth_missing is None
          else ds.ground_truth_missing.copy())
    gt[newly] = ds.views[which][newly]
    views = list(ds.views)
    views[which] = views[which].copy()
    views[which][newly] = np.nan
    return replace(ds, views=tuple(views), view_mask=ds.view_mask & ~newly,
                   missing_view=which, ground_truth_missing=gt)


def unmask(ds: MultiViewDataset) -> MultiViewDataset:
    """Restore withheld rows from ground truth (synthetic masking only)."""
    if ds.ground_truth_missing is None:
        return ds
    m = ds.missing_view
    has = ~np.isnan(ds.ground_truth_missing).any(axis=1)
    views = list(ds.views)
    views[m] = views[m].copy()
    views[m][has] = ds.ground_truth_missing[has]
    return replace(ds, views=tuple(views), view_mask=ds.view_mask | has,
                   ground_truth_missing=None)


def drop_incomplete(ds: MultiViewDataset) -> MultiViewDataset:
    return ds.subset(np.flatnonzero(ds.view_mask))


# ---------------------------------------------------------------------------
# splits and preprocessing


def _spread_sequence(n: int, ratios: np.ndarray) -> np.ndarray:
    """Partition ids of length n with exact largest-remainder totals, spread
    evenly along the sequence."""
    totals = _largest_remainder(n, ratios)
    assigned = np.zeros(len(ratios), int)
    seq = np.empty(n, int)
    frac = totals / n
    for i in range(n):
        deficit = (i + 1) * frac - assigned
        deficit[assigned >= totals] = -np.inf
        j = int(np.argmax(deficit))
        seq[i] = j
        assigned[j] += 1
    return seq


def split_indices(ds: MultiViewDataset, ratios, rng) -> list[np.ndarray]:
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios <= 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ContractError("split ratios must be positive and sum to 1")
    rng = _as_rng(rng)
    truth = ds.eval_labels
    order = np.concatenate([rng.permutation(np.flatnonzero(truth == k))
                            for k in np.unique(truth)])
    seq = _spread_sequence(ds.n, ratios)
    parts = [np.sort(order[seq == j]) for j in range(len(ratios))]
    if any(p.size == 0 for p in parts):
        raise ContractError("split leaves an empty partition")
    return parts


def split(ds: MultiViewDataset, ratios=(0.8, 0.1, 0.1), rng=0) -> tuple:
    """Disjoint, exhaustive, class-stratified partitions."""
    return tuple(ds.subset(p) for p in split_indices(ds, ratios, rng))


@dataclass(frozen=True)
class Standardizer:
    means: tuple
    stds: tuple

    def apply(self, ds: MultiViewDataset) -> MultiViewDataset:
        views = tuple((v - mu) / sd for v, mu, sd in zip(ds.views, self.means, self.stds))
        gt = ds.ground_truth_missing
        if gt is not None:
            m = ds.missing_view
            gt = (gt - self.means[m]) / self.stds[m]
        return replace(ds, views=views, ground_truth_missing=gt)


def fit_standardizer(train: MultiViewDataset) -> Standardizer:
    """Column statistics from the observed rows of the training split."""
    means, stds = [], []
    for v in train.views:
        mu = np.nanmean(v, axis=0)
        sd = np.nanstd(v, axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        means.append(mu)
        stds.append(sd)
    return Standardizer(tuple(means), tuple(stds))


# ---------------------------------------------------------------------------
# metrics


def metric_nmse(x_true, x_hat) -> float:
    """||X - X_hat||_F / ||X||_F."""
    x_true = np.asarray(x_true, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_true.shape != x_hat.shape:
        raise DimensionError(f"shape {x_true.shape} != {x_hat.shape}")
    denom = np.linalg.norm(x_true)
    if denom == 0:
        raise NumericError("NMSE undefined for an all-zero reference matrix")
    return float(np.linalg.norm(x_true - x_hat) / denom)


def column_mean_imputation(ds: MultiViewDataset) -> np.ndarray:
    """Baseline: every withheld row filled with the observed column means."""
    m = ds.missing_view
    mu = np.nanmean(ds.views[m][ds.view_mask], axis=0)
    return np.broadcast_to(mu, ds.views[m].shape).copy()
