"""Config-driven command line: train, sweep, selfcheck, impute.

Config files are INI-style with the sections below; every key is optional
except where noted, and unknown sections or keys are rejected.

    [synthetic]  generator settings (one data source)
    [csv]        view1, view2, labels, mask paths (the other data source)
    [data]       fraction_labeled, fraction_missing, which_view_missing, split, standardize
    [model]      kind, latent_dim, hidden_widths, variance_floor
    [train]      lr, batch_size, epochs, T, T_m, c, c1, c2, clip_norm, use_unlabeled, record_time
    [run]        seeds, out
    [sweep]      fractions_labeled, fractions_missing, variants
    [impute]     checkpoint, input, output
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checks, datakit
from .datakit import MultiViewDataset, Standardizer, SyntheticSpec
from .diffcore import ParamStore, load_checkpoint, save_checkpoint
from .errors import ConfigError, MVFusionError, ParseError
from .genmodels import MODEL_KINDS, SiMVAEModel, build_model, impute
from .trainer import RunRecord, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("seed", "epoch", "objective", "val_acc", "val_nmse", "lambda_1",
                  "lambda_2", "seconds")
SUMMARY_COLUMNS = METRIC_COLUMNS[2:]
VARIANTS = ("simvae", "fulldata", "partialdata")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _words(s: str) -> tuple:
    return tuple(x.strip().lower() for x in s.split(",") if x.strip())


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


SCHEMA = {
    "synthetic": {"n_classes": int, "latent_dim": int, "d1": int, "d2": int, "n": int,
                  "separation": float, "nuisance": float, "coupling": float,
                  "sigma1": float, "sigma2": float, "view2_informative": _bool, "seed": int},
    "csv": {"view1": str, "view2": str, "labels": str, "mask": str, "n_classes": int},
    "data": {"fraction_labeled": float, "fraction_missing": float,
             "which_view_missing": int, "split": _floats, "standardize": _bool},
    "model": {"kind": str, "latent_dim": int, "hidden_widths": _ints, "variance_floor": float},
    "train": {"lr": float, "batch_size": int, "epochs": int, "T": int, "T_m": int,
              "c": float, "c1": float, "c2": float, "clip_norm": _opt_float,
              "use_unlabeled": _bool, "record_time": _bool},
    "run": {"seeds": _ints, "out": str},
    "sweep": {"fractions_labeled": _floats, "fractions_missing": _floats, "variants": _words},
    "impute": {"checkpoint": str, "input": str, "output": str},
}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec | None = None
    csv_paths: dict | None = None
    fraction_labeled: float = 1.0
    fraction_missing: float = 0.0
    which_view_missing: int = 2
    split: tuple = (0.8, 0.1, 0.1)
    standardize: bool = True
    seeds: tuple = (0, 1, 2, 3, 4)
    out: str = "runs"
    fractions_labeled: tuple = (0.01, 0.02, 0.03)
    fractions_missing: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    variants: tuple = VARIANTS
    impute: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv_paths is None):
            raise ConfigError("exactly one data source ([synthetic] or [csv]) is required")
        if not (0 < self.fraction_labeled <= 1):
            raise ConfigError("fraction_labeled must be in (0, 1]")
        if not (0 <= self.fraction_missing < 1):
            raise ConfigError("fraction_missing must be in [0, 1)")
        if self.which_view_missing not in (1, 2):
            raise ConfigError("which_view_missing must be 1 or 2")
        if any(not (0 < f <= 1) for f in self.fractions_labeled):
            raise ConfigError("sweep fractions_labeled must be in (0, 1]")
        if any(not (0 <= f < 1) for f in self.fractions_missing):
            raise ConfigError("sweep fractions_missing must be in [0, 1)")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown sweep variants {sorted(bad)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


def parse_config_text(text: str, base_dir: str | os.PathLike = ".",
                      require_source: bool = True) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                values[(sec, key)] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from exc

    def section(name):
        return {k: v for (s, k), v in values.items() if s == name}

    base = Path(base_dir)
    tr_kw = section("train")
    model = section("model")
    if "kind" in model:
        tr_kw["model_kind"] = model.pop("kind")
    tr_kw.update(model)
    try:
        tcfg = TrainConfig(**tr_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    synthetic = csv_paths = None
    if cp.has_section("synthetic"):
        try:
            synthetic = SyntheticSpec(**section("synthetic"))
        except MVFusionError as exc:
            raise ConfigError(str(exc)) from exc
    if cp.has_section("csv"):
        csv_paths = section("csv")
        for k in ("view1", "view2", "labels"):
            if k not in csv_paths:
                raise ConfigError(f"[csv] needs {k}")
        for k in ("view1", "view2", "labels", "mask"):
            if k in csv_paths:
                csv_paths[k] = str(base / csv_paths[k])
    if not require_source and synthetic is None and csv_paths is None:
        synthetic = SyntheticSpec()

    kw = {"train": tcfg, "synthetic": synthetic, "csv_paths": csv_paths}
    for (sec, key), v in values.items():
        if sec in ("data", "sweep"):
            kw[key] = v
        elif sec == "run":
            kw[key] = v if key != "out" else str(base / v)
    imp = section("impute")
    for k in imp:
        imp[k] = str(base / imp[k])
    kw["impute"] = imp
    return ExperimentConfig(**kw)


def load_config(path, require_source: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent, require_source)


# ---------------------------------------------------------------------------
# one run


@dataclass
class SeedResult:
    seed: int
    variant: str
    record: RunRecord
    test: dict
    params: ParamStore
    model_meta: dict


def load_source(exp: ExperimentConfig) -> MultiViewDataset:
    if exp.synthetic is not None:
        return datakit.generate_synthetic(exp.synthetic)
    p = exp.csv_paths
    return datakit.load_csv_views(p["view1"], p["view2"], p["labels"],
                                  n_classes=p.get("n_classes"), path_mask=p.get("mask"),
                                  missing_view=exp.which_view_missing - 1)


def _gen(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, tag])))


def prepare_data(exp: ExperimentConfig, seed: int, fraction_labeled=None,
                 fraction_missing=None):
    """Split, mask (labels, then views, both on the training split only) and
    standardize with training statistics. Returns (train, val, test, stats)."""
    fl = exp.fraction_labeled if fraction_labeled is None else fraction_labeled
    fm = exp.fraction_missing if fraction_missing is None else fraction_missing
    ds = load_source(exp)
    trn, val, test = datakit.split(ds, exp.split, _gen(seed, 1))
    if fl < 1:
        trn = datakit.apply_label_mask(trn, fl, _gen(seed, 2))
    if fm > 0:
        trn = datakit.apply_view_mask(trn, fm, _gen(seed, 3), exp.which_view_missing - 1)
    stats = None
    if exp.standardize:
        stats = datakit.fit_standardizer(trn)
        trn, val, test = stats.apply(trn), stats.apply(val), stats.apply(test)
    return trn, val, test, stats


def _variant_data(trn: MultiViewDataset, variant: str, cfg: TrainConfig):
    if variant == "simvae":
        return trn, replace(cfg, model_kind="simvae")
    kind = cfg.model_kind if cfg.model_kind != "simvae" else "smvae"
    if variant == "fulldata":
        return datakit.unmask(trn), replace(cfg, model_kind=kind)
    if variant == "partialdata":
        return datakit.drop_incomplete(trn), replace(cfg, model_kind=kind)
    # plain single run: non-imputing models only see complete rows
    if cfg.model_kind != "simvae" and not trn.is_complete:
        return datakit.drop_incomplete(trn), cfg
    return trn, cfg


def run_seed(exp: ExperimentConfig, seed: int, variant: str = "single",
             fraction_labeled=None, fraction_missing=None) -> SeedResult:
    trn, val, test, stats = prepare_data(exp, seed, fraction_labeled, fraction_missing)
    data, cfg = _variant_data(trn, variant, replace(exp.train, seed=seed))
    model, record = train(data, cfg, val)
    metrics = evaluate(model, test, with_bound=False)
    out = {"test_acc": metrics.get("accuracy", float("nan")), "test_nmse": float("nan"),
           "baseline_nmse": float("nan")}
    gt = trn.ground_truth_missing
    if gt is not None and not np.isnan(gt).all():
        rows = ~np.isnan(gt).any(axis=1)
        base = datakit.column_mean_imputation(trn)
        out["baseline_nmse"] = datakit.metric_nmse(gt[rows], base[rows])
        if isinstance(model, SiMVAEModel):
            out["test_nmse"] = evaluate(model, trn, with_bound=False)["nmse"]
    meta = model_meta(model, stats)
    return SeedResult(seed, variant, record, out, model.params, meta)


# ---------------------------------------------------------------------------
# checkpoints


_KIND_CODE = {k: float(i) for i, k in enumerate(MODEL_KINDS)}


def model_meta(model, stats: Standardizer | None) -> dict:
    meta = {
        "meta.kind": np.array([_KIND_CODE[model.kind]]),
        "meta.view_dims": np.array(model.view_dims, dtype=np.float64),
        "meta.n_classes": np.array([float(model.n_classes)]),
        "meta.latent_dim": np.array([float(model.latent_dim)]),
        "meta.hidden_widths": np.array(model.hidden_widths, dtype=np.float64),
        "meta.variance_floor": np.array([model.variance_floor]),
        "meta.log_prior_y": np.asarray(model.log_prior_y, dtype=np.float64),
        "meta.missing_view": np.array([float(getattr(model, "missing_view", 1))]),
    }
    if stats is not None:
        for v in range(len(stats.means)):
            meta[f"meta.std.mean{v}"] = np.asarray(stats.means[v], dtype=np.float64)
            meta[f"meta.std.scale{v}"] = np.asarray(stats.stds[v], dtype=np.float64)
    return meta


def save_model(path, params: ParamStore, meta: dict) -> None:
    blocks = dict(meta)
    blocks.update(params.items())
    save_checkpoint(path, blocks)


def load_model(path):
    """Rebuild (model, standardizer or None) from a checkpoint."""
    store = load_checkpoint(path)
    try:
        kind = MODEL_KINDS[int(store["meta.kind"][0])]
        view_dims = tuple(int(d) for d in store["meta.view_dims"])
        model = build_model(kind, view_dims, int(store["meta.n_classes"][0]),
                            int(store["meta.latent_dim"][0]),
                            tuple(int(h) for h in store["meta.hidden_widths"]),
                            missing_view=int(store["meta.missing_view"][0]),
                            variance_floor=float(store["meta.variance_floor"][0]))
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks model metadata {exc}") from exc
    model.log_prior_y = store["meta.log_prior_y"].copy()
    for k in model.params.keys():
        if k not in store:
            raise ConfigError(f"checkpoint lacks parameter block {k}")
        model.params[k] = store[k]
    stats = None
    if "meta.std.mean0" in store:
        n = len(view_dims)
        stats = Standardizer(tuple(store[f"meta.std.mean{v}"] for v in range(n)),
                             tuple(store[f"meta.std.scale{v}"] for v in range(n)))
    return model, stats


# ---------------------------------------------------------------------------
# output files


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    datakit._atomic_write_text(path, buf.getvalue())


def metric_rows(results: list[SeedResult]) -> list[tuple]:
    rows = []
    for res in results:
        for e in res.record.rows():
            lam = tuple(e["lambda"]) + (float("nan"),) * (2 - len(e["lambda"]))
            rows.append((res.seed, e["epoch"], e["objective"], e["val_acc"], e["val_nmse"],
                         lam[0], lam[1], e["seconds"]))
    return rows


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [{k: (int(v) if k in ("seed", "epoch") else float(v)) for k, v in r.items()}
                for r in rd]


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(a)), (float(np.std(a, ddof=1)) if a.size > 1 else 0.0)


def summarize_metrics(rows: list[dict]) -> list[tuple]:
    """Mean and sample std over seeds of each seed's final-epoch row."""
    last = {}
    for r in rows:
        if r["seed"] not in last or r["epoch"] > last[r["seed"]]["epoch"]:
            last[r["seed"]] = r
    finals = [last[s] for s in sorted(last)]
    return [(col,) + _mean_std([r[col] for r in finals]) + (len(finals),)
            for col in SUMMARY_COLUMNS]


def write_run_dir(out_dir, results: list[SeedResult]) -> dict:
    """metrics.csv, summary.csv (recomputed from the written metrics.csv),
    test.csv and one checkpoint per seed."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, metric_rows(results))
    summary = summarize_metrics(read_metrics(out / "metrics.csv"))
    _write_csv_mixed(out / "summary.csv", ("metric", "mean", "std", "n_seeds"), summary)
    _write_csv(out / "test.csv", ("seed", "test_acc", "test_nmse", "baseline_nmse"),
               [(r.seed, r.test["test_acc"], r.test["test_nmse"], r.test["baseline_nmse"])
                for r in results])
    for r in results:
        save_model(out / "checkpoints" / f"seed_{r.seed}.ckpt", r.params, r.model_meta)
    return {k: _mean_std([r.test[k] for r in results]) for k in results[0].test}


def _write_csv_mixed(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([x if isinstance(x, str) else _fmt(x) for x in r])
    datakit._atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# parallel execution


def _n_workers(n_jobs: int) -> int:
    cap = os.environ.get("MVFUSION_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError("MVFUSION_THREADS must be an integer") from exc
    return max(1, min(limit, n_jobs))


def _job(args):
    exp, seed, variant, fl, fm = args
    return run_seed(exp, seed, variant, fl, fm)


def run_jobs(jobs: list[tuple]) -> list[SeedResult]:
    """Results come back in job order regardless of worker count."""
    n = _n_workers(len(jobs))
    if n == 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_job, jobs))


# ---------------------------------------------------------------------------
# commands


def cmd_train(exp: ExperimentConfig) -> list[SeedResult]:
    results = run_jobs([(exp, s, "single", None, None) for s in exp.seeds])
    write_run_dir(exp.out, results)
    return results


def cell_name(fl: float, fm: float, variant: str) -> str:
    return f"fl{fl:g}_fm{fm:g}_{variant}"


SWEEP_COLUMNS = ("fraction_labeled", "fraction_missing", "variant", "n_seeds",
                 "test_acc_mean", "test_acc_std", "nmse_mean", "nmse_std",
                 "baseline_nmse_mean", "baseline_nmse_std")


def cmd_sweep(exp: ExperimentConfig) -> list[tuple]:
    cells = [(fl, fm, v) for fl in exp.fractions_labeled for fm in exp.fractions_missing
             for v in exp.variants]
    jobs = [(exp, s, v, fl, fm) for fl, fm, v in cells for s in exp.seeds]
    results = run_jobs(jobs)
    rows = []
    k = len(exp.seeds)
    for i, (fl, fm, v) in enumerate(cells):
        chunk = results[i * k:(i + 1) * k]
        stats = write_run_dir(Path(exp.out) / cell_name(fl, fm, v), chunk)
        rows.append((fl, fm, v, k, *stats["test_acc"], *stats["test_nmse"],
                     *stats["baseline_nmse"]))
    _write_csv_mixed(Path(exp.out) / "sweep_summary.csv", SWEEP_COLUMNS, rows)
    return rows


def cmd_selfcheck(corrupt: str | None = None, quick: bool = False) -> checks.Report:
    return checks.run_all(corrupt=corrupt, quick=quick)


def cmd_impute(checkpoint, input_csv, output_csv) -> np.ndarray:
    model, stats = load_model(checkpoint)
    if not isinstance(model, SiMVAEModel):
        raise ConfigError(f"checkpoint holds a {model.kind} model; impute needs simvae")
    x_o = datakit._read_matrix(input_csv, "observed view")
    o, m = model.observed_view, model.missing_view
    if x_o.shape[1] != model.view_dims[o]:
        raise ConfigError(f"input has {x_o.shape[1]} columns, model expects {model.view_dims[o]}")
    if stats is not None:
        x_o = (x_o - stats.means[o]) / stats.stds[o]
    x_m = impute(model, x_o)
    if stats is not None:
        x_m = x_m * stats.stds[m] + stats.means[m]
    datakit.write_matrix_csv(output_csv, x_m)
    return x_m


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvfusion", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("train", "sweep", "selfcheck", "impute"))
    p.add_argument("config", nargs="?", help="experiment config file")
    p.add_argument("--out", help="output directory (impute: output CSV path)")
    p.add_argument("--seeds", help="comma-separated seed list overriding the config")
    p.add_argument("--quick", action="store_true", help="selfcheck: smaller suites")
    p.add_argument("--corrupt-estimator", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_overrides(exp: ExperimentConfig, args) -> ExperimentConfig:
    if args.seeds:
        try:
            seeds = _ints(args.seeds)
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from exc
        exp = replace(exp, seeds=seeds)
    if args.out and args.command != "impute":
        exp = replace(exp, out=args.out)
    return exp


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selfcheck":
            report = cmd_selfcheck(args.corrupt_estimator, args.quick)
            for line in report.lines():
                print(line)
            print(f"{len(report.families)} check families: {', '.join(report.families)}")
            if not report.passed:
                failed = sorted({r.name for r in report.results if not r.passed})
                print("selfcheck FAILED: " + "; ".join(failed), file=sys.stderr)
                return 1
            return 0
        if args.config is None:
            raise ConfigError(f"{args.command} needs a config file")
        if args.command == "impute":
            exp = load_config(args.config, require_source=False)
            imp = exp.impute
            for k in ("checkpoint", "input"):
                if k not in imp:
                    raise ConfigError(f"[impute] needs {k}")
            output = args.out or imp.get("output")
            if not output:
                raise ConfigError("[impute] needs output (or --out)")
            x = cmd_impute(imp["checkpoint"], imp["input"], output)
            print(f"wrote {x.shape[0]} imputed rows to {output}")
            return 0
        exp = _apply_overrides(load_config(args.config), args)
        if args.command == "train":
            cmd_train(exp)
        else:
            cmd_sweep(exp)
        print(f"wrote results to {exp.out}")
        return 0
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MVFusionError, ArithmeticError, ValueError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
