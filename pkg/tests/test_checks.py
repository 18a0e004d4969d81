"""The self-check suites, and the quadrature oracle they rely on."""

import math

import numpy as np
import pytest

from mvfusion import checks
from mvfusion.checks import quadrature_log_joint, quantile_nodes, toy_models

from reference_impl import np_log_normal, np_mlp

HEADS = [("mean", "linear"), ("var", "variance")]


def _dec(model, v, y, z, extra=None):
    cols = [np.tile(np.eye(model.n_classes)[y], (len(z), 1)), z[:, None]]
    if extra is not None:
        cols.append(extra[:, None])
    o = np_mlp(model.params, f"dec{v}", len(model.hidden_widths), HEADS,
               np.concatenate(cols, axis=1), model.variance_floor)
    return o["mean"][:, 0], o["var"][:, 0]


def _mc_log_joint(model, x_o, x_m, y, rng, n=400_000):
    """Plain Monte Carlo over the prior: log p(y) + log E_z[p(x | z, y)]."""
    z = rng.standard_normal(n)
    o, m = model.observed_view, model.missing_view
    mu_m, var_m = _dec(model, m, y, z)
    if x_m is None:
        xm = mu_m + np.sqrt(var_m) * rng.standard_normal(n)
        mu_o, var_o = _dec(model, o, y, z, xm)
        lik = np.exp(np_log_normal(np.full((n, 1), x_o), mu_o[:, None], var_o[:, None]))
    else:
        mu_o, var_o = _dec(model, o, y, z, np.full(n, x_m))
        lik = np.exp(np_log_normal(np.full((n, 1), x_o), mu_o[:, None], var_o[:, None])
                     + np_log_normal(np.full((n, 1), x_m), mu_m[:, None], var_m[:, None]))
    mean, se = lik.mean(), lik.std(ddof=1) / math.sqrt(n)
    return model.log_prior_y[y] + math.log(mean), se / mean


class TestQuadratureOracle:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("observed", [True, False])
    def test_matches_monte_carlo(self, seed, observed):
        _, _, si = toy_models(seed)
        rng = np.random.default_rng(seed)
        x_o, x_m = rng.normal(size=2)
        y = seed % 2
        quad = quadrature_log_joint(si, x_o, x_m if observed else None, y)
        mc, rel_se = _mc_log_joint(si, x_o, x_m if observed else None, y, rng)
        assert abs(quad - mc) <= 4 * rel_se + 1e-9

    def test_refining_grid_is_stable(self):
        _, sm, _ = toy_models(4)
        a = quadrature_log_joint(sm, 0.3, -0.7, 1)
        b = quadrature_log_joint(sm, 0.3, -0.7, 1, n_grid=8001)
        assert abs(a - b) <= 1e-10


class TestQuantileNodes:
    def test_symmetric_unit_second_moment(self):
        e = quantile_nodes(50)
        assert abs(e.sum()) <= 1e-12 and abs(np.mean(e * e) - 1.0) <= 1e-12

    def test_single_node(self):
        assert quantile_nodes(1).tolist() == [0.0]


class TestSuites:
    def test_gradient_suite_passes(self):
        report = checks.Report()
        checks.check_gradients(report)
        names = " ".join(r.name for r in report.results)
        assert report.passed
        assert all(est in names for est in checks.ESTIMATORS)

    @pytest.mark.parametrize("est", ["L", "U", "LI", "UC"])
    def test_corruption_detected(self, est):
        report = checks.Report()
        checks.check_gradients(report, corrupt=est)
        failed = [r for r in report.results if not r.passed]
        assert failed and all(est in r.name for r in failed)

    def test_degenerate_suite(self):
        report = checks.Report()
        checks.check_degenerate(report)
        assert report.passed and len(report.results) >= 3

    def test_report_lines(self):
        report = checks.Report()
        report.add("a", "first", True, "ok")
        report.add("b", "second", False)
        lines = report.lines()
        assert len(lines) == 2 and lines[0].startswith("PASS") and lines[1].startswith("FAIL")
        assert report.families == ["a", "b"] and not report.passed
