"""Bounds, objectives, classification and imputation of the three model families."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfusion.checks import domination_gaps
from mvfusion.diffcore import AdamState, adam_step, backprop_grads
from mvfusion.errors import ContractError, WeightingError
from mvfusion.genmodels import (
    Batch,
    Noise,
    classify,
    encoder_mixture,
    impute,
    mvae_elbo,
    objective_tensor,
    simvae_bound_lc,
    simvae_bound_li,
    simvae_bound_uc,
    simvae_bound_ui,
    simvae_objective,
    smvae_labeled_bound,
    smvae_objective,
    smvae_unlabeled_bound,
)
from mvfusion.probdist import mog_entropy_lower_bound

from reference_impl import (
    np_log_normal,
    np_mlp,
    ref_classifier,
    ref_imputer,
    ref_labeled_bound,
    ref_unlabeled_bound,
    small_model,
)

INV_SOFTPLUS_ONE = math.log(math.expm1(1.0 - 1e-6))


def _views(model, rng):
    return [rng.normal(size=d) for d in model.view_dims]


def _one_hot_classifier(model, y_star):
    for k in model.params.keys():
        if k.startswith("clf.logp."):
            model.params[k] = np.zeros_like(model.params[k])
    b = np.full(model.n_classes, -1e4)
    b[y_star] = 0.0
    model.params["clf.logp.b"] = b


def _deterministic_imputer(model):
    model.params["imp.var.W"] = np.zeros_like(model.params["imp.var.W"])
    model.params["imp.var.b"] = np.full_like(model.params["imp.var.b"], -60.0)


class TestLabeledBound:
    def test_matches_reference(self, rng):
        model = small_model("smvae")
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model, T=3)
        bb = smvae_labeled_bound(model, X, 2, noise)
        ref = ref_labeled_bound(model, X, 2, noise.z[0, 0])
        assert abs(bb.total - ref["total"]) <= 1e-10
        np.testing.assert_allclose(bb.recon, ref["recon"], rtol=0, atol=1e-10)
        assert abs(bb.mixture_entropy - ref["entropy"]) <= 1e-10
        assert abs(bb.loss + bb.total) == 0.0

    def test_prior_y_uniform(self, rng):
        model = small_model("smvae")
        bb = smvae_labeled_bound(model, _views(model, rng), 0, Noise.draw(rng, 1, model))
        assert bb.prior_y == pytest.approx(-1.0986123, abs=1e-7)

    def test_parts_sum_to_total(self, rng):
        model = small_model("smvae")
        bb = smvae_labeled_bound(model, _views(model, rng), 1, Noise.draw(rng, 1, model, T=2))
        assert abs(bb.parts_sum() - bb.total) <= 1e-10

    def test_entropy_term_is_mixture_bound(self, rng):
        model = small_model("smvae")
        X = _views(model, rng)
        bb = smvae_labeled_bound(model, X, 1, Noise.draw(rng, 1, model))
        mix = encoder_mixture(model, model.params, [x[None] for x in X], np.eye(3)[[1]])
        assert bb.mixture_entropy == float(np.sum(mog_entropy_lower_bound(mix).data))

    def test_identical_unit_components_entropy(self, rng):
        model = small_model("smvae", latent_dim=3)
        for v in range(2):
            for head, b in (("mean", 0.4), ("var", INV_SOFTPLUS_ONE)):
                model.params[f"enc{v}.{head}.W"] = np.zeros_like(model.params[f"enc{v}.{head}.W"])
                model.params[f"enc{v}.{head}.b"] = np.full(3, b)
        bb = smvae_labeled_bound(model, _views(model, rng), 0, Noise.draw(rng, 1, model))
        assert bb.mixture_entropy == pytest.approx(3 * 1.2655121, abs=1e-6)
        assert abs(bb.mixture_entropy - 1.5 * math.log(4 * math.pi)) <= 1e-9

    def test_invalid_label(self, rng):
        model = small_model("smvae")
        with pytest.raises(ContractError):
            smvae_labeled_bound(model, _views(model, rng), 3, Noise.draw(rng, 1, model))

    def test_missing_view_rejected(self, rng):
        model = small_model("smvae")
        X = _views(model, rng)
        X[1] = np.full_like(X[1], np.nan)
        with pytest.raises(ContractError):
            smvae_labeled_bound(model, X, 0, Noise.draw(rng, 1, model))


class TestUnlabeledBound:
    def test_matches_reference(self, rng):
        model = small_model("smvae")
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model, T=2)
        bb = smvae_unlabeled_bound(model, X, noise)
        assert abs(bb.total - ref_unlabeled_bound(model, X, noise.z[0, 0])) <= 1e-10

    def test_one_hot_classifier(self, rng):
        model = small_model("smvae")
        _one_hot_classifier(model, 1)
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model)
        u = smvae_unlabeled_bound(model, X, noise)
        lab = smvae_labeled_bound(model, X, 1, noise)
        assert abs(u.total - lab.total) <= 1e-10
        assert u.classifier_entropy == 0.0

    def test_uniform_classifier_constant_bound(self, rng):
        model = small_model("smvae")
        for k in model.params.keys():
            if k.startswith("clf.logp."):
                model.params[k] = np.zeros_like(model.params[k])
        K = model.n_classes
        for v in range(2):
            d = model.view_dims[v]
            w = model.params[f"enc{v}.h0.W"].copy()
            w[d:d + K] = 0.0
            model.params[f"enc{v}.h0.W"] = w
            w = model.params[f"dec{v}.h0.W"].copy()
            w[:K] = 0.0
            model.params[f"dec{v}.h0.W"] = w
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model)
        u = smvae_unlabeled_bound(model, X, noise).loss
        lab = smvae_labeled_bound(model, X, 0, noise).loss
        assert abs(u - (lab - math.log(K))) <= 1e-10

    def test_matches_label_sampling(self, rng):
        model = small_model("smvae", seed=3)
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model)
        eps = noise.z[0, 0]
        logq = ref_classifier(model, X)
        per_class = np.array([ref_labeled_bound(model, X, k, eps)["total"] - logq[k]
                              for k in range(3)])
        ys = rng.choice(3, size=100_000, p=np.exp(logq) / np.exp(logq).sum())
        draws = per_class[ys]
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        assert abs(smvae_unlabeled_bound(model, X, noise).total - draws.mean()) <= 3 * se + 1e-12


class TestMVAE:
    def test_matches_reference(self, rng):
        model = small_model("mvae")
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model, T=2)
        assert abs(mvae_elbo(model, X, noise).total
                   - ref_labeled_bound(model, X, None, noise.z[0, 0])["total"]) <= 1e-10

    def test_missing_view_rejected(self, rng):
        model = small_model("mvae")
        with pytest.raises(ContractError):
            mvae_elbo(model, [np.ones(4), None], Noise.draw(rng, 1, model))

    def test_collapse_to_single_component(self, rng):
        """Identical encoders and near-one-hot weights give a one-component VAE."""
        model = small_model("mvae", view_dims=(3, 3))
        for k in list(model.params.keys()):
            if k.startswith("enc0."):
                model.params["enc1." + k[5:]] = model.params[k].copy()
        model.params["mix.logits"] = np.array([math.log(1e-9 / (1 - 1e-9))])
        x = rng.normal(size=3)
        X = [x, x.copy()]
        noise = Noise.draw(rng, 1, model, T=4)
        eps = noise.z[0, 0, :, 0]
        # single-component VAE, computed directly
        nh = len(model.hidden_widths)
        enc = np_mlp(model.params, "enc0", nh, [("mean", "linear"), ("var", "variance")], x[None])
        mu, var = enc["mean"][0], enc["var"][0]
        z = mu + np.sqrt(var) * eps
        recon = 0.0
        for v in range(2):
            d = np_mlp(model.params, f"dec{v}", nh, [("mean", "linear"), ("var", "variance")], z)
            recon += np.mean(np_log_normal(X[v][None], d["mean"], d["var"]))
        # the Jensen bound of a lone Gaussian: -log N(mu | mu, 2 var)
        entropy = 0.5 * np.sum(np.log(4 * math.pi * var))
        single = recon + np.mean(np_log_normal(z, 0.0, 1.0)) + entropy
        assert abs(mvae_elbo(model, X, noise).total - single) <= 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_below_quadrature_log_likelihood(self, seed):
        assert domination_gaps(seed, T=1000, T_m=40, T_inner=40)["ELBO"] >= -1e-6


class TestSiMVAEBounds:
    def test_lc_matches_reference(self, rng):
        model = small_model("simvae")
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model, T=2)
        bb = simvae_bound_lc(model, X, 1, noise)
        assert abs(bb.total - ref_labeled_bound(model, X, 1, noise.z[0, 0])["total"]) <= 1e-10

    def test_structural_reduction(self, rng):
        model = small_model("simvae")
        name, rows = model.xm_decoder_rows()
        w = model.params[name].copy()
        w[rows] = 0.0
        model.params[name] = w
        reduced = model.as_smvae()
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model, T=2)
        snoise = Noise(noise.z)
        assert abs(simvae_bound_lc(model, X, 2, noise).total
                   - smvae_labeled_bound(reduced, X, 2, snoise).total) <= 1e-10
        assert abs(simvae_bound_uc(model, X, noise).total
                   - smvae_unlabeled_bound(reduced, X, snoise).total) <= 1e-10

    def test_prior_terms_shared_with_smvae(self, rng):
        model = small_model("simvae")
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model)
        a = simvae_bound_lc(model, X, 0, noise)
        b = smvae_labeled_bound(model.as_smvae(), X, 0, Noise(noise.z))
        assert a.prior_z == b.prior_z and a.prior_y == b.prior_y
        assert a.mixture_entropy == b.mixture_entropy

    def test_li_deterministic_imputation_limit(self, rng):
        model = small_model("simvae")
        _deterministic_imputer(model)
        X = _views(model, rng)
        x_o = X[model.observed_view]
        noise = Noise(Noise.draw(rng, 1, model).z, np.zeros((1, 1, model.view_dims[1])))
        mean, var = ref_imputer(model, x_o)
        filled = [x_o, mean]
        lc = ref_labeled_bound(model, filled, 1, noise.z[0, 0])["total"]
        h = 0.5 * np.sum(np.log(2 * math.pi * math.e * var))
        li = simvae_bound_li(model, x_o, 1, noise)
        assert abs(li.total - (lc + h)) <= 1e-10
        assert li.imputer_entropy == pytest.approx(h, abs=1e-12)

    def test_ui_one_hot_and_deterministic(self, rng):
        model = small_model("simvae")
        _deterministic_imputer(model)
        _one_hot_classifier(model, 2)
        X = _views(model, rng)
        x_o = X[model.observed_view]
        noise = Noise(Noise.draw(rng, 1, model).z, np.zeros((1, 1, model.view_dims[1])))
        mean, var = ref_imputer(model, x_o)
        lc = ref_labeled_bound(model, [x_o, mean], 2, noise.z[0, 0])["total"]
        h = 0.5 * np.sum(np.log(2 * math.pi * math.e * var))
        assert abs(simvae_bound_ui(model, x_o, noise).total - (lc + h)) <= 1e-10

    def test_ui_reduces_to_li_with_one_hot_classifier(self, rng):
        model = small_model("simvae")
        _one_hot_classifier(model, 0)
        x_o = rng.normal(size=model.view_dims[0])
        noise = Noise.draw(rng, 1, model, T=2, T_m=3)
        assert abs(simvae_bound_ui(model, x_o, noise).total
                   - simvae_bound_li(model, x_o, 0, noise).total) <= 1e-10

    def test_uc_one_hot(self, rng):
        model = small_model("simvae")
        _one_hot_classifier(model, 1)
        X = _views(model, rng)
        noise = Noise.draw(rng, 1, model)
        assert abs(simvae_bound_uc(model, X, noise).total
                   - simvae_bound_lc(model, X, 1, noise).total) <= 1e-10

    def test_imputer_entropy_d33(self):
        model = small_model("simvae", view_dims=(4, 33))
        model.params["imp.var.W"] = np.zeros_like(model.params["imp.var.W"])
        model.params["imp.var.b"] = np.full(33, INV_SOFTPLUS_ONE)
        bb = simvae_bound_li(model, np.ones(4), 0, Noise.draw(np.random.default_rng(0), 1, model))
        assert bb.imputer_entropy == pytest.approx(46.824971, abs=1e-6)

    def test_li_matches_monte_carlo_over_missing_view(self, rng):
        model = small_model("simvae", seed=5)
        x_o = rng.normal(size=model.view_dims[0])
        mean, var = ref_imputer(model, x_o)
        eps = Noise.draw(rng, 1, model).z[0, 0]
        # oracle: independent draws of x_m, each scored by the numpy reference LC
        n = 4000
        xm = mean + np.sqrt(var) * rng.standard_normal((n, len(mean)))
        vals = np.array([ref_labeled_bound(model, [x_o, xm[i]], 1, eps)["total"]
                         for i in range(n)])
        oracle, se_o = vals.mean(), vals.std(ddof=1) / math.sqrt(n)
        T_m = 20_000
        z = np.broadcast_to(eps, (1, T_m) + eps.shape).copy()
        noise = Noise(z, rng.standard_normal((1, T_m, len(mean))))
        li = simvae_bound_li(model, x_o, 1, noise)
        got = li.total - li.imputer_entropy
        se = math.sqrt(se_o ** 2 + (vals.std(ddof=1) ** 2) / T_m)
        assert abs(got - oracle) <= 3 * se

    def test_requires_simvae(self, rng):
        model = small_model("smvae")
        with pytest.raises(ContractError):
            simvae_bound_lc(model, _views(model, rng), 0, Noise.draw(rng, 1, model))


class TestObjectives:
    def test_alpha_smvae(self, rng):
        model = small_model("smvae", hidden=(3,))
        n = 100
        views = [rng.normal(size=(n, d)) for d in model.view_dims]
        labels = np.full(n, -1)
        labels[:2] = [0, 2]
        res = objective_tensor(model, model.params, Batch(views, labels),
                               Noise.draw(rng, n, model), c=1.0)
        assert res.alphas == (50.0,)

    def test_smvae_no_unlabeled(self, rng):
        model = small_model("smvae")
        views = [rng.normal(size=(3, d)) for d in model.view_dims]
        labels = np.array([0, 1, 2])
        noise = Noise.draw(rng, 3, model)
        value, bb = smvae_objective(model, Batch(views, labels), None, 0.5, noise)
        bound = sum(smvae_labeled_bound(model, [v[i] for v in views], labels[i],
                                        noise.take([i])).total for i in range(3))
        logq = [ref_classifier(model, [v[i] for v in views])[labels[i]] for i in range(3)]
        assert abs(value - (-bound + 0.5 * -sum(logq))) <= 1e-9

    def test_smvae_needs_labeled(self, rng):
        model = small_model("smvae")
        views = [rng.normal(size=(2, d)) for d in model.view_dims]
        with pytest.raises(WeightingError):
            objective_tensor(model, model.params, Batch(views, [-1, -1]),
                             Noise.draw(rng, 2, model))

    def test_alpha_simvae(self, rng):
        model = small_model("simvae", hidden=(3,))
        n = 64
        views = [rng.normal(size=(n, d)) for d in model.view_dims]
        labels = np.full(n, -1)
        labels[[0, 1, 40, 41]] = [0, 1, 2, 0]
        present = np.arange(n) < 32
        res = objective_tensor(model, model.params, Batch(views, labels, present),
                               Noise.draw(rng, n, model))
        assert res.alphas == (2.0, 16.0)
        assert res.counts["N_c"] == 32 and res.counts["N_l"] == 4

    def test_simvae_all_complete_labeled(self, rng):
        model = small_model("simvae")
        views = [rng.normal(size=(3, d)) for d in model.view_dims]
        labels = np.array([2, 0, 1])
        noise = Noise.draw(rng, 3, model)
        value, _ = simvae_objective(model, Batch(views, labels), 0.5, 0.1, noise)
        total = 0.0
        for i in range(3):
            X = [v[i] for v in views]
            total -= ref_labeled_bound(model, X, labels[i], noise.z[i, 0])["total"]
            mean, var = ref_imputer(model, X[0])
            total += 0.5 * -np.sum(-0.5 * np.log(2 * math.pi * var) - (X[1] - mean) ** 2 / (2 * var))
            total += 0.1 * -ref_classifier(model, X)[labels[i]]
        assert abs(value - total) <= 1e-9

    def test_simvae_needs_complete(self, rng):
        model = small_model("simvae")
        views = [rng.normal(size=(2, d)) for d in model.view_dims]
        with pytest.raises(WeightingError):
            objective_tensor(model, model.params, Batch(views, [0, 1], [False, False]),
                             Noise.draw(rng, 2, model))

    def test_classifier_sees_imputer_mean_for_incomplete_labeled(self, rng):
        model = small_model("simvae")
        views = [rng.normal(size=(2, d)) for d in model.view_dims]
        res = objective_tensor(model, model.params, Batch(views, [1, 0], [False, True]),
                               Noise.draw(rng, 2, model))
        mean, _ = ref_imputer(model, views[0][0])
        expected = -ref_classifier(model, [views[0][0], mean])[1] \
            - ref_classifier(model, [views[0][1], views[1][1]])[0]
        assert abs(res.counts["classification_nll"] - expected) <= 1e-10

    @pytest.mark.parametrize("kind", ["smvae", "simvae"])
    @pytest.mark.parametrize("seed", range(5))
    def test_objective_decreases_under_adam(self, kind, seed):
        rng = np.random.default_rng(seed)
        model = small_model(kind, seed=seed, view_dims=(6, 4), hidden=(16, 8), latent_dim=3)
        n = 64
        views = [rng.normal(size=(n, d)) for d in model.view_dims]
        labels = np.where(rng.random(n) < 0.25, rng.integers(0, 3, n), -1)
        labels[0] = 0
        present = None if kind == "smvae" else np.arange(n) % 2 == 0
        batch = Batch(views, labels, present)
        noise = Noise.draw(rng, n, model)
        opt = AdamState.for_params(model.params, lr=1e-3)
        first = None
        for _ in range(200):
            leaves = model.params.leaves()
            res = objective_tensor(model, leaves, batch, noise)
            first = res.scalar if first is None else first
            adam_step(opt, model.params, backprop_grads(res.value, leaves))
        final = objective_tensor(model, model.params, batch, noise).scalar
        assert final < first

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-1e3, 1e3), st.integers(0, 1000))
    def test_objectives_finite(self, scale, seed):
        rng = np.random.default_rng(seed)
        model = small_model("simvae", seed=seed % 7)
        views = [rng.normal(size=(4, d)) * scale for d in model.view_dims]
        batch = Batch(views, [0, -1, 2, -1], [True, False, True, False])
        res = objective_tensor(model, model.params, batch, Noise.draw(rng, 4, model))
        assert math.isfinite(res.scalar)


class TestClassifyImpute:
    def test_simplex(self, rng):
        model = small_model("smvae")
        views = [rng.normal(size=(50, d)) * 3 for d in model.view_dims]
        c = classify(model, views)
        np.testing.assert_allclose(c.probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_zero_weights_uniform(self, rng):
        model = small_model("smvae")
        for k in model.params.keys():
            if k.startswith("clf."):
                model.params[k] = np.zeros_like(model.params[k])
        np.testing.assert_allclose(classify(model, _views(model, rng)).probs, 1 / 3, atol=1e-15)

    def test_argmax_shift_invariant(self, rng):
        model = small_model("smvae")
        views = [rng.normal(size=(30, d)) for d in model.view_dims]
        before = classify(model, views).argmax()
        model.params["clf.logp.b"] = model.params["clf.logp.b"] + 7.5
        np.testing.assert_array_equal(classify(model, views).argmax(), before)

    def test_unfilled_view_rejected(self, rng):
        model = small_model("smvae")
        X = _views(model, rng)
        X[1][0] = np.nan
        with pytest.raises(ContractError):
            classify(model, X)

    def test_zero_imputer_gives_zeros(self, rng):
        model = small_model("simvae")
        for k in model.params.keys():
            if k.startswith("imp."):
                model.params[k] = np.zeros_like(model.params[k])
        np.testing.assert_array_equal(impute(model, rng.normal(size=(5, 4))), 0.0)

    def test_impute_deterministic(self, rng):
        model = small_model("simvae")
        x = rng.normal(size=(5, 4))
        assert np.array_equal(impute(model, x), impute(model, x))

    def test_impute_is_conditional_mean(self, rng):
        model = small_model("simvae")
        x = rng.normal(size=4)
        np.testing.assert_allclose(impute(model, x), ref_imputer(model, x)[0], rtol=0, atol=1e-12)
