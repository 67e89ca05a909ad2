import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from mgpvae.kalman import GaussianSites, filter_smooth
from mgpvae.model import KernelConfig, MGPVAE, ModelConfig
from mgpvae.nn import autodiff as ad
from mgpvae.oracle import dense_regress
from mgpvae.ssk import KernelSpec, to_state_space
from mgpvae.vi import (e1_analytic, elbo, iw_log_likelihood, iw_nll, sample_paths, sample_posterior)

from conftest import linear_gaussian_model

SPECS = [KernelSpec.create("matern32", 1.0, 0.8), KernelSpec.create("matern52", 1.5, 1.2)]


def random_posterior(rng, T=10, L=2):
    times = np.sort(rng.uniform(0, 5, T))
    sites = GaussianSites(times, rng.standard_normal((T, L)), rng.uniform(0.1, 1.0, (T, L)))
    post = filter_smooth([to_state_space(s) for s in SPECS[:L]], sites)
    return sites, post


def seq(times, y, mask=None):
    return SimpleNamespace(times=np.asarray(times, float), y=np.asarray(y, float), mask=mask)


def exact_linear_e2(post, y, noise_var):
    """E_q log N(y; z, noise) for the identity decoder, summed over steps."""
    zm, zv = np.asarray(post.z_mean())[:, 0], np.asarray(post.z_var())[:, 0]
    r = y[:, 0] - zm
    return float(np.sum(-0.5 * (math.log(2 * math.pi * noise_var) + (r * r + zv) / noise_var)))


class TestE1:
    def test_degenerate_posterior(self, rng):
        sites, post = random_posterior(rng)
        post.P_smooth = [0.0 * P for P in post.P_smooth]
        zm = np.asarray(post.z_mean())
        ref = norm.logpdf(sites.y_tilde, zm, np.sqrt(sites.v_tilde)).sum()
        assert float(e1_analytic(post, sites)) == pytest.approx(ref, rel=1e-13)

    def test_plug_in_single_term(self):
        H = np.array([[1.0, 0.0]])
        post = SimpleNamespace(z_mean=lambda: np.zeros((1, 1)), z_var=lambda: np.ones((1, 1)))
        sites = GaussianSites([0.0], [[0.0]], [[1.0]])
        assert float(e1_analytic(post, sites)) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, rel=1e-15)

    def test_matches_monte_carlo(self, rng):
        sites, post = random_posterior(rng)
        n = 100_000
        zs = np.asarray(ad.stack([s.z for s in sample_posterior(post, n, rng)]))   # (n, T, L)
        vals = norm.logpdf(sites.y_tilde[None], zs, np.sqrt(sites.v_tilde)[None]).sum(axis=(1, 2))
        se = vals.std(ddof=1) / math.sqrt(n)
        assert abs(float(e1_analytic(post, sites)) - vals.mean()) <= 3 * se

    def test_masked_steps_excluded(self, rng):
        sites, post = random_posterior(rng, T=6, L=1)
        mask = np.array([1, 0, 1, 1, 0, 1], bool)
        masked = GaussianSites(sites.times, sites.y_tilde, sites.v_tilde, mask)
        post_m = filter_smooth([to_state_space(SPECS[0])], masked)
        full = GaussianSites(sites.times[mask], sites.y_tilde[mask], sites.v_tilde[mask])
        post_f = filter_smooth([to_state_space(SPECS[0])], full)
        assert float(e1_analytic(post_m, masked)) == pytest.approx(float(e1_analytic(post_f, full)), rel=1e-12)


class TestSampling:
    def test_zero_noise_gives_mean(self, rng):
        _, post = random_posterior(rng)
        noise = [np.zeros((3,) + np.shape(m)) for m in post.m_smooth]
        for s in sample_posterior(post, 3, rng, noise=noise):
            np.testing.assert_allclose(s.z, np.asarray(post.z_mean()), atol=1e-14)
            np.testing.assert_array_equal(s.noise, 0)

    def test_z_is_projection_of_s(self, rng):
        _, post = random_posterior(rng)
        s = sample_posterior(post, 1, rng)[0]
        d0 = post.m_smooth[0].shape[-1]
        np.testing.assert_allclose(s.z[:, 0], s.s[:, 0], atol=0)
        np.testing.assert_allclose(s.z[:, 1], s.s[:, d0], atol=0)

    def test_moments(self, rng):
        _, post = random_posterior(rng)
        n = 100_000
        draws = sample_posterior(post, n, rng)
        S = np.stack([d.s for d in draws])
        Z = np.stack([d.z for d in draws])
        m = np.concatenate([np.asarray(x) for x in post.m_smooth], axis=-1)
        Pd = np.concatenate([np.diagonal(np.asarray(P), axis1=-2, axis2=-1) for P in post.P_smooth], axis=-1)
        assert np.all(np.abs(S.mean(0) - m) <= 3 * np.sqrt(Pd / n) + 1e-12)
        np.testing.assert_allclose(Z.var(0), np.asarray(post.z_var()), rtol=0.05)

    def test_k_must_be_positive(self, rng):
        _, post = random_posterior(rng)
        with pytest.raises(ValueError):
            sample_posterior(post, 0, rng)

    def test_joint_paths_have_dense_posterior_covariance(self, rng):
        spec = SPECS[0]
        T = 8
        times = np.sort(rng.uniform(0, 4, T))
        y = rng.standard_normal(T)
        v = rng.uniform(0.1, 0.5, T)
        post = filter_smooth([to_state_space(spec)], GaussianSites(times, y[:, None], v[:, None]))
        Z = sample_paths(post, 200_000, rng)[..., 0]
        ref = dense_regress(spec, times, y, v)
        np.testing.assert_allclose(Z.mean(0), ref.mean, atol=0.01)
        np.testing.assert_allclose(np.cov(Z.T), ref.cov, atol=0.01)


class TestElbo:
    def test_identity_holds_exactly(self, rng):
        model = MGPVAE(ModelConfig(data_dim=3, latent_dim=2), rng=rng)
        batch = [seq(np.arange(8.0), rng.standard_normal((8, 3))) for _ in range(3)]
        b = elbo(model, batch, 2, rng)
        assert b.elbo == b.e3 + b.e2 - b.e1
        assert b.kl == b.e1 - b.e3
        assert b.n_sequences == 3
        assert all(np.isfinite(v) for v in b.as_floats().values())

    def test_empty_sequence_rejected(self, rng):
        model = linear_gaussian_model()
        with pytest.raises(ValueError):
            elbo(model, [seq([0.0, 1.0], [[0.1], [0.2]], np.array([False, False]))], 1, rng)
        with pytest.raises(ValueError):
            elbo(model, [], 1, rng)

    def test_duplicate_sequences_add_up(self, rng):
        model = MGPVAE(ModelConfig(data_dim=2, latent_dim=2), rng=rng)
        s = seq(np.sort(rng.uniform(0, 5, 12)), rng.standard_normal((12, 2)))
        one = elbo(model, [s], 4, np.random.default_rng(1))
        two = elbo(model, [s, s], 4, np.random.default_rng(1))
        assert two.e1 == pytest.approx(2 * one.e1, rel=1e-14)
        assert two.e3 == pytest.approx(2 * one.e3, rel=1e-14)
        e2_single = [elbo(model, [s], 1, np.random.default_rng(k)).e2 for k in range(400)]
        e2_pair = [elbo(model, [s, s], 1, np.random.default_rng(1000 + k)).e2 / 2 for k in range(400)]
        diff = np.mean(e2_pair) - np.mean(e2_single)
        se = math.sqrt(np.var(e2_pair) / 400 + np.var(e2_single) / 400)
        assert abs(diff) <= 4 * se

    def test_conjugate_sites_close_the_gap(self, rng):
        """Exact sites and a linear decoder: e3 + E2 - e1 equals the log marginal."""
        noise = 0.25
        model = linear_gaussian_model(noise_var=noise)
        T = 20
        times = np.sort(rng.uniform(0, 8, T))
        y = rng.standard_normal((T, 1))
        view, _ = model.view()
        sites, post = model.posterior(view, times, y)
        e1 = float(e1_analytic(post, sites))
        e3 = float(post.log_partition)
        lml = dense_regress(KernelSpec.create("matern32", 1.0, 0.7), times, y[:, 0], np.full(T, noise)).lml
        assert abs(e3 + exact_linear_e2(post, y, noise) - e1 - lml) < 1e-6

    def test_elbo_below_importance_weighted_likelihood(self, rng):
        model = linear_gaussian_model(noise_var=0.2, site_scale=0.7, site_var=0.5)
        s = seq(np.arange(15.0), rng.standard_normal((15, 1)))
        elbos = [float(elbo(model, [s], 1, np.random.default_rng(k)).elbo) for k in range(200)]
        ll = -iw_nll(model, s, 1000, np.random.default_rng(5))
        assert np.mean(elbos) <= ll

    def test_channel_permutation_invariance(self, rng):
        cfg = ModelConfig(data_dim=3, latent_dim=2, kernels=(KernelConfig("matern32", 1.0, 0.5),
                                                            KernelConfig("matern52", 2.0, 1.5)))
        model = MGPVAE(cfg, rng=rng)
        cfg_p = ModelConfig(data_dim=3, latent_dim=2, kernels=cfg.kernels[::-1])
        perm = MGPVAE(cfg_p, params=model.params.copy())
        P, lay = perm.params, perm.params.layout
        src = model.params
        enc_w = src["encoder.1.weight"]
        enc_b = src["encoder.1.bias"]
        order = [1, 0, 3, 2]
        P.vector[lay["encoder.1.weight"].slice] = enc_w[:, order].ravel()
        P.vector[lay["encoder.1.bias"].slice] = enc_b[order]
        P.vector[lay["decoder.0.weight"].slice] = src["decoder.0.weight"][::-1].ravel()
        for a, b in ((0, 1), (1, 0)):
            for k in ("log_variance", "log_lengthscale"):
                P.vector[lay[f"kernel.{a}.{k}"].slice] = src[f"kernel.{b}.{k}"]
        s = seq(np.sort(rng.uniform(0, 5, 10)), rng.standard_normal((10, 3)))
        a = elbo(model, [s], 3, np.random.default_rng(2))
        # permuted model: draw the channels' noise in the swapped order by reusing the sampler per channel
        b = elbo(perm, [s], 3, np.random.default_rng(2))
        assert b.e1 == pytest.approx(a.e1, rel=1e-12)
        assert b.e3 == pytest.approx(a.e3, rel=1e-12)
        e2a = np.mean([elbo(model, [s], 1, np.random.default_rng(k)).e2 for k in range(300)])
        e2b = np.mean([elbo(perm, [s], 1, np.random.default_rng(k)).e2 for k in range(300)])
        assert e2a == pytest.approx(e2b, rel=0.02)


class TestIwNll:
    def test_exact_sites_recover_marginal(self, rng):
        noise = 0.3
        model = linear_gaussian_model(noise_var=noise)
        T = 25
        times = np.sort(rng.uniform(0, 10, T))
        y = rng.standard_normal((T, 1))
        lml = dense_regress(KernelSpec.create("matern32", 1.0, 0.7), times, y[:, 0], np.full(T, noise)).lml
        assert -iw_nll(model, seq(times, y), 1, rng) == pytest.approx(lml, rel=1e-10)

    def test_nll_improves_with_more_samples(self):
        model = linear_gaussian_model(noise_var=0.2, site_scale=0.6, site_var=0.6)
        data_rng = np.random.default_rng(3)
        s = seq(np.arange(20.0), data_rng.standard_normal((20, 1)))
        Ks = [1, 2, 4, 8, 16, 32, 64]
        table = np.array([[iw_nll(model, s, K, np.random.default_rng([seed, K])) for K in Ks]
                          for seed in range(50)])
        for j in range(len(Ks) - 1):
            d = table[:, j] - table[:, j + 1]
            assert d.mean() >= -2 * d.std(ddof=1) / math.sqrt(len(d))
        assert table[:, 0].mean() > table[:, -1].mean()

    def test_converges_under_strong_mismatch(self):
        noise = 0.2
        model = linear_gaussian_model(noise_var=noise, site_scale=0.7, site_var=0.5)
        data_rng = np.random.default_rng(9)
        times = np.arange(20.0)
        y = data_rng.standard_normal((20, 1))
        truth = -dense_regress(KernelSpec.create("matern32", 1.0, 0.7), times, y[:, 0], np.full(20, noise)).lml
        err = {K: np.mean([abs(iw_nll(model, seq(times, y), K, np.random.default_rng([s, K])) - truth)
                           for s in range(3)]) for K in (10, 100_000)}
        assert err[100_000] < 0.5 < err[10]

    def test_missing_term_vanishes_without_missing_steps(self, rng):
        model = linear_gaussian_model(site_scale=0.8)
        s = seq(np.arange(10.0), rng.standard_normal((10, 1)))
        a = iw_nll(model, s, 10, np.random.default_rng(4))
        b = iw_nll(model, s, 10, np.random.default_rng(4), target=rng.standard_normal((10, 1)))
        assert a == b

    def test_missing_term_matches_joint_predictive(self, rng):
        noise = 0.3
        model = linear_gaussian_model(noise_var=noise)
        T = 20
        times = np.arange(float(T))
        y = rng.standard_normal((T, 1))
        mask = np.ones(T, bool)
        mask[[4, 5, 11]] = False
        target = rng.standard_normal((T, 1))
        est = iw_log_likelihood(model, [seq(times, y * mask[:, None], mask)], 4000, rng, targets=[target])
        ref = dense_regress(KernelSpec.create("matern32", 1.0, 0.7), times[mask], y[mask, 0],
                            np.full(mask.sum(), noise), query_times=times[~mask])
        exact = multivariate_normal(ref.test_mean, ref.test_cov + noise * np.eye(3)).logpdf(target[~mask, 0])
        assert est.log_p_missing[0] == pytest.approx(exact, abs=0.1)
        seen = dense_regress(KernelSpec.create("matern32", 1.0, 0.7), times[mask], y[mask, 0],
                             np.full(mask.sum(), noise)).lml
        assert est.log_p_seen[0] == pytest.approx(seen, rel=1e-10)
