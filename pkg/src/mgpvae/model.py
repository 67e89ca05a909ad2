"""The Markovian GP-VAE: encoder -> Gaussian sites -> Kalman smoother -> decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kalman import GaussianSites, SmoothedPosterior, filter_smooth
from .nn import autodiff as ad
from .nn.layers import MLPArch, mlp_forward
from .nn.params import ParamLayout, Params, ParamView
from .oracle import SpatialKernelSpec
from .ssk import KernelSpec, canonical_family, to_state_space

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelConfig:
    family: str = "matern32"
    variance: float = 1.0
    lengthscale: float | None = None  # None: 10% of the time span
    trainable: bool = True


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int
    latent_dim: int = 2
    encoder_hidden: tuple = (32,)
    decoder_hidden: tuple = (16,)
    activation: str = "relu"
    kernels: tuple = (KernelConfig(),)
    noise_variance: float = 0.1
    site_var_floor: float = 1e-6
    spatial_family: str = "matern32"
    spatial_lengthscales: tuple = (1.0,)

    def kernel(self, l: int) -> KernelConfig:
        if len(self.kernels) == 1:
            return self.kernels[0]
        if len(self.kernels) != self.latent_dim:
            raise ConfigError(f"{len(self.kernels)} kernel configs for {self.latent_dim} latent channels")
        return self.kernels[l]

    @property
    def encoder_arch(self) -> MLPArch:
        return MLPArch((self.data_dim, *self.encoder_hidden, 2 * self.latent_dim), self.activation)

    @property
    def decoder_arch(self) -> MLPArch:
        return MLPArch((self.latent_dim, *self.decoder_hidden, self.data_dim), self.activation)


def build_layout(cfg: ModelConfig) -> ParamLayout:
    layout = ParamLayout()
    cfg.encoder_arch.register(layout, "encoder")
    cfg.decoder_arch.register(layout, "decoder")
    for l in range(cfg.latent_dim):
        layout.add(f"kernel.{l}.log_variance", ())
        layout.add(f"kernel.{l}.log_lengthscale", ())
    layout.add("likelihood.log_noise", ())
    return layout


def init_params(cfg: ModelConfig, rng: np.random.Generator, time_span: float = 1.0) -> Params:
    layout = build_layout(cfg)
    vec = np.zeros(layout.size)
    cfg.encoder_arch.init(vec, layout, "encoder", rng)
    cfg.decoder_arch.init(vec, layout, "decoder", rng)
    for l in range(cfg.latent_dim):
        kc = cfg.kernel(l)
        ell = kc.lengthscale if kc.lengthscale is not None else 0.1 * max(time_span, 1e-12)
        vec[layout[f"kernel.{l}.log_variance"].slice] = math.log(kc.variance)
        vec[layout[f"kernel.{l}.log_lengthscale"].slice] = math.log(ell)
    vec[layout["likelihood.log_noise"].slice] = math.log(cfg.noise_variance)
    return Params(vec, layout)


class MGPVAE:
    """Temporal model; each sequence gets its own latent GP path."""

    def __init__(self, config: ModelConfig, params: Params | None = None,
                 rng: np.random.Generator | None = None, time_span: float = 1.0):
        self.config = config
        for l in range(config.latent_dim):
            canonical_family(config.kernel(l).family)
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0), time_span)
        elif params.layout.to_json() != build_layout(config).to_json():
            raise ConfigError("parameter layout does not match the model configuration")
        self.params = params

    # -- parameter access ---------------------------------------------------------------
    def view(self, tape: ad.Tape | None = None):
        """Parameter mapping (arrays, or tensors when a tape is given) and the leaf."""
        if tape is None:
            return self.params.view(), None
        return self.params.bind(tape)

    def kernel_specs(self, view: ParamView) -> list[KernelSpec]:
        specs = []
        for l in range(self.config.latent_dim):
            kc = self.config.kernel(l)
            lv = view[f"kernel.{l}.log_variance"]
            ll = view[f"kernel.{l}.log_lengthscale"]
            if not kc.trainable:
                lv, ll = ad.value(lv), ad.value(ll)
            specs.append(KernelSpec(canonical_family(kc.family), lv, ll))
        return specs

    def state_spaces(self, view: ParamView):
        return [to_state_space(s) for s in self.kernel_specs(view)]

    def noise_var(self, view: ParamView):
        return ad.exp(view["likelihood.log_noise"])

    # -- networks ---------------------------------------------------------------------------
    def encode(self, view: ParamView, y):
        """Site means and variances, each (..., T, L)."""
        L = self.config.latent_dim
        out = mlp_forward(view, "encoder", y, self.config.encoder_arch)
        y_tilde = out[..., :L]
        v_tilde = ad.softplus(out[..., L:]) + self.config.site_var_floor
        return y_tilde, v_tilde

    def decode(self, view: ParamView, z):
        return mlp_forward(view, "decoder", z, self.config.decoder_arch)

    def log_likelihood(self, view: ParamView, y, z):
        """log N(y; decode(z), noise * I) summed over data dimensions, shape (..., T)."""
        mean = self.decode(view, z)
        var = self.noise_var(view)
        r = y - mean
        D = self.config.data_dim
        return -0.5 * (D * (LOG_2PI + ad.log(var)) + ad.sum(r * r, axis=-1) / var)

    # -- inference ----------------------------------------------------------------------------
    def posterior(self, view: ParamView, times, y, mask=None, query_times=None):
        """Sites and smoothed posterior for sequences sharing ``times``.

        ``y`` has shape (..., T, D).  With ``query_times``, the posterior is
        computed on the union grid and the returned sites include skip-update
        pseudo-sites.
        """
        y_tilde, v_tilde = self.encode(view, y)
        sites = GaussianSites(times, y_tilde, v_tilde, mask)
        if query_times is not None:
            from .kalman import insert_pseudo_sites
            sites, _ = insert_pseudo_sites(sites, query_times)
        post = filter_smooth(self.state_spaces(view), sites, check=not ad.is_tensor(y_tilde))
        return sites, post


class SpatioTemporalMGPVAE(MGPVAE):
    """One latent field over (location, time); locations share the spatial kernel.

    Data for a field have shape (N_r, T, D); sites are arranged channel-major
    as (T, L * N_r).
    """

    def __init__(self, config: ModelConfig, R, params: Params | None = None,
                 rng: np.random.Generator | None = None, time_span: float = 1.0):
        super().__init__(config, params, rng, time_span)
        self.R = np.atleast_2d(np.asarray(R, dtype=np.float64))
        ls = tuple(config.spatial_lengthscales)
        if len(ls) == 1 and self.R.shape[1] > 1:
            ls = ls * self.R.shape[1]
        self.spatial = SpatialKernelSpec(canonical_family(config.spatial_family), ls)

    def st_state(self, view: ParamView):
        from .stgp import st_build
        return st_build(self.spatial, None, self.R, temporal_state_spaces=self.state_spaces(view))

    def sites_from(self, view: ParamView, y):
        """(T, L*N_r) site arrays from data (N_r, T, D)."""
        y_tilde, v_tilde = self.encode(view, y)              # (N, T, L)
        N, T = np.shape(ad.value(y))[:2]
        L = self.config.latent_dim
        yt = ad.reshape(ad.transpose(y_tilde, (1, 2, 0)), (T, L * N))
        vt = ad.reshape(ad.transpose(v_tilde, (1, 2, 0)), (T, L * N))
        return yt, vt

    def posterior(self, view: ParamView, times, y, mask=None, query_times=None):
        from .stgp import st_filter_smooth
        yt, vt = self.sites_from(view, y)
        sites = GaussianSites(times, yt, vt, mask)
        st = self.st_state(view)
        post = st_filter_smooth(st, sites, query_times=query_times)
        return sites, post

    def field_to_sites_layout(self, z):
        """(..., T, L*N) channel-major -> (..., N, T, L)."""
        shp = np.shape(ad.value(z))
        N, L = self.R.shape[0], self.config.latent_dim
        z4 = ad.reshape(z, shp[:-1] + (L, N))
        nd = len(shp) - 2
        axes = tuple(range(nd)) + (nd + 2, nd, nd + 1)
        return ad.transpose(z4, axes)
