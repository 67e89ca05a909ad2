import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.exp(rng.uniform(0, np.log(cond), n))
    return (Q * ev) @ Q.T


def linear_gaussian_model(noise_var=0.3, family="matern32", variance=1.0, lengthscale=0.7,
                          site_scale=1.0, site_var=None):
    """One-dimensional model with an identity decoder.

    The encoder emits sites ``(site_scale * y, site_var)``; with the defaults
    they equal the likelihood terms exactly.
    """
    import math

    from mgpvae.model import KernelConfig, MGPVAE, ModelConfig

    site_var = noise_var if site_var is None else site_var
    cfg = ModelConfig(data_dim=1, latent_dim=1, encoder_hidden=(), decoder_hidden=(),
                      kernels=(KernelConfig(family, variance, lengthscale),), noise_variance=noise_var)
    model = MGPVAE(cfg, rng=np.random.default_rng(0))
    P = model.params
    floor = cfg.site_var_floor

    def put(name, value):
        P.vector[P.layout[name].slice] = np.ravel(value)

    put("encoder.0.weight", [[site_scale, 0.0]])
    put("encoder.0.bias", [0.0, math.log(math.expm1(site_var - floor))])
    put("decoder.0.weight", [[1.0]])
    put("decoder.0.bias", [0.0])
    return model
