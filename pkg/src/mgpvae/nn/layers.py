"""Multi-layer perceptrons on top of the autodiff primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from . import autodiff as ad
from .params import ParamLayout

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "softplus": ad.softplus}


@dataclass(frozen=True)
class MLPArch:
    """Layer sizes ``(in, hidden..., out)``; the activation follows every hidden layer."""

    sizes: tuple
    activation: str = "relu"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def register(self, layout: ParamLayout, prefix: str) -> None:
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            layout.add(f"{prefix}.{k}.weight", (n_in, n_out))
            layout.add(f"{prefix}.{k}.bias", (n_out,))

    def init(self, params_vec: np.ndarray, layout: ParamLayout, prefix: str, rng: np.random.Generator) -> None:
        """Weights ~ N(0, 1/fan_in), biases zero."""
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            seg = layout[f"{prefix}.{k}.weight"]
            params_vec[seg.slice] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=n_in * n_out)
            params_vec[layout[f"{prefix}.{k}.bias"].slice] = 0.0


def mlp_forward(params, prefix: str, x, arch: MLPArch):
    """Affine layers with the chosen activation between them; acts on the last axis."""
    if np.shape(ad.value(x))[-1] != arch.sizes[0]:
        raise DimensionError(f"{prefix}: input width {np.shape(ad.value(x))[-1]} != {arch.sizes[0]}")
    act = ACTIVATIONS[arch.activation]
    h = x
    n_layers = len(arch.sizes) - 1
    for k in range(n_layers):
        W = params[f"{prefix}.{k}.weight"]
        b = params[f"{prefix}.{k}.bias"]
        lead = np.shape(ad.value(h))[:-1]
        h2 = ad.reshape(h, (-1, arch.sizes[k])) if len(lead) != 1 else h
        h2 = h2 @ W + b
        h = ad.reshape(h2, lead + (arch.sizes[k + 1],)) if len(lead) != 1 else h2
        if k < n_layers - 1:
            h = act(h)
    return h
