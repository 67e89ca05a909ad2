"""Matern kernels as linear SDEs and their exact discretization.

A kernel with hyperparameters (variance, lengthscale) is turned into a
continuous-time state-space model ``ds = F s dt + L dB, z = H s`` with
stationary covariance ``Pinf``.  Discretizing over a gap ``dt`` gives the
transition ``s' = A s + q, q ~ N(0, Q)`` with ``A = exp(dt F)`` and
``Q = Pinf - A Pinf A^T``.

The builders are written against :mod:`mgpvae.nn.autodiff`, so passing
tensor-valued log-hyperparameters yields tensor-valued matrices and the
kernel hyperparameters receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .matcore import matexp, symmetrize
from .nn import autodiff as ad

FAMILIES = ("matern32", "matern52")
STATE_DIM = {"matern32": 2, "matern52": 3}

_ALIASES = {
    "matern32": "matern32", "matern-3/2": "matern32", "matern3/2": "matern32", "m32": "matern32",
    "matern52": "matern52", "matern-5/2": "matern52", "matern5/2": "matern52", "m52": "matern52",
}


def canonical_family(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown kernel family {name!r}; expected one of {FAMILIES}") from None


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus log-variance and log-lengthscale.

    The log-values may be floats or autodiff tensors.
    """

    family: str
    log_variance: object = 0.0
    log_lengthscale: object = 0.0

    @classmethod
    def create(cls, family: str, variance: float = 1.0, lengthscale: float = 1.0) -> "KernelSpec":
        if not (variance > 0 and lengthscale > 0):
            raise ConfigError(f"variance and lengthscale must be positive, got {variance}, {lengthscale}")
        return cls(canonical_family(family), math.log(variance), math.log(lengthscale))

    @property
    def variance(self) -> float:
        return float(np.exp(ad.value(self.log_variance)))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(ad.value(self.log_lengthscale)))

    @property
    def state_dim(self) -> int:
        return STATE_DIM[self.family]


@dataclass(frozen=True)
class KernelStateSpace:
    F: object
    L: np.ndarray
    H: np.ndarray
    Qc: object
    Pinf: object
    m0: np.ndarray
    family: str

    @property
    def d(self) -> int:
        return self.L.shape[0]

    @property
    def variance(self):
        return (self.H @ self.Pinf @ self.H.T)[0, 0]


@dataclass(frozen=True)
class DiscreteTransition:
    A: np.ndarray
    Q: np.ndarray
    dt: float


# Constant coefficient matrices: F = sum_k lambda**k * C_k.
_F_COEFFS = {
    "matern32": [
        np.array([[0.0, 1.0], [0.0, 0.0]]),
        np.array([[0.0, 0.0], [0.0, -2.0]]),
        np.array([[0.0, 0.0], [-1.0, 0.0]]),
    ],
    "matern52": [
        np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]),
        np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, -3.0]]),
        np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, -3.0, 0.0]]),
        np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
    ],
}
_ROOT = {"matern32": math.sqrt(3.0), "matern52": math.sqrt(5.0)}


def to_state_space(spec: KernelSpec) -> KernelStateSpace:
    """Continuous-time (F, L, H, Qc, Pinf, m0) for a Matern kernel.

    Matern-3/2 uses the closed-form stationary covariance diag(var, var*lam^2)
    and the diffusion 4*lam^3*var that makes it satisfy the Lyapunov equation.
    Matern-5/2 uses Qc = 400*sqrt(5)*var / (3*ell^5) and obtains Pinf by
    solving the Lyapunov equation.
    """
    fam = spec.family
    if fam not in FAMILIES:
        raise ConfigError(f"unknown kernel family {fam!r}")
    var = ad.exp(spec.log_variance)
    lam = _ROOT[fam] * ad.exp(-1.0 * spec.log_lengthscale)
    coeffs = _F_COEFFS[fam]
    d = STATE_DIM[fam]
    F = coeffs[0]
    lam_k = 1.0
    for C in coeffs[1:]:
        lam_k = lam_k * lam
        F = F + ad.mul(lam_k, C)
    L = np.zeros((d, 1))
    L[-1, 0] = 1.0
    H = np.zeros((1, d))
    H[0, 0] = 1.0
    if fam == "matern32":
        Qc = 4.0 * var * lam * lam * lam
        Pinf = ad.mul(var, np.diag([1.0, 0.0])) + ad.mul(var * lam * lam, np.diag([0.0, 1.0]))
    else:
        Qc = (16.0 / 3.0) * var * ad.power(lam, 5)
        P = ad.lyapunov(F, ad.mul(Qc, L @ L.T))
        Pinf = 0.5 * (P + ad.mT(P))
    return KernelStateSpace(F=F, L=L, H=H, Qc=Qc, Pinf=Pinf, m0=np.zeros((d, 1)), family=fam)


def lyapunov_residual(ss: KernelStateSpace) -> float:
    F, P, Qc = ad.value(ss.F), ad.value(ss.Pinf), float(ad.value(ss.Qc))
    R = F @ P + P @ F.T + ss.L @ ss.L.T * Qc
    return float(np.max(np.abs(R)))


def discretize(ss: KernelStateSpace, dt: float) -> DiscreteTransition:
    """Exact transition over a gap ``dt >= 0``."""
    if not dt >= 0:
        raise ValueError(f"time gap must be non-negative, got {dt}")
    F, Pinf = ad.value(ss.F), ad.value(ss.Pinf)
    A = matexp(dt * F)
    Q = symmetrize(Pinf - A @ Pinf @ A.T)
    return DiscreteTransition(A=A, Q=Q, dt=float(dt))


def transitions(ss: KernelStateSpace, dts):
    """Batched (A, Q) for an array of gaps; tensor-aware.

    Returns arrays of shape (n, d, d).  Identical gaps are computed once.
    """
    dts = np.asarray(dts, dtype=np.float64)
    if np.any(dts < 0):
        raise ValueError("time gaps must be non-negative")
    uniq, inverse = np.unique(np.round(dts, 12), return_inverse=True)
    A = ad.matexp(uniq[:, None, None] * ss.F)
    APA = A @ ss.Pinf @ ad.mT(A)
    Q = ss.Pinf - APA
    Q = 0.5 * (Q + ad.mT(Q))
    if len(uniq) == len(dts) and np.all(inverse == np.arange(len(dts))):
        return A, Q
    return A[inverse], Q[inverse]


def matern_corr(family: str, r):
    """Unit-variance Matern correlation at scaled distance ``r >= 0`` (tensor-aware)."""
    if family == "matern32":
        a = math.sqrt(3.0) * r
        return (1.0 + a) * ad.exp(-1.0 * a)
    if family == "matern52":
        a = math.sqrt(5.0) * r
        return (1.0 + a + a * a / 3.0) * ad.exp(-1.0 * a)
    raise ConfigError(f"unknown kernel family {family!r}")


def kernel(spec: KernelSpec, tau) -> np.ndarray:
    """Closed-form k(tau) for time differences ``tau``."""
    tau = np.abs(np.asarray(tau, dtype=np.float64))
    return spec.variance * matern_corr(spec.family, tau / spec.lengthscale)


def gram(spec: KernelSpec, times, times2=None) -> np.ndarray:
    """Dense kernel matrix between two sets of times."""
    t1 = np.asarray(times, dtype=np.float64).ravel()
    t2 = t1 if times2 is None else np.asarray(times2, dtype=np.float64).ravel()
    return kernel(spec, t1[:, None] - t2[None, :])
