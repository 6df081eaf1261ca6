"""Stochastic binary gates with a stretched, clamped concrete relaxation.

Each gate is parameterized by a location ``log_alpha`` and a temperature
``beta``.  Training-time samples are

    u ~ U(0,1)
    s = sigmoid((log(u/(1-u)) + log_alpha) / beta)
    m = clamp(s * (zeta - gamma) + gamma, 0, 1)

with stretch constants gamma < 0 < 1 < zeta, so m has point masses at
exactly 0 and 1.  The expected fraction of open gates has the closed form
``sigmoid(log_alpha - beta * log(-gamma/zeta))`` and is used as a sparsity
penalty.  At inference time the sample is replaced by the deterministic
gate ``clamp(sigmoid(log_alpha) * (zeta - gamma) + gamma, 0, 1)``.

Gradients flow through the reparameterized sample: with u held fixed,
``dm/dlog_alpha = (zeta - gamma) * s * (1 - s) / beta`` inside the unclamped
region and 0 where the clamp is active.  No straight-through estimator is
used anywhere.

All math runs in float64 regardless of the parameter dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeds import np_rng

GAMMA = -0.1
ZETA = 1.1
DEFAULT_BETA = 2.0 / 3.0

# uniform draws are clamped away from {0,1} before the logit
_U_EPS = 1e-6


@dataclass
class GateParams:
    """Per-gate locations and temperatures plus the global stretch bounds."""

    log_alpha: np.ndarray
    beta: np.ndarray
    gamma: float = GAMMA
    zeta: float = ZETA

    def __post_init__(self):
        self.log_alpha = np.asarray(self.log_alpha)
        self.beta = np.broadcast_to(
            np.asarray(self.beta, dtype=self.log_alpha.dtype), self.log_alpha.shape
        ).copy()
        self.validate()

    def validate(self):
        if self.log_alpha.ndim != 1 or self.log_alpha.size == 0:
            raise ValueError("log_alpha must be a non-empty 1-D array")
        if not np.all(self.beta > 0):
            raise ValueError("all gate temperatures must be strictly positive")
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise ValueError("stretch bounds must satisfy gamma < 0 < 1 < zeta")

    def __len__(self) -> int:
        return self.log_alpha.size

    def copy(self) -> "GateParams":
        return GateParams(self.log_alpha.copy(), self.beta.copy(), self.gamma, self.zeta)


@dataclass
class GateSample:
    """One reparameterized draw: uniforms u, concrete variables s, masks m."""

    u: np.ndarray
    s: np.ndarray
    m: np.ndarray


def init_gate_params(
    n: int,
    seed: int,
    mean: float = 2.0,
    std: float = 0.01,
    beta: float = DEFAULT_BETA,
    dtype=np.float32,
) -> GateParams:
    """Fresh gate locations near-open (N(mean, std)) with a shared temperature.

    Starting open lets the sparsity penalty prune downward instead of having
    to revive dead gates.
    """
    rng = np_rng(seed, "gate_init")
    log_alpha = rng.normal(mean, std, size=n).astype(dtype)
    return GateParams(log_alpha=log_alpha, beta=np.full(n, beta, dtype=dtype))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sample_gates(params: GateParams, rng_seed: int) -> GateSample:
    """Draw one mask sample. Bit-identical for identical (params, seed)."""
    params.validate()
    log_alpha = params.log_alpha.astype(np.float64)
    beta = params.beta.astype(np.float64)
    u = np_rng(rng_seed, "gate_u").uniform(size=log_alpha.size)
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    s = _sigmoid((np.log(u / (1.0 - u)) + log_alpha) / beta)
    m = np.clip(s * (params.zeta - params.gamma) + params.gamma, 0.0, 1.0)
    return GateSample(u=u, s=s, m=m)


def expected_l0(params: GateParams) -> float:
    """Mean probability of a gate being non-zero, in [0, 1]."""
    params.validate()
    arg = params.log_alpha.astype(np.float64) - params.beta.astype(np.float64) * np.log(
        -params.gamma / params.zeta
    )
    return float(np.mean(_sigmoid(arg)))


def expected_l0_grad(params: GateParams) -> np.ndarray:
    """d expected_l0 / d log_alpha, per gate (float64)."""
    arg = params.log_alpha.astype(np.float64) - params.beta.astype(np.float64) * np.log(
        -params.gamma / params.zeta
    )
    sig = _sigmoid(arg)
    return sig * (1.0 - sig) / len(params)


def inference_gate(params: GateParams) -> np.ndarray:
    """Deterministic gate values clamp(sigmoid(log_alpha)*(zeta-gamma)+gamma, 0, 1)."""
    params.validate()
    sig = _sigmoid(params.log_alpha.astype(np.float64))
    return np.clip(sig * (params.zeta - params.gamma) + params.gamma, 0.0, 1.0)


def gate_gradients(params: GateParams, sample: GateSample, upstream: np.ndarray) -> np.ndarray:
    """Chain an upstream dL/dm into dL/dlog_alpha for the given sample.

    Zero wherever the sample was clamped; elsewhere
    (zeta - gamma) * s * (1 - s) / beta.
    """
    s = np.asarray(sample.s, dtype=np.float64)
    beta = params.beta.astype(np.float64)
    stretched = s * (params.zeta - params.gamma) + params.gamma
    interior = (stretched > 0.0) & (stretched < 1.0)
    dm_dlog_alpha = np.where(
        interior, (params.zeta - params.gamma) * s * (1.0 - s) / beta, 0.0
    )
    return np.asarray(upstream, dtype=np.float64) * dm_dlog_alpha
