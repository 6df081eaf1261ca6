"""Inner maximization over embedding perturbations.

The perturbation delta lives on the embedding output (one slice per example,
including the cls position) and is grown by normalized gradient ascent.  With
a finite ball radius each step projects the slice back onto the Frobenius
ball; the default is unbounded.  Two variants produce the adversarial loss:

* ``pgd``: K ascent steps, then one extra pass at delta_K for the gate
  gradient (K+1 forwards in total).
* ``freelb_accumulate``: gate gradients are accumulated across the K ascent
  passes and averaged, with no extra pass (K forwards).

Norms are per example: each example gets its own adversary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Batch
from .hardconcrete import GateSample
from .seeds import derive_seed, np_rng

_GRAD_FLOOR = 1e-12

VARIANTS = ("pgd", "freelb_accumulate")


@dataclass
class AdvConfig:
    eta: float = 0.03
    epsilon0: float = 0.05
    steps: int = 5
    epsilon: float | None = None  # None = unbounded
    variant: str = "freelb_accumulate"

    def validate(self):
        if self.eta <= 0:
            raise ValueError("step size eta must be positive")
        if self.epsilon0 < 0:
            raise ValueError("initial magnitude epsilon0 must be >= 0")
        if self.steps < 1:
            raise ValueError("need at least one ascent step")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("ball radius must be positive when bounded")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass
class AdvLossResult:
    loss: float
    gate_grad: np.ndarray
    forward_passes: int
    step_losses: list[float] = field(default_factory=list)


def init_perturbation(shape, epsilon0: float, rng_seed: int) -> np.ndarray:
    """Uniform noise rescaled so its Frobenius norm is exactly epsilon0."""
    if epsilon0 < 0:
        raise ValueError("epsilon0 must be >= 0")
    if epsilon0 == 0:
        return np.zeros(shape, dtype=np.float64)
    v = np_rng(rng_seed, "delta_init").uniform(-1.0, 1.0, size=shape)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros(shape, dtype=np.float64)
    return v * (epsilon0 / norm)


def pgd_step(delta: np.ndarray, grad: np.ndarray, cfg: AdvConfig) -> np.ndarray:
    """One normalized ascent step on a single perturbation slice."""
    gnorm = float(np.linalg.norm(grad))
    if gnorm < _GRAD_FLOOR:
        return delta.copy()
    out = delta + cfg.eta * grad / gnorm
    if cfg.epsilon is not None:
        onorm = float(np.linalg.norm(out))
        if onorm > cfg.epsilon:
            out = out * (cfg.epsilon / onorm)
    return out


def adversarial_loss(model, batch: Batch, gate_sample: GateSample,
                     cfg: AdvConfig, rng_seed: int) -> AdvLossResult:
    """Classification loss under the learned perturbation, with gate gradients.

    Model weights are left untouched; only the mask gradient is chained back
    to gate locations.
    """
    cfg.validate()
    import torch

    bsz, seq = batch.token_ids.shape
    shape = (seq + 1, model.config.embed_dim)
    delta = np.stack(
        [init_perturbation(shape, cfg.epsilon0, derive_seed(rng_seed, "ex", i))
         for i in range(bsz)]
    )
    # one dtype conversion for the whole K-step loop
    mask_t = torch.as_tensor(np.asarray(gate_sample.m), dtype=model.dtype)

    calls_before = model.forward_calls
    if cfg.variant == "pgd":
        for _ in range(cfg.steps):
            _, grads = model.loss_and_grads(
                batch, embed_perturbation=delta, wanted=("perturbation",),
                gate_sample=gate_sample, mask_values=mask_t,
            )
            g = grads["perturbation"]
            for i in range(bsz):
                delta[i] = pgd_step(delta[i], g[i], cfg)
        loss, grads = model.loss_and_grads(
            batch, embed_perturbation=delta, wanted=("gates",), gate_sample=gate_sample,
            mask_values=mask_t,
        )
        result = AdvLossResult(loss, grads["gates"], cfg.steps + 1, [loss])
    else:  # freelb_accumulate
        acc = np.zeros(len(gate_sample.m), dtype=np.float64)
        losses = []
        for k in range(cfg.steps):
            loss_k, grads = model.loss_and_grads(
                batch, embed_perturbation=delta, wanted=("gates", "perturbation"),
                gate_sample=gate_sample, mask_values=mask_t,
            )
            acc += grads["gates"]
            losses.append(loss_k)
            if k < cfg.steps - 1:
                g = grads["perturbation"]
                for i in range(bsz):
                    delta[i] = pgd_step(delta[i], g[i], cfg)
        result = AdvLossResult(
            float(np.mean(losses)), acc / cfg.steps, cfg.steps, losses
        )

    used = model.forward_calls - calls_before
    if used != result.forward_passes:
        raise AssertionError(
            f"forward-pass accounting broken: used {used}, expected {result.forward_passes}"
        )
    return result
