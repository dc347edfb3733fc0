"""CycleGAN objectives, Adam, the linear-decay schedule and the image pool."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import Network
from .tensor import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.0

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_identity"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


# ------------------------------------------------------------------ losses

def adversarial_loss(scores: np.ndarray, target_is_real: bool) -> float:
    """Least-squares loss against an all-ones (real) or all-zeros (fake) map."""
    return adversarial_loss_grad(scores, target_is_real)[0]


def adversarial_loss_grad(scores: np.ndarray, target_is_real: bool):
    if scores.size == 0:
        raise ShapeError("adversarial_loss of an empty score map")
    diff = scores.astype(np.float64) - (1.0 if target_is_real else 0.0)
    return float(np.mean(diff * diff)), (2.0 / scores.size * diff).astype(scores.dtype)


def cycle_loss(reconstructed: np.ndarray, original: np.ndarray) -> float:
    """Mean absolute error over all voxels."""
    return cycle_loss_grad(reconstructed, original)[0]


def cycle_loss_grad(reconstructed: np.ndarray, original: np.ndarray):
    if reconstructed.shape != original.shape:
        raise ShapeError(f"cycle_loss shapes differ: {reconstructed.shape} vs {original.shape}")
    diff = reconstructed.astype(np.float64) - original
    grad = (np.sign(diff) / diff.size).astype(reconstructed.dtype)
    return float(np.mean(np.abs(diff))), grad


def _add(grads: dict, new: dict):
    for k, v in new.items():
        if k in grads:
            grads[k] = grads[k] + v
        else:
            grads[k] = v


@dataclass
class GeneratorLosses:
    adv_a2b: float
    adv_b2a: float
    cycle_a: float
    cycle_b: float
    identity_a: float = 0.0
    identity_b: float = 0.0
    total: float = 0.0


def generator_objective(real_a: np.ndarray, real_b: np.ndarray, g_a2b: Network,
                        g_b2a: Network, d_a: Network, d_b: Network,
                        weights: LossWeights = LossWeights()):
    """Adversarial plus weighted cycle (and optional identity) loss.

    Returns ``(losses, grads_a2b, grads_b2a, fakes)`` where ``fakes`` is
    ``(fake_b, fake_a)``. Discriminator parameters get no gradients.
    """
    ga2b, gb2a = {}, {}
    fake_b, back_fb = g_a2b.forward_trace(real_a)
    fake_a, back_fa = g_b2a.forward_trace(real_b)

    # adversarial terms, back through the frozen discriminators
    score_b, back_db = d_b.forward_trace(fake_b)
    adv_a2b, g_score = adversarial_loss_grad(score_b, True)
    g_fake_b = back_db(g_score)[0]
    score_a, back_da = d_a.forward_trace(fake_a)
    adv_b2a, g_score = adversarial_loss_grad(score_a, True)
    g_fake_a = back_da(g_score)[0]

    lam = weights.lambda_cycle
    rec_a, back_ra = g_b2a.forward_trace(fake_b)
    cyc_a, g_rec = cycle_loss_grad(rec_a, real_a)
    g_in, grads = back_ra(lam * g_rec)
    g_fake_b = g_fake_b + g_in
    _add(gb2a, grads)

    rec_b, back_rb = g_a2b.forward_trace(fake_a)
    cyc_b, g_rec = cycle_loss_grad(rec_b, real_b)
    g_in, grads = back_rb(lam * g_rec)
    g_fake_a = g_fake_a + g_in
    _add(ga2b, grads)

    _add(ga2b, back_fb(g_fake_b)[1])
    _add(gb2a, back_fa(g_fake_a)[1])

    losses = GeneratorLosses(adv_a2b, adv_b2a, cyc_a, cyc_b)
    if weights.lambda_identity > 0:
        lid = weights.lambda_identity
        same_a, back = g_b2a.forward_trace(real_a)
        losses.identity_a, g = cycle_loss_grad(same_a, real_a)
        _add(gb2a, back(lid * g)[1])
        same_b, back = g_a2b.forward_trace(real_b)
        losses.identity_b, g = cycle_loss_grad(same_b, real_b)
        _add(ga2b, back(lid * g)[1])
    losses.total = (adv_a2b + adv_b2a + lam * (cyc_a + cyc_b)
                    + weights.lambda_identity * (losses.identity_a + losses.identity_b))
    return losses, ga2b, gb2a, (fake_b, fake_a)


def discriminator_objective(d: Network, real: np.ndarray, fake: np.ndarray):
    """``0.5 * (adv(d(real), real) + adv(d(fake), fake))``; ``fake`` is a constant."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} differ in shape")
    s_real, back_real = d.forward_trace(real)
    l_real, g_real = adversarial_loss_grad(s_real, True)
    s_fake, back_fake = d.forward_trace(fake)
    l_fake, g_fake = adversarial_loss_grad(s_fake, False)
    grads = back_real(0.5 * g_real)[1]
    _add(grads, back_fake(0.5 * g_fake)[1])
    return 0.5 * (l_real + l_fake), grads


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters without a gradient still advance their moments with a zero
    gradient so every parameter shares the step count.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def lr_schedule(epoch: int, base_lr: float, total_epochs: int = 200,
                constant_epochs: int = 100) -> float:
    """Constant for the first ``constant_epochs``, then linear decay to 0 at the end."""
    if not 1 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {total_epochs}]")
    if epoch <= constant_epochs:
        return base_lr
    return base_lr * (total_epochs - epoch) / (total_epochs - constant_epochs)


# --------------------------------------------------------------------- pool

class ImagePool:
    """History of generated volumes shown to the discriminators."""

    def __init__(self, capacity: int = 50, seed: int = 0):
        if capacity < 0:
            raise ValueError("pool capacity must be non-negative")
        self.capacity = capacity
        self.buffer: list[np.ndarray] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.buffer)

    def query(self, candidate: np.ndarray) -> np.ndarray:
        if self.capacity == 0:
            return candidate
        if len(self.buffer) < self.capacity:
            self.buffer.append(candidate.copy())
            return candidate
        if self.rng.random() < 0.5:
            return candidate
        idx = int(self.rng.integers(len(self.buffer)))
        evicted = self.buffer[idx]
        self.buffer[idx] = candidate.copy()
        return evicted


def pool_query(pool: ImagePool, candidate: np.ndarray) -> np.ndarray:
    return pool.query(candidate)
