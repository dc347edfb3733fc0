"""Central finite-difference checks for every differentiable piece.

All checks run in double precision. Each compares the analytic gradient of
the scalar probe ``sum(output * R)`` (``R`` random) against central
differences and reports a norm-wise relative error
``|analytic - numeric| / max(|analytic|, |numeric|)``.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .networks import Network, build_discriminator, build_generator, init_weights

EPS = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS,
                 indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (mutated in place and restored).

    With ``indices`` only those flat positions are probed; the rest stay 0.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_op(op: Callable[..., T.GradPair], inputs: list[np.ndarray],
             seed: int = 0) -> float:
    """Max relative error over all differentiable inputs of ``op``."""
    rng = np.random.default_rng(seed)
    out = op(*inputs)
    probe = rng.standard_normal(out.value.shape)
    analytic = out.backward(probe)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        gn = numeric_grad(lambda: float(np.sum(op(*inputs).value * probe)), x)
        worst = max(worst, relative_error(ga, gn))
    return worst


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # keep finite differences off the kinks of relu-like maps
    return np.where(x >= 0, x + margin, x - margin)


def op_checks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.standard_normal(shape)
    results = {}
    for stride, padding, mode in [(1, 0, "zero"), (1, 1, "reflect"), (2, 1, "zero"),
                                  (2, 1, "reflect"), (1, 2, "zero")]:
        p = T.ConvParams(stride, padding, mode)
        results[f"conv3d s{stride} p{padding} {mode}"] = check_op(
            lambda x, k, b: T.conv3d(x, k, b, p), [r(2, 4, 4, 4), r(3, 2, 3, 3, 3), r(3)])
    for stride, padding, op in [(1, 0, 0), (2, 1, 1), (2, 0, 1)]:
        p = T.ConvParams(stride, padding, "zero", op)
        results[f"conv3d_transpose s{stride} p{padding} op{op}"] = check_op(
            lambda x, k, b: T.conv3d_transpose(x, k, b, p),
            [r(2, 3, 3, 3), r(2, 3, 3, 3, 3), r(3)])
    # channel ratios that select the other backward paths
    results["conv3d many-in few-out"] = check_op(
        lambda x, k, b: T.conv3d(x, k, b, T.ConvParams(1, 3, "reflect")),
        [r(6, 4, 4, 4), r(1, 6, 7, 7, 7), r(1)])
    results["conv3d few-in many-out"] = check_op(
        lambda x, k, b: T.conv3d(x, k, b, T.ConvParams(1, 1, "zero")),
        [r(1, 4, 4, 4), r(8, 1, 3, 3, 3), r(8)])
    results["instance_norm"] = check_op(
        lambda x, g, b: T.instance_norm(x, g, b, 1e-5), [r(2, 4, 4, 4), r(2), r(2)])
    for kind in T.ACTIVATIONS:
        results[f"activation {kind}"] = check_op(
            lambda x: T.activation(kind, x), [_away_from_zero(r(2, 4, 4, 4))])
    for mode in ("zero", "reflect"):
        for width in (1, 2):
            results[f"pad {mode} w{width}"] = check_op(
                lambda x: T.pad(x, width, mode), [r(2, 4, 4, 4)])
    return results


def network_check(net: Network, x: np.ndarray, n_params: int = 24,
                  seed: int = 0) -> float:
    """Relative error of sampled parameter and input gradients of a whole network."""
    rng = np.random.default_rng(seed)
    y, back = net.forward_trace(x)
    probe = rng.standard_normal(y.shape)
    gx, grads = back(probe)
    f = lambda: float(np.sum(net.forward(x) * probe))
    analytic, numeric = [], []
    names = sorted(net.params)
    for name in rng.choice(names, size=min(n_params, len(names)), replace=False):
        p = net.params[name]
        idx = [int(rng.integers(p.size))]
        numeric.append(numeric_grad(f, p, indices=idx).reshape(-1)[idx])
        analytic.append(grads[name].reshape(-1)[idx])
    idx = list(rng.choice(x.size, size=8, replace=False))
    numeric.append(numeric_grad(f, x, indices=idx).reshape(-1)[idx])
    analytic.append(gx.reshape(-1)[idx])
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def tiny_networks(seed: int = 0) -> tuple[Network, Network]:
    """Generator and discriminator with filters divided by 8, in float64."""
    g = init_weights(build_generator(width_divisor=8), seed, dtype=np.float64)
    d = init_weights(build_discriminator(width_divisor=8), seed + 1, dtype=np.float64)
    # larger weights than the 0.02 init so the check is not dominated by tiny values
    for net in (g, d):
        for name, p in net.params.items():
            if name.endswith(".kernel"):
                p *= 10.0
    return g, d


def network_checks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    g, d = tiny_networks(seed)
    return {
        "generator end-to-end": network_check(g, rng.uniform(-1, 1, (1, 8, 8, 8)), seed=seed),
        # 16^3 is the smallest cube whose normalized layers keep >= 2 voxels
        "discriminator end-to-end": network_check(
            d, rng.uniform(-1, 1, (1, 16, 16, 16)), seed=seed),
    }


def run_suite(seed: int = 0) -> tuple[dict[str, float], float]:
    """All checks; returns per-check errors and elapsed seconds."""
    start = time.perf_counter()
    results = op_checks(seed)
    results.update(network_checks(seed))
    return results, time.perf_counter() - start
