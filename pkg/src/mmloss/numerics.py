"""Stable softmax / log-sum-exp, seeded generators and a central-difference oracle.

Matrices are plain ``numpy.ndarray`` objects in float64. Random streams come
from ``numpy.random.Generator`` over PCG64; normal draws use numpy's ziggurat
sampler, so a seed reproduces the same stream on every platform numpy supports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class NumericsError(ValueError):
    pass


def _check_finite(v: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(v)):
        raise NumericsError(f"non-finite {what}")


def softmax(v, scale: float = 1.0, axis: int = -1) -> np.ndarray:
    """Softmax of ``v / scale`` along ``axis`` with max-subtraction."""
    v = np.asarray(v, dtype=DTYPE)
    if not scale > 0:
        raise NumericsError("invalid scale")
    _check_finite(v)
    z = v / scale
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_sum_exp(v, axis: int | None = None) -> np.ndarray | float:
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise NumericsError("log_sum_exp of an empty vector")
    _check_finite(v)
    if axis is None:
        mx = np.max(v)
        return float(mx + np.log(np.sum(np.exp(v - mx))))
    mx = np.max(v, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(v - mx), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    return v - np.expand_dims(log_sum_exp(v, axis=axis), axis)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (cell key, seed, ...)."""
    key = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class FiniteDiffConfig:
    step: float = 1e-5
    tolerance: float = 1e-6

    def __post_init__(self):
        if not (self.step > 0 and self.tolerance > 0):
            raise NumericsError("step and tolerance must be positive")


def finite_diff_grad(f: Callable[[np.ndarray], float], theta,
                     cfg: FiniteDiffConfig = FiniteDiffConfig()) -> np.ndarray:
    """Central differences of scalar ``f`` at ``theta`` (any shape; result matches it)."""
    theta = np.array(theta, dtype=DTYPE, copy=True)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    h = cfg.step
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(theta))
        flat[j] = orig - h
        fm = float(f(theta))
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"f returned non-finite value at coordinate {j}")
        grad[j] = (fp - fm) / (2 * h)
    return grad.reshape(theta.shape)


def max_relative_error(analytic, numeric) -> float:
    """max |a - n| / max(1, |a|), the gradient-check error measure."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


def check_gradients(f: Callable[[Sequence[np.ndarray]], float], params: Sequence[np.ndarray],
                    analytic: Sequence[np.ndarray],
                    cfg: FiniteDiffConfig = FiniteDiffConfig()) -> float:
    """Max relative error over several parameter blocks; ``f`` takes the full list."""
    params = [np.array(p, dtype=DTYPE, copy=True) for p in params]
    worst = 0.0
    for idx, (p, g) in enumerate(zip(params, analytic)):
        def f_block(theta, idx=idx):
            trial = list(params)
            trial[idx] = theta
            return f(trial)
        worst = max(worst, max_relative_error(g, finite_diff_grad(f_block, p, cfg)))
    return worst
