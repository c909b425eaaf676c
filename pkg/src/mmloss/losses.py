"""MultiModal proxy-subgrouping loss, SoftTriple and cross-entropy fusion heads.

Shape conventions used throughout:

* modality outputs ``x``: ``(M, B, C)``, one ``(B, C)`` block per modality
* proxy bank ``w``: ``(C, K, M, C)``, indexed class, proxy slot, modality, dim
* labels ``y``: integer ``(B,)``

Every loss is the batch mean, and every backward returns gradients of that mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .numerics import DTYPE, log_softmax, softmax

AttentionMode = Literal["soft", "hard", "none"]
NormAxis = Literal["class", "proxy"]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class MultiModalConfig:
    attention: AttentionMode = "soft"
    norm_axis: NormAxis = "class"
    gamma: float = 0.1
    # False drops the attended-output term from the logits altogether.
    use_attended_output: bool = True

    def __post_init__(self):
        if self.attention not in ("soft", "hard", "none"):
            raise LossError(f"unknown attention mode {self.attention!r}")
        if self.norm_axis not in ("class", "proxy"):
            raise LossError(f"unknown norm axis {self.norm_axis!r}")
        if not self.gamma > 0:
            raise LossError("gamma must be positive")


@dataclass(frozen=True)
class SoftTripleConfig:
    lam: float = 20.0
    delta: float = 0.01
    gamma: float = 0.1
    K: int = 20

    def __post_init__(self):
        if not (self.lam > 0 and self.delta >= 0 and self.gamma > 0 and self.K >= 1):
            raise LossError("invalid SoftTriple configuration")


@dataclass
class LossGrad:
    loss: float
    d_outputs: np.ndarray
    d_params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def d_proxies(self) -> np.ndarray:
        return self.d_params["proxies"]


def init_proxies(rng: np.random.Generator, n_classes: int, K: int, n_modalities: int,
                 sd: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, sd, size=(n_classes, K, n_modalities, n_classes))


def _check_labels(y, n: int, C: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise LossError(f"labels shape {y.shape} does not match batch size {n}")
    bad = np.flatnonzero((y < 0) | (y >= C))
    if bad.size:
        raise LossError(f"label out of range at index {int(bad[0])}: {int(y[bad[0]])}")
    return y.astype(np.int64)


def _check_mm_shapes(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 3:
        raise LossError("modality outputs must have shape (M, B, C)")
    if w.ndim != 4:
        raise LossError("proxy bank must have shape (C, K, M, C)")
    M, _, C = x.shape
    if w.shape[0] != C:
        raise LossError(f"class axis mismatch: outputs have {C}, proxies have {w.shape[0]}")
    if w.shape[2] != M:
        raise LossError(f"modality axis mismatch: outputs have {M}, proxies have {w.shape[2]}")
    if w.shape[3] != C:
        raise LossError(f"dim axis mismatch: outputs have {C}, proxies have {w.shape[3]}")


def _softmax_ce(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of logits ``z`` and its gradient."""
    B = z.shape[0]
    logp = log_softmax(z, axis=1)
    loss = -float(np.mean(logp[np.arange(B), y]))
    g = np.exp(logp)
    g[np.arange(B), y] -= 1.0
    return loss, g / B


# ---------------------------------------------------------------------------
# MultiModal loss, building blocks
# ---------------------------------------------------------------------------

def mm_similarity(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sim[b, c, k] = sum_m <x[m, b], w[c, k, m]>."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_mm_shapes(x, w)
    return np.einsum("mbd,ckmd->bck", x, w)


def mm_attention(sim: np.ndarray, gamma: float, mode: AttentionMode = "soft") -> np.ndarray:
    sim = np.asarray(sim, dtype=DTYPE)
    if not np.all(np.isfinite(sim)):
        raise LossError("non-finite similarity")
    if not gamma > 0:
        raise LossError("gamma must be positive")
    B = sim.shape[0]
    flat = sim.reshape(B, -1)
    if mode == "soft":
        return softmax(flat, gamma, axis=1).reshape(sim.shape)
    if mode == "hard":
        att = np.zeros_like(flat)
        # np.argmax returns the first maximum, i.e. the lowest flat (c, k) index.
        att[np.arange(B), np.argmax(flat, axis=1)] = 1.0
        return att.reshape(sim.shape)
    if mode == "none":
        return np.zeros_like(sim)
    raise LossError(f"unknown attention mode {mode!r}")


def mm_attended_output(x: np.ndarray, w: np.ndarray, att: np.ndarray) -> np.ndarray:
    """A[b] = sum_m (sum_{c,k} att[b,c,k] w[c,k,m] + 1) * x[m, b]."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_mm_shapes(x, w)
    if att.shape != (x.shape[1], w.shape[0], w.shape[1]):
        raise LossError(f"attention shape {att.shape} does not match (B, C, K)")
    mixed = np.einsum("bck,ckmd->mbd", att, w)
    return np.sum((mixed + 1.0) * x, axis=0)


def _class_weights(sim: np.ndarray, gamma: float, norm_axis: NormAxis) -> np.ndarray:
    # class axis normalizes over c for each proxy slot k; proxy axis over k.
    axis = 1 if norm_axis == "class" else 2
    return softmax(sim, gamma, axis=axis)


def mm_class_similarity(sim: np.ndarray, gamma: float, norm_axis: NormAxis = "class") -> np.ndarray:
    sim = np.asarray(sim, dtype=DTYPE)
    if not np.all(np.isfinite(sim)):
        raise LossError("non-finite similarity")
    if norm_axis not in ("class", "proxy"):
        raise LossError(f"unknown norm axis {norm_axis!r}")
    q = _class_weights(sim, gamma, norm_axis)
    return np.sum(q * sim, axis=2)


def _class_similarity_backward(dS: np.ndarray, sim: np.ndarray, q: np.ndarray, gamma: float,
                               norm_axis: NormAxis) -> np.ndarray:
    weighted = dS[:, :, None] * sim  # dS_c * sim_{c,k}
    if norm_axis == "class":
        inner = np.sum(weighted * q, axis=1, keepdims=True)
    else:
        inner = np.sum(weighted * q, axis=2, keepdims=True)
    return dS[:, :, None] * q + q * (weighted - inner) / gamma


@dataclass
class MultiModalCache:
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    cfg: MultiModalConfig
    sim: np.ndarray
    att: np.ndarray
    q: np.ndarray
    mixed: np.ndarray
    logits: np.ndarray


def mm_logits(x: np.ndarray, w: np.ndarray, cfg: MultiModalConfig = MultiModalConfig()):
    """Per-class logits S + A (or S alone when the attended output is disabled)."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    sim = mm_similarity(x, w)
    att = mm_attention(sim, cfg.gamma, cfg.attention)
    q = _class_weights(sim, cfg.gamma, cfg.norm_axis)
    S = np.sum(q * sim, axis=2)
    mixed = np.einsum("bck,ckmd->mbd", att, w)
    z = S + np.sum((mixed + 1.0) * x, axis=0) if cfg.use_attended_output else S
    return z, (sim, att, q, mixed)


def mm_loss_forward(x, y, w, cfg: MultiModalConfig = MultiModalConfig()):
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_mm_shapes(x, w)
    y = _check_labels(y, x.shape[1], x.shape[2])
    z, (sim, att, q, mixed) = mm_logits(x, w, cfg)
    logp = log_softmax(z, axis=1)
    loss = -float(np.mean(logp[np.arange(len(y)), y]))
    return loss, MultiModalCache(x, y, w, cfg, sim, att, q, mixed, z)


def mm_loss_backward(cache: MultiModalCache) -> LossGrad:
    x, y, w, cfg = cache.x, cache.y, cache.w, cache.cfg
    B = len(y)
    logp = log_softmax(cache.logits, axis=1)
    g = np.exp(logp)
    g[np.arange(B), y] -= 1.0
    g /= B
    loss = -float(np.mean(logp[np.arange(B), y]))

    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    dsim = _class_similarity_backward(g, cache.sim, cache.q, cfg.gamma, cfg.norm_axis)

    if cfg.use_attended_output:
        dx += g[None, :, :] * (cache.mixed + 1.0)
        dmixed = g[None, :, :] * x  # (M, B, C)
        dw += np.einsum("bck,mbd->ckmd", cache.att, dmixed)
        if cfg.attention == "soft":
            datt = np.einsum("mbd,ckmd->bck", dmixed, w)
            att = cache.att
            inner = np.sum(att * datt, axis=(1, 2), keepdims=True)
            dsim += att * (datt - inner) / cfg.gamma
        # hard: argmax selection is treated as constant; none: att is identically 0.

    dx += np.einsum("bck,ckmd->mbd", dsim, w)
    dw += np.einsum("bck,mbd->ckmd", dsim, x)
    return LossGrad(loss, dx, {"proxies": dw})


def mm_loss_and_grad(x, y, w, cfg: MultiModalConfig = MultiModalConfig()) -> LossGrad:
    _, cache = mm_loss_forward(x, y, w, cfg)
    return mm_loss_backward(cache)


def mm_predict(x, w, cfg: MultiModalConfig = MultiModalConfig()) -> np.ndarray:
    z, _ = mm_logits(x, w, cfg)
    return np.argmax(z, axis=1)


def effective_proxy_counts(x, w, cfg: MultiModalConfig = MultiModalConfig(), threshold=None):
    """Number of proxies per class whose soft attention exceeds ``threshold`` on some instance.

    The threshold defaults to 1 / (10 C K). Soft attention is used regardless of
    ``cfg.attention`` so that variants trained without attention are comparable.
    """
    sim = mm_similarity(x, w)
    C, K = w.shape[0], w.shape[1]
    if threshold is None:
        threshold = 1.0 / (C * K * 10)
    att = mm_attention(sim, cfg.gamma, "soft")
    used = np.any(att > threshold, axis=0)  # (C, K)
    return used.sum(axis=1)


# ---------------------------------------------------------------------------
# Simplified variant (verification target only)
# ---------------------------------------------------------------------------

def mm_simplified_forward(x, y, w) -> tuple[float, dict]:
    """Simplified form: att = sim, S = sum_k sim^2, A as before with the identity term."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_mm_shapes(x, w)
    y = _check_labels(y, x.shape[1], x.shape[2])
    sim = np.einsum("mbd,ckmd->bck", x, w)
    att = sim
    mixed = np.einsum("bck,ckmd->mbd", att, w)
    A = np.sum((mixed + 1.0) * x, axis=0)
    S = np.sum(sim * sim, axis=2)
    z = S + A
    logp = log_softmax(z, axis=1)
    loss = -float(np.mean(logp[np.arange(len(y)), y]))
    return loss, {"sim": sim, "att": att, "mixed": mixed, "z": z, "logp": logp, "y": y}


def mm_simplified_grads(x, y, w) -> LossGrad:
    """Closed-form gradients of the simplified loss, one chain-rule path at a time.

    The upstream factor is softmax(S + A) minus the one-hot label, applied for
    every output class: through S, directly through A, and through A via att.
    """
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    loss, c = mm_simplified_forward(x, y, w)
    y = c["y"]
    B = len(y)
    g = np.exp(c["logp"])
    g[np.arange(B), y] -= 1.0
    g /= B
    sim, att, mixed = c["sim"], c["att"], c["mixed"]

    # S path: dS/dsim = 2 sim, dsim/dx = w, dsim/dw = x
    dsim_S = g[:, :, None] * 2.0 * sim
    dx = np.einsum("bck,ckmd->mbd", dsim_S, w)
    dw = np.einsum("bck,mbd->ckmd", dsim_S, x)

    # A path, x and w entering A directly: dA_j/dx_j = mixed_j + 1, dA_j/dw[c,k,m,j] = att x_j
    dx += g[None] * (mixed + 1.0)
    dw += np.einsum("bck,mbd->ckmd", att, g[None] * x)

    # A path through att (datt/dsim = 1): dA_j/datt[c,k] = sum_m w[c,k,m,j] x[m,j]
    datt = np.einsum("bd,ckmd,mbd->bck", g, w, x)
    dx += np.einsum("bck,ckmd->mbd", datt, w)
    dw += np.einsum("bck,mbd->ckmd", datt, x)
    return LossGrad(loss, dx, {"proxies": dw})


# ---------------------------------------------------------------------------
# SoftTriple
# ---------------------------------------------------------------------------

def softtriple_similarity(x: np.ndarray, proxies: np.ndarray, gamma: float):
    sim = np.einsum("bd,ckd->bck", x, proxies)
    q = softmax(sim, gamma, axis=2)
    return np.sum(q * sim, axis=2), sim, q


def softtriple_forward_backward(x, y, proxies, cfg: SoftTripleConfig = SoftTripleConfig()) -> LossGrad:
    """SoftTriple on one embedding per instance; ``proxies`` has shape (C, K, D)."""
    x = np.asarray(x, dtype=DTYPE)
    proxies = np.asarray(proxies, dtype=DTYPE)
    if x.ndim != 2 or proxies.ndim != 3 or proxies.shape[2] != x.shape[1]:
        raise LossError(f"shape mismatch: x {x.shape}, proxies {proxies.shape}")
    C = proxies.shape[0]
    y = _check_labels(y, x.shape[0], C)
    S, sim, q = softtriple_similarity(x, proxies, cfg.gamma)
    margin = np.zeros_like(S)
    margin[np.arange(len(y)), y] = cfg.delta
    loss, g = _softmax_ce(cfg.lam * (S - margin), y)
    dS = cfg.lam * g
    dsim = _class_similarity_backward(dS, sim, q, cfg.gamma, "proxy")
    dx = np.einsum("bck,ckd->bd", dsim, proxies)
    dp = np.einsum("bck,bd->ckd", dsim, x)
    return LossGrad(loss, dx, {"proxies": dp})


def softtriple_predict(x, proxies, cfg: SoftTripleConfig = SoftTripleConfig()) -> np.ndarray:
    S, _, _ = softtriple_similarity(np.asarray(x, dtype=DTYPE), np.asarray(proxies, dtype=DTYPE), cfg.gamma)
    return np.argmax(S, axis=1)


def concat_modalities(x: np.ndarray) -> np.ndarray:
    """(M, B, C) -> (B, M*C), modality-major."""
    M, B, C = x.shape
    return np.transpose(x, (1, 0, 2)).reshape(B, M * C)


def split_modalities(d: np.ndarray, M: int) -> np.ndarray:
    B, MC = d.shape
    return np.transpose(d.reshape(B, M, MC // M), (1, 0, 2))


# ---------------------------------------------------------------------------
# Cross-entropy fusion heads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionHead:
    kind: Literal["sum", "weighted_sum", "nn"] = "sum"
    weights: tuple[float, ...] | None = None


def fusion_logits(x: np.ndarray, head: FusionHead, params: dict[str, np.ndarray] | None = None):
    x = np.asarray(x, dtype=DTYPE)
    M, B, C = x.shape
    if head.kind == "sum":
        return np.sum(x, axis=0)
    if head.kind == "weighted_sum":
        alpha = np.asarray(head.weights, dtype=DTYPE)
        if alpha.shape != (M,):
            raise LossError(f"weighted_sum needs {M} weights, got {alpha.shape}")
        return np.einsum("m,mbc->bc", alpha, x)
    if head.kind == "nn":
        W, b = params["W"], params["b"]
        if W.shape != (M * C, C) or b.shape != (C,):
            raise LossError(f"nn head expects W {(M * C, C)} and b {(C,)}, got {W.shape}, {b.shape}")
        return concat_modalities(x) @ W + b
    raise LossError(f"unknown fusion head {head.kind!r}")


def fusion_ce_forward_backward(x, y, head: FusionHead = FusionHead(),
                               params: dict[str, np.ndarray] | None = None) -> LossGrad:
    x = np.asarray(x, dtype=DTYPE)
    M, B, C = x.shape
    y = _check_labels(y, B, C)
    z = fusion_logits(x, head, params)
    loss, g = _softmax_ce(z, y)
    if head.kind == "sum":
        return LossGrad(loss, np.broadcast_to(g, x.shape).copy())
    if head.kind == "weighted_sum":
        alpha = np.asarray(head.weights, dtype=DTYPE)
        return LossGrad(loss, alpha[:, None, None] * g[None])
    W = params["W"]
    flat = concat_modalities(x)
    d_params = {"W": flat.T @ g, "b": g.sum(axis=0)}
    return LossGrad(loss, split_modalities(g @ W.T, M), d_params)


def init_nn_head(rng: np.random.Generator, M: int, C: int) -> dict[str, np.ndarray]:
    lim = 1.0 / np.sqrt(M * C)
    return {"W": rng.uniform(-lim, lim, size=(M * C, C)), "b": rng.uniform(-lim, lim, size=C)}
