"""Random-instance gradient checks of every analytic backward against central differences."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .model import LossSpec, MlpStack, objective
from .numerics import FiniteDiffConfig, check_gradients, make_rng

SHAPES_C = (2, 3, 5)
SHAPES_K = (1, 2, 4)
SHAPES_M = (1, 2, 3)

MM_VARIANTS = {
    "multimodal": L.MultiModalConfig(),
    "multimodal[proxy]": L.MultiModalConfig(norm_axis="proxy"),
    "multimodal[none]": L.MultiModalConfig(attention="none"),
    "multimodal[none,proxy]": L.MultiModalConfig(attention="none", norm_axis="proxy"),
    "multimodal[hard]": L.MultiModalConfig(attention="hard"),
}


@dataclass
class CheckResult:
    name: str
    n_instances: int
    max_rel_error: float
    tolerance: float
    worst_shape: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@dataclass
class SuiteResult:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            flag = "PASS" if r.passed else "FAIL"
            out.append(f"{flag} {r.name:<24s} n={r.n_instances:<3d} max_rel_err={r.max_rel_error:.3e} "
                       f"(tol {r.tolerance:g}, worst B,C,K,M={r.worst_shape})")
        return out


def _shape(rng):
    return (int(rng.integers(1, 5)), int(rng.choice(SHAPES_C)), int(rng.choice(SHAPES_K)), int(rng.choice(SHAPES_M)))


def _instance(rng, B, C, K, M, simplex: bool):
    if simplex:
        x = rng.dirichlet(np.ones(C), size=(M, B))
    else:
        x = rng.normal(size=(M, B, C))
    w = rng.normal(0.0, 0.5, size=(C, K, M, C))
    y = rng.integers(0, C, size=B)
    return x, y, w


def _hard_gap_ok(x, w, min_gap=1e-3) -> bool:
    sim = L.mm_similarity(x, w).reshape(x.shape[1], -1)
    if sim.shape[1] < 2:
        return True
    top = np.sort(sim, axis=1)[:, -2:]
    return bool(np.all(top[:, 1] - top[:, 0] > min_gap))


def check_multimodal(rng, cfg: L.MultiModalConfig, n: int, fd: FiniteDiffConfig, name="multimodal") -> CheckResult:
    worst, worst_shape, done = 0.0, (), 0
    while done < n:
        B, C, K, M = _shape(rng)
        x, y, w = _instance(rng, B, C, K, M, simplex=bool(done % 2))
        if cfg.attention == "hard" and not _hard_gap_ok(x, w):
            continue
        g = L.mm_loss_and_grad(x, y, w, cfg)
        err = check_gradients(lambda p: L.mm_loss_forward(p[0], y, p[1], cfg)[0], [x, w],
                              [g.d_outputs, g.d_proxies], fd)
        if err >= worst:
            worst, worst_shape = err, (B, C, K, M)
        done += 1
    return CheckResult(name, n, worst, fd.tolerance, worst_shape)


def check_simplified(rng, n: int, fd: FiniteDiffConfig) -> CheckResult:
    worst, worst_shape = 0.0, ()
    for i in range(n):
        B, C, K, M = _shape(rng)
        x, y, w = _instance(rng, B, C, K, M, simplex=bool(i % 2))
        w *= 0.5
        g = L.mm_simplified_grads(x, y, w)
        err = check_gradients(lambda p: L.mm_simplified_forward(p[0], y, p[1])[0], [x, w],
                              [g.d_outputs, g.d_proxies], fd)
        if err >= worst:
            worst, worst_shape = err, (B, C, K, M)
    return CheckResult("multimodal[simplified]", n, worst, fd.tolerance, worst_shape)


def check_softtriple(rng, n: int, fd: FiniteDiffConfig) -> CheckResult:
    worst, worst_shape = 0.0, ()
    for _ in range(n):
        B, C, K, M = _shape(rng)
        cfg = L.SoftTripleConfig(lam=float(rng.uniform(0.5, 5.0)), delta=float(rng.uniform(0, 0.3)),
                                 gamma=float(rng.uniform(0.1, 1.0)), K=K)
        x = rng.normal(size=(B, M * C))
        P = rng.normal(0.0, 0.5, size=(C, K, M * C))
        y = rng.integers(0, C, size=B)
        g = L.softtriple_forward_backward(x, y, P, cfg)
        err = check_gradients(lambda p: L.softtriple_forward_backward(p[0], y, p[1], cfg).loss, [x, P],
                              [g.d_outputs, g.d_proxies], fd)
        if err >= worst:
            worst, worst_shape = err, (B, C, K, M)
    return CheckResult("softtriple", n, worst, fd.tolerance, worst_shape)


def check_fusion(rng, kind: str, n: int, fd: FiniteDiffConfig) -> CheckResult:
    worst, worst_shape = 0.0, ()
    for _ in range(n):
        B, C, K, M = _shape(rng)
        x = rng.normal(size=(M, B, C))
        y = rng.integers(0, C, size=B)
        if kind == "nn":
            head = L.FusionHead("nn")
            params = L.init_nn_head(rng, M, C)
            g = L.fusion_ce_forward_backward(x, y, head, params)
            err = check_gradients(
                lambda p: L.fusion_ce_forward_backward(p[0], y, head, {"W": p[1], "b": p[2]}).loss,
                [x, params["W"], params["b"]], [g.d_outputs, g.d_params["W"], g.d_params["b"]], fd)
        else:
            head = L.FusionHead(kind, tuple(rng.uniform(0, 1, size=M)) if kind == "weighted_sum" else None)
            g = L.fusion_ce_forward_backward(x, y, head)
            err = check_gradients(lambda p: L.fusion_ce_forward_backward(p[0], y, head).loss, [x],
                                  [g.d_outputs], fd)
        if err >= worst:
            worst, worst_shape = err, (B, C, K, M)
    return CheckResult(f"fusion[{kind}]", n, worst, fd.tolerance, worst_shape)


def end_to_end_error(spec: LossSpec, rng, fd: FiniteDiffConfig, n_in=6, hidden=(4,), C=3, M=2, B=4) -> float:
    """Composed loss(softmax-head(MLP)) gradient error over all MLP and head parameters."""
    from .model import init_head

    stack = MlpStack.init(rng, [n_in] * M, hidden, C)
    head = init_head(spec, rng, M, C)
    head = {k: v * 50 for k, v in head.items()} if spec.kind == "multimodal" else head
    feats = [rng.normal(size=(B, n_in)) for _ in range(M)]
    y = rng.integers(0, C, size=B)
    x, caches = stack.forward(feats)
    lg = objective(spec, x, y, head)
    grads = stack.backward(caches, lg.d_outputs)
    names = list(stack.params())
    hnames = list(head)

    def f(plist):
        s2 = MlpStack.init(make_rng(0), [n_in] * M, hidden, C)
        for (nm, arr) in zip(names, plist[:len(names)]):
            m, layer = nm.split(".")
            idx = int(layer[1:])
            target = s2.mlps[int(m[1:])]
            (target.weights if layer[0] == "W" else target.biases)[idx] = arr
        h2 = dict(zip(hnames, plist[len(names):]))
        return objective(spec, s2.forward(feats)[0], y, h2).loss

    params = [stack.params()[k] for k in names] + [head[k] for k in hnames]
    analytic = [grads[k] for k in names] + [lg.d_params[k] for k in hnames]
    return check_gradients(f, params, analytic, fd)


def run_suite(n_instances: int = 50, seed: int = 0, fd: FiniteDiffConfig = FiniteDiffConfig()) -> SuiteResult:
    t0 = time.perf_counter()
    rng = make_rng(seed)
    out = SuiteResult()
    for name, cfg in MM_VARIANTS.items():
        out.results.append(check_multimodal(rng, cfg, n_instances, fd, name))
    out.results.append(check_simplified(rng, n_instances, fd))
    out.results.append(check_softtriple(rng, n_instances, fd))
    for kind in ("sum", "weighted_sum", "nn"):
        out.results.append(check_fusion(rng, kind, n_instances, fd))
    for kind in ("multimodal", "softtriple", "sum_ce", "nn_ce"):
        spec = LossSpec(kind=kind, n_proxies=2, softtriple=L.SoftTripleConfig(lam=2.0, K=2))
        errs = [end_to_end_error(spec, rng, fd) for _ in range(5)]
        out.results.append(CheckResult(f"mlp+{kind}", 5, max(errs), fd.tolerance, (4, 3, 2, 2)))
    out.seconds = time.perf_counter() - t0
    return out
