"""Per-modality MLP encoders, Adam, and the early-stopped training loop."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import losses as L
from .numerics import DTYPE, NumericsError, make_rng, softmax

CHECKPOINT_VERSION = 1

MethodKind = Literal["multimodal", "softtriple", "sum_ce", "weighted_sum_ce", "nn_ce", "unimodal"]
Criterion = Literal["val_loss", "val_acc", "train_loss"]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @classmethod
    def init(cls, rng: np.random.Generator, dims: Sequence[int]) -> "Mlp":
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-lim, lim, size=fan_out))
        return cls(ws, bs)

    def forward(self, X: np.ndarray):
        """ReLU hidden layers, softmax head. Returns (probabilities, cache)."""
        X = np.asarray(X, dtype=DTYPE)
        if X.ndim != 2 or X.shape[1] != self.weights[0].shape[0]:
            raise ValueError(f"feature dim {X.shape[-1]} does not match layer-0 input {self.weights[0].shape[0]}")
        acts = [X]
        h = X
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            h = np.maximum(a, 0.0) if i < n - 1 else a
            acts.append(h)
        p = softmax(h, axis=1)
        return p, (acts, p)

    def backward(self, cache, d_probs: np.ndarray):
        acts, p = cache
        # softmax Jacobian-vector product
        d = p * (d_probs - np.sum(p * d_probs, axis=1, keepdims=True))
        n = len(self.weights)
        dWs, dbs = [None] * n, [None] * n
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                d = d * (acts[i + 1] > 0)
            dWs[i] = acts[i].T @ d
            dbs[i] = d.sum(axis=0)
            if i > 0:
                d = d @ self.weights[i].T
        return dWs, dbs


@dataclass
class MlpStack:
    mlps: list[Mlp]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dims: Sequence[int], hidden: Sequence[int],
             n_classes: int) -> "MlpStack":
        return cls([Mlp.init(rng, [d, *hidden, n_classes]) for d in input_dims])

    def forward(self, features: Sequence[np.ndarray]):
        if len(features) != len(self.mlps):
            raise ValueError(f"expected {len(self.mlps)} modalities, got {len(features)}")
        outs, caches = zip(*(mlp.forward(X) for mlp, X in zip(self.mlps, features)))
        return np.stack(outs), list(caches)

    def backward(self, caches, d_outputs: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        for m, (mlp, cache) in enumerate(zip(self.mlps, caches)):
            dWs, dbs = mlp.backward(cache, d_outputs[m])
            for i, (dW, db) in enumerate(zip(dWs, dbs)):
                grads[f"m{m}.W{i}"] = dW
                grads[f"m{m}.b{i}"] = db
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for m, mlp in enumerate(self.mlps):
            for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"m{m}.W{i}"] = W
                out[f"m{m}.b{i}"] = b
        return out


def mlp_forward(stack: MlpStack, batch: Sequence[np.ndarray]) -> np.ndarray:
    return stack.forward(batch)[0]


def mlp_backward(stack: MlpStack, batch: Sequence[np.ndarray], d_outputs: np.ndarray) -> dict[str, np.ndarray]:
    _, caches = stack.forward(batch)
    return stack.backward(caches, d_outputs)


# ---------------------------------------------------------------------------
# Adam (coupled L2 weight decay)
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update; weight decay is added to the gradient before the moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Methods (loss + head parameters + prediction rule)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    kind: MethodKind = "multimodal"
    mm: L.MultiModalConfig = L.MultiModalConfig()
    n_proxies: int = 20
    softtriple: L.SoftTripleConfig = L.SoftTripleConfig()
    weights: tuple[float, ...] | None = None
    modality: int = 0  # only for unimodal
    proxy_init_sd: float = 0.01

    def modalities(self, n_modalities: int) -> list[int]:
        if self.kind == "unimodal":
            if not 0 <= self.modality < n_modalities:
                raise ValueError(f"unimodal modality {self.modality} out of range")
            return [self.modality]
        return list(range(n_modalities))

    @property
    def name(self) -> str:
        return f"unimodal({self.modality + 1})" if self.kind == "unimodal" else self.kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        d = dict(d)
        d["mm"] = L.MultiModalConfig(**d.get("mm", {}))
        d["softtriple"] = L.SoftTripleConfig(**d.get("softtriple", {}))
        if d.get("weights") is not None:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


def parse_method(name: str, **overrides) -> LossSpec:
    """'multimodal', 'sum_ce', 'unimodal(2)' (1-based), ... -> LossSpec."""
    name = name.strip()
    if name.startswith("unimodal"):
        idx = int(name[name.index("(") + 1:name.index(")")]) - 1
        return LossSpec(kind="unimodal", modality=idx, **overrides)
    if name not in ("multimodal", "softtriple", "sum_ce", "weighted_sum_ce", "nn_ce"):
        raise ValueError(f"unknown method {name!r}")
    return LossSpec(kind=name, **overrides)


def init_head(spec: LossSpec, rng: np.random.Generator, M: int, C: int) -> dict[str, np.ndarray]:
    if spec.kind == "multimodal":
        return {"proxies": L.init_proxies(rng, C, spec.n_proxies, M, spec.proxy_init_sd)}
    if spec.kind == "softtriple":
        return {"proxies": rng.normal(0.0, spec.proxy_init_sd, size=(C, spec.softtriple.K, M * C))}
    if spec.kind == "nn_ce":
        return L.init_nn_head(rng, M, C)
    return {}


def _fusion_head(spec: LossSpec, M: int) -> L.FusionHead:
    if spec.kind == "weighted_sum_ce":
        w = spec.weights if spec.weights is not None else (1.0 / M,) * M
        return L.FusionHead("weighted_sum", tuple(w))
    if spec.kind == "nn_ce":
        return L.FusionHead("nn")
    return L.FusionHead("sum")


def objective(spec: LossSpec, x: np.ndarray, y: np.ndarray, head: dict[str, np.ndarray]) -> L.LossGrad:
    M = x.shape[0]
    if spec.kind == "multimodal":
        return L.mm_loss_and_grad(x, y, head["proxies"], spec.mm)
    if spec.kind == "softtriple":
        lg = L.softtriple_forward_backward(L.concat_modalities(x), y, head["proxies"], spec.softtriple)
        return L.LossGrad(lg.loss, L.split_modalities(lg.d_outputs, M), lg.d_params)
    return L.fusion_ce_forward_backward(x, y, _fusion_head(spec, M), head)


def objective_loss(spec: LossSpec, x, y, head) -> float:
    if spec.kind == "multimodal":
        return L.mm_loss_forward(x, y, head["proxies"], spec.mm)[0]
    return objective(spec, x, y, head).loss


def predict_from_outputs(spec: LossSpec, x: np.ndarray, head: dict[str, np.ndarray]) -> np.ndarray:
    if spec.kind == "multimodal":
        return L.mm_predict(x, head["proxies"], spec.mm)
    if spec.kind == "softtriple":
        return L.softtriple_predict(L.concat_modalities(x), head["proxies"], spec.softtriple)
    return np.argmax(L.fusion_logits(x, _fusion_head(spec, x.shape[0]), head), axis=1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class Split:
    features: list[np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    lr_grid: tuple[float, ...] = (5e-3, 5e-4, 5e-5, 5e-6)
    weight_decay: float = 1e-4
    patience: int = 100
    max_epochs: int = 1000
    batch_size: int = 128
    seed: int = 0
    hidden: tuple[int, ...] = (500, 100, 20)
    criterion: Criterion = "val_loss"
    loss: LossSpec = LossSpec()

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.lr_grid:
            raise ValueError("lr_grid must be non-empty")
        if self.criterion not in ("val_loss", "val_acc", "train_loss"):
            raise ValueError(f"unknown criterion {self.criterion!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossSpec.from_dict(d["loss"])
        for key in ("lr_grid", "hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainedModel:
    stack: MlpStack
    head: dict[str, np.ndarray]
    config: TrainConfig
    modalities: list[int]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    duration: float = 0.0
    convergence_time: float = 0.0
    optimizer: AdamState | None = None
    rng_state: dict | None = None

    def outputs(self, features: Sequence[np.ndarray]) -> np.ndarray:
        return mlp_forward(self.stack, [features[m] for m in self.modalities])

    def predict(self, features: Sequence[np.ndarray]) -> np.ndarray:
        return predict_from_outputs(self.config.loss, self.outputs(features), self.head)

    def params(self) -> dict[str, np.ndarray]:
        p = self.stack.params()
        p.update({f"head.{k}": v for k, v in self.head.items()})
        return p


def _all_params(stack: MlpStack, head: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    p = stack.params()
    p.update({f"head.{k}": v for k, v in head.items()})
    return p


def evaluate(spec: LossSpec, stack: MlpStack, head, split: Split, modalities: list[int]):
    x = mlp_forward(stack, [split.features[m] for m in modalities])
    loss = objective_loss(spec, x, split.labels, head)
    acc = float(np.mean(predict_from_outputs(spec, x, head) == split.labels))
    return loss, acc


def _score(criterion: Criterion, rec: dict) -> float:
    # lower is better
    if criterion == "val_loss":
        return rec["val_loss"]
    if criterion == "val_acc":
        return -rec["val_acc"]
    return rec["train_loss"]


def train(train_split: Split, val_split: Split, cfg: TrainConfig) -> TrainedModel:
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("train and validation splits must be non-empty")
    spec = cfg.loss
    M_all = len(train_split.features)
    mods = spec.modalities(M_all)
    C = int(max(train_split.labels.max(), val_split.labels.max())) + 1
    C = max(C, 2)
    rng = make_rng(cfg.seed)
    stack = MlpStack.init(rng, [train_split.features[m].shape[1] for m in mods], cfg.hidden, C)
    head = init_head(spec, rng, len(mods), C)
    params = _all_params(stack, head)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    feats = [np.asarray(train_split.features[m], dtype=DTYPE) for m in mods]
    y_all = np.asarray(train_split.labels)
    n = len(y_all)

    history: list[dict] = []
    best_score = np.inf
    best_state = None
    bad = 0
    t0 = time.perf_counter()
    convergence_time = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        tot_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            try:
                with np.errstate(over="raise", invalid="raise"):
                    x, caches = stack.forward([f[idx] for f in feats])
                    lg = objective(spec, x, y_all[idx], head)
            except (NumericsError, L.LossError, FloatingPointError) as exc:
                raise TrainingError(f"loss diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(lg.loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            tot_loss += lg.loss * len(idx)
            correct += int(np.sum(predict_from_outputs(spec, x, head) == y_all[idx]))
            grads = stack.backward(caches, lg.d_outputs)
            grads.update({f"head.{k}": v for k, v in lg.d_params.items()})
            adam_step(params, grads, opt)
        try:
            val_loss, val_acc = evaluate(spec, stack, head, val_split, mods)
        except (NumericsError, L.LossError) as exc:
            raise TrainingError(f"loss diverged at epoch {epoch}: {exc}") from exc
        if not np.isfinite(val_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        rec = {"epoch": epoch, "train_loss": tot_loss / n, "train_acc": correct / n,
               "val_loss": val_loss, "val_acc": val_acc}
        history.append(rec)
        score = _score(cfg.criterion, rec)
        if score < best_score:
            best_score = score
            best_state = copy.deepcopy((stack, head))
            bad = 0
            rec["best"] = True
            convergence_time = time.perf_counter() - t0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    duration = time.perf_counter() - t0
    stack, head = best_state
    best_epoch = next(r["epoch"] for r in reversed(history) if r.get("best"))
    return TrainedModel(stack, head, cfg, mods, history, best_epoch, duration, convergence_time,
                        opt, rng.bit_generator.state)


@dataclass
class GridResult:
    best_lr: float
    model: TrainedModel
    cells: list[dict]


def lr_grid_search(train_split: Split, val_split: Split, cfg: TrainConfig) -> GridResult:
    """Train once per learning rate; highest validation accuracy wins, ties go to the smaller lr."""
    cells = []
    best = None
    for lr in sorted(cfg.lr_grid):
        try:
            model = train(train_split, val_split, replace(cfg, lr=lr))
        except (TrainingError, FloatingPointError) as exc:
            cells.append({"lr": lr, "status": "failed", "reason": str(exc)})
            continue
        _, val_acc = evaluate(cfg.loss, model.stack, model.head, val_split, model.modalities)
        cells.append({"lr": lr, "status": "ok", "val_acc": val_acc, "best_epoch": model.best_epoch})
        if best is None or val_acc > best[1]:
            best = (lr, val_acc, model)
    if best is None:
        raise TrainingError("every learning rate in the grid failed")
    return GridResult(best[0], best[2], cells)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.params().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "modalities": model.modalities,
        "n_layers": [len(m.weights) for m in model.stack.mlps],
        "head_keys": sorted(model.head),
        "history": model.history,
        "best_epoch": model.best_epoch,
        "duration": model.duration,
        "convergence_time": model.convergence_time,
        "rng_state": model.rng_state,
    }
    opt = model.optimizer
    if opt is not None:
        meta["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                             "weight_decay": opt.weight_decay, "step": opt.step}
        arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> TrainedModel:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        arr = {k: z[k].copy() for k in z.files if k != "meta"}
    mlps = []
    for m, n_layers in enumerate(meta["n_layers"]):
        mlps.append(Mlp([arr[f"param/m{m}.W{i}"] for i in range(n_layers)],
                        [arr[f"param/m{m}.b{i}"] for i in range(n_layers)]))
    head = {k: arr[f"param/head.{k}"] for k in meta["head_keys"]}
    opt = None
    if "optimizer" in meta:
        opt = AdamState(**meta["optimizer"])
        opt.m = {k[len("adam_m/"):]: v for k, v in arr.items() if k.startswith("adam_m/")}
        opt.v = {k[len("adam_v/"):]: v for k, v in arr.items() if k.startswith("adam_v/")}
    return TrainedModel(MlpStack(mlps), head, TrainConfig.from_dict(meta["config"]), meta["modalities"],
                        meta["history"], meta["best_epoch"], meta["duration"], meta["convergence_time"],
                        opt, meta["rng_state"])
