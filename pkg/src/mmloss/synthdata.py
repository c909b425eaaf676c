"""Synthetic multimodal benchmark with per-modality noise control.

Each modality j has its own logistic label model

    y_j = sigmoid((m_j + sigma_j * e) . beta_j + eps) > 0.5

with ``m_j, e ~ N(0, I)`` drawn per instance, ``eps ~ N(0, 1)`` and a sparse
``beta_j``. The model only observes ``m_j``; ``sigma_j`` controls how much of
the label is unexplained by that modality.

One label per instance comes from one of two rules:

``matched`` (default)
    The first modality's draw sets the label. Every other modality re-draws
    ``(m_j, e, eps)`` for that instance until its own label agrees. Given the
    label, modalities are therefore independent, and each one is exactly as
    predictive as it would be alone.
``summed``
    Per-modality scores are summed with one shared ``eps`` and thresholded once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .model import Split
from .numerics import DTYPE, make_rng

SPLITS = ("train", "val", "test")
BUNDLE_VERSION = 1


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_modalities: int = 3
    dim: int = 2000
    n_train: int = 10000
    n_val: int = 1000
    n_test: int = 10000
    sparsity: int = 20
    beta_sd: float = 2.0
    sigma: tuple[float, ...] = (0.2, 0.2, 0.2)
    label_rule: Literal["matched", "summed"] = "matched"
    eps_sd: float = 1.0
    max_redraws: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.n_modalities, self.dim, self.n_train, self.n_val, self.n_test, self.sparsity) < 1:
            raise SynthConfigError("all counts must be >= 1")
        if self.sparsity > self.dim:
            raise SynthConfigError("sparsity must not exceed dim")
        if len(self.sigma) != self.n_modalities:
            raise SynthConfigError(f"need {self.n_modalities} sigma entries, got {len(self.sigma)}")
        if any(s < 0 for s in self.sigma):
            raise SynthConfigError("sigma entries must be >= 0")
        if self.beta_sd < 0 or self.eps_sd < 0:
            raise SynthConfigError("standard deviations must be >= 0")
        if self.label_rule not in ("matched", "summed"):
            raise SynthConfigError(f"unknown label rule {self.label_rule!r}")

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "sigma" in d:
            d["sigma"] = tuple(float(s) for s in d["sigma"])
        return cls(**d)


def noise_sigma(n_modalities: int, noisy: tuple[int, ...] | list[int], easy=0.2, hard=10.0) -> tuple[float, ...]:
    """Sigma vector with ``hard`` on the given 0-based modality indices."""
    return tuple(hard if m in noisy else easy for m in range(n_modalities))


@dataclass
class SynthDataset:
    config: SynthConfig
    features: dict[str, list[np.ndarray]]
    labels: dict[str, np.ndarray]
    betas: np.ndarray  # (M, dim)
    redraws: list[int] = field(default_factory=list)

    @property
    def sigma(self) -> tuple[float, ...]:
        return self.config.sigma

    def split(self, name: str) -> Split:
        return Split(self.features[name], self.labels[name])


def _draw_betas(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    betas = np.zeros((cfg.n_modalities, cfg.dim))
    for j in range(cfg.n_modalities):
        idx = rng.choice(cfg.dim, size=cfg.sparsity, replace=False)
        betas[j, idx] = rng.normal(0.0, cfg.beta_sd, size=cfg.sparsity)
    return betas


def _modality_draw(rng, n, cfg: SynthConfig, beta, sigma):
    m = rng.standard_normal((n, cfg.dim))
    e = rng.standard_normal((n, cfg.dim))
    eps = rng.normal(0.0, cfg.eps_sd, size=n) if cfg.eps_sd > 0 else np.zeros(n)
    score = (m + sigma * e) @ beta if sigma else m @ beta
    return m, score + eps


def _label(score: np.ndarray) -> np.ndarray:
    # sigmoid(s) > 0.5 exactly when s > 0; s == 0 goes to class 0
    return (score > 0).astype(np.int64)


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = make_rng(cfg.seed)
    betas = _draw_betas(rng, cfg)
    n = cfg.n_train + cfg.n_val + cfg.n_test
    feats = []
    redraws = []
    if cfg.label_rule == "summed":
        total = np.zeros(n)
        for j in range(cfg.n_modalities):
            m, score = _modality_draw(rng, n, _without_eps(cfg), betas[j], cfg.sigma[j])
            feats.append(m)
            total += score
        total += rng.normal(0.0, cfg.eps_sd, size=n) if cfg.eps_sd > 0 else 0.0
        y = _label(total)
    else:
        m, score = _modality_draw(rng, n, cfg, betas[0], cfg.sigma[0])
        feats.append(m)
        y = _label(score)
        redraws.append(0)
        for j in range(1, cfg.n_modalities):
            out = np.empty((n, cfg.dim))
            pending = np.arange(n)
            rounds = 0
            while pending.size:
                if rounds >= cfg.max_redraws:
                    raise SynthConfigError(
                        f"modality {j}: {pending.size} instances unmatched after {rounds} redraws")
                m, score = _modality_draw(rng, pending.size, cfg, betas[j], cfg.sigma[j])
                ok = _label(score) == y[pending]
                out[pending[ok]] = m[ok]
                pending = pending[~ok]
                rounds += 1
            feats.append(out)
            redraws.append(rounds)

    bounds = np.cumsum([0, cfg.n_train, cfg.n_val, cfg.n_test])
    features = {s: [f[bounds[i]:bounds[i + 1]] for f in feats] for i, s in enumerate(SPLITS)}
    labels = {s: y[bounds[i]:bounds[i + 1]] for i, s in enumerate(SPLITS)}
    return SynthDataset(cfg, features, labels, betas, redraws)


def _without_eps(cfg: SynthConfig) -> SynthConfig:
    """Copy of ``cfg`` without per-modality eps (the summed rule adds one shared eps)."""
    return SynthConfig(**{**cfg.to_dict(), "eps_sd": 0.0})


def label_balance(ds: SynthDataset) -> dict[str, float]:
    return {s: float(np.mean(ds.labels[s] == 1)) for s in SPLITS}


# ---------------------------------------------------------------------------
# Bundle export / import: one .npy per modality per split, labels, manifest
# ---------------------------------------------------------------------------

def save_bundle(ds: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for s in SPLITS:
            for j, f in enumerate(ds.features[s]):
                np.save(out / f"{s}_m{j + 1}.npy", np.ascontiguousarray(f, dtype=DTYPE))
            np.save(out / f"{s}_labels.npy", ds.labels[s])
        np.save(out / "betas.npy", ds.betas)
        manifest = {"version": BUNDLE_VERSION, "config": ds.config.to_dict(),
                    "redraws": ds.redraws, "sizes": ds.config.sizes}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write dataset bundle to {out}: {exc}") from exc
    return out


def load_bundle(in_dir) -> SynthDataset:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {manifest.get('version')}")
    cfg = SynthConfig.from_dict(manifest["config"])
    features = {s: [np.load(d / f"{s}_m{j + 1}.npy") for j in range(cfg.n_modalities)] for s in SPLITS}
    labels = {s: np.load(d / f"{s}_labels.npy") for s in SPLITS}
    return SynthDataset(cfg, features, labels, np.load(d / "betas.npy"), manifest.get("redraws", []))
