"""Experiment harness: multi-seed synthetic studies, sweeps, ablations and report writing."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np

from . import losses as L
from .metrics import classification_report, prediction_histogram
from .model import (LossSpec, TrainConfig, TrainedModel, TrainingError, lr_grid_search, parse_method,
                    save_checkpoint, train)
from .numerics import derive_seed
from .synthdata import SynthConfig, SynthDataset, generate, noise_sigma, save_bundle

log = logging.getLogger(__name__)

ExperimentKind = Literal["table1", "lr_grid", "proxy_sweep", "ablation", "single_run"]

# Learning rates selected on the validation set of the one-noise synthetic task.
TUNED_LR = {
    "unimodal": 5e-3,
    "sum_ce": 5e-4,
    "weighted_sum_ce": 5e-4,
    "nn_ce": 5e-5,
    "softtriple": 5e-4,
    "multimodal": 5e-4,
}

TABLE1_PATTERNS = ((), (2,), (1, 2))
DEFAULT_PROXY_COUNTS = (1, 2, 5, 10, 20, 50, 100)

# (row name, attention, normalization axis); first row is the full model.
ABLATION_ROWS = (
    ("full", "soft", "class"),
    ("hard_attention", "hard", "class"),
    ("proxy_axis", "soft", "proxy"),
    ("no_attention", "none", "class"),
    ("proxy_axis_no_attention", "none", "proxy"),
)

TIMING_KEYS = ("duration", "convergence_time", "report_seconds")


class ExperimentError(ValueError):
    pass


def format_pattern(pattern) -> str:
    return "none" if not pattern else "+".join(f"m{m + 1}" for m in pattern)


def parse_patterns(text: str) -> tuple[tuple[int, ...], ...]:
    """'none;3;2,3' (1-based modality indices) -> ((), (2,), (1, 2))."""
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if part.lower() in ("none", "0", "-"):
            out.append(())
        else:
            out.append(tuple(sorted(int(p) - 1 for p in part.split(","))))
    return tuple(out)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: ExperimentKind = "single_run"
    synth: SynthConfig = SynthConfig()
    train: TrainConfig = TrainConfig()
    methods: tuple[str, ...] = ("multimodal",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    noise_patterns: tuple[tuple[int, ...], ...] = ((1, 2),)
    proxy_counts: tuple[int, ...] = DEFAULT_PROXY_COUNTS
    lr_policy: Literal["tuned", "grid", "fixed"] = "tuned"
    dump: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ExperimentError("at least one method is required")
        if not self.seeds:
            raise ExperimentError("seed list must be non-empty")
        if not self.noise_patterns:
            raise ExperimentError("at least one noise pattern is required")
        for meth in self.methods:
            parse_method(meth)
        if self.kind == "proxy_sweep":
            if not self.proxy_counts:
                raise ExperimentError("proxy-count list must be non-empty")
            if len(set(self.proxy_counts)) != len(self.proxy_counts):
                raise ExperimentError("duplicate proxy counts")
            if min(self.proxy_counts) < 1:
                raise ExperimentError("proxy counts must be >= 1")
        if self.lr_policy not in ("tuned", "grid", "fixed"):
            raise ExperimentError(f"unknown lr policy {self.lr_policy!r}")
        for pat in self.noise_patterns:
            if any(not 0 <= m < self.synth.n_modalities for m in pat):
                raise ExperimentError(f"noise pattern {pat} references a missing modality")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "synth" in d:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        for key in ("methods", "seeds", "proxy_counts"):
            if key in d:
                d[key] = tuple(d[key])
        if "noise_patterns" in d:
            d["noise_patterns"] = tuple(tuple(p) for p in d["noise_patterns"])
        return cls(**d)


def reduced_preset(kind: ExperimentKind = "table1", **overrides) -> ExperimentSpec:
    """Desk-scale setting: dim 200, 2000/500/2000 splits, 200-64-32-16-2 MLPs, 3 seeds."""
    synth = SynthConfig(dim=200, n_train=2000, n_val=500, n_test=2000)
    tc = TrainConfig(hidden=(64, 32, 16), max_epochs=300, patience=100, criterion="train_loss")
    base = dict(kind=kind, synth=synth, train=tc, seeds=(0, 1, 2))
    base.update(_kind_defaults(kind))
    base.update(overrides)
    return ExperimentSpec(**base)


def full_preset(kind: ExperimentKind = "table1", **overrides) -> ExperimentSpec:
    tc = TrainConfig(hidden=(500, 100, 20), max_epochs=2000, patience=100, criterion="train_loss")
    base = dict(kind=kind, synth=SynthConfig(), train=tc, seeds=(0, 1, 2, 3, 4), lr_policy="grid")
    base.update(_kind_defaults(kind))
    base.update(overrides)
    return ExperimentSpec(**base)


def _kind_defaults(kind: ExperimentKind) -> dict:
    if kind == "table1":
        return {"methods": ("unimodal(1)", "unimodal(2)", "unimodal(3)", "sum_ce", "nn_ce",
                            "softtriple", "multimodal"),
                "noise_patterns": TABLE1_PATTERNS}
    if kind == "lr_grid":
        return {"methods": ("unimodal(1)", "sum_ce", "nn_ce", "softtriple", "multimodal"),
                "noise_patterns": ((2,),), "lr_policy": "grid"}
    if kind in ("proxy_sweep", "ablation"):
        return {"methods": ("multimodal",), "noise_patterns": ((1, 2),)}
    return {}


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    method: str
    seed: int
    pattern: tuple[int, ...]
    variant: str = ""
    loss: LossSpec = LossSpec()

    @property
    def key(self) -> str:
        v = f"/{self.variant}" if self.variant else ""
        return f"{self.method}{v}/{format_pattern(self.pattern)}/seed{self.seed}"


def dataset_config(spec: ExperimentSpec, pattern, seed: int) -> SynthConfig:
    sigma = noise_sigma(spec.synth.n_modalities, pattern)
    return replace(spec.synth, sigma=sigma, seed=derive_seed("synth", spec.synth.seed, seed))


@lru_cache(maxsize=4)
def _dataset(cfg: SynthConfig) -> SynthDataset:
    return generate(cfg)


def _cell_lr(spec: ExperimentSpec, loss: LossSpec) -> float:
    if spec.lr_policy == "tuned":
        return TUNED_LR[loss.kind]
    return spec.train.lr


def run_cell(spec: ExperimentSpec, cell: Cell, keep_model: bool = False) -> dict:
    rec: dict = {"key": cell.key, "method": cell.method, "variant": cell.variant, "seed": cell.seed,
                 "noise": format_pattern(cell.pattern), "pattern": list(cell.pattern)}
    try:
        ds = _dataset(dataset_config(spec, cell.pattern, cell.seed))
        tc = replace(spec.train, loss=cell.loss, seed=derive_seed("train", cell.method, cell.variant, cell.seed))
        tr, va, te = ds.split("train"), ds.split("val"), ds.split("test")
        if spec.lr_policy == "grid":
            grid = lr_grid_search(tr, va, tc)
            model, lr = grid.model, grid.best_lr
            rec["lr_cells"] = grid.cells
        else:
            lr = _cell_lr(spec, cell.loss)
            model = train(tr, va, replace(tc, lr=lr))
        rec.update(_evaluate(model, ds))
        rec.update({"status": "ok", "lr": lr, "best_epoch": model.best_epoch, "epochs": len(model.history),
                    "duration": model.duration, "convergence_time": model.convergence_time})
        if keep_model:
            rec["_model"] = model
    except (TrainingError, ValueError, FloatingPointError) as exc:
        log.warning("cell %s failed: %s", cell.key, exc)
        rec.update({"status": "failed", "reason": f"{type(exc).__name__}: {exc}"})
    return rec


def _evaluate(model: TrainedModel, ds: SynthDataset) -> dict:
    te = ds.split("test")
    va = ds.split("val")
    out = model.outputs(te.features)
    pred = model.predict(te.features)
    rec = {"test": classification_report(te.labels, pred, 2),
           "val_acc": float(np.mean(model.predict(va.features) == va.labels)),
           "mean_max_prob": {f"m{m + 1}": float(v) for m, v in zip(model.modalities, out.max(axis=2).mean(axis=1))}}
    if model.config.loss.kind == "multimodal":
        counts = L.effective_proxy_counts(out, model.head["proxies"], model.config.loss.mm)
        rec["effective_proxies"] = [int(c) for c in counts]
        rec["effective_proxies_mean"] = float(np.mean(counts))
    return rec


def _cells(spec: ExperimentSpec) -> list[Cell]:
    cells = []
    if spec.kind == "proxy_sweep":
        base = parse_method("multimodal")
        for K in spec.proxy_counts:
            for pat in spec.noise_patterns:
                for s in spec.seeds:
                    cells.append(Cell("multimodal", s, pat, f"K={K}", replace(base, n_proxies=K)))
        return cells
    if spec.kind == "ablation":
        for name, att, axis in ABLATION_ROWS:
            loss = replace(parse_method("multimodal"), mm=L.MultiModalConfig(attention=att, norm_axis=axis))
            for pat in spec.noise_patterns:
                for s in spec.seeds:
                    cells.append(Cell("multimodal", s, pat, name, loss))
        return cells
    for meth in spec.methods:
        loss = parse_method(meth)
        if loss.kind == "softtriple":
            loss = replace(loss, softtriple=spec.train.loss.softtriple)
        elif loss.kind == "multimodal":
            loss = replace(loss, mm=spec.train.loss.mm, n_proxies=spec.train.loss.n_proxies)
        for pat in spec.noise_patterns:
            for s in spec.seeds:
                cells.append(Cell(meth, s, pat, "", loss))
    return cells


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    cells: list[dict]
    summary: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    report_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c["status"] == "ok" for c in self.cells)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "cells": self.cells, "summary": self.summary,
                "warnings": self.warnings, "report_seconds": self.report_seconds}

    def row(self, method: str, noise: str, variant: str = "") -> dict:
        for r in self.summary:
            if r["method"] == method and r["noise"] == noise and r["variant"] == variant:
                return r
        raise KeyError((method, noise, variant))

    def cell_values(self, method: str, noise: str, path: tuple, variant: str = "") -> list[float]:
        vals = []
        for c in self.cells:
            if c["method"] == method and c["noise"] == noise and c["variant"] == variant and c["status"] == "ok":
                v = c
                for p in path:
                    v = v[p]
                vals.append(float(v))
        return vals


def _mean_sd(vals: list[float]) -> tuple[float, float]:
    if not vals:
        return float("nan"), float("nan")
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)


def _summarize(cells: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c["method"], c["variant"], c["noise"]), []).append(c)
    rows = []
    for (method, variant, noise), cs in groups.items():
        ok = [c for c in cs if c["status"] == "ok"]
        row = {"method": method, "variant": variant, "noise": noise, "n_ok": len(ok), "n_failed": len(cs) - len(ok)}
        for metric in ("acc", "f1_macro", "f1_weighted", "mcc"):
            row[f"{metric}_mean"], row[f"{metric}_sd"] = _mean_sd([c["test"][metric] for c in ok])
        row["convergence_time_mean"], row["convergence_time_sd"] = _mean_sd([c["convergence_time"] for c in ok])
        if ok and "effective_proxies_mean" in ok[0]:
            row["effective_proxies_mean"] = _mean_sd([c["effective_proxies_mean"] for c in ok])[0]
        mods = sorted({m for c in ok for m in c["mean_max_prob"]})
        for m in mods:
            row[f"mean_max_prob_{m}"] = _mean_sd([c["mean_max_prob"][m] for c in ok if m in c["mean_max_prob"]])[0]
        lrs = sorted({c["lr"] for c in ok})
        row["lrs"] = lrs
        rows.append(row)
    return rows


def _ablation_warnings(summary: list[dict]) -> list[str]:
    warnings = []
    by_name = {}
    for r in summary:
        by_name.setdefault(r["noise"], {})[r["variant"]] = r
    for noise, rows in by_name.items():
        full, pruned = rows.get("full"), rows.get("proxy_axis_no_attention")
        if full and pruned and "effective_proxies_mean" in full and "effective_proxies_mean" in pruned:
            if pruned["effective_proxies_mean"] > full["effective_proxies_mean"]:
                warnings.append(
                    f"[{noise}] proxy_axis_no_attention uses more effective proxies per class "
                    f"({pruned['effective_proxies_mean']:.2f}) than the full model ({full['effective_proxies_mean']:.2f})")
    return warnings


def run_experiment(spec: ExperimentSpec, out_dir=None) -> ExperimentReport:
    t0 = time.perf_counter()
    cells = _cells(spec)
    keep = spec.dump and out_dir is not None
    # cells sharing a dataset run back to back; the report keeps the declared order
    order = sorted(range(len(cells)), key=lambda i: (cells[i].pattern, cells[i].seed))
    todo = [cells[i] for i in order]
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            done = list(pool.map(run_cell, [spec] * len(todo), todo))
    else:
        done = [run_cell(spec, c, keep_model=keep) for c in todo]
    recs = [None] * len(cells)
    for i, rec in zip(order, done):
        recs[i] = rec
    models = {r["key"]: r.pop("_model") for r in recs if "_model" in r}
    report = ExperimentReport(spec, recs, _summarize(recs))
    if spec.kind == "ablation":
        report.warnings.extend(_ablation_warnings(report.summary))
    report.warnings.extend(f"cell {r['key']} failed: {r['reason']}" for r in recs if r["status"] != "ok")
    report.report_seconds = time.perf_counter() - t0
    if out_dir is not None:
        write_report(report, out_dir)
        for key, model in models.items():
            rec = next(r for r in recs if r["key"] == key)
            ds = _dataset(dataset_config(spec, tuple(rec["pattern"]), rec["seed"]))
            dump_outputs(model, ds, Path(out_dir) / "dumps" / key.replace("/", "__"))
    return report


def run_table1(spec: ExperimentSpec, out_dir=None) -> ExperimentReport:
    if spec.kind != "table1":
        raise ExperimentError("run_table1 needs kind='table1'")
    return run_experiment(spec, out_dir)


def run_proxy_sweep(spec: ExperimentSpec, out_dir=None) -> ExperimentReport:
    if spec.kind != "proxy_sweep":
        raise ExperimentError("run_proxy_sweep needs kind='proxy_sweep'")
    return run_experiment(spec, out_dir)


def run_ablation(spec: ExperimentSpec, out_dir=None) -> ExperimentReport:
    if spec.kind != "ablation":
        raise ExperimentError("run_ablation needs kind='ablation'")
    return run_experiment(spec, out_dir)


def run_lr_grid(spec: ExperimentSpec, out_dir=None) -> ExperimentReport:
    if spec.kind != "lr_grid":
        raise ExperimentError("run_lr_grid needs kind='lr_grid'")
    return run_experiment(replace(spec, lr_policy="grid"), out_dir)


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, f"{name}."))
        elif isinstance(v, list):
            out[name] = json.dumps(v, default=_json_default)
        else:
            out[name] = v
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    flat = [_flatten(r) for r in rows]
    cols = []
    for r in flat:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(flat)


def write_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=_json_default))
        _write_csv(out / "cells.csv", report.cells)
        _write_csv(out / "summary.csv", report.summary)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return out


def strip_timing(obj):
    """Copy of a report dict without wall-clock fields (for determinism comparisons)."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items()
                if k not in TIMING_KEYS and not k.startswith("convergence_time")}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def dump_outputs(model: TrainedModel, ds: SynthDataset, out_dir, split: str = "test",
                 class_of_interest: int = 0) -> Path:
    """Per-modality output matrices, the trained head parameters and histogram CSVs."""
    out = Path(out_dir)
    sp = ds.split(split)
    x = model.outputs(sp.features)
    hist = prediction_histogram(x, sp.labels, class_of_interest, n_classes=x.shape[2])
    try:
        out.mkdir(parents=True, exist_ok=True)
        for idx, m in enumerate(model.modalities):
            np.save(out / f"{split}_outputs_m{m + 1}.npy", x[idx])
            np.savetxt(out / f"{split}_outputs_m{m + 1}.csv", x[idx], delimiter=",",
                       header=",".join(f"p{c}" for c in range(x.shape[2])), comments="")
        np.save(out / f"{split}_labels.npy", sp.labels)
        for name, arr in model.head.items():
            np.save(out / f"head_{name}.npy", arr)
        rows = hist.to_rows()
        for r in rows:
            r["modality"] = model.modalities[r["modality"] - 1] + 1
        _write_csv(out / f"{split}_histogram.csv", rows)
        summary = {f"m{m + 1}": float(v) for m, v in zip(model.modalities, hist.mean_max_prob)}
        (out / "confidence.json").write_text(json.dumps({"mean_max_prob": summary}, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write output dump to {out}: {exc}") from exc
    return out


__all__ = [
    "ExperimentSpec", "ExperimentReport", "TUNED_LR", "ABLATION_ROWS", "reduced_preset", "full_preset",
    "run_experiment", "run_table1", "run_proxy_sweep", "run_ablation", "run_lr_grid", "dump_outputs",
    "write_report", "parse_patterns", "format_pattern", "strip_timing", "save_bundle", "save_checkpoint",
]
