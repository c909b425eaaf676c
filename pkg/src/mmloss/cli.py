"""Command-line entry point: ``mmloss <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as E
from .gradcheck import run_suite
from .model import load_checkpoint, parse_method, save_checkpoint, train
from .numerics import FiniteDiffConfig
from .synthdata import SynthConfig, generate, label_balance, load_bundle, noise_sigma, save_bundle

VERB_KIND = {"table1": "table1", "lr-grid": "lr_grid", "proxy-sweep": "proxy_sweep", "ablation": "ablation",
             "train": "single_run"}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _add_common(p: argparse.ArgumentParser, experiment: bool) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment spec; flags override its fields")
    p.add_argument("--preset", choices=("reduced", "full"), default="reduced")
    p.add_argument("--seed", type=_ints, required=experiment, help="seed or comma-separated seed list")
    p.add_argument("--out", type=Path, required=experiment)
    p.add_argument("--methods", help="e.g. 'unimodal(1),sum_ce,multimodal'")
    p.add_argument("--noise", help="noise patterns, 1-based modalities: 'none;3;2,3'")
    p.add_argument("--proxies", type=_ints, help="proxy counts for proxy-sweep")
    p.add_argument("--n-proxies", type=int, help="proxies per class for the MultiModal loss")
    p.add_argument("--gamma", type=float)
    p.add_argument("--attention", choices=("soft", "hard", "none"))
    p.add_argument("--norm-axis", choices=("class", "proxy"))
    p.add_argument("--dim", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--data-seed", type=int, help="base seed of the synthetic data")
    p.add_argument("--hidden", type=_ints)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-grid", type=_floats)
    p.add_argument("--lr-policy", choices=("tuned", "grid", "fixed"))
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--criterion", choices=("val_loss", "val_acc", "train_loss"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--dump", action="store_true", help="write per-cell output dumps")


def build_spec(args, kind: str) -> E.ExperimentSpec:
    if args.config:
        spec = E.ExperimentSpec.from_dict(json.loads(args.config.read_text()))
        spec = replace(spec, kind=kind)
    else:
        preset = E.full_preset if args.preset == "full" else E.reduced_preset
        spec = preset(kind)
        if kind == "single_run":
            spec = replace(spec, methods=("multimodal",), noise_patterns=((1, 2),))
    synth = spec.synth
    changes = {k: v for k, v in {"dim": args.dim, "n_train": args.n_train, "n_val": args.n_val,
                                 "n_test": args.n_test, "seed": args.data_seed}.items() if v is not None}
    if changes:
        synth = replace(synth, **changes)
    tc = spec.train
    t_changes = {k: v for k, v in {"hidden": args.hidden, "lr": args.lr, "lr_grid": args.lr_grid,
                                   "max_epochs": args.max_epochs, "patience": args.patience,
                                   "batch_size": args.batch_size, "weight_decay": args.weight_decay,
                                   "criterion": args.criterion}.items() if v is not None}
    mm = tc.loss.mm
    mm_changes = {k: v for k, v in {"gamma": args.gamma, "attention": args.attention,
                                    "norm_axis": args.norm_axis}.items() if v is not None}
    loss = tc.loss
    if mm_changes:
        loss = replace(loss, mm=replace(mm, **mm_changes))
    if args.n_proxies is not None:
        loss = replace(loss, n_proxies=args.n_proxies)
    tc = replace(tc, loss=loss, **t_changes)
    s_changes = {"synth": synth, "train": tc}
    if args.seed:
        s_changes["seeds"] = args.seed
    if args.methods:
        s_changes["methods"] = tuple(_split_methods(args.methods))
    if args.noise:
        s_changes["noise_patterns"] = E.parse_patterns(args.noise)
    if args.proxies:
        s_changes["proxy_counts"] = args.proxies
    if args.lr_policy:
        s_changes["lr_policy"] = args.lr_policy
    elif args.lr is not None:
        s_changes["lr_policy"] = "fixed"
    if args.jobs:
        s_changes["jobs"] = args.jobs
    if args.dump:
        s_changes["dump"] = True
    return replace(spec, **s_changes)


def _split_methods(text: str) -> list[str]:
    # commas inside 'unimodal(1)' are not separators
    out, cur, depth = [], "", 0
    for ch in text:
        if ch in ",;" and depth == 0:
            if cur.strip():
                out.append(cur.strip())
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _print_summary(report: E.ExperimentReport) -> None:
    for r in report.summary:
        name = r["method"] + (f"/{r['variant']}" if r["variant"] else "")
        extra = f" eff_proxies={r['effective_proxies_mean']:.2f}" if "effective_proxies_mean" in r else ""
        print(f"{name:<34s} noise={r['noise']:<7s} acc={100 * r['acc_mean']:.1f}±{100 * r['acc_sd']:.1f}"
              f" mcc={r['mcc_mean']:.3f} ok={r['n_ok']}/{r['n_ok'] + r['n_failed']}{extra}")
    for w in report.warnings:
        print(f"warning: {w}")


def cmd_experiment(args, kind: str) -> int:
    spec = build_spec(args, kind)
    report = E.run_experiment(spec, args.out)
    _print_summary(report)
    print(f"report written to {args.out}")
    return 0 if report.ok else 1


def cmd_train(args) -> int:
    spec = build_spec(args, "single_run")
    meth = spec.methods[0]
    pattern = spec.noise_patterns[0]
    seed = spec.seeds[0]
    ds = generate(E.dataset_config(spec, pattern, seed))
    loss = parse_method(meth)
    if loss.kind == "multimodal":
        loss = replace(loss, mm=spec.train.loss.mm, n_proxies=spec.train.loss.n_proxies)
    lr = E.TUNED_LR[loss.kind] if spec.lr_policy == "tuned" else spec.train.lr
    tc = replace(spec.train, loss=loss, lr=lr, seed=seed)
    model = train(ds.split("train"), ds.split("val"), tc)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.npz")
    (args.out / "synth.json").write_text(json.dumps(ds.config.to_dict(), indent=2))
    te = ds.split("test")
    acc = float(np.mean(model.predict(te.features) == te.labels))
    print(f"{meth}: test acc {100 * acc:.2f} (best epoch {model.best_epoch}, {len(model.history)} epochs)")
    return 0


def cmd_generate(args) -> int:
    cfg = SynthConfig(dim=args.dim, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                      sigma=noise_sigma(3, E.parse_patterns(args.noise)[0] if args.noise else ()),
                      seed=args.seed[0])
    ds = generate(cfg)
    save_bundle(ds, args.out)
    print(json.dumps({"out": str(args.out), "label_balance": label_balance(ds)}))
    return 0


def cmd_dump(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.data:
        ds = load_bundle(args.data)
    else:
        synth_file = Path(args.checkpoint).with_name("synth.json")
        ds = generate(SynthConfig.from_dict(json.loads(synth_file.read_text())))
    E.dump_outputs(model, ds, args.out, split=args.split)
    print(f"outputs written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    res = run_suite(args.instances, args.seed[0] if args.seed else 0,
                    FiniteDiffConfig(step=args.step, tolerance=args.tolerance))
    for line in res.lines():
        print(line)
    print(f"{'PASS' if res.passed else 'FAIL'} overall in {res.seconds:.1f}s")
    return 0 if res.passed else 1


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmloss", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset bundle")
    g.add_argument("--seed", type=_ints, default=(0,))
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--dim", type=int, default=2000)
    g.add_argument("--n-train", type=int, default=10000)
    g.add_argument("--n-val", type=int, default=1000)
    g.add_argument("--n-test", type=int, default=10000)
    g.add_argument("--noise", help="noisy modalities, 1-based, e.g. '2,3'")

    for verb in ("train", "table1", "lr-grid", "proxy-sweep", "ablation"):
        _add_common(sub.add_parser(verb, help=f"run {verb}"), experiment=True)

    d = sub.add_parser("dump", help="write per-modality outputs and histograms of a trained model")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--data", type=Path, help="dataset bundle; defaults to regenerating from synth.json")
    d.add_argument("--split", default="test", choices=("train", "val", "test"))
    d.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient suite")
    c.add_argument("--instances", type=int, default=50)
    c.add_argument("--seed", type=_ints, default=(0,))
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-6)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "generate":
        return cmd_generate(args)
    if args.verb == "dump":
        return cmd_dump(args)
    if args.verb == "gradcheck":
        return cmd_gradcheck(args)
    if args.verb == "train":
        return cmd_train(args)
    return cmd_experiment(args, VERB_KIND[args.verb])


if __name__ == "__main__":
    sys.exit(main())
