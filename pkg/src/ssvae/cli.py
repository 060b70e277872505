"""``ssvae`` command line: synth, splits, train, eval, predict, generate.

Configs are JSON with ``preprocess``, ``model``, ``train``, ``regime`` and
``synth`` sections. The built-in full-scale config is the base; ``--desk-scale``
swaps in the small desk config. A ``--config`` file is merged on top of the
base, section by section.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

log = logging.getLogger("ssvae")

SECTIONS = ("preprocess", "model", "train", "regime", "synth")
REGIME_KEYS = {"name", "folds", "seed", "jitter_copies", "flip", "include_labeled_in_pool"}
SYNTH_KEYS = {"n_labeled", "n_unlabeled", "class_balance", "flip_unlabeled", "prefix", "spec"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def builtin_config(desk: bool = False) -> dict:
    name = "desk_scale.json" if desk else "full_scale.json"
    return json.loads(resources.files("ssvae.configs").joinpath(name).read_text())


def load_config(path: str | None, desk: bool = False) -> dict:
    cfg = builtin_config(desk)
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(user) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    for k, v in user.items():
        if not isinstance(v, dict):
            raise ConfigError(f"{path}: section {k!r} must be an object")
        if k == "synth" and "spec" in v:
            v = {**v, "spec": {**cfg["synth"].get("spec", {}), **v["spec"]}}
        cfg[k] = {**cfg.get(k, {}), **v}
    return cfg


@dataclass
class Experiment:
    preprocess: Any
    model: Any
    train: Any
    regime: dict
    synth: dict


def build_experiment(cfg: dict, seed: int | None = None) -> Experiment:
    from ssvae.networks import ModelConfig
    from ssvae.training import TrainConfig
    from ssvae.volumes import PreprocessConfig

    try:
        pre = PreprocessConfig.from_dict(cfg["preprocess"])
        model = ModelConfig.from_dict(cfg["model"])
        train = dict(cfg["train"])
        if seed is not None:
            train["seed"] = seed
        train = TrainConfig.from_dict(train)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if tuple(pre.target_shape) != tuple(model.input_shape):
        raise ConfigError(f"preprocess target {pre.target_shape} does not match model input_shape {model.input_shape}")
    regime = dict(cfg.get("regime", {}))
    if set(regime) - REGIME_KEYS:
        raise ConfigError(f"unknown regime keys {sorted(set(regime) - REGIME_KEYS)}")
    synth = dict(cfg.get("synth", {}))
    if set(synth) - SYNTH_KEYS:
        raise ConfigError(f"unknown synth keys {sorted(set(synth) - SYNTH_KEYS)}")
    return Experiment(pre, model, train, regime, synth)


def _manifest(path: str):
    from ssvae.volumes import read_manifest

    if not Path(path).is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return read_manifest(path)


def _combined(labeled: str, unlabeled: Sequence[str] | None):
    from ssvae.regimes import unlabeled_view

    m = _manifest(labeled)
    for u in unlabeled or ():
        m = m + unlabeled_view(_manifest(u))
    return m


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_synth(args) -> int:
    from ssvae.synthdata import SynthSpec, generate_dataset
    from ssvae.volumes import CLASS_NAMES, record_class

    cfg = load_config(args.config, args.desk_scale)
    synth = build_experiment(cfg).synth
    try:
        spec = SynthSpec.from_dict(synth.get("spec", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc
    n_l = synth.get("n_labeled", 30) if args.labeled is None else args.labeled
    n_u = synth.get("n_unlabeled", 0) if args.unlabeled is None else args.unlabeled
    seed = spec.seed if args.seed is None else args.seed
    ds = generate_dataset(
        spec, int(n_l), int(n_u), args.out,
        class_balance=synth.get("class_balance", (1, 1, 1)),
        seed=seed,
        flip_unlabeled=bool(synth.get("flip_unlabeled", False)) or args.flip,
        prefix=args.prefix or synth.get("prefix", "synth"),
    )  # fmt: skip
    lab = ds.manifest.labeled
    hist = np.bincount([record_class(r) for r in lab], minlength=3)
    hidden = np.bincount([c for c, _ in ds.answers.values()], minlength=3)
    print(f"wrote {ds.manifest_path}")
    print(f"labeled {ds.manifest.n_labeled}  unlabeled {ds.manifest.n_unlabeled}")
    print("labeled classes   " + "  ".join(f"{n}={k}" for n, k in zip(CLASS_NAMES, hist)))
    if ds.answers:
        print("unlabeled classes " + "  ".join(f"{n}={k}" for n, k in zip(CLASS_NAMES, hidden)) + f"  (hidden, {ds.answers_path.name})")
    return 0


def _regime_spec(exp: Experiment, manifest_path: str, unlabeled_paths, args):
    from ssvae.regimes import RegimeSpec

    m = _manifest(manifest_path)
    labeled = m.labeled
    r = exp.regime
    name = args.regime or r.get("name", "S0")
    folds = args.folds if args.folds is not None else int(r.get("folds", 3))
    seed = args.seed if args.seed is not None else int(r.get("seed", 0))
    # unlabeled rows of the main manifest join the pool alongside any extra manifests
    unl = [m.unlabeled] if len(m.unlabeled) else []
    unl += [_manifest(u) for u in unlabeled_paths or ()]
    if name == "S1":
        return RegimeSpec.s1(labeled, unl, seed=seed, folds=folds, jitter_copies=int(r.get("jitter_copies", 3)),
                             flip=bool(r.get("flip", True)),
                             include_labeled_in_pool=bool(r.get("include_labeled_in_pool", True)))  # fmt: skip
    if name != "S0":
        raise ConfigError(f"unknown regime {name!r}")
    return RegimeSpec.s0(labeled, unl, seed=seed, folds=folds)


def run_splits(args) -> int:
    from ssvae.regimes import build_regime, check_no_leakage, write_folds

    exp = build_experiment(load_config(args.config, args.desk_scale))
    spec = _regime_spec(exp, args.manifest, args.unlabeled, args)
    folds = build_regime(spec)
    check_no_leakage(folds)
    for d, f in zip(write_folds(folds, args.out), folds):
        print(f"fold {f.fold_id}: train {f.train.n_labeled}+{f.train.n_unlabeled}  validation {len(f.validation)}  -> {d}")
    return 0


def _write_train_figures(out: Path, metrics) -> None:
    from ssvae.plotting import plot_training_curves

    if metrics:
        plot_training_curves(metrics, out / "training_curves.png")


def run_train(args) -> int:
    from ssvae.training import TrainConfig, read_checkpoint, read_metrics, resume, train

    out = Path(args.out)
    if args.resume:
        if args.folds is not None:
            raise ConfigError("--resume continues a single model; it cannot be combined with --folds")
        payload = read_checkpoint(args.resume)
        saved = TrainConfig.from_dict(payload["train_config"])
        cfg = saved if args.steps is None else TrainConfig.from_dict({**saved.to_dict(), "total_steps": args.steps})
        state = resume(args.resume, _combined(args.manifest, args.unlabeled), cfg, out)
        _write_train_figures(out, state.metrics)
        print(f"resumed at step {payload['step']}, finished at step {state.step}")
        print(state.checkpoints[-1])
        return 0

    exp = build_experiment(load_config(args.config, args.desk_scale), args.seed)
    tcfg = exp.train if args.steps is None else TrainConfig.from_dict({**exp.train.to_dict(), "total_steps": args.steps})
    if args.folds is None:
        manifest = _combined(args.manifest, args.unlabeled)
        if args.supervised_only:
            manifest = manifest.labeled
        state = train(manifest, exp.model, tcfg, exp.preprocess, out)
        _write_train_figures(out, state.metrics)
        print(state.checkpoints[-1])
        return 0

    from ssvae.plotting import plot_report
    from ssvae.regimes import run_regime

    spec = _regime_spec(exp, args.manifest, args.unlabeled, args)
    holdout = _holdout(args)
    res = run_regime(spec, exp.model, tcfg, exp.preprocess, out, holdout=holdout, supervised_only=args.supervised_only)
    for f in res.folds:
        _write_train_figures(out / f"fold_{f.fold_id}", read_metrics(out / f"fold_{f.fold_id}" / "metrics.csv"))
    plot_report(res.report, out / "report.png", title=f"{spec.regime}{' supervised only' if args.supervised_only else ''}")
    _print_report(res.report)
    for c in res.checkpoints:
        print(c)
    return 0


def _holdout(args):
    if not getattr(args, "holdout", None):
        return None
    m = _manifest(args.holdout)
    if getattr(args, "answers", None):
        from ssvae.synthdata import read_answers, with_answers

        m = with_answers(m, read_answers(args.answers))
    return m


def _fold_models(checkpoints: Sequence[str], validations):
    from ssvae.evaluation import ClassStats, FoldModel
    from ssvae.training import load_model
    from ssvae.volumes import PreprocessConfig

    out = []
    for k, path in enumerate(checkpoints, start=1):
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model, payload = load_model(path)
        stats_ = ClassStats(tuple(payload["class_stats"])) if payload.get("class_stats") else ClassStats((None,) * 3)
        val = validations[k - 1] if validations else None
        out.append(FoldModel(k, model, PreprocessConfig.from_dict(payload["preprocess_config"]), stats_, val))
    return out


def _print_report(report: dict) -> None:
    def line(name, r):
        s = f"{name:<14} {100 * r['accuracy']:6.2f} ± {100 * r['ci_halfwidth']:5.2f}  (n={r['n']})"
        if "mse" in r:
            s += f"  mse={r['mse']:.1f}  median_se={r['median_se']:.1f}  spearman={r['spearman']:.3f}"
        print(s)

    for r in report["folds"]:
        line(f"fold {r['fold']}", r)
    if "average" in report:
        line("average", report["average"])
    if "majority_vote" in report:
        line("majority vote", report["majority_vote"])


def _with_answers(m, answers):
    if not answers:
        return m
    from ssvae.synthdata import read_answers, with_answers

    return with_answers(m, read_answers(answers))


def run_eval(args) -> int:
    from ssvae.evaluation import build_report, write_report
    from ssvae.plotting import plot_report

    n = len(args.checkpoint)
    for c in args.checkpoint:
        if not Path(c).is_file():
            raise FileNotFoundError(f"checkpoint not found: {c}")
    manifests = [_with_answers(_manifest(p), args.answers) for p in args.manifest]
    if len(manifests) not in (1, n):
        raise ConfigError(f"give one validation manifest or one per checkpoint ({n}), got {len(manifests)}")
    for p, m in zip(args.manifest, manifests):
        if len(m) == 0:
            raise ValueError(f"empty validation manifest: {p}")
        if m.n_unlabeled:
            raise ValueError(f"validation manifest {p} has {m.n_unlabeled} unlabeled records")
    validations = manifests * n if len(manifests) == 1 else manifests
    holdout = _holdout(args)
    if holdout is None and n >= 3 and len(manifests) == 1:
        holdout = manifests[0]
    report = build_report(_fold_models(args.checkpoint, validations), holdout)
    out = Path(args.out)
    target = out if out.suffix == ".json" else out / "report.json"
    # relative to the report, so identical runs in different directories match byte for byte
    report["checkpoints"] = [os.path.relpath(Path(c).resolve(), target.parent.resolve()) for c in args.checkpoint]
    path = write_report(target, report)
    plot_report(report, path.with_suffix(".png"))
    _print_report(report)
    print(path)
    return 0


def run_predict(args) -> int:
    from ssvae.evaluation import class_to_days, pooled_stats, predict_manifest, vote, write_predictions

    fms = _fold_models(args.checkpoint, None)
    m = _manifest(args.manifest)
    if len(m) == 0:
        raise ValueError(f"empty manifest: {args.manifest}")
    if len(fms) == 1:
        classes, _ = predict_manifest(fms[0].model, m, fms[0].preprocess_cfg)
        stats_ = fms[0].class_stats
    else:
        if len(fms) % 2 == 0:
            raise ConfigError("majority voting needs an odd number of checkpoints")
        classes, _ = vote(fms, m)
        stats_ = pooled_stats(fms)
    out = Path(args.out)
    path = write_predictions(out if out.suffix == ".csv" else out / "predictions.csv", m.ids, classes,
                             [class_to_days(c, stats_) for c in classes])  # fmt: skip
    print(path)
    return 0


def run_generate(args) -> int:
    import torch

    from ssvae.networks import sample_by_class
    from ssvae.plotting import plot_roughness, plot_samples
    from ssvae.synthdata import roughness
    from ssvae.training import load_model
    from ssvae.volumes import CLASS_NAMES, SegVolume, write_raw_volume

    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_model(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    probs, labels = sample_by_class(model, args.samples, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, per_class = [], {c: [] for c in range(len(CLASS_NAMES))}
    for c, name in enumerate(CLASS_NAMES):
        for i in range(args.samples):
            vol = SegVolume(labels[c, i].numpy())
            write_raw_volume(out / f"{name}_{i:03d}.bin", vol)
            np.save(out / f"{name}_{i:03d}_probs.npy", probs[c, i].to(torch.float32).numpy())
            try:
                r = roughness(vol)
            except ValueError:
                r = float("nan")
            per_class[c].append(r)
            rows.append((f"{name}_{i:03d}", name, i, int((vol.data > 0).sum()), r))
    with (out / "roughness.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class", "z_index", "tumor_voxels", "roughness"])
        for sid, name, i, n, r in rows:
            w.writerow([sid, name, i, n, "" if np.isnan(r) else f"{r:.6f}"])
    plot_samples({c: labels[c].numpy() for c in per_class}, out / "samples.png")
    if any(np.isfinite(per_class[c]).any() for c in per_class):
        plot_roughness(per_class, out / "roughness.png")
    for c, name in enumerate(CLASS_NAMES):
        v = np.asarray(per_class[c])
        ok = v[np.isfinite(v)]
        mean = f"{ok.mean():.4f}" if ok.size else "n/a"
        print(f"{name:<6} mean roughness {mean}  ({ok.size}/{v.size} non-empty)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config merged over the built-in one")
        sp.add_argument("--desk-scale", action="store_true", help="start from the small desk config")
        sp.add_argument("--out", required=out_required, help="output directory or file")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic labeled/unlabeled dataset")
    common(sp)
    sp.add_argument("--labeled", type=int)
    sp.add_argument("--unlabeled", type=int)
    sp.add_argument("--flip", action="store_true", help="add a left-right flipped copy of every unlabeled subject")
    sp.add_argument("--prefix")
    sp.set_defaults(func=run_synth)

    sp = sub.add_parser("splits", help="write cross-validation folds")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--unlabeled", action="append")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--regime", choices=("S0", "S1"))
    sp.set_defaults(func=run_splits)

    sp = sub.add_parser("train", help="train one model, or one per fold with --folds")
    common(sp)
    sp.add_argument("--manifest", required=True, help="labeled (and optionally unlabeled) records")
    sp.add_argument("--unlabeled", action="append", help="extra unlabeled manifest; repeatable")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--steps", type=int, help="override total_steps")
    sp.add_argument("--folds", type=int, help="run the cross-validation regime with this many folds")
    sp.add_argument("--regime", choices=("S0", "S1"))
    sp.add_argument("--supervised-only", action="store_true", help="drop every unlabeled record")
    sp.add_argument("--holdout", help="manifest for the majority-vote row")
    sp.add_argument("--answers", help="answers file attached to --holdout (synthetic data only)")
    sp.set_defaults(func=run_train)

    sp = sub.add_parser("eval", help="accuracy report for 1 or 3 fold checkpoints")
    common(sp)
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--manifest", action="append", required=True, help="validation manifest (one, or one per fold)")
    sp.add_argument("--holdout")
    sp.add_argument("--answers", help="answers file giving hidden labels of synthetic records")
    sp.set_defaults(func=run_eval)

    sp = sub.add_parser("predict", help="write class and survival-day predictions")
    common(sp)
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=run_predict)

    sp = sub.add_parser("generate", help="decode shared prior samples under each class")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", type=int, default=20)
    sp.set_defaults(func=run_generate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    from ssvae.training import CheckpointError, TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "samples", 1) is not None and getattr(args, "samples", 1) < 1:
        print("error: --samples must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDiverged, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
