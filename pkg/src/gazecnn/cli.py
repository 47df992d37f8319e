"""Command-line front end.

Exit codes: 0 ok, 2 configuration / bad input, 3 I/O failure, 4 training
failure, 5 verification failure.

Configuration files are flat ``key = value`` text with ``#`` comments.  Keys
are the training options (``max_epochs``, ``lr``, ...) plus ``manifest``,
``manifests``, ``out``, ``ckpt``, ``k`` and ``jobs``.  Command-line flags win
over file values; unknown keys are an error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from gazecnn import data as D
from gazecnn import gradcheck
from gazecnn import harness as H
from gazecnn import model as M
from gazecnn import synth

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_VERIFY = 0, 2, 3, 4, 5
RUN_KEYS = {"manifest", "manifests", "out", "ckpt", "k", "jobs"}


class ConfigError(ValueError):
    pass


class CliExit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _convert(value: str, type_name: str):
    optional = "None" in type_name
    if optional and value.strip().lower() in ("", "none"):
        return None
    base = type_name.replace("| None", "").strip()
    if base == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if base == "int":
        return int(value)
    if base == "float":
        return float(value)
    return value.strip()


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in H.TrainConfig.field_types() and key not in RUN_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def build_train_config(file_values: dict[str, str], args: argparse.Namespace) -> H.TrainConfig:
    types = H.TrainConfig.field_types()
    kwargs = {}
    for key, raw in file_values.items():
        if key in types:
            try:
                kwargs[key] = _convert(raw, types[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
    for key in types:
        flag = getattr(args, key, None)
        if flag is not None:
            kwargs[key] = flag
    try:
        return H.TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training options (override the config file)")
    helps = {
        "max_epochs": "epoch limit (default 200)",
        "batch_size": "samples per Adam step (default 32)",
        "lr": "Adam learning rate (default 1e-3)",
        "beta1": "Adam first-moment decay (default 0.9)",
        "beta2": "Adam second-moment decay (default 0.999)",
        "eps": "Adam epsilon (default 1e-8)",
        "patience": "early-stopping patience in epochs (default 10)",
        "val_fraction": "fraction of training subjects held out for validation (default 0.1)",
        "mirror": "mirror-augment the training data: true/false (default true)",
        "seed": "random seed (default 0)",
        "overfit": "validate on the training set itself: true/false (default false)",
        "max_steps": "stop after this many Adam steps",
        "target_mae": "stop once validation MAE drops below this many degrees",
        "zero_head_pose": "feed zeros instead of the head pose: true/false (default false)",
        "precision": "single or double (default single)",
    }
    for f in fields(H.TrainConfig):
        base = f.type.replace("| None", "").strip()
        conv = (lambda v, t=f.type: _convert(v, t)) if base == "bool" else \
            {"int": int, "float": float}.get(base, str)
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None,
                       metavar=base.upper(), help=helps[f.name])


def _run_value(args, file_values, key, conv=str, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in file_values:
        try:
            return conv(file_values[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return default


def _load_samples(path) -> list[D.GazeSample]:
    if path is None:
        raise ConfigError("no manifest given")
    if not Path(path).is_file():
        raise ConfigError(f"manifest not found: {path}")
    try:
        return D.load_manifest(path)
    except D.ManifestError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _load_ckpt(path) -> M.GazeNet:
    try:
        return M.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    except M.CheckpointError as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from exc


def _out_dir(path) -> Path:
    if path is None:
        raise ConfigError("no output location given (--out)")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliExit(EXIT_IO, f"cannot create output directory {out}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# commands

def cmd_synth_gen(args) -> int:
    if args.chars < 0:
        raise ConfigError("--chars must be >= 0")
    chars = synth.make_characters(args.chars, args.seed, args.preset)
    grid = synth.SweepGrid() if args.grid == "default" else synth.SweepGrid.coarse()
    try:
        rows = synth.generate_dataset(chars, grid, args.out, seed=args.seed)
    except OSError as exc:
        raise CliExit(EXIT_IO, str(exc)) from exc
    print(f"{len(rows)} rows")
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    config = build_train_config(file_values, args)
    manifest = _run_value(args, file_values, "manifest")
    ckpt = _run_value(args, file_values, "out") or _run_value(args, file_values, "ckpt")
    if ckpt is None:
        raise ConfigError("no checkpoint path given (--out)")
    samples = _load_samples(manifest)
    try:
        result = H.train(samples, config)
    except H.TrainingError as exc:
        raise CliExit(EXIT_TRAIN, f"training failed: {exc}") from exc
    ckpt = Path(ckpt)
    history = Path(args.history) if args.history else ckpt.with_suffix(".history.csv")
    try:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        M.save(result.net, ckpt)
        H.write_history(history, result.history)
    except OSError as exc:
        raise CliExit(EXIT_IO, f"cannot write outputs: {exc}") from exc
    best = min(h["val_mae"] for h in result.history)
    print(f"final validation MAE: {best:.4f} deg (epoch {result.best_epoch}, {result.steps} steps)")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_ckpt(args.ckpt)
    samples = _load_samples(args.manifest)
    if not samples:
        raise ConfigError(f"manifest {args.manifest} has no rows")
    report = H.evaluate(net, samples)
    try:
        H.write_eval_report(_out_dir(args.out), report)
    except OSError as exc:
        raise CliExit(EXIT_IO, str(exc)) from exc
    print(f"MAE {report.mae_mean_deg:.4f} +- {report.mae_std_deg:.4f} deg "
          f"(max {report.max_error_deg:.4f}, n={report.n_samples})")
    return EXIT_OK


def cmd_crossval(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    config = build_train_config(file_values, args)
    samples = _load_samples(_run_value(args, file_values, "manifest"))
    k = _run_value(args, file_values, "k", int, 4)
    jobs = _run_value(args, file_values, "jobs", int, 1)
    out = _out_dir(_run_value(args, file_values, "out"))
    try:
        cv = H.cross_validate(samples, k, config, jobs=jobs)
    except H.TrainingError as exc:
        raise CliExit(EXIT_TRAIN, f"training failed: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        H.write_cv_report(out, cv)
    except OSError as exc:
        raise CliExit(EXIT_IO, str(exc)) from exc
    for i, r in enumerate(cv.folds, start=1):
        print(f"fold {i}: MAE {r.mae_mean_deg:.4f} +- {r.mae_std_deg:.4f} deg (n={r.n_samples})")
    print(f"pooled: MAE {cv.pooled.mae_mean_deg:.4f} +- {cv.pooled.mae_std_deg:.4f} deg "
          f"(n={cv.pooled.n_samples})")
    return EXIT_OK


def _dataset_name(entry: str) -> tuple[str, str]:
    if "=" in entry:
        name, path = entry.split("=", 1)
        return name, path
    return "", entry


def cmd_matrix(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    config = build_train_config(file_values, args)
    entries = args.manifests or file_values.get("manifests", "").split()
    if len(entries) < 2:
        raise ConfigError("the matrix needs at least two manifests")
    named = {}
    for entry in entries:
        name, path = _dataset_name(entry)
        samples = _load_samples(path)
        if not name:
            domains = {s.domain for s in samples}
            name = domains.pop() if len(domains) == 1 else Path(path).parent.name
        if name in named:
            raise ConfigError(f"dataset name {name!r} given twice; use NAME=PATH")
        named[name] = samples
    k = _run_value(args, file_values, "k", int, 4)
    jobs = _run_value(args, file_values, "jobs", int, 1)
    out = _out_dir(_run_value(args, file_values, "out"))
    try:
        result = H.cross_dataset_matrix(named, config, k=k, jobs=jobs)
    except H.TrainingError as exc:
        raise CliExit(EXIT_TRAIN, f"training failed: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        H.write_matrix_report(out, result.report)
    except OSError as exc:
        raise CliExit(EXIT_IO, str(exc)) from exc
    rep = result.report
    print("train \\ test".ljust(14) + "".join(n.rjust(18) for n in rep.names))
    for tr, row in zip(rep.names, rep.cells):
        print(tr.ljust(14) + "".join(
            f"{r.mae_mean_deg:8.2f} +-{r.mae_std_deg:6.2f}  " for r in row))
    return EXIT_OK


def cmd_predict(args) -> int:
    net = _load_ckpt(args.ckpt)
    try:
        head = tuple(float(v) for v in args.head.split(","))
    except ValueError as exc:
        raise ConfigError(f"--head must be three comma-separated degrees: {args.head!r}") from exc
    if len(head) != 3 or not all(np.isfinite(head)):
        raise ConfigError(f"--head must be three finite comma-separated degrees: {args.head!r}")
    try:
        left, right = D.read_png(args.left), D.read_png(args.right)
        sample = D.GazeSample(left, right, head, (0.0, 0.0), "predict")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot use input images: {exc}") from exc
    eyes, pose = D.preprocess(sample)
    out, _ = M.forward(net, eyes, pose)
    pitch, yaw = (float(v) + 0.0 for v in out)
    print(f"pitch={pitch:.4f} yaw={yaw:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, trials=args.trials, spot=args.spot)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazecnn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic head-pose x gaze sweep dataset")
    p.add_argument("--chars", type=int, required=True, help="number of characters")
    p.add_argument("--out", required=True, help="output directory (gets manifest.csv + PNGs)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default="bright",
                   help="lighting preset (default bright)")
    p.add_argument("--grid", choices=("default", "coarse"), default="default",
                   help="sweep grid: default = 153 gaze x 25 head poses; coarse = 45 x 9")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a network and save the best checkpoint")
    p.add_argument("--manifest", help="training manifest CSV")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("--history", help="per-epoch history CSV (default: next to the checkpoint)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="test manifest CSV")
    p.add_argument("--out", required=True, help="report directory (eval.csv, eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="subject-disjoint k-fold cross-validation")
    p.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="report directory (crossval.csv, crossval.json)")
    p.add_argument("--k", type=int, default=None, help="number of folds (default 4)")
    p.add_argument("--jobs", type=int, default=None, help="folds trained in parallel (default 1)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("matrix", help="cross-dataset train/test matrix (adds a combined row)")
    p.add_argument("--manifests", nargs="+", metavar="[NAME=]PATH", help="two or more manifests")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="report directory (matrix.csv, matrix.json)")
    p.add_argument("--k", type=int, default=None,
                   help="held-out share is one of k subject folds (default 4)")
    p.add_argument("--jobs", type=int, default=None, help="rows trained in parallel (default 1)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("predict", help="predict gaze for one eye pair")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--left", required=True, help="left eye PNG")
    p.add_argument("--right", required=True, help="right eye PNG")
    p.add_argument("--head", required=True, help="head pitch,yaw,roll in degrees")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--trials", type=int, default=50, help="random trials per kernel (default 50)")
    p.add_argument("--spot", type=int, default=200,
                   help="parameters spot-checked on the full network (default 200)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
