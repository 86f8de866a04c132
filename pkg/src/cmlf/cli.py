"""Command line entry point: ``cmlf {generate-data,train,infer,evaluate,experiment}``.

Exit codes: 0 success, 2 usage error (bad flags, missing inputs, existing run
directory without ``--overwrite``), 3 contract violation, 4 training divergence.
Each verb writes a ``run.json`` replay manifest into its run directory recording the
argument vector and the resolved configuration, enough to replay the run.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetConfig, export_dataset, generate_dataset, load_dataset
from .errors import CMLFError, ContractViolation, DatasetLoadError, CheckpointError, TrainingDivergence
from .evaluation import check_compatible, evaluate_model, perturbation_seed, rollout_latents
from .experiment import ExperimentConfig, compare, render_figures, run_experiment, write_comparison
from .model import load_checkpoint
from .plotting import training_curves
from .simulator import PerturbationSpec, perturb
from .training import TrainConfig, train

log = logging.getLogger("cmlf")

EXIT_USAGE, EXIT_CONTRACT, EXIT_DIVERGED = 2, 3, 4
RUN_ROOT_ENV = "CMLF_RUN_ROOT"
RUN_MANIFEST = "run.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def parse_value(text: str):
    """JSON if it parses (numbers, bools, lists), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, pairs) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested dicts."""
    d = json.loads(json.dumps(d))
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(value)
    return d


def run_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / default_name


@contextlib.contextmanager
def claim_run_dir(path: Path, overwrite: bool):
    """Create ``path`` for writing, holding an exclusive lock file while in use."""
    if path.exists() and (path / RUN_MANIFEST).exists() and not overwrite:
        raise UsageError(f"{path} already holds a run; pass --overwrite to replace it")
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractViolation(f"{path} is locked by another invocation ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(path: Path, verb: str, argv, config: dict, inputs: dict | None = None):
    manifest = {"tool": "cmlf", "version": __version__, "verb": verb, "argv": list(argv),
                "config": config, "inputs": inputs or {}}
    (path / RUN_MANIFEST).write_text(json.dumps(manifest, indent=1))


def require_path(p, what: str) -> Path:
    path = Path(p)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def read_dataset(path) -> object:
    path = require_path(path, "dataset directory")
    return load_dataset(path)


# --------------------------------------------------------------------------- verbs


def cmd_generate_data(args, argv) -> Path:
    base = DatasetConfig.desk(seed=args.seed) if args.profile == "desk" else DatasetConfig(seed=args.seed)
    cfg = DatasetConfig.from_dict(apply_overrides(base.to_dict(), args.set))
    out = run_dir(args, f"data-{args.profile}-{args.seed}")
    with claim_run_dir(out, args.overwrite):
        dataset = generate_dataset(cfg)
        export_dataset(dataset, out)
        write_manifest(out, "generate-data", argv, cfg.to_dict())
    print(f"wrote {len(dataset)} trajectories to {out}")
    return out


def cmd_train(args, argv) -> Path:
    dataset = read_dataset(args.data)
    base = TrainConfig(variant=args.variant, seed=args.seed, learning_rate=args.lr, epochs=args.epochs,
                       batch_size=args.batch_size, cm_activation_fraction=args.cm_activation)
    cfg = TrainConfig(**apply_overrides(base.to_dict(), args.set))
    out = run_dir(args, f"train-{cfg.variant}-{cfg.seed}")
    with claim_run_dir(out, args.overwrite):
        result = train(cfg, dataset, out_dir=out, progress=args.verbose)
        if args.figures:
            training_curves(result.log, out / "figures" / "loss.png")
        write_manifest(out, "train", argv, cfg.to_dict(), {"data": str(Path(args.data).resolve())})
    print(f"trained {cfg.variant} for {cfg.epochs} epochs; best val epoch {result.best_epoch}; outputs in {out}")
    return out


def cmd_infer(args, argv) -> Path:
    ckpt = require_path(args.checkpoint, "checkpoint")
    dataset = read_dataset(args.data)
    model, _ = load_checkpoint(ckpt)
    check_compatible(model, dataset)
    trajs = dataset.split(args.split) if args.split != "all" else list(dataset.trajectories)
    if args.sigma or args.c:
        spec = PerturbationSpec(args.sigma, args.c, args.mode)
        trajs = [perturb(t, spec, perturbation_seed(t, args.sigma, args.c)) for t in trajs]
    out = run_dir(args, f"infer-{ckpt.stem}-{args.split}")
    with claim_run_dir(out, args.overwrite):
        ro = rollout_latents(model, trajs)
        np.savez(out / "rollout.npz", traj_ids=np.asarray(ro.traj_ids), y_V=ro.y_V, y_T=ro.y_T,
                 z_V=ro.z_V, z_T=ro.z_T, y_V_logvar=ro.y_V_logvar, y_T_logvar=ro.y_T_logvar)
        write_manifest(out, "infer", argv, {"split": args.split, "sigma": args.sigma, "c": args.c,
                                            "mode": args.mode},
                       {"checkpoint": str(ckpt.resolve()), "data": str(Path(args.data).resolve())})
    print(f"rolled out {len(trajs)} trajectories to {out / 'rollout.npz'}")
    return out


def cmd_evaluate(args, argv) -> Path:
    dataset = read_dataset(args.data)
    ckpts = [require_path(c, "checkpoint") for c in args.checkpoint]
    out = run_dir(args, "evaluate")
    with claim_run_dir(out, args.overwrite):
        reports = {}
        for ckpt in ckpts:
            model, payload = load_checkpoint(ckpt)
            label = args.label[len(reports)] if args.label and len(args.label) > len(reports) \
                else model.variant.value
            if label in reports:
                raise UsageError(f"duplicate variant label {label!r}; pass --label for each checkpoint")
            rep = evaluate_model(model, dataset, seed=args.seed, sweep=not args.no_sweep,
                                 classify=not args.no_classify, perturb_mode=args.mode)
            rep.write_json(out / f"report_{label}.json")
            rep.write_csv(out / f"report_{label}.csv")
            reports[label] = {args.seed: rep}
        comparison = compare(reports)
        write_comparison(comparison, out)
        if not args.no_figures:
            render_figures(comparison, out / "figures", shade=args.shade)
        write_manifest(out, "evaluate", argv, {"seed": args.seed, "sweep": not args.no_sweep,
                                               "classify": not args.no_classify, "mode": args.mode},
                       {"checkpoints": [str(c.resolve()) for c in ckpts], "data": str(Path(args.data).resolve())})
    print(f"evaluated {len(ckpts)} checkpoint(s); report in {out}")
    return out


def cmd_experiment(args, argv) -> Path:
    base = ExperimentConfig()
    if args.config:
        raw = json.loads(require_path(args.config, "experiment config").read_text())
        base = ExperimentConfig.from_dict(raw.get("config", raw) if raw.get("verb") == "experiment" else raw)
    cfg_dict = base.to_dict()
    if args.seeds:
        cfg_dict["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.variants:
        wanted = args.variants.split(",")
        unknown = set(wanted) - set(cfg_dict["variants"])
        if unknown:
            raise UsageError(f"unknown variant labels {sorted(unknown)}")
        cfg_dict["variants"] = {k: cfg_dict["variants"][k] for k in wanted}
    cfg = ExperimentConfig.from_dict(apply_overrides(cfg_dict, args.set))
    out = run_dir(args, "experiment")
    with claim_run_dir(out, args.overwrite):
        for stale in ("figures",):
            shutil.rmtree(out / stale, ignore_errors=True)
        write_manifest(out, "experiment", argv, cfg.to_dict())
        run_experiment(cfg, out, progress=args.verbose)
    print(f"experiment over seeds {cfg.seeds} and variants {list(cfg.variants)} written to {out}")
    return out


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmlf", description="Cross-modal latent filter: data, training, evaluation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--out", help=f"run directory (default: ${RUN_ROOT_ENV}/<name>, else ./runs/<name>)")
        p.add_argument("--overwrite", action="store_true", help="allow writing into an existing run directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("generate-data", help="simulate and export a dataset")
    common(p)
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dataset config field")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one variant on an exported dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("baseline", "joint", "wo_cm", "w_cm"), default="w_cm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--cm-activation", type=float, default=0.25, help="fraction of epochs before the cm gate opens")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a training config field")
    p.add_argument("--figures", action="store_true", help="also plot the loss curves")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="roll out a checkpoint and save filtered latents")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "surprise", "all"))
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--mode", choices=("zero_fill", "missing_flag"), default="zero_fill")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="probe one or more checkpoints; writes report, CSV and figures")
    common(p)
    p.add_argument("--checkpoint", required=True, action="append")
    p.add_argument("--label", action="append", help="report label per checkpoint (default: variant name)")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("zero_fill", "missing_flag"), default="zero_fill")
    p.add_argument("--no-sweep", action="store_true")
    p.add_argument("--no-classify", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--shade", type=float, default=1.0, help="curve band in std units (0.1 for published style)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="all variants x seeds, comparison report and figures")
    common(p)
    p.add_argument("--config", help="experiment config JSON (or a previous run's run.json)")
    p.add_argument("--seeds", help="comma list, e.g. 0,1,2")
    p.add_argument("--variants", help="comma list of variant labels")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a field, dotted for nesting (train.epochs=50)")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args, argv)
    except UsageError as e:
        print(f"cmlf {args.verb}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as e:
        print(f"cmlf {args.verb}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetLoadError, CheckpointError) as e:
        print(f"cmlf {args.verb}: cannot read input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CMLFError, ContractViolation) as e:
        print(f"cmlf {args.verb}: contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
