"""Command-line entry point: dataset generation, training, evaluation,
ablations, plot-data export, and gradient checks.

Every subcommand accepts `--config FILE` (YAML, sections documented in
config.py) and repeatable `-o section.field=value` overrides. Runs log
the resolved configuration and all seeds; exit codes are 0 on success,
1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import primitive_grad_errors
from .config import RunConfig, dump_config, load_config
from .evaluation import (
    BcRunner,
    MpcRunner,
    PidRunner,
    SequenceRunner,
    evaluate_suite,
    run_ablations,
    write_report,
)
from .mpc import NoiseConfig

log = logging.getLogger("proxlab")

STATE_CHANNELS = ("rx", "ry", "rz", "vx", "vy", "vz",
                  "qw", "qx", "qy", "qz", "wx", "wy", "wz")


def _common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None,
                   help="YAML run configuration file")
    p.add_argument("-o", "--override", action="append", default=[],
                   metavar="SECTION.FIELD=VALUE",
                   help="dotted-key configuration override (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxlab",
        description="Desk-scale spacecraft proximity-operations laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="generate the MPC expert demonstration dataset")
    _common_args(p)
    p.add_argument("--n-traj", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train the sequence-prediction policy")
    _common_args(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-bc", help="train the behavioral-cloning baseline")
    _common_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="run the evaluation suite")
    _common_args(p)
    p.add_argument("--policies", default="mpc,pid",
                   help="comma list from: mpc, pid, bc, seq, seq-noagg")
    p.add_argument("--noise", choices=("off", "demo", "robust"), default="off")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="sequence-policy checkpoint (seq, seq-noagg)")
    p.add_argument("--bc-checkpoint", type=Path, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--series-dir", type=Path, default=None,
                   help="also write per-episode time-series CSVs here")

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    _common_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise", choices=("off", "demo", "robust"), default="off")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lengths", default=None,
                   help="comma list of prediction-sequence lengths")

    p = sub.add_parser("export-plots", help="export per-channel plot-data series")
    _common_args(p)
    p.add_argument("--dataset", type=Path, default=None,
                   help="demonstration dataset directory")
    p.add_argument("--series-dir", type=Path, default=None,
                   help="directory of per-episode CSVs from `eval --series-dir`")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every primitive")
    _common_args(p)
    p.add_argument("--trials", type=int, default=5)

    return parser


def _setup(args) -> RunConfig:
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config, args.override)
    for attr, key in (("seed", "seed"), ("n_traj", "n_traj"),
                      ("steps", "demo_steps")):
        if getattr(args, attr, None) is not None:
            setattr(cfg.run, key, getattr(args, attr))
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _noise_for(label: str, cfg: RunConfig) -> NoiseConfig:
    if label == "off":
        return cfg.noise.disabled()
    if label == "demo":
        return cfg.noise
    return cfg.robustness_noise


def cmd_gen_demos(args) -> int:
    from .dataset import generate_demonstrations, persist_dataset

    cfg = _setup(args)
    log.info("generating %d trajectories x %d steps, seed %d",
             cfg.run.n_traj, cfg.run.demo_steps, cfg.run.seed)
    dataset = generate_demonstrations(
        n_traj=cfg.run.n_traj, length=cfg.run.demo_steps, noise=cfg.noise,
        global_seed=cfg.run.seed, orbit=cfg.orbit, params=cfg.spacecraft,
        target=cfg.target, mpc_cfg=cfg.mpc,
        progress=lambda i, n: log.info("trajectory %d/%d", i, n))
    manifest = persist_dataset(dataset, args.out)
    dump_config(cfg, Path(args.out) / "run_config.yaml")
    log.info("wrote %s", manifest)
    return 0


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .policy import train

    cfg = _setup(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    policy = train(dataset, cfg.model, seed=cfg.run.seed, out_dir=out)
    path = policy.save(out / "policy.ckpt")
    dump_config(cfg, out / "run_config.yaml")
    log.info("wrote %s", path)
    return 0


def cmd_train_bc(args) -> int:
    from .baselines import bc_train
    from .dataset import load_dataset

    cfg = _setup(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    policy = bc_train(dataset, cfg.bc, seed=cfg.run.seed)
    path = policy.save(out / "bc.ckpt")
    dump_config(cfg, out / "run_config.yaml")
    log.info("wrote %s", path)
    return 0


def _build_factories(names, args, cfg: RunConfig) -> tuple[dict, dict]:
    """Map policy names to runner factories; unloadable ones are skipped."""
    factories, skipped = {}, {}

    def seq_policy():
        from .policy import Policy
        if args.checkpoint is None or not Path(args.checkpoint).exists():
            raise FileNotFoundError(
                f"sequence-policy checkpoint not found: {args.checkpoint}")
        return Policy.load(args.checkpoint)

    for name in names:
        try:
            if name == "mpc":
                factories[name] = (lambda: MpcRunner(cfg.target, cfg.orbit,
                                                     cfg.spacecraft, cfg.mpc))
            elif name == "pid":
                factories[name] = (lambda: PidRunner(cfg.target, cfg.orbit.dt, cfg.pid))
            elif name == "bc":
                from .baselines import BcPolicy
                if args.bc_checkpoint is None or not Path(args.bc_checkpoint).exists():
                    raise FileNotFoundError(
                        f"BC checkpoint not found: {args.bc_checkpoint}")
                policy = BcPolicy.load(args.bc_checkpoint)
                factories[name] = (lambda p=policy: BcRunner(p))
            elif name == "seq":
                policy = seq_policy()
                factories[name] = (lambda p=policy: SequenceRunner(
                    p, kappa=cfg.aggregation.kappa))
            elif name == "seq-noagg":
                policy = seq_policy()
                factories[name] = (lambda p=policy: SequenceRunner(
                    p, use_aggregation=False))
            else:
                raise ValueError(f"unknown policy name {name!r}; "
                                 "choose from mpc, pid, bc, seq, seq-noagg")
        except (FileNotFoundError, ValueError) as exc:
            if isinstance(exc, ValueError) and "unknown policy" in str(exc):
                raise
            log.warning("skipping %s: %s", name, exc)
            skipped[name] = str(exc)
    return factories, skipped


def cmd_eval(args) -> int:
    cfg = _setup(args)
    names = [n.strip() for n in args.policies.split(",") if n.strip()]
    factories, skipped = _build_factories(names, args, cfg)
    noise = _noise_for(args.noise, cfg)
    steps = args.steps if args.steps is not None else cfg.run.eval_steps
    log.info("evaluating %s on seeds %s for %d steps (noise=%s)",
             sorted(factories), cfg.run.eval_seeds, steps, args.noise)
    report = evaluate_suite(
        factories, noise, seeds=cfg.run.eval_seeds, steps=steps,
        orbit=cfg.orbit, params=cfg.spacecraft, target=cfg.target,
        series_dir=args.series_dir)
    report["skipped"] = skipped
    report["config"] = cfg.to_dict()
    path = write_report(report, args.out)
    log.info("wrote %s", path)
    return 0


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .dataset import load_dataset
    from .evaluation import ABLATION_LENGTHS

    cfg = _setup(args)
    dataset = load_dataset(args.data)
    lengths = (tuple(int(x) for x in args.lengths.split(","))
               if args.lengths else ABLATION_LENGTHS)
    noise = _noise_for(args.noise, cfg)
    steps = args.steps if args.steps is not None else cfg.run.eval_steps
    model_cfg = replace(cfg.model, kappa=cfg.aggregation.kappa)
    out = Path(args.out)
    report = run_ablations(
        dataset, model_cfg, noise, seed=cfg.run.seed, seeds=cfg.run.eval_seeds,
        steps=steps, orbit=cfg.orbit, params=cfg.spacecraft, target=cfg.target,
        lengths=lengths, out_dir=out)
    report["config"] = cfg.to_dict()
    path = write_report(report, out / "ablations.json")
    dump_config(cfg, out / "run_config.yaml")
    log.info("wrote %s", path)
    return 0


def _write_series(path: Path, header: list, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_dataset_channels(dataset_dir: Path, out_dir: Path) -> list[Path]:
    """One CSV per (trajectory, state channel) from the expert dataset."""
    from .dataset import load_dataset

    dataset = load_dataset(dataset_dir)
    paths = []
    for i, demo in enumerate(dataset.demos):
        states = demo.true_states
        for c, channel in enumerate(STATE_CHANNELS):
            path = out_dir / f"traj{i:03d}_{channel}.csv"
            _write_series(path, ["t", channel],
                          [[t, repr(states[t, c])] for t in range(states.shape[0])])
            paths.append(path)
    return paths


def export_eval_channels(series_dir: Path, out_dir: Path) -> list[Path]:
    """One CSV per (method, state channel) from `eval --series-dir` output.

    Episode files are named `<method>_seed<seed>.csv`; each output file has
    one column per seed so figure code can overlay or average them.
    """
    groups: dict[str, list[tuple[int, Path]]] = {}
    for path in sorted(Path(series_dir).glob("*_seed*.csv")):
        method, _, tail = path.stem.rpartition("_seed")
        groups.setdefault(method, []).append((int(tail), path))
    if not groups:
        raise FileNotFoundError(f"no *_seed*.csv episode files in {series_dir}")
    paths = []
    for method, entries in sorted(groups.items()):
        entries.sort()
        tables = {}
        for seed, path in entries:
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                tables[seed] = list(reader)
        for channel in STATE_CHANNELS:
            col = header.index(f"s_{channel}")
            n = min(len(rows) for rows in tables.values())
            out = out_dir / f"{method}_{channel}.csv"
            rows = [[t] + [tables[seed][t][col] for seed, _ in entries]
                    for t in range(n)]
            _write_series(out, ["t"] + [f"seed{seed}" for seed, _ in entries], rows)
            paths.append(out)
    return paths


def cmd_export_plots(args) -> int:
    _setup(args)
    if args.dataset is None and args.series_dir is None:
        raise ValueError("export-plots needs --dataset and/or --series-dir")
    written = []
    if args.dataset is not None:
        written += export_dataset_channels(args.dataset, Path(args.out))
    if args.series_dir is not None:
        written += export_eval_channels(args.series_dir, Path(args.out))
    log.info("wrote %d series files under %s", len(written), args.out)
    return 0


def cmd_grad_check(args) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    errors = primitive_grad_errors(trials=args.trials)
    worst = 0.0
    for name in sorted(errors):
        print(f"{name:16s} {errors[name]:.3e}")
        worst = max(worst, errors[name])
    print(f"{'max':16s} {worst:.3e}")
    return 0 if worst < 1e-4 else 1


_COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "train-bc": cmd_train_bc,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-plots": cmd_export_plots,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with a clear message
        log.error("%s", exc, exc_info=getattr(args, "verbose", False))
        return 1


if __name__ == "__main__":
    sys.exit(main())
