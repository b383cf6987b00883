"""Operator surface: generate worlds and datasets, run the training and
evaluation protocols, and emit reports, all from flat config files.

Every command echoes its fully materialized config into the output directory,
confines its side effects to that directory, and is a deterministic function
of the echoed config. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, echo_config, load_config, with_overrides
from .errors import ConfigError, DataError
from .tensor import GraphError, NonFiniteError, ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mindalign",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, subject=False, sessions=False):
        p.add_argument("--config", type=Path, default=None,
                       help="flat dotted-key config file (defaults if omitted)")
        p.add_argument("--out", type=Path, required=True,
                       help="output directory (all side effects land here)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        if data:
            p.add_argument("--data", type=Path, default=None, help="dataset directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, default=None)
        if subject:
            p.add_argument("--subject", type=str, default=None)
        if sessions:
            p.add_argument("--sessions", type=str, default=None)

    common(sub.add_parser("gen-world", help="write a world manifest"))
    common(sub.add_parser("gen-data", help="simulate and save all subject datasets"))
    common(sub.add_parser("pretrain", help="multi-subject pretraining"), data=True)
    common(sub.add_parser("finetune", help="fine-tune on a held-out subject"),
           data=True, checkpoint=True, subject=True, sessions=True)
    common(sub.add_parser("scratch", help="single-subject training from scratch"),
           data=True, subject=True, sessions=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           data=True, checkpoint=True, subject=True)
    scaling = sub.add_parser("scaling", help="data-scaling experiment")
    common(scaling, data=True, subject=True)
    scaling.add_argument("--sessions", type=str, default=None,
                         help="comma-separated session grid")
    scaling.add_argument("--arms", type=str, default=None,
                         help="comma-separated subset of pretrained,scratch")
    ablate = sub.add_parser("ablate", help="component ablation sweep")
    common(ablate, data=True, subject=True, sessions=True)
    ablate.add_argument("--variants", type=str, default=None)
    return parser


def _resolve(args) -> RunConfig:
    rc = load_config(args.config)
    kw = {"command": args.command, "out": args.out}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "data", None):
        kw["data"] = args.data
    if getattr(args, "checkpoint", None):
        kw["checkpoint"] = args.checkpoint
    if getattr(args, "subject", None):
        kw["subject"] = args.subject
    sessions = getattr(args, "sessions", None)
    if sessions is not None and args.command != "scaling":
        try:
            kw["sessions"] = int(sessions)
        except ValueError:
            raise ConfigError(f"--sessions: expected an integer, got {sessions!r}")
    if args.command == "scaling":
        if sessions is not None:
            try:
                kw["scaling_sessions"] = tuple(int(t) for t in sessions.split(","))
            except ValueError:
                raise ConfigError(f"--sessions: expected integers, got {sessions!r}")
        if getattr(args, "arms", None):
            kw["scaling_arms"] = tuple(t for t in args.arms.split(",") if t)
    if args.command == "ablate" and getattr(args, "variants", None):
        kw["ablate_variants"] = tuple(t for t in args.variants.split(",") if t)
    return with_overrides(rc, **kw)


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(echo_config(rc), encoding="utf-8")
    return out


def _load_data(rc: RunConfig):
    from .world import load_dataset_dir
    if not rc.paths["data"]:
        raise ConfigError("this command needs --data (or paths.data)")
    world, datasets = load_dataset_dir(Path(rc.paths["data"]))
    if world.config != rc.world:
        raise DataError("dataset directory was generated with a different "
                        "world block than this config")
    return world, datasets


def _load_checkpoint(rc: RunConfig):
    from .model import load_checkpoint
    if not rc.paths["checkpoint"]:
        raise ConfigError("this command needs --checkpoint (or paths.checkpoint)")
    return load_checkpoint(Path(rc.paths["checkpoint"]))


def cmd_gen_world(rc: RunConfig) -> int:
    from .world import generate_world, save_world_manifest
    out = _out_dir(rc)
    generate_world(rc.world, rc.world_seed)  # validates the block
    save_world_manifest(rc.world, rc.world_seed, out / "world.txt")
    return EXIT_OK


def cmd_gen_data(rc: RunConfig) -> int:
    from .world import generate_dataset, generate_world, normalize, save_dataset_dir
    from . import seeds
    out = _out_dir(rc)
    world = generate_world(rc.world, rc.world_seed)
    datasets = {}
    for sid in world.subject_ids:
        raw = generate_dataset(world, sid,
                               seed=seeds.derive(rc.seed, "dataset", sid))
        datasets[sid] = normalize(raw)
    save_dataset_dir(out, world, datasets)
    return EXIT_OK


def cmd_pretrain(rc: RunConfig) -> int:
    from .model import save_checkpoint
    from .train import pretrain
    out = _out_dir(rc)
    world, datasets = _load_data(rc)
    held = rc.train.held_out_subject
    pre = {sid: ds for sid, ds in datasets.items() if sid != held}
    mp, log = pretrain(world, pre, rc.train, rc.model)
    save_checkpoint(mp, out / "checkpoint.me2c")
    log.checkpoint_ref = "checkpoint.me2c"
    log.write_csv(out / "trainlog.csv")
    return EXIT_OK


def cmd_finetune(rc: RunConfig) -> int:
    from .model import save_checkpoint
    from .train import finetune
    out = _out_dir(rc)
    world, datasets = _load_data(rc)
    mp = _load_checkpoint(rc)
    sid = rc.train.held_out_subject
    if sid not in datasets:
        raise DataError(f"subject {sid!r} not in dataset directory")
    mp, log = finetune(mp, world, datasets[sid], rc.train.n_finetune_sessions,
                       rc.train)
    save_checkpoint(mp, out / "checkpoint.me2c")
    log.checkpoint_ref = "checkpoint.me2c"
    log.write_csv(out / "trainlog.csv")
    return EXIT_OK


def cmd_scratch(rc: RunConfig) -> int:
    from .model import save_checkpoint
    from .train import train_from_scratch
    out = _out_dir(rc)
    world, datasets = _load_data(rc)
    sid = rc.train.held_out_subject
    if sid not in datasets:
        raise DataError(f"subject {sid!r} not in dataset directory")
    mp, log = train_from_scratch(world, datasets[sid],
                                 rc.train.n_finetune_sessions, rc.train, rc.model)
    save_checkpoint(mp, out / "checkpoint.me2c")
    log.checkpoint_ref = "checkpoint.me2c"
    log.write_csv(out / "trainlog.csv")
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    from . import seeds
    from .evaluate import evaluate_model, reconstruct, save_image
    out = _out_dir(rc)
    world, datasets = _load_data(rc)
    mp = _load_checkpoint(rc)
    sid = rc.train.held_out_subject
    if sid not in datasets:
        raise DataError(f"subject {sid!r} not in dataset directory")
    if sid not in mp.subjects:
        raise DataError(f"checkpoint has no ridge layer for subject {sid!r}")
    ds = datasets[sid]
    report = evaluate_model(mp, world, ds, rc.eval)
    report.save(out / "report.txt")
    # the same seeded reconstructions the metrics were computed from
    recs = reconstruct(mp, world, ds.shared_voxels(), sid,
                       seed=seeds.derive(rc.eval.seed, "recon"))
    rec_dir = out / "recons"
    rec_dir.mkdir(exist_ok=True)
    truths = world.images[ds.image_ids[ds.is_shared]]
    for i in range(recs["final"].shape[0]):
        save_image(rec_dir / f"recon_{i:03d}.ppm", recs["final"][i])
        save_image(rec_dir / f"truth_{i:03d}.ppm", truths[i])
    return EXIT_OK


def cmd_scaling(rc: RunConfig) -> int:
    from .evaluate import run_scaling
    out = _out_dir(rc)
    world, datasets = _load_data(rc)
    sid = rc.train.held_out_subject
    result = run_scaling(world, datasets, sid, rc.scaling_sessions,
                         rc.scaling_arms, rc.train, rc.model, rc.eval)
    for arm, curve in sorted(result.arms.items()):
        for k, report in sorted(curve.items()):
            report.save(out / f"report_{arm}_k{k}.txt")
    result.baseline.save(out / "report_baseline.txt")
    result.anchor.save(out / "report_anchor.txt")
    result.write_csv(out / "curve.csv")
    return EXIT_OK


def cmd_ablate(rc: RunConfig) -> int:
    from .train import ablation_run
    out = _out_dir(rc)
    world, datasets = _load_data(rc)
    sid = rc.train.held_out_subject
    reports = ablation_run(world, datasets[sid], rc.train.n_finetune_sessions,
                           rc.train, rc.model, rc.eval,
                           variants=rc.ablate_variants)
    import csv
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "metric_name", "value"])
        for variant, report in reports.items():
            safe = variant.replace("+", "_")
            report.save(out / f"report_{safe}.txt")
            for name, value in sorted(report.metrics.items()):
                writer.writerow([variant, name, repr(float(value))])
    return EXIT_OK


_DISPATCH = {
    "gen-world": cmd_gen_world,
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "scratch": cmd_scratch,
    "eval": cmd_eval,
    "scaling": cmd_scaling,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        rc = _resolve(args)
        if not rc.paths["out"]:
            raise ConfigError("--out is required")
        return _DISPATCH[args.command](rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, ShapeError, GraphError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
