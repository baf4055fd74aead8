"""``locoforge`` command line: demo-gen, train, eval, validate."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluate as ev
from . import policy as pol
from . import rewards
from .demo import (DemoFormatError, DemoValidationError, IKError, load_demo, save_demo,
                   synthesize_bound_demo, synthesize_hop_demo)
from .dynamics import PlanarModel
from .env import read_trace, context_from_row, write_trace

log = logging.getLogger("locoforge")


class CommandError(RuntimeError):
    pass


def _workers(n):
    return n if n else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# demo-gen


def cmd_demo_gen(args) -> int:
    model = PlanarModel()
    if args.task == "hopping":
        demo = synthesize_hop_demo(args.apex, args.stance_depth, args.period or 0.5, args.dt, model)
    else:
        demo = synthesize_bound_demo(args.amplitude, args.hop_height, args.period or 0.4, args.dt, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_demo(demo, out)
    print(f"wrote {out} ({demo.frames.shape[0]} frames, dt={demo.dt})")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_run_config(args) -> C.RunConfig:
    cfg = C.load_config(args.config) if args.config else C.RunConfig()
    cfg = cfg.with_seed(C.resolve_seed(getattr(args, "seed", None), cfg.seed))
    if getattr(args, "out_dir", None):
        cfg = replace(cfg, out_dir=str(args.out_dir))
    return cfg


def cmd_train(args) -> int:
    from .ppo import train_stage
    cfg = _load_run_config(args)
    if args.updates:
        cfg = replace(cfg, ppo=replace(cfg.ppo, updates=args.updates))
    cfg = cfg.for_stage(args.stage)
    init = pol.load_params(args.from_checkpoint) if args.from_checkpoint else None
    demo = cfg.build_demo()
    out = Path(cfg.out_dir)
    C.write_manifest(out, cfg, "train", dict(stage=args.stage, task=cfg.env.task,
                                             from_checkpoint=args.from_checkpoint))
    trainer = train_stage(args.stage, cfg.env.task, demo, cfg, out_dir=out, init_params=init,
                          workers=_workers(args.workers), resume=args.resume)
    last = trainer.rows[-1] if trainer.rows else None
    if last:
        print(f"update {last['update']}: mean return {last['mean_return']:.3f}, "
              f"episode length {last['mean_ep_len']:.1f}")
    print(f"checkpoint: {out / 'policy_final.txt'}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _eval_setup(args):
    cfg = _load_run_config(args)
    cfg = cfg.for_stage(2)
    demo = cfg.build_demo()
    params = pol.load_params(args.checkpoint)
    if params.obs_dim != cfg.env.obs_dim:
        raise CommandError(f"checkpoint obs_dim {params.obs_dim} does not match task "
                           f"{cfg.env.task!r} (obs_dim {cfg.env.obs_dim})")

    def make_env():
        return C.build_envs(cfg, demo, n=1)[0]
    return cfg, params, make_env


def _drop(args, task, values):
    cfg, params, make_env = _eval_setup(args)
    if cfg.env.task != task:
        raise CommandError(f"{args.eval_cmd} needs a {task} config, got {cfg.env.task!r}")
    spec = ev.DropTestSpec(task=task, conditions=tuple(values), horizon=args.horizon, seed=cfg.seed)
    traces, metrics = ev.drop_test(make_env, params, spec, workers=_workers(args.workers))
    out = Path(cfg.out_dir)
    C.write_manifest(out, cfg, args.eval_cmd, dict(checkpoint=str(args.checkpoint)))
    env = make_env()
    for v, rows in zip(spec.conditions, traces):
        write_trace(out / f"trace_{v:+.2f}.csv", rows, env.term_names)
    rows = ev.drop_summary_rows(spec, metrics)
    ev.write_rows(out / "summary.csv", rows)
    n, steady = ev.common_steady_count(metrics, spec.tol)
    for r in rows:
        print(f"{r['condition']:+.2f}: survived={r['survived']} cycles={r['cycles']} "
              f"index={r['convergence_index']} steady={r['steady_value']:.4f}")
    print(f"{n}/{len(metrics)} conditions share a steady value"
          + (f" ({steady:.4f})" if steady is not None else ""))
    return 0


def cmd_eval(args) -> int:
    if args.eval_cmd == "drop-test":
        return _drop(args, "hopping", args.heights)
    if args.eval_cmd == "angle-test":
        return _drop(args, "bounding", args.angles)
    if args.eval_cmd == "sweep":
        cfg, params, make_env = _eval_setup(args)
        res = ev.robustness_sweep(make_env, params, args.heights, args.frictions, args.episodes,
                                  cfg.seed, workers=_workers(args.workers))
        out = Path(cfg.out_dir)
        C.write_manifest(out, cfg, "sweep", dict(checkpoint=str(args.checkpoint)))
        ev.write_sweep(res, out)
        print(f"mean survival {res.mean_survival:.3f} over {res.survival.size} cells")
        return 0
    if args.eval_cmd == "replay":
        return _replay(args)
    raise CommandError(f"unknown eval command {args.eval_cmd}")


def _replay(args) -> int:
    cfg = _load_run_config(args)
    stage = args.stage or cfg.env.stage
    task = cfg.env.task
    demo = cfg.build_demo()
    rows = read_trace(args.trace)
    names = rewards.term_names(stage, task)
    worst = 0.0
    for i, row in enumerate(rows):
        if any(name not in row for name in names):
            raise CommandError(f"trace lacks reward columns for stage {stage} {task}")
        terms = rewards.breakdown(context_from_row(row, demo), cfg.rewards, stage, task)
        for name in names:
            worst = max(worst, abs(terms[name] - row[name]))
        worst = max(worst, abs(rewards.total(terms) - row["reward"]))
    ok = worst <= args.tol
    print(f"replayed {len(rows)} rows, max |logged - recomputed| = {worst:.3e} "
          f"({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# validate


def _validate_demo(path) -> list[tuple[str, bool, str]]:
    try:
        demo = load_demo(path)
    except (DemoFormatError, DemoValidationError) as exc:
        return [("demo file", False, str(exc))]
    return [("demo file", True, f"{demo.frames.shape[0]} frames, dt={demo.dt}, task={demo.task}")]


def _validate_config(path) -> list[tuple[str, bool, str]]:
    checks = []
    try:
        cfg = C.load_config(path)
    except C.ConfigError as exc:
        return [("config", False, str(exc))]
    checks.append(("config sections", True, "all keys known, all sections valid"))
    try:
        demo = cfg.build_demo()
        checks.append(("demo source", True, f"{demo.frames.shape[0]} frames"))
    except (DemoFormatError, DemoValidationError, IKError, ValueError) as exc:
        checks.append(("demo source", False, str(exc)))
        return checks
    again = C.from_dict(C.to_dict(cfg), cfg.base_dir)
    checks.append(("config round-trip", again == cfg, "load -> save -> load"))
    return checks


def cmd_validate(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise CommandError(f"no such file: {path}")
    head = path.read_text().lstrip()[:32]
    checks = _validate_demo(path) if head.startswith("# locoforge-demo") else _validate_config(path)
    for name, ok, msg in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {msg}")
    return 0 if all(ok for _, ok, _ in checks) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="locoforge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("demo-gen", help="synthesize a hopping or bounding demo file")
    d.add_argument("--task", choices=("hopping", "bounding"), default="hopping")
    d.add_argument("--apex", type=float, default=0.35, help="hop apex base height, m")
    d.add_argument("--stance-depth", type=float, default=0.092)
    d.add_argument("--amplitude", type=float, default=0.25, help="bounding pitch amplitude, rad")
    d.add_argument("--hop-height", type=float, default=0.03)
    d.add_argument("--period", type=float, default=None)
    d.add_argument("--dt", type=float, default=0.01)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demo_gen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--from-checkpoint", help="stage-1 policy (required for --stage 2)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out-dir")
    t.add_argument("--updates", type=int, default=None, help="override ppo.updates")
    t.add_argument("--workers", type=int, default=0, help="0 = available CPUs")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluation protocols")
    esub = e.add_subparsers(dest="eval_cmd", required=True)
    for name, helptext in (("drop-test", "hopping drops from several heights"),
                           ("angle-test", "bounding drops from several pitch angles"),
                           ("sweep", "survival over ground height x friction")):
        x = esub.add_parser(name, help=helptext)
        x.add_argument("--config", required=True)
        x.add_argument("--checkpoint", required=True)
        x.add_argument("--out-dir")
        x.add_argument("--seed", type=int, default=None)
        x.add_argument("--workers", type=int, default=0)
        x.set_defaults(func=cmd_eval)
    dt_ = esub.choices["drop-test"]
    dt_.add_argument("--heights", type=float, nargs="+", default=list(ev.DEFAULT_HEIGHTS))
    dt_.add_argument("--horizon", type=int, default=500)
    at = esub.choices["angle-test"]
    at.add_argument("--angles", type=float, nargs="+", default=list(ev.DEFAULT_ANGLES))
    at.add_argument("--horizon", type=int, default=500)
    sw = esub.choices["sweep"]
    sw.add_argument("--heights", type=float, nargs="+", default=list(ev.SWEEP_HEIGHTS))
    sw.add_argument("--frictions", type=float, nargs="+", default=list(ev.SWEEP_FRICTIONS))
    sw.add_argument("--episodes", type=int, default=20)
    r = esub.add_parser("replay", help="recompute logged rewards from a trace CSV")
    r.add_argument("--trace", required=True)
    r.add_argument("--config")
    r.add_argument("--stage", type=int, choices=(1, 2), default=None)
    r.add_argument("--tol", type=float, default=1e-9)
    r.set_defaults(func=cmd_eval, seed=None, out_dir=None)

    v = sub.add_parser("validate", help="check a config or demo file")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "train" and args.stage == 2 and not args.from_checkpoint:
        parser.error("--stage 2 requires --from-checkpoint <stage-1 policy>")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, C.ConfigError, pol.CheckpointError, DemoFormatError,
            DemoValidationError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
