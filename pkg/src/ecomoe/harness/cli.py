"""Command line entry point: ``ecomoe <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..genome import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 2, 3
log = logging.getLogger("ecomoe")


def _single_cell(demo) -> dict:
    """The demo's own pretraining settings as a one-cell sweep."""
    r, p = demo.reward_weights, demo.pretrain_config
    return {"w_stand": [r.w_stand], "w_height": [r.w_height], "w_act": [r.w_act],
            "actor_lr": [p.actor_lr], "critic_lr": [p.critic_lr], "gae_lambda": [p.gae_lambda]}


def cmd_run(args) -> int:
    from .config import load_config
    from .experiment import run_experiment
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seeds"] = tuple(args.seed)
    if args.generations is not None:
        kw["generations"] = args.generations
    if args.out is not None:
        kw["output_dir"] = str(args.out)
    if kw:
        cfg = cfg.with_overrides(**kw)
    out = run_experiment(cfg, cfg.output_dir, stop_after=args.stop_after,
                         dump_traj=args.dump_traj, report=not args.no_report)
    print(out)
    return EXIT_OK


def cmd_resume(args) -> int:
    from .experiment import resume
    if not (Path(args.out) / "config.ini").is_file():
        raise ConfigError(f"{args.out} does not look like a run directory")
    print(resume(args.out, dump_traj=args.dump_traj, report=not args.no_report))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from ..demo import load_demo, pretrain_expert, regression_gate
    from ..policy import expert_to_dict
    demo = load_demo(args.demo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep = _single_cell(demo) if args.no_sweep else None
    expert, rows = pretrain_expert(demo, sweep, args.budget, args.seed, out / "sweep.csv",
                                   args.latent_dim, args.hidden)
    ok, fe, fz = regression_gate(demo, expert, args.seed, args.latent_dim)
    (out / "expert.json").write_text(json.dumps(expert_to_dict(expert)))
    print(json.dumps({"demo": demo.name, "cells": len(rows), "gate_passed": ok,
                      "fitness_expert": fe, "fitness_zero": fz, "digest": expert.digest()}))
    return EXIT_OK if ok else EXIT_FAULT


def cmd_encode(args) -> int:
    from ..demo import load_demo
    from ..morphogen import decode, encode_by_search, save_morphology
    demo = load_demo(args.demo)
    prior = encode_by_search(demo.morphology, restarts=args.restarts, seed=args.seed,
                             dim=args.latent_dim, source_demo=demo.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prior.json").write_text(json.dumps(prior.to_dict(), indent=2))
    save_morphology(decode(prior.mean), out / "reference.json")
    print(json.dumps({"demo": demo.name, "distance": prior.reconstruction_distance,
                      "warning": prior.warning}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .analytics import build_bundle
    from .report import emit_report
    run = Path(args.run)
    files = emit_report(build_bundle(run), args.out or run / "report")
    for f in files:
        print(f)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import compare
    res = compare(args.a, args.b, args.out)
    print(json.dumps(res, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecomoe")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, action="append", help="seed override (repeatable)")
    r.add_argument("--out", help="run directory (overrides output_dir)")
    r.add_argument("--generations", type=int)
    r.add_argument("--stop-after", type=int, help="stop after N generations per seed")
    r.add_argument("--dump-traj", action="store_true", help="write the best design's trajectory")
    r.add_argument("--no-report", action="store_true")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("resume", help="continue a run from its checkpoints")
    s.add_argument("--out", required=True)
    s.add_argument("--dump-traj", action="store_true")
    s.add_argument("--no-report", action="store_true")
    s.set_defaults(fn=cmd_resume)

    t = sub.add_parser("pretrain", help="pretrain an expert on a shipped demo")
    t.add_argument("--demo", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--budget", type=int)
    t.add_argument("--latent-dim", type=int, default=16)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--no-sweep", action="store_true", help="train only the demo's own settings")
    t.set_defaults(fn=cmd_pretrain)

    e = sub.add_parser("encode-demo", help="search a latent prior for a demo body")
    e.add_argument("--demo", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--restarts", type=int, default=128)
    e.add_argument("--latent-dim", type=int, default=16)
    e.set_defaults(fn=cmd_encode)

    o = sub.add_parser("report", help="rebuild the report of a run directory")
    o.add_argument("--run", required=True)
    o.add_argument("--out")
    o.set_defaults(fn=cmd_report)

    c = sub.add_parser("compare", help="paired-seed comparison of two runs")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; partial results kept", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # any runtime fault; checkpoints stay on disk
        log.debug("fault", exc_info=True)
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
