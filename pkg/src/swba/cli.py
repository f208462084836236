"""Command line: ``swba simulate | run | compare``.

Flags set the defaults; a ``--config`` INI file (sections ``[world]``,
``[solver]``, ``[lm]``, ``[run]``) overrides them. ``SWBA_LOG_LEVEL``
sets the log verbosity.
"""

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import fields, replace

from .estimator import LMSettings, SolverConfig
from .evaluation import trajectory_text
from .experiment import ALL_VARIANTS, RunConfig, Variant, compare_reports, run_experiment
from .sim import PRESETS, WorldParams, generate_world

log = logging.getLogger("swba")


def _coerce(value, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(float(x) for x in value.replace(",", " ").split())
    return value.strip()


def _override(obj, section, skip=()):
    known = {f.name for f in fields(obj)}
    kw = {}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        kw[key] = _coerce(value, getattr(obj, key))
    return replace(obj, **kw)


def _parse_variants(text):
    if text is None or text == "all":
        return list(ALL_VARIANTS)
    if text.strip() in ("", "none"):
        return []
    return [Variant.parse(t.strip()) for t in text.split(",") if t.strip()]


def build_run_config(args):
    world = WorldParams(seed=args.seed, preset=args.preset, n_frames=args.frames,
                        gauge_mode=args.gauge_mode, noise_free=args.noise_free)
    solver = SolverConfig(window_size=args.window_size, gauge_mode=args.gauge_mode)
    variants = _parse_variants(getattr(args, "variants", None))
    out = getattr(args, "out", None) or "swba-report"
    seed = args.seed
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise FileNotFoundError(f"config file {args.config} not found")
        if cp.has_section("world"):
            world = _override(world, cp["world"])
        if cp.has_section("lm"):
            solver = replace(solver, lm=_override(LMSettings(), cp["lm"]))
        if cp.has_section("solver"):
            solver = _override(solver, cp["solver"])
        if cp.has_section("run"):
            run = cp["run"]
            seed = int(run.get("seed", seed))
            out = run.get("output_dir", out)
            if "variants" in run:
                variants = _parse_variants(run["variants"])
        if cp.has_section("world") and "seed" in cp["world"] and not (cp.has_section("run") and "seed" in cp["run"]):
            seed = world.seed
    return RunConfig(world=world, solver=solver, variants=variants, output_dir=out, seed=seed)


def cmd_simulate(args):
    cfg = build_run_config(args)
    wparams, _ = cfg.resolved()
    world, stream = generate_world(wparams)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "groundtruth.txt"), "w") as fh:
        fh.write(trajectory_text(list(zip(world.timestamps, world.rotations, world.positions))))
    with open(os.path.join(cfg.output_dir, "world.json"), "w") as fh:
        json.dump({"params": wparams.to_dict(), "landmarks": world.landmarks.tolist()}, fh, sort_keys=True)
    with open(os.path.join(cfg.output_dir, "stream.jsonl"), "w") as fh:
        for m in stream:
            fh.write(json.dumps({
                "frame_id": m.frame_id,
                "timestamp": m.timestamp,
                "observations": [[o.track_id, o.camera, o.pixel.tolist()] for o in m.observations],
                "odometry": None if m.odometry is None else m.odometry.tolist(),
                "lost_tracks": m.lost_tracks,
            }, sort_keys=True) + "\n")
    n_obs = sum(len(m.observations) for m in stream)
    print(f"simulated {len(stream)} frames, {len(world.landmarks)} landmarks, {n_obs} observations "
          f"-> {cfg.output_dir}")
    return 0


def cmd_run(args):
    cfg = build_run_config(args)
    res = run_experiment(cfg)
    with open(os.path.join(res["path"], "table.txt")) as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_compare(args):
    try:
        results, code = compare_reports(args.bundle)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in results:
        print(r.line())
    return code


def make_parser():
    p = argparse.ArgumentParser(prog="swba", description="Sliding-window BA marginalization experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--preset", choices=PRESETS, default="circle")
        sp.add_argument("--frames", type=int, default=60)
        sp.add_argument("--gauge-mode", choices=("vo_like", "vio_like"), default="vo_like")
        sp.add_argument("--noise-free", action="store_true")
        sp.add_argument("--window-size", type=int, default=7)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--config", default=None, help="INI file overriding the flags")

    sp = sub.add_parser("simulate", help="generate a world and write its stream")
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    sp = sub.add_parser("run", help="run the variant matrix and write a report bundle")
    common(sp)
    sp.add_argument("--variants", default="all",
                    help="comma list of opt:marg:precision triples, 'all' or 'none'")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("compare", help="check a report bundle")
    sp.add_argument("bundle")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    level = os.environ.get("SWBA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
