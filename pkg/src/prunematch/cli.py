"""Command line: train, eval, match, bench and gen-data subcommands.

Exit status: 0 on success, 2 for invalid input (unreadable files, bad
dims, bad config), 3 when ``match`` ran but found no matches, 4 when
training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .checkpoint import load_checkpoint
from .config import PipelineConfig
from .errors import CheckpointError, ConfigError, DivergenceError, InputShapeError, PGMError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_MATCHES = 3
EXIT_DIVERGED = 4


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _size(text):
    parts = text.replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return tuple(int(p) for p in parts)


def _add_config_flags(parser):
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(PipelineConfig):
        if f.name == "seed":
            continue
        kind = type(f.default)
        conv = {bool: _bool, tuple: _size}.get(kind, kind)
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=conv, default=None,
                           metavar=f.name.upper(), help=f"(default {f.default})")


def _common(parser):
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--config", default=None, help="JSON config file (flat PipelineConfig keys)")
    parser.add_argument("--out", default=None, help="output path")
    _add_config_flags(parser)


def build_config(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(args, "cfg_" + f.name, None)
        if value is not None:
            data[f.name] = value
    if args.seed is not None:
        data["seed"] = args.seed
    return PipelineConfig.from_dict(data)


def _params(args, cfg):
    from .pipeline import init_params

    params = init_params(cfg)
    if getattr(args, "checkpoint", None):
        load_checkpoint(args.checkpoint, params, cfg)
    return params


def cmd_train(args, cfg):
    from .pipeline import train

    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    result = train(cfg, out_dir=out, progress=lambda e: print(json.dumps(e, sort_keys=True), flush=True))
    print(json.dumps({"checkpoint": result.checkpoint, "probe_initial": result.probe_initial,
                      "probe_final": result.probe_final}))
    return EXIT_OK


def cmd_eval(args, cfg):
    from .pipeline import evaluate

    params = _params(args, cfg)
    metrics = evaluate(params, cfg, args.pairs, identity=args.identity)
    text = json.dumps(metrics, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_match(args, cfg):
    from .pipeline import match_pair, write_matches_csv

    params = _params(args, cfg)
    matches = match_pair(args.image_a, args.image_b, params, cfg)
    out = args.out or "matches.csv"
    n = write_matches_csv(out, matches)
    print(f"{n} matches written to {out}", file=sys.stderr)
    return EXIT_OK if n else EXIT_NO_MATCHES


def _parse_sweep(text):
    key, _, values = text.partition("=")
    if key not in ("tokens", "alpha") or not values:
        raise ConfigError(f"sweep must look like tokens=256,1024 or alpha=0.3,0.5; got {text!r}")
    conv = int if key == "tokens" else float
    return key, [conv(v) for v in values.split(",")]


def cmd_bench(args, cfg):
    from .bench import flop_sweep, time_pipeline, write_sweep_csv

    params = _params(args, cfg)
    size = args.image_size_bench or cfg.image_size
    report = time_pipeline(params, cfg, repeats=args.repeats, image_size=size)
    lines = [report.to_json()]
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if args.sweep:
        key, values = _parse_sweep(args.sweep)
        rows = flop_sweep(cfg, key, values)
        path = args.csv or "sweep.csv"
        write_sweep_csv(path, rows)
        print(f"sweep written to {path}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_data(args, cfg):
    from .data import SceneConfig, dataset, export_sample

    out = args.out or "data"
    scene = SceneConfig.from_pipeline(cfg)
    if args.identity:
        scene = scene.identity()
    for i, sample in enumerate(dataset(scene, args.n)):
        export_sample(sample, out, f"pair_{i:05d}")
    print(f"{args.n} pairs written to {out}", file=sys.stderr)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="prunematch", description="Candidate-pruning detector-free matcher")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic pairs")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out synthetic pairs")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--identity", action="store_true", help="use identity-pose pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="match two PGM images and write a CSV")
    _common(p)
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench", help="FLOP counts and per-stage timing")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--bench-size", dest="image_size_bench", type=_size, default=None,
                   help="image size to time, e.g. 256x256")
    p.add_argument("--sweep", default=None, help="tokens=... or alpha=... FLOP sweep")
    p.add_argument("--csv", default=None, help="sweep CSV path (default sweep.csv)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="export synthetic pairs as PGM plus sidecar headers")
    _common(p)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--identity", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PGMError, InputShapeError, CheckpointError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
