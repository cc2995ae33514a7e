"""Command-line interface: gen, train, eval, infer, colorize, gradcheck.

Settings resolve in three layers: built-in defaults, then the ``--config``
file (``[global]`` and the command's own section), then explicit flags.
Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 failed
verification.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_bool, read_config, write_config
from .data import SceneConfig, export_png, gen_dataset, is_nonempty_dir, read_dataset, read_flo, read_png, write_dataset, write_flo
from .errors import ConfigurationError, TrainingDiverged, UsageError
from .evaluation import evaluate_samples, predict_sequence
from .flowops import flow_to_color
from .gradcheck import CASES, format_table, run_suite
from .losses import LossWeights
from .metrics import format_reports
from .network import ContinualFlowNet, preset_config
from .training import TrainConfig, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
RESOLVED_NAME = "resolved_config.ini"

log = logging.getLogger("continualflow")


def _size(text):
    if text is None or str(text).lower() == "none":
        return None
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"size must look like 48x48, got {text!r}") from None
    return (h, w)


def _opt_int(text):
    return None if text is None or str(text).lower() == "none" else int(text)


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _paths(text):
    return str(text).split() if isinstance(text, str) else list(text)


# name -> (parser type, default, help); "flag" marks boolean switches,
# REQUIRED marks settings with no default
REQUIRED = object()
GLOBAL_OPTIONS = {
    "seed": (int, 0, "seed for data generation, initialization and sampling"),
    "preset": (str, "toy", "network preset (toy or paper-shaped)"),
    "deterministic": ("flag", False, "single-threaded numerics for bit-exact reruns"),
}
COMMAND_OPTIONS = {
    "gen": {
        "out": (str, REQUIRED, "dataset directory"),
        "seqs": (int, 8, "number of sequences"),
        "len": (int, 5, "frames per sequence"),
        "height": (int, 64, "canvas height"),
        "width": (int, 64, "canvas width"),
        "objects": (int, 2, "moving rectangles per sequence"),
        "max_speed": (int, 8, "largest object speed in px/frame"),
        "bg_speed": (int, 2, "largest background speed in px/frame"),
        "size_min": (int, 12, "smallest rectangle side"),
        "size_max": (int, 28, "largest rectangle side"),
        "noise_scale": (float, 8.0, "texture lattice spacing in px"),
        "channels": (int, 3, "1 for grayscale, 3 for RGB"),
        "force": ("flag", False, "write into a non-empty directory"),
    },
    "train": {
        "data": (str, REQUIRED, "dataset directory"),
        "out": (str, REQUIRED, "run directory for checkpoint, log and config"),
        "steps": (int, 2000, "optimization steps"),
        "lr": (float, 1e-4, "Adam learning rate"),
        "warmup": (int, 0, "linear learning-rate warmup steps"),
        "weight_decay": (float, 4e-4, "L2 weight decay"),
        "batch": (int, 4, "pairs per step"),
        "crop": (_size, "48x48", "random crop HxW, or none"),
        "alpha_occ": (float, 0.1, "occlusion loss weight"),
        "loss": (str, "epe", "flow loss: epe or charbonnier"),
        "occ_weighting": (str, "literal", "occlusion class weighting: literal or balanced"),
        "temporal": (str, "both", "temporal connections: off, fwd, bwd, both"),
        "placement": (str, "both", "where temporal input enters: decoder, refinement, both"),
        "refinements": (int, 2, "number of refinement blocks"),
        "d_max": (_opt_int, None, "correlation range (preset default when omitted)"),
        "no_occ_input": ("flag", False, "zero the occlusion input of the flow estimator"),
        "temporal_mix": (_floats, (0.25, 0.5, 0.25), "probabilities of none/previous/two-pass[/ground-truth] temporal input"),
        "force": ("flag", False, "write into a non-empty directory"),
    },
    "eval": {
        "checkpoint": (str, REQUIRED, "model checkpoint"),
        "data": (str, REQUIRED, "dataset directory"),
        "out": (str, REQUIRED, "report file"),
        "two_pass": ("flag", False, "estimate the first pair twice"),
        "temporal": (str, "on", "on or off (zero temporal input)"),
        "frames": (int, 0, "use only the first N frames of each sequence (0 = all)"),
        "threshold": (float, 0.5, "occlusion probability threshold"),
    },
    "infer": {
        "checkpoint": (str, REQUIRED, "model checkpoint"),
        "frames": (_paths, REQUIRED, "input frame PNGs in order"),
        "out": (str, REQUIRED, "output directory"),
        "two_pass": ("flag", False, "estimate the first pair twice"),
        "temporal": (str, "on", "on or off"),
        "force": ("flag", False, "write into a non-empty directory"),
    },
    "colorize": {
        "flo": (_paths, REQUIRED, ".flo files"),
        "out": (str, REQUIRED, "output directory"),
        "max_magnitude": (float, 0.0, "saturation magnitude (0 = per-image maximum)"),
    },
    "gradcheck": {
        "all": ("flag", False, "run every registered check"),
        "op": (_paths, None, "names of checks to run"),
        "step": (float, 1e-5, "finite-difference step"),
        "list": ("flag", False, "list available checks and exit"),
        "out": (str, None, "directory for the table and resolved config"),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_options(parser, options):
    for name, (typ, _, help_text) in options.items():
        flag = "--" + name.replace("_", "-")
        if typ == "flag":
            parser.add_argument(flag, action="store_true", default=argparse.SUPPRESS, help=help_text)
        elif typ is _paths:
            parser.add_argument(flag, nargs="+", default=argparse.SUPPRESS, help=help_text)
        else:
            parser.add_argument(flag, default=argparse.SUPPRESS, help=help_text)


def build_parser():
    parser = _Parser(prog="continualflow", description="Occlusion-aware temporal optical flow toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file with sections")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    _add_options(parser, GLOBAL_OPTIONS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, options in COMMAND_OPTIONS.items():
        p = sub.add_parser(cmd, help=f"{cmd} command")
        p.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file with sections")
        _add_options(p, GLOBAL_OPTIONS)
        _add_options(p, options)
    return parser


def _convert(typ, value):
    if typ == "flag":
        return value if isinstance(value, bool) else parse_bool(value)
    if value is None:
        return None
    if typ is _paths:
        return _paths(value)
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad value {value!r}: {exc}") from None


def resolve(command, args: dict):
    """Merge defaults, config file sections and explicit flags into two dicts."""
    file_cfg = read_config(args["config"]) if "config" in args else {}
    out = {}
    for section, options in (("global", GLOBAL_OPTIONS), (command, COMMAND_OPTIONS[command])):
        file_vals = file_cfg.get(section, {})
        unknown = set(file_vals) - set(options)
        if unknown:
            raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
        resolved = {}
        for name, (typ, default, _) in options.items():
            if name in args:
                value = _convert(typ, args[name])
            elif name in file_vals:
                value = _convert(typ, file_vals[name])
            elif default is REQUIRED:
                raise ConfigurationError(f"--{name.replace('_', '-')} is required for {command}")
            else:
                value = _convert(typ, default) if isinstance(default, str) else default
            resolved[name] = value
        out[section] = resolved
    return out["global"], out[command]


def _prepare_dir(path, force):
    if is_nonempty_dir(path) and not force:
        raise UsageError(f"{path} is not empty; pass --force to write into it")
    Path(path).mkdir(parents=True, exist_ok=True)


def _unparse(options, values):
    out = {}
    for name, value in values.items():
        if options[name][0] is _size and value is not None:
            value = f"{value[0]}x{value[1]}"
        out[name] = value
    return out


def _record(path, command, glob, opts):
    write_config(path, {"global": glob, command: _unparse(COMMAND_OPTIONS[command], opts)})


def _temporal_flag(value):
    if value not in ("on", "off"):
        raise ConfigurationError("--temporal must be on or off")
    return value == "on"


def cmd_gen(glob, opts):
    if opts["len"] < 2:
        raise ConfigurationError("--len must be at least 2 (a pair needs two frames)")
    if opts["seqs"] < 1:
        raise ConfigurationError("--seqs must be positive")
    _prepare_dir(opts["out"], opts["force"])
    scene = SceneConfig(
        height=opts["height"], width=opts["width"], n_objects=opts["objects"],
        object_size=(opts["size_min"], opts["size_max"]), max_object_speed=opts["max_speed"],
        max_background_speed=opts["bg_speed"], noise_scale=opts["noise_scale"], length=opts["len"],
        channels=opts["channels"], seed=glob["seed"],
    )
    scene.validate()
    write_dataset(gen_dataset(scene, opts["seqs"]), opts["out"])
    _record(Path(opts["out"]) / RESOLVED_NAME, "gen", glob, opts)
    print(f"wrote {opts['seqs']} sequences to {opts['out']}")
    return EXIT_OK


def cmd_train(glob, opts):
    samples = read_dataset(opts["data"])
    over = dict(refinements=opts["refinements"], temporal=opts["temporal"], placement=opts["placement"],
                occlusion_input=not opts["no_occ_input"], seed=glob["seed"], in_channels=samples[0].frames.shape[1])
    if opts["d_max"] is not None:
        over["d_max"] = opts["d_max"]
    net = ContinualFlowNet(preset_config(glob["preset"], **over))
    cfg = TrainConfig(steps=opts["steps"], lr=opts["lr"], weight_decay=opts["weight_decay"], batch=opts["batch"],
                      crop=opts["crop"], seed=glob["seed"], temporal_mix=opts["temporal_mix"],
                      warmup=opts["warmup"])
    weights = LossWeights(alpha_occ=opts["alpha_occ"], mode=opts["loss"], occ_weighting=opts["occ_weighting"])
    out = Path(opts["out"])
    _prepare_dir(out, opts["force"])
    _record(out / RESOLVED_NAME, "train", glob, opts)
    try:
        rows = train(net, samples, cfg, weights, log_path=out / "loss_log.csv", dump_dir=out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last batch saved to {exc.dump_path}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(out / "model.ckpt", net, extra={"steps": len(rows)})
    if rows:
        print(f"step {rows[-1][0]} total loss {rows[-1][1]:.6g} (initial {rows[0][1]:.6g})")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(glob, opts):
    net, _ = load_checkpoint(opts["checkpoint"])
    samples = read_dataset(opts["data"])
    if opts["frames"]:
        samples = [s.head(opts["frames"]) for s in samples]
    per_image, agg = evaluate_samples(net, samples, opts["two_pass"], _temporal_flag(opts["temporal"]), opts["threshold"])
    meta = {"checkpoint": Path(opts["checkpoint"]).name, "two_pass": opts["two_pass"], "temporal": opts["temporal"]}
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_reports(per_image, agg, meta))
    _record(out.with_name(out.name + ".config.ini"), "eval", glob, opts)
    print(f"epe_all {agg.epe_all:.4f}  epe_occ {agg.epe_occ}  fl_all {agg.fl_all:.4f}  occ_f1 {agg.occ_f1}")
    bad = [key for key, rep in per_image if not rep.partition_consistent()]
    if bad or not agg.partition_consistent():
        print(f"partition consistency violated for {bad or 'aggregate'}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _load_frames(paths):
    frames = []
    for p in paths:
        img = read_png(p)
        frames.append(img.transpose(2, 0, 1) if img.ndim == 3 else img[None])
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ConfigurationError(f"frames differ in shape: {sorted(shapes)}")
    return np.stack(frames)


def cmd_infer(glob, opts):
    if len(opts["frames"]) < 2:
        raise ConfigurationError("infer needs at least two frames")
    net, _ = load_checkpoint(opts["checkpoint"])
    frames = _load_frames(opts["frames"])
    if frames.shape[1] != net.config.in_channels:
        raise ConfigurationError(f"model expects {net.config.in_channels} channels, frames have {frames.shape[1]}")
    flows, occ = predict_sequence(net, frames, opts["two_pass"], _temporal_flag(opts["temporal"]))
    out = Path(opts["out"])
    _prepare_dir(out, opts["force"])
    for k in range(len(flows)):
        write_flo(flows[k], out / f"flow_{k}.flo")
        export_png((occ[k] > 0.5).astype(np.uint8) * 255, out / f"occ_{k}.png")
        export_png(flow_to_color(flows[k]), out / f"flow_{k}.png")
    _record(out / RESOLVED_NAME, "infer", glob, opts)
    print(f"wrote {len(flows)} flow(s) to {out}")
    return EXIT_OK


def cmd_colorize(glob, opts):
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    mag = opts["max_magnitude"] or None
    for p in opts["flo"]:
        export_png(flow_to_color(read_flo(p), mag), out / (Path(p).stem + ".png"))
    _record(out / RESOLVED_NAME, "colorize", glob, opts)
    return EXIT_OK


def cmd_gradcheck(glob, opts):
    if opts["list"]:
        print("\n".join(CASES))
        return EXIT_OK
    names = None if opts["all"] or not opts["op"] else opts["op"]
    results = run_suite(names, seed=glob["seed"], step=opts["step"])
    table = format_table(results)
    print(table)
    if opts["out"]:
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(table + "\n")
        _record(out / RESOLVED_NAME, "gradcheck", glob, opts)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "colorize": cmd_colorize,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        args = vars(ns)
        command = args.pop("command")
        verbose = args.pop("verbose")
        if command is None:
            parser.print_help()
            return EXIT_VALIDATION
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
        glob, opts = resolve(command, args)
        limits = threadpool_limits(1) if glob["deterministic"] else contextlib.nullcontext()
        with limits:
            return COMMANDS[command](glob, opts)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
