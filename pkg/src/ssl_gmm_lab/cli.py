"""Command-line entry point: ``ssl-gmm-lab <experiment> --config <path>``.

Configs are TOML files; ``--config`` also accepts the name of a packaged
preset (``fig1`` .. ``fig14``).  ``--set key=value`` overrides any config
entry through a dotted path, with values parsed as JSON where possible.
An extra ``dump-dataset`` command writes one generated dataset as CSV.
"""

import argparse
import importlib.resources
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from .model import ModelParams, dataset_to_csv, generate_dataset


def _preset_names():
    root = importlib.resources.files("ssl_gmm_lab") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".toml"))


def load_config(spec):
    """Read a TOML config from a file path or a packaged preset name."""
    if os.path.exists(spec):
        with open(spec, "rb") as fh:
            return tomllib.load(fh)
    name = spec if spec.endswith(".toml") else spec + ".toml"
    res = importlib.resources.files("ssl_gmm_lab") / "presets" / name
    if res.is_file():
        return tomllib.loads(res.read_text())
    raise FileNotFoundError(
        "config %r is neither a file nor a preset (presets: %s)"
        % (spec, ", ".join(_preset_names())))


def apply_overrides(config, assignments):
    """Apply ``key.path=value`` strings onto the config dict in place."""
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError("--set expects key=value, got %r" % item)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError("--set path %r crosses a non-table entry"
                                 % key)
        node[parts[-1]] = value
    return config


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ssl-gmm-lab",
        description="Numerical laboratory for semi-supervised two-cluster "
                    "classification: AMP, state evolution, phase diagrams, "
                    "and a gradient-descent reference.")
    parser.add_argument("--version", action="version",
                        version="%(prog)s " + __version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="TOML config file or packaged preset name")
    common.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted path, JSON "
                             "value; repeatable)")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, parents=[common],
                           help="run the %s protocol" % name)
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for sweep cells (default 1)")
        p.add_argument("--force", action="store_true",
                       help="rerun even when an identical run is on disk")
    p = sub.add_parser("dump-dataset", parents=[common],
                       help="write one generated dataset as CSV")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--reveal-hidden", action="store_true",
                   help="also write the hidden labels of unlabeled rows")
    return parser


def _run(args):
    config = apply_overrides(load_config(args.config), args.overrides)
    if args.command == "dump-dataset":
        params = ModelParams.from_dict(config.get("model", {}))
        dataset_to_csv(generate_dataset(params, args.seed), args.out,
                       reveal_hidden=args.reveal_hidden)
        print("wrote %s (N=%d, seed=%d)"
              % (args.out, params.n_dim, args.seed))
        return 0
    if args.threads < 1:
        raise ValueError("--threads must be at least 1")
    config["experiment"] = args.command
    cfg = ExperimentConfig.from_dict(config)
    manifest = run_experiment(cfg, threads=args.threads, force=args.force)
    failed = sum(1 for v in manifest.status.values() if v != "ok")
    note = "cached" if manifest.cached else "ran"
    print("%s %s: %d file(s) in %s%s"
          % (note, cfg.experiment, len(manifest.outputs), cfg.output_dir,
             ", %d failed cell(s), see manifest.json" % failed
             if failed else ""))
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValueError, KeyError, OSError, tomllib.TOMLDecodeError) as exc:
        msg = exc.args[0] if exc.args else exc
        print("error: %s" % msg, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
