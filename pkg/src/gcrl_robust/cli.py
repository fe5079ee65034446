"""Command line entry point: ``gcrl-robust <subcommand> --config run.yaml ...``.

Exit codes: 0 on success, 2 for configuration problems (bad keys, missing or
mismatched artifacts, unwritable outputs), 3 when training or evaluation hits
a non-finite value.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import agents, bench, gcenv
from .attacks import AttackSpec
from .errors import ConfigError, NumericalError

log = logging.getLogger("gcrl_robust")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _dataset(cfg, args, env):
    path = args.dataset or cfg.env.dataset
    if path is None:
        raise ConfigError("no dataset given (use --dataset or env.dataset)")
    if not Path(path).is_file():
        raise ConfigError(f"dataset not found: {path}")
    try:
        ds = gcenv.OfflineDataset.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    bench.check_dataset(env, ds)
    return ds


def _checkpoints(args, cfg, env):
    paths = list(args.checkpoints or [])
    if args.ckpt_dir:
        paths += sorted(str(p) for p in Path(args.ckpt_dir).glob("seed_*.ckpt"))
    if not paths:
        raise ConfigError("no checkpoints given")
    bundles = []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"checkpoint not found: {p}")
        try:
            b = agents.AgentBundle.load(p)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read checkpoint {p}: {exc}") from exc
        bench.check_bundle(env, b)
        bundles.append(b)
    seeds = [bench.run_seed(cfg.eval.master_seed, k) for k in range(len(bundles))]
    return bundles, seeds


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_collect(cfg, args):
    env = cfg.make_env()
    ds = gcenv.collect_dataset(env, cfg.dataset_mix(), cfg.env.episodes, cfg.eval.master_seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.save(args.out)
    if args.csv:
        ds.to_csv(args.csv)
    log.info("wrote %d episodes to %s", ds.episodes, args.out)


def cmd_train(cfg, args):
    env = cfg.make_env()
    ds = _dataset(cfg, args, env)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipe = cfg.pipeline()
    curves = {}
    for k, seed in enumerate(cfg.seeds()):
        b = agents.AgentBundle.build(env, cfg.agent_config(), seed=seed)
        ck = out / f"seed_{k}" if args.epoch_checkpoints else None
        try:
            b, curve = pipe.train(b, ds, cfg.schedule(seed), checkpoint_dir=ck, env=env)
        except NumericalError as exc:
            if exc.checkpoint is not None:
                (out / f"seed_{k}_nan_abort.ckpt").write_bytes(exc.checkpoint)
            raise
        b.save(out / f"seed_{k}.ckpt")
        curves[f"seed_{k}"] = curve
        log.info("trained %s seed slot %d", pipe.name, k)
    _write(out / "train_curves.json", json.dumps(curves, indent=1, sort_keys=True))


def cmd_attack(cfg, args):
    env = cfg.make_env()
    bundles, seeds = _checkpoints(args, cfg, env)
    report = bench.attack_grid(bundles, env, cfg.grid(), seeds, cfg.eval.episodes, cfg.attack.first_steps)
    _write(args.out, report.to_json())


def cmd_sweep_layers(cfg, args):
    env = cfg.make_env()
    bundles, seeds = _checkpoints(args, cfg, env)
    spec = AttackSpec.from_dict(cfg.attack.curve)
    per_layer, report = bench.layer_sweep(bundles, env, spec, cfg.attack.layers, seeds, cfg.eval.episodes)
    report.meta["layers"] = {str(k): list(v) for k, v in per_layer.items()}
    _write(args.out, report.to_json())


def cmd_curve(cfg, args):
    env = cfg.make_env()
    spec = AttackSpec.from_dict(cfg.attack.curve)
    root = Path(args.ckpt_dir)
    dirs = sorted(p for p in root.glob("seed_*") if p.is_dir())
    if not dirs:
        raise ConfigError(f"no per-epoch checkpoint directories under {root}")
    rows = []
    for k, d in enumerate(dirs):
        cks = sorted(d.glob("epoch_*.ckpt"))
        seed = bench.run_seed(cfg.eval.master_seed, k)
        rows += bench.robustness_curve(cks, env, spec, cfg.eval.episodes, seed)
    _write(args.out, bench.EvalReport([], rows, {"goal_protocol": bench.GOAL_PROTOCOL}).sort().to_json())


def cmd_report(cfg, args):
    report = bench.EvalReport()
    for p in args.inputs:
        if not Path(p).is_file():
            raise ConfigError(f"report input not found: {p}")
        report = report.merge(bench.EvalReport.from_json(Path(p).read_text()))
    report.meta["config"] = cfg.to_dict()
    for p in bench.emit_report(report, args.out_dir, tuple(args.formats.split(","))):
        print(p)


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "attack": cmd_attack,
            "sweep-layers": cmd_sweep_layers, "curve": cmd_curve, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="gcrl-robust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="YAML run configuration")
        return p

    p = add("collect", "generate an offline dataset")
    p.add_argument("--out", required=True, help="dataset file (.npz)")
    p.add_argument("--csv", help="optional CSV export of the transitions")

    p = add("train", "train the configured pipeline for every seed slot")
    p.add_argument("--dataset", help="dataset file (overrides env.dataset)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epoch-checkpoints", action="store_true", help="also keep one checkpoint per epoch")

    for name, help in (("attack", "evaluate the attack grid"), ("sweep-layers", "vary the attacked layer")):
        p = add(name, help)
        p.add_argument("--checkpoints", nargs="*", help="agent checkpoints, one per seed slot")
        p.add_argument("--ckpt-dir", help="directory holding seed_*.ckpt")
        p.add_argument("--out", required=True, help="report JSON")

    p = add("curve", "attack per-epoch checkpoints")
    p.add_argument("--ckpt-dir", required=True, help="train output made with --epoch-checkpoints")
    p.add_argument("--out", required=True)

    p = add("report", "emit CSV/JSON/text/PNG files from report JSONs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--formats", default="csv,json,txt,png")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = bench.ExperimentConfig.load(args.config)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("cannot write output: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
