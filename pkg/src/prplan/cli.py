"""Command-line entry point: ``prplan <command> [options]``.

Exit status is 0 on success, 2 for configuration problems, 3 for data problems
and 1 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .config import RunConfig, load_config
from .data import generate_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, DataError, PrplanError
from .evaluation import bench, evaluate
from .training import load_model, save_model, train_all

log = logging.getLogger("prplan")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    # dedicated flags win over --set
    for flag, key in (("seed", "run.seed"), ("mode", "run.mode"), ("env", "run.env"), ("data", "data.path"),
                      ("episodes", "eval.episodes"), ("decisions", "bench.decisions"), ("warmup", "bench.warmup"),
                      ("candidates", "planner.candidates")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.run.out) / "model.prpl"


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.count is not None:
        cfg.data.episodes = args.count
    if args.mix is not None:
        cfg.data.mix = args.mix
    cfg.validate()
    ds = generate_dataset(cfg.run.env, cfg.policy_mix(), cfg.data.episodes, cfg.run.seed)
    path = Path(args.out or cfg.data.path or f"{cfg.run.env}.prpd")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    ok = sum(e["success"] for e in ds.provenance["episodes"])
    print(f"wrote {path}: {len(ds.episodes)} episodes, {ds.n_transitions} transitions, {ok} reached the goal")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.data.path:
        raise DataError("no dataset given (use --data or [data] path)")
    ds = load_dataset(cfg.data.path)
    out = _out_dir(args, cfg)
    cfg.run.out = str(out)
    model = train_all(cfg, ds)
    save_model(model, out / "model.prpl")
    artifacts.write_losses(out / "losses.csv", model.losses)
    (out / "config.ini").write_text(cfg.dumps())
    print(f"wrote {out / 'model.prpl'} (inverse-dynamics held-out mse {model.invdyn_mse:.3g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_model(_checkpoint_path(args, cfg), expect=cfg)
    metrics = evaluate(model.planner, cfg.run.env, cfg.eval.episodes, cfg.run.seed, cfg.eval.max_steps)
    metrics["mode"] = cfg.run.mode
    text = json.dumps(metrics, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(json.dumps({k: metrics[k] for k in ("mode", "success_rate", "mean_return")}))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    model = load_model(_checkpoint_path(args, cfg), expect=cfg)
    report = bench(model.planner, cfg.run.env, cfg.bench.decisions, cfg.bench.warmup, cfg.run.seed, cfg.run.mode)
    rows = [report]
    for mode in args.compare or []:
        other = artifacts.untrained_like(model, mode)
        rows.append(bench(other, cfg.run.env, cfg.bench.decisions, cfg.bench.warmup, cfg.run.seed, mode))
    out = Path(args.out or Path(cfg.run.out) / "bench")
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_bench(out, rows)
    for r in rows:
        s = r.summary()
        print(f"{s['mode']:>16}: {s['tokens_per_decision']:4d} tokens, mean {s['mean_ms']:.2f} ms, {s['hz']:.1f} Hz")
    return EXIT_OK


def cmd_reflow(args) -> int:
    cfg = _config(args)
    model = load_model(_checkpoint_path(args, cfg), expect=cfg)
    if not cfg.data.path:
        raise DataError("reflow needs the training dataset (use --data or [data] path)")
    ds = load_dataset(cfg.data.path)
    report = artifacts.reflow_model(model, ds, cfg)
    out = _out_dir(args, cfg)
    save_model(model, out / "model-reflow.prpl")
    (out / "reflow.json").write_text(json.dumps(report, indent=1))
    for row in report["levels"]:
        print(f"level {row['level']}: straightness {row['before']:.4g} -> {row['after']:.4g}")
    return EXIT_OK


def cmd_export_plans(args) -> int:
    cfg = _config(args)
    model = load_model(_checkpoint_path(args, cfg), expect=cfg)
    obs = None
    if args.obs:
        obs = np.array([float(v) for v in args.obs.split(",")], dtype=np.float32)
    out = _out_dir(args, cfg)
    doc = artifacts.export_plans(model, obs, args.candidates or cfg.planner.candidates, cfg.run.seed, out)
    print(f"wrote {out / 'plan.json'} and {out / 'plans.svg'}; far-horizon dispersion {doc['dispersion']:.4g}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "reflow": cmd_reflow,
    "export-plans": cmd_export_plans,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prplan", description="Coarse-to-fine generative planning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="sectioned key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", help="prp | one-shot | only-last-level")
        p.add_argument("--out", help="output path or directory")
        p.add_argument("--env")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config value")
        if name == "gen-data":
            p.add_argument("--count", type=int, help="number of episodes")
            p.add_argument("--mix", help="policy fractions, e.g. expert=0.5,random=0.5")
        else:
            p.add_argument("--data", help="dataset path")
        if name in ("eval", "bench", "reflow", "export-plans"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--episodes", type=int)
        if name == "bench":
            p.add_argument("--decisions", type=int)
            p.add_argument("--warmup", type=int)
            p.add_argument("--compare", nargs="*", help="also time untrained planners in these modes")
        if name == "export-plans":
            p.add_argument("--obs", help="comma-separated observation to plan from")
            p.add_argument("--candidates", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PrplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
