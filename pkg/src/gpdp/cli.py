"""Command-line front end.

    gpdp gen-data  [--config cfg.json] [--out DIR]
    gpdp train     --bundle DIR [--dataset PATH] [--stop-after K]
    gpdp eval      --bundle DIR [--condition normal|shift] [--policy KIND | --unguided] [--out DIR]
    gpdp eval-shift --bundle DIR ...
    gpdp inspect   PATH

Any config field can be overridden dot-path style, e.g. ``--critic.tau 0.7``.
Exit codes: 0 ok, 2 config error, 3 I/O error, 4 non-finite training loss,
5 incomplete bundle.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_override_args
from .envdata import generate_dataset, load_dataset, write_dataset
from .evaluation import behavior_comparison, evaluate, far_field_check, write_traces
from .policy import IncompleteBundleError, PolicyBundle
from .training import STAGES, TrainingDiverged, completed_stages, train_bundle

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NAN, EXIT_BUNDLE = 0, 2, 3, 4, 5
POLICY_KINDS = ("gpdp", "greedy", "diffusion")
BEHAVIOR_TAGS = ("expert", "medium")

log = logging.getLogger("gpdp")


class DataError(OSError):
    """Unreadable or malformed data file."""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults apply when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gpdp", description="GP-guided diffusion policy pipeline.",
                                epilog="Config fields may be overridden with --section.field VALUE.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the offline dataset")
    g.add_argument("--out", type=Path, help="output directory (default: directory of config 'dataset')")

    t = sub.add_parser("train", parents=[common], help="train a policy bundle (resumable)")
    t.add_argument("--bundle", type=Path, required=True)
    t.add_argument("--dataset", type=Path)
    t.add_argument("--stop-after", type=int, choices=range(len(STAGES)), metavar="STAGE",
                   help="stop once this stage (0-3) is complete")

    for name, helptext in (("eval", "evaluate a bundle"), ("eval-shift", "evaluate under the dynamics shift")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--bundle", type=Path, required=True)
        e.add_argument("--out", type=Path, help="report directory (default: BUNDLE/eval)")
        if name == "eval":
            e.add_argument("--condition", choices=("normal", "shift"), default="normal")
        e.add_argument("--policy", choices=POLICY_KINDS, default="gpdp")
        e.add_argument("--unguided", action="store_true",
                       help="greedy diffusion ablation: best-of-M under Q, no GP guidance")
        e.add_argument("--dataset", type=Path, help="dataset for the behavior comparison")

    i = sub.add_parser("inspect", parents=[common], help="summarize a bundle, config, dataset or report")
    i.add_argument("path", type=Path)
    return p


def resolve_config(args, overrides: dict, fallback: Path | None = None) -> RunConfig:
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    elif fallback is not None and fallback.exists():
        cfg = load_config(fallback)
    else:
        cfg = RunConfig().validate()
    return apply_overrides(cfg, overrides) if overrides else cfg


def read_dataset(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    try:
        return load_dataset(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed dataset {path}: {exc}") from None


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = args.out if args.out is not None else Path(cfg.dataset).parent
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    ds = generate_dataset(cfg.env, cfg.data, cfg.seed)
    data_path, meta_path = write_dataset(ds, out)
    print(f"wrote {len(ds)} transitions in {ds.meta['n_episodes']} episodes to {data_path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = read_dataset(args.dataset or Path(cfg.dataset))
    ran = train_bundle(cfg, ds, args.bundle, args.stop_after)
    done = completed_stages(args.bundle)
    print(f"bundle {args.bundle}: ran stages {ran}, complete {done}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, condition: str) -> int:
    bundle = PolicyBundle.load(args.bundle)
    kind = "greedy" if args.unguided else args.policy
    out = args.out if args.out is not None else args.bundle / "eval"
    out.mkdir(parents=True, exist_ok=True)
    shift = cfg.eval.shift.spec()
    report, episodes = evaluate(bundle.policy(kind), cfg.env, cfg.eval.seeds, condition, shift, kind)
    write_traces(report, episodes, out)
    if condition == "shift" and kind == "gpdp":
        report.extra["far_field"] = far_field_check(
            bundle, episodes, cfg.eval.far_field_draws, cfg.eval.far_field_perms,
            cfg.eval.far_field_alpha, rng=[cfg.seed, 7919])
    data_path = args.dataset or Path(cfg.dataset)
    if data_path.exists():
        ds = read_dataset(data_path)
        beh = list(ds.episode_returns(BEHAVIOR_TAGS).values())
        report.extra["behavior"] = behavior_comparison(report.returns, beh)
    path = out / f"report_{kind}_{condition}.json"
    path.write_text(report.to_json())
    print(f"{kind} {condition}: mean {report.mean:.4f} max {report.max:.4f} over {len(report.seeds)} seeds -> {path}")
    ff = report.extra.get("far_field")
    if ff and ff.get("evaluated"):
        print(f"far-field check: distance {ff['distance_lengthscales']:.2f} lengthscales, "
              f"p = {ff['p_value']:.3f} ({'pass' if ff['passed'] else 'FAIL'})")
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = args.path
    if not path.exists():
        raise FileNotFoundError(f"no such path: {path}")
    if path.is_dir():
        info = {"path": str(path), "completed_stages": [STAGES[k] for k in completed_stages(path)]}
        policy_json = path / "policy.json"
        if policy_json.exists():
            bundle = PolicyBundle.load(path)
            hp = bundle.gpr_model.hp
            info.update(bundle.describe())
            info["gpr"] = {"H": bundle.gpr_model.H, "noise": hp.noise, "signal": hp.signal,
                           "lengthscale": hp.lengthscale, "jitter": bundle.gpr_model.jitter}
        print(json.dumps(info, indent=2))
    elif path.suffix == ".jsonl":
        ds = read_dataset(path)
        summary = {"transitions": len(ds), "episodes": len(ds.episode_ids())}
        for tag in ("expert", "medium", "shifted"):
            rets = list(ds.episode_returns((tag,)).values())
            summary[tag] = {"episodes": len(rets), "mean_return": float(np.mean(rets)) if rets else None}
        print(json.dumps(summary, indent=2))
    else:
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"not a JSON file {path}: {exc}") from None
        if isinstance(doc, dict) and "optim" in doc:
            doc = load_config(path).to_dict()
        print(json.dumps(doc, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_override_args(rest)
        fallback = args.bundle / "config.json" if args.command in ("eval", "eval-shift") else None
        cfg = resolve_config(args, overrides, fallback)
        if args.command == "gen-data":
            return cmd_gen_data(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg, args.condition)
        if args.command == "eval-shift":
            return cmd_eval(args, cfg, "shift")
        return cmd_inspect(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompleteBundleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUNDLE
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
