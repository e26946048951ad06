"""Command-line entry point: ``mpcrl-rm {train,evaluate,tune-baseline,export,validate-config}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness as H

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGRADED = 3

logger = logging.getLogger("mpcrl_rm")


def _seed_list(text: str) -> list[int]:
    """Parse ``"0,1,2"`` or ``"0-4"`` (or a mix) into a list of seeds."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcrl-rm", description="MPC-based Q-learning for freeway ramp metering.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
        p.add_argument("--seed", type=_seed_list, help="seed list, e.g. 0,1,2 or 0-4")
        p.add_argument("--episodes", type=int, help="number of episodes")
        p.add_argument("--desk", action="store_true", help="short-horizon preset: Np=12, 20 episodes, 3 seeds")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="learn the MPC parametrisation")
    common(p)
    p.add_argument("--workers", type=int, default=1, help="seeds trained in parallel processes")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")

    p = sub.add_parser("evaluate", help="run a controller without learning")
    common(p)
    p.add_argument("--controller", choices=H.CONTROLLERS, help="defaults to controller.kind of the config")
    p.add_argument("--theta", help="theta.json from a training run (mpcrl only)")
    p.add_argument("--gains", help="gains JSON from tune-baseline (pi-alinea only)")

    p = sub.add_parser("tune-baseline", help="random search over PI-ALINEA gains")
    common(p)
    p.add_argument("--budget", type=int, help="number of candidate gain pairs")

    p = sub.add_parser("export", help="re-export CSV/JSON tables from a saved run")
    p.add_argument("run", help="run directory holding artifacts.pkl")
    p.add_argument("--out", help="output directory (defaults to the run directory)")
    p.add_argument("--config", help="config used for the scenario envelope")

    p = sub.add_parser("validate-config", help="check a config file and print the resolved version")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--desk", action="store_true")
    return parser


def _resolve(args) -> H.ExperimentConfig:
    cfg = H.load_config(args.config)
    if getattr(args, "desk", False):
        cfg = cfg.with_desk_preset()
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
        cfg.eval_episodes = args.episodes
    if getattr(args, "out", None):
        cfg.output = args.out
    cfg.validate()
    return cfg


def _finish(art: H.RunArtifacts, cfg: H.ExperimentConfig, out: Path) -> int:
    H.export_report(art, out, cfg.scenario)
    agg = H.summary(art).get("aggregate", {})
    if "total" in agg:
        t = agg["total"]
        print(f"{art.controller}: mean total cost {t['mean']:.2f} (95% CI {t['ci95'][0]}, {t['ci95'][1]}) over {len(art.runs)} seeds")
    print(f"artifacts written to {out}")
    if art.degraded:
        print("run degraded: solver or simulation failures recorded", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output)
    ckpt = out / "checkpoints"
    if args.no_resume and ckpt.exists():
        for f in ckpt.glob("*.ckpt"):
            f.unlink()
    art = H.train(cfg, ckpt, workers=args.workers)
    return _finish(art, cfg, out)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    kind = args.controller or cfg.controller.kind
    theta = gains = None
    if args.theta:
        try:
            with open(args.theta) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise H.ConfigError(f"cannot read theta file: {exc}") from exc
        mpc = H.build_mpc(cfg)
        try:
            theta = mpc.theta0.load_dict(data.get("theta", data)).values
        except ValueError as exc:
            raise H.ConfigError(str(exc)) from exc
    if args.gains:
        cfg.baseline.gains_file = args.gains
        cfg.validate()
        gains = H.baseline_gains(cfg)
    art = H.evaluate(cfg, kind, cfg.eval_episodes, cfg.seeds, theta, gains)
    return _finish(art, cfg, Path(cfg.output))


def cmd_tune(args) -> int:
    cfg = _resolve(args)
    seed = cfg.seeds[0]
    best, log = H.tune_baseline(cfg, seed, args.budget)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gains.json", "w") as fh:
        json.dump(asdict(best), fh, indent=2, sort_keys=True)
    H._write_csv(out / "tuning_log.csv", ["K_P", "K_I", "rho_hat", "cost"], [[g.K_P, g.K_I, g.rho_hat, c] for g, c in log])
    print(f"best gains K_P={best.K_P:.4g} K_I={best.K_I:.4g}; written to {out / 'gains.json'}")
    return EXIT_OK


def cmd_export(args) -> int:
    run = Path(args.run)
    path = run / "artifacts.pkl"
    if not path.exists():
        raise H.ConfigError(f"{path} not found")
    art = H.load_artifacts(path)
    cfg = H.load_config(args.config) if args.config else H.ExperimentConfig.from_dict(art.config)
    manifest = H.export_report(art, Path(args.out) if args.out else run, cfg.scenario)
    for name, why in sorted(manifest["skipped"].items()):
        print(f"skipped {name}: {why}")
    return EXIT_DEGRADED if art.degraded else EXIT_OK


def cmd_validate(args) -> int:
    cfg = H.load_config(args.config)
    if args.desk:
        cfg = cfg.with_desk_preset()
    json.dump(cfg.to_dict(), sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "tune-baseline": cmd_tune,
    "export": cmd_export,
    "validate-config": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except H.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
