"""Command-line entry points: `run` executes one experiment from a config
file, `sweep` repeats it over a parameter grid, and `verify-ldp` checks the
privacy guarantee of a protocol on a small domain.

Config files are TOML with per-module sections ([experiment], [dataset],
[defense], [recommender]); every key can be overridden on the command line
with --override section.key=value. Exit code 0 on success, 2 on config
errors. The worker count comes from the KVLDP_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import PROTOCOLS, Dictionary
from .experiment import (
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    run_experiment,
    sweep,
    write_report,
    write_sweep_csv,
    write_trials_csv,
)
from .protocols import verify_ldp_guarantee

_EXPERIMENT_KEYS = {
    "protocol", "attack", "trials", "seed", "beta", "epsilon", "r",
    "n_iter", "padding", "clipping", "targets",
}
_DATASET_KEYS = {
    "kind", "n", "d", "key_sigma", "value_sigma", "exponent", "path",
    "user_col", "key_col", "value_col", "value_min", "value_max",
}


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def config_from_sections(sections: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed TOML sections."""
    exp = dict(sections.get("experiment", {}))
    ds = dict(sections.get("dataset", {}))
    defense = dict(sections.get("defense", {}))
    rec = dict(sections.get("recommender", {}))

    unknown = set(exp) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"unknown [experiment] keys: {sorted(unknown)}")
    unknown = set(ds) - _DATASET_KEYS
    if unknown:
        raise ConfigError(f"unknown [dataset] keys: {sorted(unknown)}")

    kwargs = dict(exp)
    if kwargs.get("attack") in ("none", ""):
        kwargs["attack"] = None
    if kwargs.get("targets") is not None:
        kwargs["targets"] = tuple(int(k) for k in kwargs["targets"])
    if defense:
        defense_id = defense.get("id")
        if defense_id in ("none", ""):
            defense_id = None
        kwargs["defense"] = defense_id
        if "eta" in defense:
            kwargs["eta"] = int(defense["eta"])
        if "lam" in defense:
            kwargs["lam"] = float(defense["lam"])
    if rec:
        if "case" in rec:
            kwargs["recommender_case"] = int(rec["case"])
        if "top_t" in rec:
            kwargs["top_t"] = int(rec["top_t"])
    try:
        cfg = ExperimentConfig(dataset=DatasetConfig(**ds), **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path, "rb") as fh:
        sections = tomllib.load(fh)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        target, raw_value = item.split("=", 1)
        if "." in target:
            section, key = target.split(".", 1)
        else:
            section, key = "experiment", target
        sections.setdefault(section, {})[key.strip()] = _parse_scalar(raw_value.strip())
    return config_from_sections(sections)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override)
    report = run_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json")
    write_trials_csv(report["trials"], out / "trials.csv")
    print(f"wrote {out / 'report.json'} and {out / 'trials.csv'}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override)
    values = [_parse_scalar(v) for v in args.values.split(",") if v != ""]
    result = sweep(cfg, args.param, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(result, out / "sweep.csv")
    summaries = {
        "parameter": result["parameter"],
        "values": result["values"],
        "summaries": [
            {"value": item["value"], "summary": item["report"]["summary"]}
            for item in result["reports"]
        ],
    }
    write_report(summaries, out / "sweep.json")
    print(f"wrote {out / 'sweep.json'} and {out / 'sweep.csv'}")
    return 0


def _cmd_verify_ldp(args: argparse.Namespace) -> int:
    check = verify_ldp_guarantee(
        args.protocol,
        args.epsilon,
        Dictionary(args.d, args.padding),
        tolerance=args.tolerance,
        n_iter=args.n_iter,
    )
    status = "PASS" if check.passed else "FAIL"
    print(
        f"[{status}] {check.protocol} epsilon={check.epsilon} d'={check.d_prime} "
        f"max_ratio={check.max_ratio:.9f} bound={check.bound:.9f}"
    )
    return 0 if check.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvldp")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--override", nargs="*", default=[], metavar="SECTION.KEY=VALUE")
    p_run.add_argument("--out", default="out")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="rerun an experiment over a parameter grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--override", nargs="*", default=[], metavar="SECTION.KEY=VALUE")
    p_sweep.add_argument("--out", default="out")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_ldp = sub.add_parser("verify-ldp", help="exhaustively check the epsilon-LDP bound")
    p_ldp.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p_ldp.add_argument("--epsilon", required=True, type=float)
    p_ldp.add_argument("--d", type=int, default=3)
    p_ldp.add_argument("--padding", type=int, default=1)
    p_ldp.add_argument("--n-iter", type=int, default=1)
    p_ldp.add_argument("--tolerance", type=float, default=1e-9)
    p_ldp.set_defaults(func=_cmd_verify_ldp)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
