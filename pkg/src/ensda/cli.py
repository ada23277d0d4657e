"""Command-line harness: run experiments, summarize records, convert formats.

Verbs:
    ensda run <config.ini> [--seed N] [--instances N] [--workers N] [--out PATH]
    ensda stats <records> [--window LO:HI]
    ensda export <records> --format {csv,json} [--out PATH]

Exit codes: 0 success, 2 configuration error, 3 I/O error. Instance
divergences are reported in the records and never fail the process.

The configuration file is flat INI text with one section per module; every
key is optional and defaults to the values reproduced below.
"""

import argparse
import configparser
import sys
from pathlib import Path

from .experiment import (ConfigError, EmptyWindowError, ExperimentConfig,
                         export_records, format_table, load_records,
                         run_experiment, tabulate, write_records_json)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

# section -> {ini key: (config field, parser)}
_BOOL = "bool"
_INDICES = "indices"
_OPT_INT = "optional-int"
_SCHEMA = {
    "model": {
        "n_var": ("n_var", int),
        "forcing": ("forcing", float),
        "dt": ("model_dt", float),
    },
    "observations": {
        "operator": ("operator_kind", str),
        "indices": ("observed_indices", _INDICES),
        "exp_factor": ("exp_factor", float),
        "threshold": ("threshold", float),
        "noise_level": ("noise_level", float),
        "noise_floor": ("noise_floor", float),
    },
    "covariance": {
        "gamma": ("gamma", float),
        "enkf_gamma": ("enkf_gamma", float),
        "localization_length": ("loc_length", float),
        "localize": ("localize", _BOOL),
    },
    "chain": {
        "integrator": ("integrator", str),
        "step": ("step", float),
        "n_steps": ("n_steps", int),
        "jitter": ("jitter", float),
        "burn_in": ("burn_in", int),
        "thinning": ("thinning", int),
        "mass_matrix": ("mass_policy", str),
        "mass_scale": ("mass_scale", float),
        "chain_start": ("chain_start", str),
        "rejection_cap": ("rejection_cap", _OPT_INT),
    },
    "experiment": {
        "filter": ("filter_kind", str),
        "start": ("t_start", float),
        "end": ("t_end", float),
        "interval": ("interval", float),
        "ensemble_size": ("n_ens", int),
        "instances": ("n_instances", int),
        "seed": ("seed", int),
        "background_spread": ("background_spread", float),
        "workers": ("workers", int),
    },
    "output": {
        "path": (None, str),  # handled by the run verb, not ExperimentConfig
    },
}


def _parse_value(raw, kind, section, key):
    try:
        if kind is _BOOL:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is _INDICES:
            # 1-based in the file, 0-based internally
            return tuple(int(tok) - 1 for tok in raw.replace(",", " ").split())
        if kind is _OPT_INT:
            return None if not raw.strip() else int(raw)
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from err


def load_config(path, overrides=None) -> tuple[ExperimentConfig, str | None]:
    """Parse an INI experiment file; returns (config, output path or None)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise OSError(f"cannot read config {path}: {err}") from err
    except configparser.Error as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    fields = {}
    output_path = None
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            field, kind = _SCHEMA[section][key]
            value = _parse_value(raw, kind, section, key)
            if section == "output" and key == "path":
                output_path = value
            else:
                fields[field] = value
    fields.update(overrides or {})
    try:
        config = ExperimentConfig(**fields)
        # force early validation of derived objects
        config.model()
        config.operator()
        config.chain_config()
    except (ConfigError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return config, output_path


def _parse_window(text):
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError as err:
        raise ConfigError(f"window must look like LO:HI, got {text!r}") from err


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.instances is not None:
        overrides["n_instances"] = args.instances
    if args.workers is not None:
        overrides["workers"] = args.workers
    config, output_path = load_config(args.config, overrides)
    if args.out is not None:
        output_path = args.out
    if output_path is None:
        output_path = "records.json"
    result = run_experiment(config)
    write_records_json(result, output_path)
    n_div = sum(rec.diverged for rec in result.instances)
    print(f"{config.filter_kind} experiment: {config.n_instances} instance(s), "
          f"{config.n_cycles} cycles, {n_div} diverged")
    print(f"records written to {output_path}")
    try:
        stats, rate = tabulate(result, window=(8.0, 10.0))
        window = "8:10"
    except EmptyWindowError:
        stats, rate = tabulate(result, window=(config.t_start, config.t_end))
        window = f"{config.t_start:g}:{config.t_end:g}"
    print(f"RMSE statistics over t in [{window}]")
    print(format_table(stats, rate))
    return EXIT_OK


def cmd_stats(args) -> int:
    result = load_records(args.records)
    window = _parse_window(args.window)
    stats, rate = tabulate(result, window=window)
    print(f"{result.filter_kind or 'records'}: {len(result.instances)} instance(s), "
          f"fingerprint {result.fingerprint[:12] or 'n/a'}")
    print(f"RMSE statistics over t in [{args.window}]")
    print(format_table(stats, rate))
    return EXIT_OK


def cmd_export(args) -> int:
    result = load_records(args.records)
    out = args.out
    if out is None:
        suffix = ".csv" if args.format == "csv" else ".json"
        out = str(Path(args.records).with_suffix(suffix))
    export_records(result, out, args.format)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensda",
        description="Twin-experiment harness for ensemble data assimilation "
                    "on the Lorenz-96 model.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("config", help="INI experiment configuration")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--instances", type=int, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--out", default=None, help="records output path (JSON)")
    run.set_defaults(func=cmd_run)

    stats = sub.add_parser("stats", help="summarize an RMSE records file")
    stats.add_argument("records")
    stats.add_argument("--window", default="8:10", help="time window LO:HI")
    stats.set_defaults(func=cmd_stats)

    export = sub.add_parser("export", help="convert records between formats")
    export.add_argument("records")
    export.add_argument("--format", choices=("csv", "json"), required=True)
    export.add_argument("--out", default=None)
    export.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyWindowError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
