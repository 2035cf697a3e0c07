"""Run-config files: flat INI-style key=value documents, one section per module.

Unknown sections or keys are rejected (with the offending line number), and
every run writes back a fully resolved copy of its configuration so the
output directory is self-describing.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .aggregation import SCHEMES, AggregationConfig
from .data import PartitionSpec, derive_seed
from .orchestrator import METHODS, PRETRAIN_SCOPES, ConfigError, ExperimentConfig
from .training import TrainerConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_pair(text: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


# section -> key -> (default string or None if required, parser)
SCHEMA = {
    "experiment": {
        "method": ("IsoFed", str),
        "rounds": ("100", int),
        "eval_every": ("1", int),
        "seed": ("0", int),
        "labeled_epochs": ("1", int),
        "unlabeled_epochs": ("1", int),
        "pretrain_scope": ("all", str),
        "threads": ("1", int),
    },
    "data": {
        "train": (None, str),
        "test": (None, str),
        "hflip": ("true", _parse_bool),
    },
    "partition": {
        "clients": ("4", int),
        "labeled": ("1", int),
        "gamma": ("0.8", float),
        "seed": ("", str),  # empty -> derived from experiment seed
    },
    "model": {
        "conv_channels": ("8,16", _parse_int_pair),
        "fc_width": ("128", int),
        "mlp_hidden": ("128", int),
    },
    "trainer": {
        "lr": ("0.03", float),
        "batch_size": ("64", int),
        "ema_alpha": ("0.999", float),
        "sharpen_tau": ("0.5", float),
        "pretrain_epochs": ("1", int),
        "pretrain_lr": ("0.03", float),
        "momentum": ("0.9", float),
    },
    "aggregation": {
        "lambda_c": ("1.0", float),
        "scheme": ("DynamicWeighted", str),
    },
    "output": {
        "dir": (None, str),
    },
}


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    train_path: str
    test_path: str
    out_dir: str
    resolved: dict[str, dict[str, str]]


def _line_of(path: str, section: str, key: str) -> str:
    """Best-effort line locator for error messages."""
    try:
        current = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if stripped.startswith("[") and stripped.endswith("]"):
                    current = stripped[1:-1].strip()
                elif current == section and stripped.split("=")[0].split(":")[0].strip() == key:
                    return f"{path}:{lineno}"
    except OSError:
        pass
    return f"{path}:[{section}]{key}"


def load_run_config(
    path: str,
    seed_override: int | None = None,
    threads_override: int | None = None,
    out_override: str | None = None,
) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' at {_line_of(path, section, key)}")

    overrides = {
        ("experiment", "seed"): seed_override,
        ("experiment", "threads"): threads_override,
        ("output", "dir"): out_override,
    }
    resolved: dict[str, dict[str, str]] = {}
    values: dict[tuple[str, str], object] = {}
    for section, keys in SCHEMA.items():
        resolved[section] = {}
        for key, (default, parse) in keys.items():
            if overrides.get((section, key)) is not None:
                text = str(overrides[(section, key)])
            elif parser.has_option(section, key):
                text = parser.get(section, key)
            elif default is not None:
                text = default
            else:
                raise ConfigError(f"missing required key '{key}' in section [{section}] of {path}")
            if (section, key) == ("partition", "seed") and text == "":
                values[(section, key)] = None
            else:
                try:
                    values[(section, key)] = parse(text)
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for '{key}' at {_line_of(path, section, key)}: {exc}"
                    ) from exc
            resolved[section][key] = text

    return _assemble(values, resolved, path)


def _assemble(values, resolved, path) -> RunConfig:
    get = values.__getitem__
    seed = get(("experiment", "seed"))
    part_seed_text = get(("partition", "seed"))
    part_seed = int(part_seed_text) if part_seed_text is not None else derive_seed(seed, "partition")
    resolved["partition"]["seed"] = str(part_seed)

    method = get(("experiment", "method"))
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}' at {_line_of(path, 'experiment', 'method')}")
    scope = get(("experiment", "pretrain_scope"))
    if scope not in PRETRAIN_SCOPES:
        raise ConfigError(f"pretrain_scope '{scope}' not one of {PRETRAIN_SCOPES}")
    scheme = get(("aggregation", "scheme"))
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown aggregation scheme '{scheme}', expected one of {SCHEMES}")

    try:
        partition = PartitionSpec(
            total_clients=get(("partition", "clients")),
            labeled_count=get(("partition", "labeled")),
            dirichlet_gamma=get(("partition", "gamma")),
            seed=part_seed,
        )
        trainer = TrainerConfig(
            lr=get(("trainer", "lr")),
            batch_size=get(("trainer", "batch_size")),
            ema_alpha=get(("trainer", "ema_alpha")),
            sharpen_tau=get(("trainer", "sharpen_tau")),
            pretrain_epochs=get(("trainer", "pretrain_epochs")),
            pretrain_lr=get(("trainer", "pretrain_lr")),
            momentum=get(("trainer", "momentum")),
        )
        aggregation = AggregationConfig(lambda_c=get(("aggregation", "lambda_c")), scheme=scheme)
        experiment = ExperimentConfig(
            method=method,
            rounds=get(("experiment", "rounds")),
            partition=partition,
            trainer=trainer,
            aggregation=aggregation,
            labeled_epochs=get(("experiment", "labeled_epochs")),
            unlabeled_epochs=get(("experiment", "unlabeled_epochs")),
            eval_every=get(("experiment", "eval_every")),
            seed=seed,
            pretrain_scope=scope,
            hflip=get(("data", "hflip")),
            threads=get(("experiment", "threads")),
            conv_channels=get(("model", "conv_channels")),
            fc_width=get(("model", "fc_width")),
            mlp_hidden=get(("model", "mlp_hidden")),
        )
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"invalid configuration in {path}: {exc}") from exc

    return RunConfig(
        experiment=experiment,
        train_path=get(("data", "train")),
        test_path=get(("data", "test")),
        out_dir=get(("output", "dir")),
        resolved=resolved,
    )


def write_resolved_config(run_cfg: RunConfig, path):
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in run_cfg.resolved.items():
        parser[section] = dict(keys)
    with open(path, "w") as fh:
        parser.write(fh)
