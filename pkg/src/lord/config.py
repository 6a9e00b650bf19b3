"""Run configuration: INI-shaped key-value sections with strict validation.

Unknown sections or keys are rejected, every value is type-checked, and
cross-field constraints are reported with their field path (for example
``adapter.alpha``). A parsed config materializes the pipeline and attack
configurations with all defaults filled in.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .attack import AttackConfig, TARGETED
from .errors import ValidationError
from .pipeline import PipelineConfig

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _parse_names(text: str) -> tuple:
    return tuple(part.strip() for part in text.split(",") if part.strip())


# section -> key -> (parser, PipelineConfig/AttackConfig field)
_SCHEMA = {
    "data": {
        "seed": int,
        "n_identities": int,
        "per_identity": int,
        "pretrain_identities": int,
        "fewshot_size": int,
        "heldout_detection": int,
    },
    "model": {
        "latent_dim": int,
        "timesteps": int,
        "beta_start": float,
        "beta_end": float,
    },
    "adapter": {
        "alpha": float,
        "r": int,
        "placement": _parse_names,
    },
    "attack": {
        "iterations": int,
        "step_size": float,
        "linf_bound": float,
        "fixed_draws": _parse_bool,
    },
    "stage1": {
        "lambda_adv": float,
        "lambda_det": float,
        "learning_rate": float,
        "epochs": int,
        "batch_size": int,
        "pretrain_learning_rate": float,
        "pretrain_epochs": int,
    },
    "stage2": {
        "learning_rate": float,
        "epochs": int,
        "pgd2_fraction": float,
        "pgd2_iterations": int,
        "pgd2_step_size": float,
        "pgd2_linf_bound": float,
    },
    "eval": {
        "samples": int,
        "seeds": int,
        "fractions": _parse_floats,
        "attack_iterations": int,
        "attack_step_size": float,
        "attack_linf_bound": float,
    },
    "output": {
        "dir": str,
    },
}

# (section, key) -> PipelineConfig field for plainly renamed keys
_PIPELINE_FIELDS = {
    ("data", "seed"): "seed",
    ("data", "n_identities"): "n_identities",
    ("data", "per_identity"): "per_identity",
    ("data", "pretrain_identities"): "pretrain_identities",
    ("data", "fewshot_size"): "fewshot_size",
    ("data", "heldout_detection"): "heldout_detection",
    ("model", "latent_dim"): "latent_dim",
    ("model", "timesteps"): "timesteps",
    ("model", "beta_start"): "beta_start",
    ("model", "beta_end"): "beta_end",
    ("adapter", "alpha"): "alpha",
    ("adapter", "r"): "r",
    ("adapter", "placement"): "placement",
    ("stage1", "lambda_adv"): "lambda_adv",
    ("stage1", "lambda_det"): "lambda_det",
    ("stage1", "learning_rate"): "lr_stage1",
    ("stage1", "epochs"): "epochs_stage1",
    ("stage1", "batch_size"): "batch_size",
    ("stage1", "pretrain_learning_rate"): "lr_pretrain",
    ("stage1", "pretrain_epochs"): "epochs_pretrain",
    ("stage2", "learning_rate"): "lr_stage2",
    ("stage2", "epochs"): "epochs_stage2",
    ("stage2", "pgd2_fraction"): "pgd2_fraction",
    ("eval", "samples"): "eval_samples",
    ("eval", "seeds"): "eval_seeds",
    ("eval", "fractions"): "fractions",
}


@dataclass
class RunConfig:
    """Validated configuration plus the output directory."""

    pipeline: PipelineConfig
    out_dir: str = "out"

    def config_hash(self) -> str:
        return self.pipeline.config_hash()


def default_config(seed: int = 0) -> RunConfig:
    return RunConfig(pipeline=PipelineConfig(seed=seed))


def load_config(path) -> RunConfig:
    """Parse and validate an INI run configuration file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ValidationError(f"{path}: malformed config: {exc}") from exc

    values: dict[tuple, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValidationError(f"{section}: unknown config section (known: {sorted(_SCHEMA)})")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValidationError(
                    f"{section}.{key}: unknown key (known: {sorted(_SCHEMA[section])})"
                )
            try:
                values[(section, key)] = _SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ValidationError(f"{section}.{key}: {exc}") from exc

    _cross_validate(values)

    pipeline_kwargs = {
        field: value for (sect, key), value in values.items()
        if (field := _PIPELINE_FIELDS.get((sect, key))) is not None
    }
    attack_kwargs = {
        key: value for (sect, key), value in values.items() if sect == "attack"
    }
    pgd2_kwargs = {
        key.removeprefix("pgd2_"): value
        for (sect, key), value in values.items()
        if sect == "stage2" and key.startswith("pgd2_") and key != "pgd2_fraction"
    }
    eval_attack_kwargs = {
        key.removeprefix("attack_"): value
        for (sect, key), value in values.items()
        if sect == "eval" and key.startswith("attack_")
    }
    try:
        pipeline = PipelineConfig(**pipeline_kwargs)
        if attack_kwargs:
            pipeline.attack = AttackConfig(**{**_attack_defaults(pipeline.attack), **attack_kwargs})
        if pgd2_kwargs:
            pipeline.pgd2_attack = AttackConfig(**{**_attack_defaults(pipeline.pgd2_attack), **pgd2_kwargs})
        if eval_attack_kwargs:
            base = _attack_defaults(pipeline.eval_attack)
            base.update(eval_attack_kwargs)
            pipeline.eval_attack = AttackConfig(mode=TARGETED, target_pattern=pipeline.eval_attack.target_pattern, **base)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return RunConfig(pipeline=pipeline, out_dir=str(values.get(("output", "dir"), "out")))


def _attack_defaults(cfg: AttackConfig) -> dict:
    return {
        "iterations": cfg.iterations,
        "step_size": cfg.step_size,
        "linf_bound": cfg.linf_bound,
        "fixed_draws": cfg.fixed_draws,
        "seed": cfg.seed,
    }


def _cross_validate(values: dict) -> None:
    def get(section, key, default):
        return values.get((section, key), default)

    alpha = get("adapter", "alpha", 32.0)
    r = get("adapter", "r", 4)
    if alpha < r:
        raise ValidationError(f"adapter.alpha: scaling {alpha} must be >= adapter.r = {r}")
    for section, key in (("attack", "linf_bound"), ("eval", "attack_linf_bound")):
        bound = get(section, key, 8.0 / 255.0)
        if not (0.0 <= bound <= 1.0):
            raise ValidationError(f"{section}.{key}: must lie in [0, 1], got {bound}")
    beta_start = get("model", "beta_start", 1e-4)
    beta_end = get("model", "beta_end", 0.02)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"model.beta_start/model.beta_end: need 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    for section, key in (
        ("data", "n_identities"),
        ("data", "per_identity"),
        ("data", "fewshot_size"),
        ("model", "timesteps"),
        ("stage1", "epochs"),
        ("stage1", "batch_size"),
        ("eval", "samples"),
        ("eval", "seeds"),
    ):
        if (section, key) in values and values[(section, key)] < 1:
            raise ValidationError(f"{section}.{key}: must be >= 1, got {values[(section, key)]}")
    for f in get("eval", "fractions", (0.0,)):
        if not (0.0 <= f <= 1.0):
            raise ValidationError(f"eval.fractions: entries must lie in [0, 1], got {f}")


SAMPLE_CONFIG = """\
# Defaults for every knob; any key may be omitted.
[data]
seed = 0
n_identities = 50
per_identity = 20
pretrain_identities = 50
fewshot_size = 4
heldout_detection = 200

[model]
latent_dim = 64
timesteps = 100
beta_start = 1e-4
beta_end = 0.02

[adapter]
alpha = 32
r = 4
placement = fc1, fc2, fc3

[attack]
iterations = 2
step_size = 0.5
linf_bound = 0.5
fixed_draws = false

[stage1]
lambda_adv = 2.0
lambda_det = 0.1
learning_rate = 1e-4
epochs = 100
batch_size = 32
pretrain_learning_rate = 1e-3
pretrain_epochs = 200

[stage2]
learning_rate = 1e-3
epochs = 300
pgd2_fraction = 1.0
pgd2_iterations = 2
pgd2_step_size = 0.031372549019607843
pgd2_linf_bound = 0.031372549019607843

[eval]
samples = 64
seeds = 5
fractions = 0, 0.25, 0.5, 0.75, 1.0
attack_iterations = 40
attack_step_size = 0.0031372549019607846
attack_linf_bound = 0.031372549019607843

[output]
dir = out
"""
