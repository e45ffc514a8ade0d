#!/usr/bin/env python3
"""
LRDM State Management

Holds the default configuration of every section, the output root and the
run-config object (JSON file plus ``section.key=value`` overrides) shared by
all services.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional


class ConfigError(ValueError):
    """Invalid run configuration (unknown key or out-of-range value)."""


class LRDMState:
    """Global defaults and output-location manager."""

    def __init__(self, output_dir: Optional[str] = None):
        # Noise schedule
        self.T = 100
        self.BETA1 = None  # None -> 1e-4 * 1000 / T
        self.BETA_T = None  # None -> 0.02 * 1000 / T
        self.REVERSE_VARIANCE = "beta"

        # Networks
        self.MODE = "dm"  # dm, lrdm, t_lrdm, lvae
        self.PARAMETERIZATION = "noise"
        self.WEIGHTING = "simple"
        self.HIDDEN = [128, 128, 128]
        self.ENCODER_HIDDEN = [128, 128]
        self.EMBED_DIM = 32
        self.REPR_DIM = 8
        self.DROPOUT = None  # None -> 0.2 for dm, 0.0 otherwise
        self.ACTIVATION = "silu"
        self.CLASS_CONDITIONAL = False
        self.MODEL_SEED = 0

        # First stage
        self.FIRST_STAGE_ENABLED = False
        self.FIRST_STAGE_PASSTHROUGH = False
        self.LATENT_DIM = 2
        self.FIRST_STAGE_HIDDEN = [64]
        self.FIRST_STAGE_STEPS = 2000
        self.FIRST_STAGE_LR = 1e-3
        self.FIRST_STAGE_BATCH = 256
        self.FIRST_STAGE_EMA = 0.999
        self.SCALE_BATCHES = 100

        # Trainer
        self.LEARNING_RATE = 1e-3
        self.BATCH_SIZE = 256
        self.TRAIN_STEPS = 20000
        self.LAMBDA = 1e-3
        self.EMA_DECAY = 0.9999
        self.ADAM_BETA1 = 0.9
        self.ADAM_BETA2 = 0.999
        self.ADAM_EPS = 1e-8
        self.CURRICULUM = False
        self.CURRICULUM_EPS = 10
        self.CURRICULUM_STEPS = 2000
        self.CHECKPOINT_EVERY = 0
        self.TRAIN_SEED = 0
        self.SWEEP_LAMBDAS = [1e-1, 1e-2, 1e-3, 1e-4]

        # Sampler
        self.SAMPLER_KIND = "ancestral"
        self.SAMPLER_STEPS = None  # None -> all T steps
        self.NUM_SAMPLES = 5000
        self.SAMPLER_SEED = 0
        self.SHARD_SIZE = 256

        # Data
        self.DATA_SOURCE = "mixture"  # mixture or csv
        self.DATA_PATH = None
        self.HELDOUT_PATH = None
        self.HAS_LABELS = False
        self.NUM_POINTS = 10000
        self.NUM_HELDOUT = 5000
        self.MODES = 8
        self.RADIUS = 1.0
        self.MODE_STD = 0.05
        self.LABELED = False
        self.DATA_SEED = 0

        # Analysis
        self.T_GRID_POINTS = 20
        self.N_MC = 4
        self.N_EVAL = 1000
        self.ENERGY_MAX_POINTS = 5000
        self.NULL_RESAMPLES = 20
        self.PCA_GRID_N = 5
        self.PCA_EXTENT = 2.0
        self.INTERP_POINTS = 10
        self.RECON_MODE = "ddim"
        self.RECON_RESAMPLES = 4

        # File paths
        root = output_dir or os.environ.get("LRDM_OUT") or "out"
        self.OUTPUT_DIR = Path(root)

    def get_schedule_config(self) -> Dict[str, Any]:
        return {"T": self.T, "beta1": self.BETA1, "betaT": self.BETA_T,
                "reverse_variance": self.REVERSE_VARIANCE}

    def get_model_config(self) -> Dict[str, Any]:
        return {
            "mode": self.MODE,
            "parameterization": self.PARAMETERIZATION,
            "weighting": self.WEIGHTING,
            "hidden": list(self.HIDDEN),
            "encoder_hidden": list(self.ENCODER_HIDDEN),
            "embed_dim": self.EMBED_DIM,
            "repr_dim": self.REPR_DIM,
            "dropout": self.DROPOUT,
            "activation": self.ACTIVATION,
            "class_conditional": self.CLASS_CONDITIONAL,
            "seed": self.MODEL_SEED,
        }

    def get_first_stage_config(self) -> Dict[str, Any]:
        return {
            "enabled": self.FIRST_STAGE_ENABLED,
            "passthrough": self.FIRST_STAGE_PASSTHROUGH,
            "latent_dim": self.LATENT_DIM,
            "hidden": list(self.FIRST_STAGE_HIDDEN),
            "steps": self.FIRST_STAGE_STEPS,
            "lr": self.FIRST_STAGE_LR,
            "batch_size": self.FIRST_STAGE_BATCH,
            "ema_decay": self.FIRST_STAGE_EMA,
            "scale_batches": self.SCALE_BATCHES,
        }

    def get_trainer_config(self) -> Dict[str, Any]:
        return {
            "lr": self.LEARNING_RATE,
            "batch_size": self.BATCH_SIZE,
            "steps": self.TRAIN_STEPS,
            "lam": self.LAMBDA,
            "ema_decay": self.EMA_DECAY,
            "adam_beta1": self.ADAM_BETA1,
            "adam_beta2": self.ADAM_BETA2,
            "adam_eps": self.ADAM_EPS,
            "curriculum": self.CURRICULUM,
            "curriculum_eps": self.CURRICULUM_EPS,
            "curriculum_steps": self.CURRICULUM_STEPS,
            "checkpoint_every": self.CHECKPOINT_EVERY,
            "seed": self.TRAIN_SEED,
        }

    def get_sampler_config(self) -> Dict[str, Any]:
        return {"kind": self.SAMPLER_KIND, "steps": self.SAMPLER_STEPS, "n": self.NUM_SAMPLES,
                "seed": self.SAMPLER_SEED, "shard_size": self.SHARD_SIZE}

    def get_data_config(self) -> Dict[str, Any]:
        return {
            "source": self.DATA_SOURCE,
            "path": self.DATA_PATH,
            "heldout_path": self.HELDOUT_PATH,
            "has_labels": self.HAS_LABELS,
            "n": self.NUM_POINTS,
            "n_heldout": self.NUM_HELDOUT,
            "modes": self.MODES,
            "radius": self.RADIUS,
            "std": self.MODE_STD,
            "labeled": self.LABELED,
            "seed": self.DATA_SEED,
        }

    def get_analysis_config(self) -> Dict[str, Any]:
        return {
            "t_grid_points": self.T_GRID_POINTS,
            "n_mc": self.N_MC,
            "n_eval": self.N_EVAL,
            "energy_max_points": self.ENERGY_MAX_POINTS,
            "null_resamples": self.NULL_RESAMPLES,
            "pca_grid_n": self.PCA_GRID_N,
            "pca_extent": self.PCA_EXTENT,
            "interp_points": self.INTERP_POINTS,
            "recon_mode": self.RECON_MODE,
            "recon_resamples": self.RECON_RESAMPLES,
        }

    def default_config(self) -> Dict[str, Dict[str, Any]]:
        """Nested default run configuration."""
        return {
            "schedule": self.get_schedule_config(),
            "model": self.get_model_config(),
            "first_stage": self.get_first_stage_config(),
            "trainer": self.get_trainer_config(),
            "sampler": self.get_sampler_config(),
            "data": self.get_data_config(),
            "analysis": self.get_analysis_config(),
        }

    def get_output_path(self) -> Path:
        """Get output directory path."""
        return self.OUTPUT_DIR


# Keys whose values may be null in a valid config
NULLABLE = {("schedule", "beta1"), ("schedule", "betaT"), ("model", "dropout"), ("sampler", "steps"),
            ("data", "path"), ("data", "heldout_path")}

CHOICES = {
    ("schedule", "reverse_variance"): ("beta", "beta_tilde"),
    ("model", "mode"): ("dm", "lrdm", "t_lrdm", "lvae"),
    ("model", "parameterization"): ("noise", "image", "mean"),
    ("model", "weighting"): ("vlb", "simple"),
    ("model", "activation"): ("silu", "relu"),
    ("sampler", "kind"): ("ancestral", "ddim"),
    ("data", "source"): ("mixture", "csv"),
    ("analysis", "recon_mode"): ("ddim", "ancestral"),
}

POSITIVE_INTS = {("schedule", "T"), ("model", "embed_dim"), ("model", "repr_dim"), ("first_stage", "latent_dim"),
                 ("first_stage", "batch_size"), ("first_stage", "scale_batches"), ("trainer", "batch_size"),
                 ("sampler", "n"), ("sampler", "steps"), ("sampler", "shard_size"), ("data", "n"),
                 ("data", "n_heldout"), ("data", "modes"), ("analysis", "t_grid_points"), ("analysis", "n_mc"),
                 ("analysis", "n_eval"), ("analysis", "energy_max_points"), ("analysis", "null_resamples"),
                 ("analysis", "pca_grid_n"), ("analysis", "interp_points"), ("analysis", "recon_resamples")}

NON_NEGATIVE_INTS = {("model", "seed"), ("first_stage", "steps"), ("trainer", "steps"),
                     ("trainer", "checkpoint_every"), ("trainer", "curriculum_eps"), ("trainer", "curriculum_steps"),
                     ("trainer", "seed"), ("sampler", "seed"), ("data", "seed")}

POSITIVE_FLOATS = {("first_stage", "lr"), ("trainer", "lr"), ("trainer", "adam_eps"), ("data", "radius"),
                   ("analysis", "pca_extent")}

NON_NEGATIVE_FLOATS = {("trainer", "lam"), ("data", "std")}

# [0, 1)
UNIT_INTERVAL = {("model", "dropout"), ("trainer", "ema_decay"), ("trainer", "adam_beta1"),
                 ("trainer", "adam_beta2"), ("first_stage", "ema_decay")}

# (0, 1)
OPEN_UNIT_INTERVAL = {("schedule", "beta1"), ("schedule", "betaT")}

BOOLS = {("model", "class_conditional"), ("first_stage", "enabled"), ("first_stage", "passthrough"),
         ("trainer", "curriculum"), ("data", "has_labels"), ("data", "labeled")}

INT_LISTS = {("model", "hidden"), ("model", "encoder_hidden"), ("first_stage", "hidden")}

STRINGS = {("data", "path"), ("data", "heldout_path")}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_field(name: str, field, value: Any):
    """Type and range of a single non-null value."""
    if field in CHOICES:
        if value not in CHOICES[field]:
            raise ConfigError(f"{name} must be one of {CHOICES[field]}, got {value!r}")
    elif field in POSITIVE_INTS:
        if not _is_int(value) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    elif field in NON_NEGATIVE_INTS:
        if not _is_int(value) or value < 0:
            raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
    elif field in POSITIVE_FLOATS:
        if not _is_number(value) or not 0.0 < value < float("inf"):
            raise ConfigError(f"{name} must be a positive number, got {value!r}")
    elif field in NON_NEGATIVE_FLOATS:
        if not _is_number(value) or not 0.0 <= value < float("inf"):
            raise ConfigError(f"{name} must be a non-negative number, got {value!r}")
    elif field in UNIT_INTERVAL:
        if not _is_number(value) or not 0.0 <= value < 1.0:
            raise ConfigError(f"{name} must be in [0, 1), got {value!r}")
    elif field in OPEN_UNIT_INTERVAL:
        if not _is_number(value) or not 0.0 < value < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {value!r}")
    elif field in BOOLS:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
    elif field in INT_LISTS:
        if not isinstance(value, list) or not value or not all(_is_int(h) and h > 0 for h in value):
            raise ConfigError(f"{name} must be a non-empty list of positive integers, got {value!r}")
    elif field in STRINGS:
        if not isinstance(value, str) or not value:
            raise ConfigError(f"{name} must be a non-empty string, got {value!r}")
    else:
        raise ConfigError(f"{name} has no validation rule")


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


class RunConfig:
    """
    Validated nested run configuration.

    Sections and keys are exactly those of ``LRDMState.default_config()``;
    file values override defaults and ``--set`` overrides win over both.
    """

    def __init__(self, values: Optional[Dict[str, Dict[str, Any]]] = None, state: Optional[LRDMState] = None):
        self.state = state or LRDMState()
        self.values = self.state.default_config()
        if values:
            self.merge(values)

    @classmethod
    def from_file(cls, path: str, state: Optional[LRDMState] = None) -> "RunConfig":
        """Load a JSON config file on top of the defaults."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        return cls(data, state)

    def merge(self, values: Dict[str, Dict[str, Any]]):
        for section, entries in values.items():
            if section not in self.values:
                raise ConfigError(f"Unknown config section '{section}' (known: {sorted(self.values)})")
            if not isinstance(entries, dict):
                raise ConfigError(f"Config section '{section}' must be an object")
            for key, value in entries.items():
                self.set(f"{section}.{key}", value)

    def set(self, dotted: str, value: Any):
        if "." not in dotted:
            raise ConfigError(f"Override '{dotted}' must be of the form section.key")
        section, key = dotted.split(".", 1)
        if section not in self.values:
            raise ConfigError(f"Unknown config section '{section}' (known: {sorted(self.values)})")
        if key not in self.values[section]:
            raise ConfigError(f"Unknown config key '{section}.{key}'")
        self.values[section][key] = value

    def get(self, dotted: str) -> Any:
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def apply_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, falling back to strings."""
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"Override '{item}' must be of the form section.key=value")
            dotted, raw = item.split("=", 1)
            self.set(dotted.strip(), _parse_value(raw.strip()))
        return self

    def validate(self) -> "RunConfig":
        """Check types and ranges of every field; raises ConfigError naming the field."""
        for section, entries in self.values.items():
            for key, value in entries.items():
                field = (section, key)
                name = f"{section}.{key}"
                if value is None:
                    if field not in NULLABLE:
                        raise ConfigError(f"{name} must not be null")
                    continue
                _check_field(name, field, value)

        s, m = self.values["schedule"], self.values["model"]
        if s["T"] < 2:
            raise ConfigError(f"schedule.T must be >= 2, got {s['T']}")
        if s["beta1"] is not None and s["betaT"] is not None and s["beta1"] > s["betaT"]:
            raise ConfigError("schedule.beta1 must not exceed schedule.betaT")
        if m["mode"] != "dm" and m["parameterization"] != "image":
            raise ConfigError(f"model.parameterization must be 'image' for mode {m['mode']}")
        steps = self.values["sampler"]["steps"]
        if steps is not None and steps > s["T"]:
            raise ConfigError(f"sampler.steps must be an integer in [1, {s['T']}], got {steps!r}")
        if self.values["sampler"]["kind"] == "ancestral" and steps not in (None, s["T"]):
            raise ConfigError("sampler.steps needs sampler.kind=ddim (ancestral sampling uses every step)")
        if self.values["analysis"]["interp_points"] < 2:
            raise ConfigError(f"analysis.interp_points must be >= 2, got {self.values['analysis']['interp_points']}")
        data = self.values["data"]
        if data["source"] == "csv" and not data["path"]:
            raise ConfigError("data.path is required when data.source is 'csv'")
        if m["class_conditional"] and data["source"] == "mixture" and not data["labeled"]:
            raise ConfigError("model.class_conditional needs labeled data (data.labeled=true)")
        return self

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.values), self.state)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.values)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2)


def load_run_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                    state: Optional[LRDMState] = None) -> RunConfig:
    """Defaults, then the JSON file, then overrides, then validation."""
    config = RunConfig.from_file(path, state) if path else RunConfig(state=state)
    return config.apply_overrides(overrides or []).validate()
