"""Experiment configuration: JSON schema, presets and strict parsing.

A config file is a JSON object. Only ``model.id`` is required; every other
field falls back to the preset for that model. Unknown fields are errors.
Observed indices are 0-based.
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts
from .dynamics import ModelSpec
from .enkf import ObservationModel
from .errors import ConfigError, ContractViolation
from .fcnn import PRESET_HIDDEN_SIZES, FcnnConfig, input_size

SCHEMA_VERSION = 1

_PRESETS = {
    "lorenz63-paper": {
        "schema_version": 1,
        "name": "lorenz63-paper",
        "seed": 6300,
        "model": {
            "id": "lorenz63",
            "dim": 3,
            "params": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
            "dt": 0.01,
            "steps_per_window": 8,
        },
        "observation": {"indices": [0, 1, 2], "noise_magnitude": 2.0, "known_covariance": False},
        "ensemble": {"large": 100, "small": 7},
        "experiment": {
            "initial_conditions": 100,
            "train_fraction": 0.8,
            "validation_fraction": 0.1,
            "windows": 80,
            "spinup_steps": 500,
            "initial_box": [[-15.0, 15.0], [-15.0, 15.0], [10.0, 40.0]],
        },
        "fcnn": {
            "hidden_sizes": list(PRESET_HIDDEN_SIZES["lorenz63"]),
            "learning_rate": 1e-3,
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon": 1e-8,
            "batch_size": 32,
            "epochs": 500,
            "patience": 50,
            "refinement_rounds": 4,
        },
    },
    "lorenz96-paper": {
        "schema_version": 1,
        "name": "lorenz96-paper",
        "seed": 9600,
        "model": {
            "id": "lorenz96",
            "dim": 10,
            "params": {"F": 8.0},
            "dt": 0.01,
            "steps_per_window": 5,
        },
        # 0-based; the 1-based variables 1, 3, 5, 7, 9
        "observation": {"indices": [0, 2, 4, 6, 8], "noise_magnitude": 1.0, "known_covariance": True},
        "ensemble": {"large": 100, "small": 7},
        "experiment": {
            "initial_conditions": 100,
            "train_fraction": 0.8,
            "validation_fraction": 0.1,
            "windows": 80,
            "spinup_steps": 500,
            "initial_box": None,
        },
        "fcnn": {
            "hidden_sizes": list(PRESET_HIDDEN_SIZES["lorenz96"]),
            "learning_rate": 1e-3,
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon": 1e-8,
            "batch_size": 32,
            "epochs": 500,
            "patience": 50,
            "refinement_rounds": 4,
        },
    },
}

_MODEL_PRESET = {"lorenz63": "lorenz63-paper", "lorenz96": "lorenz96-paper"}

_SCHEMA = {
    "schema_version": int,
    "name": str,
    "seed": int,
    "model": {"id": str, "dim": int, "params": dict, "dt": float, "steps_per_window": int},
    "observation": {"indices": list, "noise_magnitude": float, "known_covariance": bool},
    "ensemble": {"large": int, "small": int},
    "experiment": {
        "initial_conditions": int,
        "train_fraction": float,
        "validation_fraction": float,
        "windows": int,
        "spinup_steps": int,
        "initial_box": (list, type(None)),
    },
    "fcnn": {
        "hidden_sizes": list,
        "learning_rate": float,
        "beta1": float,
        "beta2": float,
        "epsilon": float,
        "batch_size": int,
        "epochs": int,
        "patience": int,
        "refinement_rounds": int,
    },
}


def preset_names():
    return sorted(_PRESETS)


def preset_dict(name):
    try:
        return copy.deepcopy(_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {preset_names()}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    model: ModelSpec
    observation: ObservationModel
    known_covariance: bool
    large: int
    small: int
    initial_conditions: int
    train_fraction: float
    validation_fraction: float
    windows: int
    spinup_steps: int
    initial_box: np.ndarray
    fcnn: dict
    document: dict

    @property
    def n_inputs(self):
        return input_size(self.small, self.model.dim, self.observation.obs_dim)

    def fcnn_config(self):
        f = self.fcnn
        sizes = (self.n_inputs, *f["hidden_sizes"], self.model.dim)
        return FcnnConfig(
            layer_sizes=sizes,
            learning_rate=f["learning_rate"],
            beta1=f["beta1"],
            beta2=f["beta2"],
            epsilon=f["epsilon"],
            batch_size=f["batch_size"],
            epochs=f["epochs"],
            patience=f["patience"],
            seed=self.seed,
        )

    def input_layout(self):
        return {
            "order": "members-column-major,obs-mean,prev-analysis-mean",
            "ensemble_size": self.small,
            "state_dim": self.model.dim,
            "obs_dim": self.observation.obs_dim,
            "model_id": self.model.model_id,
        }

    def truth_key(self):
        """Hash of everything the truth trajectories depend on."""
        doc = self.document
        return artifacts.content_sha256({
            "seed": doc["seed"],
            "model": doc["model"],
            "experiment": {k: doc["experiment"][k] for k in ("initial_conditions", "windows", "spinup_steps")},
            "initial_box": self.initial_box,
        })

    def with_overrides(self, **changes):
        doc = copy.deepcopy(self.document)
        for dotted, value in changes.items():
            node = doc
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(doc)


def _line_of(text, key):
    if text is None:
        return None
    needle = json.dumps(key)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def _check_types(doc, schema, prefix, text):
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", field=prefix or "<root>")
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in schema:
            raise ConfigError("unknown field", field=path, line=_line_of(text, key))
        expected = schema[key]
        if isinstance(expected, dict):
            _check_types(value, expected, path, text)
            continue
        ok_types = expected if isinstance(expected, tuple) else (expected,)
        if float in ok_types and isinstance(value, int) and not isinstance(value, bool):
            continue
        if int in ok_types and isinstance(value, bool):
            ok = False
        else:
            ok = isinstance(value, ok_types)
        if not ok:
            names = "/".join("null" if t is type(None) else t.__name__ for t in ok_types)
            raise ConfigError(
                f"expected {names}, got {type(value).__name__}", field=path, line=_line_of(text, key)
            )


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "params":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def from_dict(raw, text=None, seed=None):
    """Validate ``raw`` against the schema, fill defaults, build an :class:`ExperimentConfig`."""
    _check_types(raw, _SCHEMA, "", text)
    model_id = raw.get("model", {}).get("id")
    if model_id is None:
        raise ConfigError("required field missing", field="model.id")
    if model_id not in _MODEL_PRESET:
        raise ConfigError(
            f"unknown model {model_id!r}; expected one of {sorted(_MODEL_PRESET)}",
            field="model.id", line=_line_of(text, "id"),
        )
    doc = _merge(_PRESETS[_MODEL_PRESET[model_id]], raw)
    if "name" not in raw:
        doc["name"] = "custom"
    if seed is not None:
        doc["seed"] = int(seed)
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {doc['schema_version']}", field="schema_version")

    def fail(field, message):
        raise ConfigError(message, field=field, line=_line_of(text, field.rsplit(".", 1)[-1]))

    if not 0 <= doc["seed"] < 2 ** 64:
        fail("seed", "must be an unsigned 64-bit integer")
    m = doc["model"]
    if model_id == "lorenz63" and "dim" not in raw.get("model", {}):
        m["dim"] = 3
    try:
        spec = ModelSpec(m["id"], m["dim"], {k: float(v) for k, v in m["params"].items()}, float(m["dt"]),
                         m["steps_per_window"])
    except (ContractViolation, TypeError, ValueError) as exc:
        fail("model", str(exc))
    if not spec.dt > 0:
        fail("model.dt", "must be positive")
    expected = {"lorenz63": {"sigma", "rho", "beta"}, "lorenz96": {"F"}}[model_id]
    if set(m["params"]) != expected:
        fail("model.params", f"expected exactly {sorted(expected)}")

    o = doc["observation"]
    if model_id == "lorenz96" and "indices" not in raw.get("observation", {}) and spec.dim != 10:
        o["indices"] = list(range(0, spec.dim, 2))
    if not all(isinstance(i, int) and not isinstance(i, bool) for i in o["indices"]):
        fail("observation.indices", "indices must be integers")
    try:
        obs = ObservationModel(tuple(o["indices"]), float(o["noise_magnitude"]), spec.dim)
    except ContractViolation as exc:
        fail("observation", str(exc))

    e = doc["ensemble"]
    if e["small"] < 2:
        fail("ensemble.small", "must be >= 2")
    if e["large"] < e["small"]:
        fail("ensemble.large", "must be >= ensemble.small")

    x = doc["experiment"]
    if x["initial_conditions"] < 1:
        fail("experiment.initial_conditions", "must be >= 1")
    if not 0 < x["train_fraction"] < 1:
        fail("experiment.train_fraction", "must lie in (0, 1)")
    if not 0 <= x["validation_fraction"] < 1:
        fail("experiment.validation_fraction", "must lie in [0, 1)")
    if x["windows"] < 0:
        fail("experiment.windows", "must be >= 0")
    if x["spinup_steps"] < 0:
        fail("experiment.spinup_steps", "must be >= 0")
    box = x["initial_box"]
    if box is None:
        if model_id == "lorenz96":
            F = spec.params["F"]
            box = [[F - 3.0, F + 3.0]] * spec.dim
        else:
            box = _PRESETS["lorenz63-paper"]["experiment"]["initial_box"]
    try:
        box = np.asarray(box, dtype=np.float64)
    except (TypeError, ValueError):
        fail("experiment.initial_box", "must be a list of [low, high] pairs")
    if box.shape != (spec.dim, 2) or not np.all(box[:, 0] <= box[:, 1]):
        fail("experiment.initial_box", f"must be {spec.dim} pairs [low, high] with low <= high")

    f = doc["fcnn"]
    if not f["hidden_sizes"] or not all(isinstance(s, int) and s >= 1 for s in f["hidden_sizes"]):
        fail("fcnn.hidden_sizes", "must be a non-empty list of positive integers")
    if f["refinement_rounds"] < 0:
        fail("fcnn.refinement_rounds", "must be >= 0")
    for key in ("batch_size", "patience"):
        if f[key] < 1:
            fail(f"fcnn.{key}", "must be >= 1")
    if f["epochs"] < 0:
        fail("fcnn.epochs", "must be >= 0")
    if not f["learning_rate"] > 0:
        fail("fcnn.learning_rate", "must be positive")

    return ExperimentConfig(
        name=doc["name"],
        seed=doc["seed"],
        model=spec,
        observation=obs,
        known_covariance=o["known_covariance"],
        large=e["large"],
        small=e["small"],
        initial_conditions=x["initial_conditions"],
        train_fraction=float(x["train_fraction"]),
        validation_fraction=float(x["validation_fraction"]),
        windows=x["windows"],
        spinup_steps=x["spinup_steps"],
        initial_box=box,
        fcnn=dict(f),
        document=doc,
    )


def load_config(source, seed=None):
    """Load a preset by name or a JSON config file by path."""
    if str(source) in _PRESETS and not Path(str(source)).exists():
        return from_dict(preset_dict(str(source)), seed=seed)
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from None
    return from_dict(raw, text=text, seed=seed)
