"""Run configuration files (YAML).

See ``configs/toy_1d.yaml`` in the repository for an annotated example.
Every section is validated strictly: unknown keys, wrong types and
out-of-range values are rejected with the offending key path in the message.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .kernels import FAMILIES
from .training import TrainConfig

OUTPUT_DIR_ENV = "DEEPGP_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: Path
    targets: list[str]
    normalise: bool = True


@dataclass
class RunConfig:
    data: DataConfig
    layers: list[dict[str, Any]]
    training: TrainConfig
    num_mc_samples: int = 1
    output_dir: Path = Path("runs/default")
    source: Path | None = field(default=None, compare=False)

    def echo(self) -> dict[str, Any]:
        """JSON-friendly copy, as stored in checkpoints."""
        return {
            "data": {"path": str(self.data.path), "targets": list(self.data.targets), "normalise": self.data.normalise},
            "model": {"num_mc_samples": self.num_mc_samples, "layers": [dict(l) for l in self.layers]},
            "training": asdict(self.training),
            "output": {"directory": str(self.output_dir)},
        }


_LAYER_FIELDS = {
    "gp": {
        "name": str,
        "output_dim": int,
        "num_inducing": int,
        "kernel": str,
        "mean_function": str,
        "whitened": bool,
    },
    "latent": {"name": str, "latent_dim": int},
    "dense": {"name": str, "output_dim": int, "activation": str},
}
_LAYER_REQUIRED = {"gp": ("num_inducing",), "latent": ("latent_dim",), "dense": ("output_dim",)}

_TRAINING_FIELDS = {
    "learning_rate": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "mc_samples": int,
    "eval_samples": int,
    "metrics_every": int,
    "plateau": dict,
}
_PLATEAU_FIELDS = {"patience": int, "factor": float, "min_lr": float, "min_delta": float, "window": int}


def _check_type(where: str, value: Any, kind: type) -> Any:
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")
    return value


def _section(where: str, raw: Any, fields: Mapping[str, type], required=()) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    for key in required:
        if key not in raw:
            raise ConfigError(f"{where}.{key}: required")
    return {k: _check_type(f"{where}.{k}", v, fields[k]) for k, v in raw.items()}


def _positive(where: str, value, allow_zero: bool = False):
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{where}: must be {'non-negative' if allow_zero else 'positive'}, got {value}")


def parse_layers(raw: Any) -> list[dict[str, Any]]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("model.layers: expected a non-empty list")
    layers = []
    names = set()
    for i, item in enumerate(raw):
        where = f"model.layers[{i}]"
        if not isinstance(item, dict) or "type" not in item:
            raise ConfigError(f"{where}: expected a mapping with a 'type'")
        kind = item["type"]
        if kind not in _LAYER_FIELDS:
            raise ConfigError(f"{where}.type: unknown layer type {kind!r}")
        body = {k: v for k, v in item.items() if k != "type"}
        spec = _section(where, body, _LAYER_FIELDS[kind], _LAYER_REQUIRED[kind])
        for key in ("output_dim", "num_inducing", "latent_dim"):
            if key in spec:
                _positive(f"{where}.{key}", spec[key])
        if spec.get("kernel", FAMILIES[0]) not in FAMILIES:
            raise ConfigError(f"{where}.kernel: choose from {list(FAMILIES)}")
        if spec.get("mean_function", "zero") not in ("zero", "linear"):
            raise ConfigError(f"{where}.mean_function: choose from ['zero', 'linear']")
        if spec.get("activation", "identity") not in ("identity", "tanh"):
            raise ConfigError(f"{where}.activation: choose from ['identity', 'tanh']")
        name = spec.get("name", f"{kind}{i}")
        if name in names or name == "likelihood" or "/" in name:
            raise ConfigError(f"{where}.name: {name!r} is duplicated or reserved")
        names.add(name)
        spec["name"] = name
        layers.append({"type": kind, **spec})
    if layers[-1]["type"] != "gp":
        raise ConfigError("model.layers: the last layer must be of type 'gp'")
    return layers


def parse_config(raw: Any, base_dir: Path = Path("."), env: Mapping[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    top = _section("config", raw, {"data": dict, "model": dict, "training": dict, "output": dict}, ("data", "model"))

    data = _section("data", top["data"], {"path": str, "targets": list, "normalise": bool}, ("path", "targets"))
    if not data["targets"] or not all(isinstance(t, str) for t in data["targets"]):
        raise ConfigError("data.targets: expected a non-empty list of column names")
    data_path = Path(data["path"])
    if not data_path.is_absolute():
        data_path = base_dir / data_path

    model = _section("model", top["model"], {"layers": list}, ("layers",))
    layers = parse_layers(model["layers"])

    training = _section("training", top.get("training", {}), _TRAINING_FIELDS)
    plateau = _section("training.plateau", training.pop("plateau", {}), _PLATEAU_FIELDS)
    mc_samples = training.pop("mc_samples", 1)
    _positive("training.mc_samples", mc_samples)
    for key in ("learning_rate", "batch_size"):
        if key in training:
            _positive(f"training.{key}", training[key])
    for key in ("epochs", "eval_samples", "metrics_every"):
        if key in training:
            _positive(f"training.{key}", training[key], allow_zero=True)
    if "factor" in plateau and not 0 < plateau["factor"] < 1:
        raise ConfigError("training.plateau.factor: must lie in (0, 1)")
    for key in ("patience", "min_lr", "min_delta", "window"):
        if key in plateau:
            _positive(f"training.plateau.{key}", plateau[key], allow_zero=key != "window")
    renamed = {
        "patience": "plateau_patience",
        "factor": "plateau_factor",
        "min_lr": "min_lr",
        "min_delta": "plateau_min_delta",
        "window": "plateau_window",
    }
    train_config = TrainConfig(**training, **{renamed[k]: v for k, v in plateau.items()})

    output = _section("output", top.get("output", {}), {"directory": str})
    out_dir = Path(env.get(OUTPUT_DIR_ENV) or output.get("directory", "runs/default"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir

    return RunConfig(
        data=DataConfig(data_path, list(data["targets"]), data.get("normalise", True)),
        layers=layers,
        training=train_config,
        num_mc_samples=mc_samples,
        output_dir=out_dir,
    )


def load_config(path: str | os.PathLike, env: Mapping[str, str] | None = None) -> RunConfig:
    """Parse a YAML run file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    config = parse_config(raw, path.parent, env)
    config.source = path
    return config
