"""Run configuration: a YAML file with a fixed key set.

Every section and key is optional; missing keys take the defaults below.
Unknown keys, wrong types and bad values are all collected and reported
together in one ``ConfigError``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .backbone import BackboneConfig, default_blocks
from .heads import BRANCH_MODES, ModelConfig
from .skeleton import (Dataset, SkeletonTopology, generate_synthetic_dataset, load_dataset,
                       ntu_topology, stratified_split)
from .training import TrainConfig, noisy_dataset

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "dir": None,
        "synthetic": {"class_count": 8, "clips_per_class": 40, "seed": 7},
        "val_fraction": 0.25,
        "noise_sigma": 0.0,
    },
    "model": {
        "channels": [8, 16, 16],
        "strides": [1, 2, 2],
        "kernel": 9,
        "esa": False,
        "esa_kernel": 9,
        "segments": 5,
        "selected": 3,
        "saliency": "softmax",
        "loss_weights": [1.0, 1.0, 1.0, 1.0],
        "frames": 100,
        "topology": "ntu",
    },
    "train": {
        "epochs": 20,
        "batch_size": 16,
        "lr0": 0.1,
        "lr_drop_epochs": [12, 16],
        "lr_drop_factor": 10.0,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "dif": True,
        "branch_mode": "both",
    },
    "experiment": {
        "fractions": [0.25, 0.5, 1.0],
        "sigmas": [0.0, 0.02, 0.05, 0.1],
        "seeds": [0, 1, 2],
    },
}

# keys whose value may be null
NULLABLE = {"data.dir"}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _coerce(value, default, key: str, errors: list[str]):
    """Check ``value`` against the type of ``default``; returns the coerced value."""
    if value is None:
        if key in NULLABLE:
            return None
        errors.append(f"{key}: must not be null")
        return default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # PyYAML reads "1e-4" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str) or default is None:
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            if default:
                return [_coerce(v, default[0], f"{key}[{i}]", errors)
                        for i, v in enumerate(value)]
            return value
    errors.append(f"{key}: expected {type(default).__name__ if default is not None else 'str'}, "
                  f"got {type(value).__name__} ({value!r})")
    return default


def _merge(raw, defaults: dict, prefix: str, errors: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    if raw is None:
        return out
    if not isinstance(raw, dict):
        errors.append(f"{prefix or '<root>'}: expected a mapping, got {type(raw).__name__}")
        return out
    for k, v in raw.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if k not in defaults:
            errors.append(f"{key}: unknown key")
        elif isinstance(defaults[k], dict):
            out[k] = _merge(v, defaults[k], key, errors)
        else:
            out[k] = _coerce(v, defaults[k], key, errors)
    return out


@dataclass
class RunConfig:
    values: dict
    source: Path | None = None

    @classmethod
    def from_dict(cls, raw, source=None, base_dir=None) -> "RunConfig":
        errors: list[str] = []
        values = _merge(raw, DEFAULTS, "", errors)
        cfg = cls(values, Path(source) if source else None)
        cfg._resolve_paths(Path(base_dir) if base_dir else Path.cwd())
        errors.extend(cfg._validate())
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError([f"{path}: YAML syntax error: {e}"]) from None
        return cls.from_dict(raw, path, path.parent)

    def _resolve_paths(self, base: Path):
        # relative paths in a config file are taken relative to that file
        d = self.values
        if d["data"]["dir"] is not None:
            d["data"]["dir"] = str((base / d["data"]["dir"]).resolve())
        if d["model"]["topology"] != "ntu":
            d["model"]["topology"] = str((base / d["model"]["topology"]).resolve())
        d["output_dir"] = str((base / d["output_dir"]).resolve())

    def _validate(self) -> list[str]:
        errors = []
        d = self.values
        data, model, train, exp = d["data"], d["model"], d["train"], d["experiment"]
        if data["dir"] is not None and not (Path(data["dir"]) / "manifest.csv").is_file():
            errors.append(f"data.dir: no manifest.csv in {data['dir']}")
        if not 0 < data["val_fraction"] < 1:
            errors.append("data.val_fraction: must be in (0, 1)")
        if data["noise_sigma"] < 0:
            errors.append("data.noise_sigma: must be >= 0")
        syn = data["synthetic"]
        if syn["class_count"] < 1 or syn["clips_per_class"] < 2:
            errors.append("data.synthetic: need class_count >= 1 and clips_per_class >= 2")
        if len(model["channels"]) != len(model["strides"]) or not model["channels"]:
            errors.append("model.channels / model.strides: need equal, non-zero lengths")
        if any(c < 1 for c in model["channels"]) or any(s < 1 for s in model["strides"]):
            errors.append("model.channels / model.strides: entries must be >= 1")
        if model["kernel"] % 2 != 1 or model["esa_kernel"] % 2 != 1:
            errors.append("model.kernel / model.esa_kernel: must be odd")
        if not 1 <= model["selected"] <= model["segments"]:
            errors.append("model.selected: need 1 <= selected <= segments")
        if model["saliency"] not in ("softmax", "logit"):
            errors.append("model.saliency: must be 'softmax' or 'logit'")
        if len(model["loss_weights"]) != 4:
            errors.append("model.loss_weights: need 4 entries")
        if model["frames"] < model["segments"]:
            errors.append("model.frames: must be >= model.segments")
        if model["topology"] != "ntu" and not Path(model["topology"]).is_file():
            errors.append(f"model.topology: file not found: {model['topology']}")
        if train["branch_mode"] not in BRANCH_MODES:
            errors.append(f"train.branch_mode: must be one of {list(BRANCH_MODES)}")
        if train["epochs"] < 1 or train["batch_size"] < 1:
            errors.append("train.epochs / train.batch_size: must be >= 1")
        if any(not 0 < e < train["epochs"] for e in train["lr_drop_epochs"]):
            errors.append("train.lr_drop_epochs: entries must lie in (0, epochs)")
        if train["lr_drop_factor"] <= 1:
            errors.append("train.lr_drop_factor: must be > 1")
        if any(not 0 < f <= 1 for f in exp["fractions"]):
            errors.append("experiment.fractions: entries must be in (0, 1]")
        if any(s < 0 for s in exp["sigmas"]):
            errors.append("experiment.sigmas: entries must be >= 0")
        if not exp["seeds"]:
            errors.append("experiment.seeds: need at least one seed")
        return errors

    # -- derived objects ---------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    def topology(self) -> SkeletonTopology:
        t = self.values["model"]["topology"]
        if t == "ntu":
            return ntu_topology()
        return SkeletonTopology.from_dict(json.loads(Path(t).read_text()))

    def model_config(self, num_classes: int, seed: int | None = None) -> ModelConfig:
        m = self.values["model"]
        blocks = default_blocks(3, tuple(m["channels"]), tuple(m["strides"]), m["kernel"])
        return ModelConfig(
            num_classes=num_classes,
            backbone=BackboneConfig(blocks, m["esa"], m["esa_kernel"]),
            segments=m["segments"], selected=m["selected"], saliency=m["saliency"],
            loss_weights=tuple(m["loss_weights"]), dif_enabled=self.values["train"]["dif"],
            frames=m["frames"], topology=self.topology().to_dict(),
            seed=self.seed if seed is None else seed)

    def train_config(self, seed: int | None = None, **overrides) -> TrainConfig:
        t = dict(self.values["train"])
        t["dif_enabled"] = t.pop("dif")
        t["seed"] = self.seed if seed is None else seed
        t.update(overrides)
        return TrainConfig(**t)

    def datasets(self) -> tuple[Dataset, Dataset]:
        """``(train, val)``; noise (if configured) is applied to both with fixed seeds."""
        data = self.values["data"]
        if data["dir"] is not None:
            splits = load_dataset(data["dir"])
            if "train" not in splits:
                raise ConfigError([f"data.dir: manifest has no 'train' split"])
            train = splits["train"]
            val = splits.get("val") or splits.get("test")
            if val is None:
                train, val = stratified_split(train, data["val_fraction"], self.seed)
        else:
            syn = data["synthetic"]
            ds = generate_synthetic_dataset(syn["class_count"], syn["clips_per_class"],
                                            seed=syn["seed"], frames=self.values["model"]["frames"])
            train, val = stratified_split(ds, data["val_fraction"], syn["seed"])
        sigma = data["noise_sigma"]
        if sigma > 0:
            train = noisy_dataset(train, sigma, 2 * self.seed + 1)
            val = noisy_dataset(val, sigma, 2 * self.seed + 2)
        return train, val

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=False)

    def write(self, path) -> None:
        Path(path).write_text(self.to_yaml())
