"""Experiment configuration files (TOML).

Grammar::

    [dataset]   root, archive, target_size = [H, W], classes = [...]
    [split]     ratios = [train, val, test], seed
    [model]     name = "alexnet" | "vit"   (train)
                names = ["alexnet", "vit"] (compare)
    [model.alexnet]  width_scale, dropout_rate, input_size, batch_size
    [model.vit]      preset = "tiny" | "b16", dropout_rate, batch_size, and any
                     ViTConfig field (image_size, patch_size, embed_dim, ...)
    [train]     TrainConfig fields
    [augment]   enabled, horizontal_flip_prob, rotation_degrees_max,
                crop_scale_range = [lo, hi], color_jitter_strength
    [output]    dir

Unknown keys and wrongly typed values raise :class:`ConfigError` naming the
dotted field path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .alexnet import AlexNetConfig, AlexNet
from .data import AugmentationPolicy
from .training import TrainConfig
from .vit import PRESETS, ViT

MODEL_NAMES = ("alexnet", "vit")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_INT = (int,)
_NUM = (int, float)

_DATASET_KEYS = {"root": str, "archive": str, "target_size": list, "classes": list}
_SPLIT_KEYS = {"ratios": list, "seed": int}
_ALEXNET_KEYS = {"width_scale": float, "dropout_rate": float, "input_size": int, "batch_size": int}
_VIT_KEYS = {
    "preset": str, "dropout_rate": float, "batch_size": int, "image_size": list, "patch_size": int,
    "embed_dim": int, "depth": int, "num_heads": int, "mlp_hidden": int, "final_layernorm": bool,
}
_AUGMENT_KEYS = {
    "enabled": bool, "horizontal_flip_prob": float, "rotation_degrees_max": float,
    "crop_scale_range": list, "color_jitter_strength": float,
}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _typed(value, kind, path):
    if kind in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, _NUM):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, _INT):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected an array, got {value!r}")
        return value
    raise AssertionError(kind)


def _section(raw: dict, name: str, schema: dict, required: tuple[str, ...] = ()) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "expected a table")
    out = {}
    for key, value in sec.items():
        path = f"{name}.{key}"
        if key not in schema:
            raise ConfigError(path, "unknown key")
        out[key] = _typed(value, schema[key], path)
    for key in required:
        if key not in out:
            raise ConfigError(f"{name}.{key}", "missing required key")
    return out


def _pair(values, path, kind=int) -> tuple:
    if len(values) != 2:
        raise ConfigError(path, f"expected two values, got {values!r}")
    return tuple(_typed(v, kind, f"{path}[{i}]") for i, v in enumerate(values))


@dataclass
class ExperimentConfig:
    archive: str
    root: str | None = None
    target_size: tuple[int, int] | None = None
    classes: list[str] | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    models: list[str] = field(default_factory=list)
    model_options: dict[str, dict] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationPolicy | None = None
    output_dir: str = "runs"
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        if seed is not None:
            raw.setdefault("split", {})["seed"] = seed
            raw.setdefault("train", {})["seed"] = seed
        if out is not None:
            raw.setdefault("output", {})["dir"] = out
        return parse_config(raw)

    def train_config_for(self, name: str) -> TrainConfig:
        bs = self.model_options.get(name, {}).get("batch_size")
        return self.train if bs is None else dataclasses.replace(self.train, batch_size=bs)

    def build_model(self, name: str, num_classes: int):
        opts = {k: v for k, v in self.model_options.get(name, {}).items() if k != "batch_size"}
        seed = self.train.seed
        if name == "alexnet":
            return AlexNet(AlexNetConfig(num_classes=num_classes, **opts), seed)
        preset = opts.pop("preset", "tiny")
        if "image_size" in opts:
            opts["image_size"] = tuple(opts["image_size"])
        return ViT(PRESETS[preset](num_classes, **opts), seed)


def parse_config(raw: dict) -> ExperimentConfig:
    known = {"dataset", "split", "model", "train", "augment", "output"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown section")
    ds = _section(raw, "dataset", _DATASET_KEYS, required=("archive",))
    sp = _section(raw, "split", _SPLIT_KEYS)
    out = _section(raw, "output", {"dir": str})

    model_raw = raw.get("model", {})
    if not isinstance(model_raw, dict):
        raise ConfigError("model", "expected a table")
    names: list[str] = []
    options: dict[str, dict] = {}
    for key, value in model_raw.items():
        if key == "name":
            names = [_typed(value, str, "model.name")]
        elif key == "names":
            names = [_typed(v, str, f"model.names[{i}]") for i, v in enumerate(_typed(value, list, "model.names"))]
        elif key in MODEL_NAMES:
            schema = _ALEXNET_KEYS if key == "alexnet" else _VIT_KEYS
            options[key] = _section({f"model.{key}": value}, f"model.{key}", schema)
        else:
            raise ConfigError(f"model.{key}", "unknown key")
    for i, n in enumerate(names):
        if n not in MODEL_NAMES:
            raise ConfigError(f"model.names[{i}]" if len(names) > 1 else "model.name", f"unknown model {n!r}")
    if "vit" in options:
        vo = options["vit"]
        if vo.get("preset", "tiny") not in PRESETS:
            raise ConfigError("model.vit.preset", f"must be one of {sorted(PRESETS)}")
        if "image_size" in vo:
            vo["image_size"] = list(_pair(vo["image_size"], "model.vit.image_size"))

    tr = _section(raw, "train", _TRAIN_KEYS)
    try:
        train = TrainConfig(**tr)
        train.validate()
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None
    if not 0 <= train.seed < 2**64:
        raise ConfigError("train.seed", "must be an unsigned 64-bit integer")

    aug = _section(raw, "augment", _AUGMENT_KEYS)
    policy = None
    if aug.pop("enabled", bool(aug)):
        if "crop_scale_range" in aug:
            aug["crop_scale_range"] = _pair(aug["crop_scale_range"], "augment.crop_scale_range", float)
        try:
            policy = AugmentationPolicy(**aug)
        except ValueError as exc:
            raise ConfigError("augment", str(exc)) from None

    target = _pair(ds["target_size"], "dataset.target_size") if "target_size" in ds else None
    classes = None
    if "classes" in ds:
        classes = [_typed(c, str, f"dataset.classes[{i}]") for i, c in enumerate(ds["classes"])] or None
    ratios = (0.8, 0.1, 0.1)
    if "ratios" in sp:
        if len(sp["ratios"]) != 3:
            raise ConfigError("split.ratios", "expected three values")
        ratios = tuple(_typed(r, float, f"split.ratios[{i}]") for i, r in enumerate(sp["ratios"]))
        if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split.ratios", f"must be positive and sum to 1, got {list(ratios)}")
    seed = sp.get("seed", 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("split.seed", "must be an unsigned 64-bit integer")

    cfg = ExperimentConfig(
        archive=ds["archive"], root=ds.get("root"), target_size=target, classes=classes,
        split_ratios=ratios, split_seed=seed, models=names, model_options=options,
        train=train, augment=policy, output_dir=out.get("dir", "runs"), raw=raw,
    )
    # surface model-config errors (bad width_scale, indivisible patches) at load time
    for name in names:
        try:
            _check_model_options(cfg, name)
        except ValueError as exc:
            raise ConfigError(f"model.{name}", str(exc)) from None
    return cfg


def _check_model_options(cfg: ExperimentConfig, name: str) -> None:
    opts = {k: v for k, v in cfg.model_options.get(name, {}).items() if k != "batch_size"}
    if name == "alexnet":
        AlexNetConfig(num_classes=2, **opts).validate()
    else:
        preset = opts.pop("preset", "tiny")
        if "image_size" in opts:
            opts["image_size"] = tuple(opts["image_size"])
        PRESETS[preset](2, **opts).validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return parse_config(raw)
