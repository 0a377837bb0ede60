"""Run configuration: INI-style file with sections, named presets, overrides.

Precedence, lowest first: preset defaults, config file, ``--set`` / CLI flags.
Relative dataset paths resolve against ``$MSCLR_DATA_ROOT`` when it is set,
otherwise against the config file's directory (or the working directory).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .conventions import ConventionRegistry
from .dataio.augment import AugmentationConfig
from .dataio.streams import STREAMS
from .evalkit import FORMATS_FIRST, STREAMS_FIRST, LinearSchedule, Protocol
from .network import STGCNConfig
from .pretrain import PretrainConfig

DATA_ROOT_ENV = "MSCLR_DATA_ROOT"


class ConfigError(ValueError):
    pass


_COMMON = {
    "run.seed": "0",
    "run.output_dir": "runs/out",
    "run.workers": "0",
    "data.dataset": "",
    "data.formats": "kinectv2, smplx",
    "data.streams": "joint",
    "data.eval_formats": "kinectv2",
    "data.frames": "50",
    "data.train_split": "train",
    "data.test_split": "test",
    "model.temporal_kernel": "9",
    "model.embedding_dim": "256",
    "model.projection_dim": "128",
    "model.edge_importance": "true",
    "model.dropout": "0.0",
    "pretrain.lr": "0.1",
    "pretrain.lr_gamma": "0.1",
    "pretrain.momentum": "0.9",
    "pretrain.weight_decay": "1e-4",
    "pretrain.temperature": "0.07",
    "augment.shear_amplitude": "0.5",
    "augment.crop_ratio_min": "0.5",
    "augment.crop_ratio_max": "1.0",
    "augment.flip_probability": "0.5",
    "augment.noise_sigma": "0.05",
    "augment.blur_sigma": "1.0",
    "augment.shear": "true",
    "augment.crop": "true",
    "augment.flip": "true",
    "augment.noise": "true",
    "augment.blur": "true",
    "linear.lr_gamma": "0.1",
    "linear.momentum": "0.9",
    "linear.weight_decay": "0.0",
    "eval.fusion_weights": "joint:0.6, motion:0.6, bone:0.4",
    "eval.ensemble": "false",
    "eval.ensemble_order": FORMATS_FIRST,
}

PRESETS: dict[str, dict[str, str]] = {
    "paper": {
        **_COMMON,
        "model.widths": "64, 64, 64, 64, 128, 128, 128, 256, 256, 256",
        "pretrain.epochs": "300",
        "pretrain.lr_milestones": "250",
        "pretrain.batch_size": "128",
        "pretrain.ema_momentum": "0.999",
        "pretrain.bank_size": "32768",
        "linear.epochs": "100",
        "linear.lr": "3.0",
        "linear.lr_milestones": "80",
        "linear.batch_size": "128",
    },
    "desk": {
        **_COMMON,
        "model.widths": "32, 32, 64",
        "pretrain.epochs": "50",
        "pretrain.lr_milestones": "40",
        "pretrain.batch_size": "16",
        "pretrain.ema_momentum": "0.99",
        "pretrain.bank_size": "8192",
        "linear.epochs": "20",
        "linear.lr": "0.1",
        "linear.lr_milestones": "16",
        "linear.batch_size": "8",
    },
}


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


@dataclass
class RunConfig:
    """Flat ``section.key -> string`` mapping with typed accessors."""

    values: dict[str, str]
    preset: str = "desk"
    source: Path | None = None
    overrides: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None = None, preset: str | None = None,
             overrides: Mapping[str, str] | None = None) -> "RunConfig":
        file_values: dict[str, str] = {}
        file_preset = None
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    file_values[f"{section}.{key}"] = value
            file_preset = file_values.pop("run.preset", None)
        overrides = dict(overrides or {})
        name = preset or overrides.pop("run.preset", None) or file_preset or "desk"
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[name])
        for key in list(file_values) + list(overrides):
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
        values.update(file_values)
        values.update(overrides)
        return cls(values, name, Path(path) if path is not None else None, overrides)

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {self.values[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {self.values[key]!r}") from None

    def get_list(self, key: str) -> list[str]:
        return _split(self.values[key])

    def ints(self, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self.get_list(key))
        except ValueError:
            raise ConfigError(f"{key}: expected integers, got {self.values[key]!r}") from None

    def get_bool(self, key: str) -> bool:
        try:
            return _bool(self.values[key])
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    @property
    def seed(self) -> int:
        return self.get_int("run.seed")

    @property
    def formats(self) -> list[str]:
        return self.get_list("data.formats")

    @property
    def eval_formats(self) -> list[str]:
        return self.get_list("data.eval_formats")

    @property
    def streams(self) -> list[str]:
        return self.get_list("data.streams")

    @property
    def output_dir(self) -> Path:
        return Path(self.values["run.output_dir"])

    def dataset_path(self) -> Path:
        raw = self.values["data.dataset"]
        if not raw:
            raise ConfigError("data.dataset is not set")
        path = Path(raw)
        if not path.is_absolute():
            root = os.environ.get(DATA_ROOT_ENV)
            if root:
                path = Path(root) / path
            elif self.source is not None:
                path = self.source.parent / path
        return path

    def fusion_weights(self) -> dict[str, float]:
        out = {}
        for item in self.get_list("eval.fusion_weights"):
            name, _, w = item.partition(":")
            try:
                out[name.strip()] = float(w)
            except ValueError:
                raise ConfigError(f"eval.fusion_weights: bad entry {item!r}") from None
        return out

    def model_config(self) -> STGCNConfig:
        return STGCNConfig(block_channel_widths=self.ints("model.widths"),
                           temporal_kernel=self.get_int("model.temporal_kernel"),
                           embedding_dim=self.get_int("model.embedding_dim"),
                           projection_dim=self.get_int("model.projection_dim"),
                           edge_importance=self.get_bool("model.edge_importance"),
                           dropout=self.get_float("model.dropout"))

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(
            shear_amplitude=self.get_float("augment.shear_amplitude"),
            crop_ratio_min=self.get_float("augment.crop_ratio_min"),
            crop_ratio_max=self.get_float("augment.crop_ratio_max"),
            flip_probability=self.get_float("augment.flip_probability"),
            noise_sigma=self.get_float("augment.noise_sigma"),
            blur_sigma=self.get_float("augment.blur_sigma"),
            shear=self.get_bool("augment.shear"), crop=self.get_bool("augment.crop"),
            flip=self.get_bool("augment.flip"), noise=self.get_bool("augment.noise"),
            blur=self.get_bool("augment.blur"), seed=self.seed)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.get_int("pretrain.epochs"), lr=self.get_float("pretrain.lr"),
            lr_milestones=self.ints("pretrain.lr_milestones"),
            lr_gamma=self.get_float("pretrain.lr_gamma"), momentum=self.get_float("pretrain.momentum"),
            weight_decay=self.get_float("pretrain.weight_decay"),
            batch_size=self.get_int("pretrain.batch_size"),
            temperature=self.get_float("pretrain.temperature"),
            ema_momentum=self.get_float("pretrain.ema_momentum"),
            bank_size=self.get_int("pretrain.bank_size"), frames=self.get_int("data.frames"),
            streams=tuple(self.streams), seed=self.seed, model=self.model_config(),
            augmentation=self.augmentation())

    def linear_schedule(self) -> LinearSchedule:
        return LinearSchedule(epochs=self.get_int("linear.epochs"), lr=self.get_float("linear.lr"),
                              lr_milestones=self.ints("linear.lr_milestones"),
                              lr_gamma=self.get_float("linear.lr_gamma"),
                              batch_size=self.get_int("linear.batch_size"),
                              momentum=self.get_float("linear.momentum"),
                              weight_decay=self.get_float("linear.weight_decay"), seed=self.seed)

    def protocol(self, checkpoint_id: str = "") -> Protocol:
        order = self.get("eval.ensemble_order")
        if order not in (FORMATS_FIRST, STREAMS_FIRST):
            raise ConfigError(f"eval.ensemble_order must be {FORMATS_FIRST} or {STREAMS_FIRST}")
        return Protocol(split=self.get("data.test_split"), streams=tuple(self.streams),
                        formats=tuple(self.eval_formats), ensemble=self.get_bool("eval.ensemble"),
                        order=order, fusion_weights=tuple(self.fusion_weights().items()),
                        checkpoint_id=checkpoint_id)

    def validate(self, registry: ConventionRegistry, require_dataset: bool = True) -> list[str]:
        """Return a list of problems; empty when the configuration is usable."""
        problems = []
        for key in ("data.formats", "data.eval_formats"):
            names = self.get_list(key)
            if not names:
                problems.append(f"{key} is empty")
            for name in names:
                if name not in registry:
                    problems.append(f"{key}: unknown convention {name!r}")
        for s in self.streams:
            if s not in STREAMS:
                problems.append(f"data.streams: unknown stream {s!r}")
        weights = {}
        try:
            weights = self.fusion_weights()
        except ConfigError as exc:
            problems.append(str(exc))
        for s in self.streams:
            if weights and s not in weights:
                problems.append(f"eval.fusion_weights has no weight for stream {s!r}")
        builders = (self.pretrain_config, self.linear_schedule, self.protocol)
        for build in builders:
            try:
                build()
            except (ConfigError, ValueError) as exc:
                problems.append(str(exc))
        if require_dataset:
            try:
                path = self.dataset_path()
                if not path.exists():
                    problems.append(f"data.dataset: {path} does not exist")
            except ConfigError as exc:
                problems.append(str(exc))
        return problems

    def echo(self) -> dict[str, str]:
        return {"preset": self.preset, **dict(sorted(self.values.items()))}


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out[key.strip()] = value.strip()
    return out
