"""Training configuration and its INI (key = value) serialization."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, fields

from ..episodes import SyntheticSpec
from ..losses import LossWeights
from ..model import ModelConfig

SECTION = "dfr"


@dataclass
class TrainConfig:
    # episodes
    way: int = 5
    shot: int = 1
    queries: int = 15
    # optimisation
    iterations: int = 5000
    lr: float = 0.05
    lr_milestones: tuple[float, ...] = (0.6, 0.8)  # fractions of ``iterations``
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    # losses
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    grl_lambda: float = 1.0
    pairs_per_sample: int = 4
    l1_reduction: str = "mean"
    tran_normalization: str = "verbatim"
    augment: bool = False
    # model
    image_size: int = 32
    cls_channels: tuple[int, ...] = (64, 160, 320, 640)
    var_channels: int = 128
    mlp_hidden: int = 256
    relation_channels: int = 64
    relation_hidden: int = 8
    final_bn_gain: float = 0.05
    perceptual_seed: int = 1234
    perceptual_channels: tuple[int, ...] = (8, 16, 32)
    # data
    source: str = "synthetic"
    folder: str = ""
    domain_level: bool = False
    num_classes: int = 30
    samples_per_class_per_domain: int = 25
    domains: tuple[str, ...] = ("real", "sketch", "painting")
    rho_train: float = 0.0
    rho_test: float = 0.0
    data_seed: int = 0
    hue_bins: int = 8
    split_counts: tuple[int, ...] = (16, 4, 10)
    split_seed: int = 0
    # few-shot domain generalization (empty setting = classic few-shot)
    setting: str = ""
    source_domains: tuple[str, ...] = ()
    target_domain: str = ""
    multi_domain_query: bool = False
    # outputs
    out_dir: str = "runs/default"
    checkpoint: str = ""
    metrics: str = ""
    log_every: int = 0

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.queries < 1:
            raise ValueError("need way >= 2, shot >= 1, queries >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.l1_reduction not in ("mean", "sum"):
            raise ValueError("l1_reduction must be 'mean' or 'sum'")
        if self.tran_normalization not in ("verbatim", "mean"):
            raise ValueError("tran_normalization must be 'verbatim' or 'mean'")
        if self.source not in ("synthetic", "folder"):
            raise ValueError("source must be 'synthetic' or 'folder'")
        if self.setting not in ("", "A", "B"):
            raise ValueError("setting must be empty, 'A' or 'B'")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            cls_channels=tuple(self.cls_channels),
            var_channels=self.var_channels,
            mlp_hidden=self.mlp_hidden,
            relation_channels=self.relation_channels,
            relation_hidden=self.relation_hidden,
            grl_lambda=self.grl_lambda,
            final_bn_gain=self.final_bn_gain,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes,
            samples_per_class_per_domain=self.samples_per_class_per_domain,
            image_size=self.image_size,
            domains=tuple(self.domains),
            rho=self.rho_train,
            seed=self.data_seed,
            hue_bins=self.hue_bins,
        )

    def milestones(self) -> list[int]:
        return [int(round(f * self.iterations)) for f in self.lr_milestones]

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``."""
        n = sum(1 for m in self.milestones() if iteration > m)
        return self.lr * self.lr_decay**n

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization ----------------------------------------------------------
    def to_ini(self, extra: dict[str, str] | None = None) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp[SECTION] = {f.name: _format(getattr(self, f.name)) for f in fields(self)}
        if extra:
            cp["checkpoint"] = extra
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "TrainConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text if "[" in text else f"[{SECTION}]\n{text}")
        return cls.from_mapping(dict(cp[SECTION]))

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**{k: _parse(v, hints[k]) for k, v in mapping.items()})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin is tuple:
        (elem, *_rest) = typing.get_args(hint)
        return tuple(_parse(t, elem) for t in text.split(",") if t.strip()) if text else ()
    if hint is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text
