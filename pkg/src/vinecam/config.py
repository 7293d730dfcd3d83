"""Run configuration: an INI file with [data], [prep], [split], [model] and [train] sections.

Example (every training-settings row has a key)::

    [model]
    preset = desk

    [train]
    optimizer = adam
    loss = cross_entropy
    learning_rate = 0.001
    lr_scheduler = plateau
    max_epochs = 20
    early_stop_patience = 5
    early_stop_min_delta = 0.001
    batch_size = 32
    mixed_precision = false
    dropout_rate = 0.4
    weight_decay = 0.0001
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .densenet import ModelConfig, preset
from .imageprep import PrepConfig
from .training import TrainSettings

_TRAIN_INT = {"batch_size", "max_epochs", "early_stop_patience", "plateau_patience", "eval_batch_size", "seed"}
_TRAIN_FLOAT = {"learning_rate", "early_stop_min_delta", "weight_decay", "plateau_factor", "min_lr",
                "dropout_rate", "beta1", "beta2", "adam_eps"}
_FIXED = {"optimizer": "adam", "loss": "cross_entropy", "lr_scheduler": "plateau", "mixed_precision": "false"}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class RunConfig:
    data_root: str = ""
    prep: PrepConfig = field(default_factory=lambda: PrepConfig(target_size=64))
    fractions: tuple[float, float, float] = (0.80, 0.05, 0.15)
    split_seed: int = 0
    model_preset: str = "desk"
    model: ModelConfig = field(default_factory=lambda: preset("desk"))
    train: TrainSettings = field(default_factory=TrainSettings)
    out: str = "runs/default"

    def __post_init__(self):
        if self.model.input_size != self.prep.target_size:
            raise ValueError(f"model input size {self.model.input_size} differs from prep target size "
                             f"{self.prep.target_size}")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three values summing to 1, got {self.fractions}")

    def model_for(self, num_classes: int) -> ModelConfig:
        d = self.model.to_dict()
        d.update(num_classes=num_classes, dropout_rate=self.train.dropout_rate)
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "prep": self.prep.to_dict(),
            "split": {"fractions": list(self.fractions), "seed": self.split_seed},
            "model": {"preset": self.model_preset, **self.model.to_dict()},
            "train": self.train.to_dict(),
        }

    def digest(self) -> str:
        """Hash of every setting that influences results (paths excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, split_seed=seed, train=replace(self.train, seed=seed))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``{"section.key": value}`` overrides."""
    cp = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        cp.read(path, encoding="utf-8")
    for key, value in (overrides or {}).items():
        section, _, option = key.partition(".")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, str(value))
    return _from_parser(cp)


def _from_parser(cp: configparser.ConfigParser) -> RunConfig:
    known = {"data", "prep", "split", "model", "train", "run"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    m = cp["model"] if cp.has_section("model") else {}
    preset_name = m.get("preset", "desk")
    model_over = {}
    for key in ("growth_rate", "stem_channels", "bottleneck_factor", "input_size"):
        if key in m:
            model_over[key] = int(m[key])
    if "compression" in m:
        model_over["compression"] = float(m["compression"])
    if "block_sizes" in m:
        model_over["block_sizes"] = tuple(int(v) for v in _floats(m["block_sizes"]))
    for key in m:
        if key not in {"preset", "compression", "block_sizes", *model_over}:
            raise ValueError(f"unknown [model] key {key!r}")
    model = preset(preset_name, **model_over)

    p = cp["prep"] if cp.has_section("prep") else {}
    prep_kw: dict = {"target_size": int(p.get("target_size", model.input_size))}
    if "stretch_low" in p or "stretch_high" in p:
        prep_kw["stretch_percentiles"] = (float(p.get("stretch_low", 2)), float(p.get("stretch_high", 98)))
    if "median_kernel" in p:
        prep_kw["median_kernel"] = int(p["median_kernel"])
    for key in ("channel_mean", "channel_std"):
        if key in p:
            prep_kw[key] = _floats(p[key])
    for stage in ("resize", "stretch", "equalize", "median", "standardize"):
        if stage in p:
            prep_kw[stage] = cp.getboolean("prep", stage)
    allowed = {"target_size", "stretch_low", "stretch_high", "median_kernel", "channel_mean", "channel_std",
               "resize", "stretch", "equalize", "median", "standardize"}
    for key in p:
        if key not in allowed:
            raise ValueError(f"unknown [prep] key {key!r}")
    prep = PrepConfig(**prep_kw)

    s = cp["split"] if cp.has_section("split") else {}
    fractions = _floats(s["fractions"]) if "fractions" in s else (0.80, 0.05, 0.15)
    split_seed = int(s.get("seed", 0))

    t = cp["train"] if cp.has_section("train") else {}
    train_kw = {}
    for key, value in t.items():
        if key in _FIXED:
            if value.strip().lower() != _FIXED[key]:
                raise ValueError(f"[train] {key} = {value!r} is not supported (only {_FIXED[key]!r})")
        elif key in _TRAIN_INT:
            train_kw[key] = int(value)
        elif key in _TRAIN_FLOAT:
            train_kw[key] = float(value)
        else:
            raise ValueError(f"unknown [train] key {key!r}")
    train = TrainSettings(**train_kw)

    d = cp["data"] if cp.has_section("data") else {}
    r = cp["run"] if cp.has_section("run") else {}
    return RunConfig(d.get("root", ""), prep, tuple(fractions), split_seed, preset_name, model, train,
                     r.get("out", "runs/default"))


def write_config(cfg: RunConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp["data"] = {"root": cfg.data_root}
    pr = cfg.prep
    cp["prep"] = {
        "target_size": str(pr.target_size),
        "stretch_low": repr(pr.stretch_percentiles[0]),
        "stretch_high": repr(pr.stretch_percentiles[1]),
        "median_kernel": str(pr.median_kernel),
        "channel_mean": ", ".join(repr(v) for v in pr.channel_mean),
        "channel_std": ", ".join(repr(v) for v in pr.channel_std),
        **{s: str(getattr(pr, s)).lower() for s in ("resize", "stretch", "equalize", "median", "standardize")},
    }
    cp["split"] = {"fractions": ", ".join(repr(f) for f in cfg.fractions), "seed": str(cfg.split_seed)}
    md = cfg.model
    cp["model"] = {
        "preset": cfg.model_preset,
        "growth_rate": str(md.growth_rate),
        "block_sizes": ", ".join(str(b) for b in md.block_sizes),
        "compression": repr(md.compression),
        "stem_channels": str(md.stem_channels),
        "bottleneck_factor": str(md.bottleneck_factor),
        "input_size": str(md.input_size),
    }
    cp["train"] = {**_FIXED, **{k: repr(v) if isinstance(v, float) else str(v)
                                for k, v in cfg.train.to_dict().items()}}
    cp["run"] = {"out": cfg.out}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
