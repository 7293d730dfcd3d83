"""Dense-connectivity CNN classifier built from a declarative config.

Layout (BN-ReLU-Conv ordering throughout):

    stem: 7x7 conv /2 -> BN -> ReLU -> 3x3 max-pool /2
    4 x dense block, transitions (BN -> ReLU -> 1x1 conv -> 2x2 avg-pool) between
    head: BN -> ReLU -> global average pool -> dropout -> linear
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STAGE_NAMES = ("stem", "block1", "transition1", "block2", "transition2",
               "block3", "transition3", "block4")
DEFAULT_CAM_LAYER = "block4"


@dataclass(frozen=True)
class ModelConfig:
    growth_rate: int = 32
    block_sizes: tuple[int, ...] = (6, 12, 24, 16)
    compression: float = 0.5
    stem_channels: int = 64
    bottleneck_factor: int = 4
    num_classes: int = 4
    dropout_rate: float = 0.4
    input_size: int = 224
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.block_sizes) != 4:
            raise ValueError(f"exactly 4 dense blocks are required, got {len(self.block_sizes)}")
        if any(b < 1 for b in self.block_sizes):
            raise ValueError("every dense block needs at least one layer")
        if not 0 < self.compression <= 1:
            raise ValueError(f"compression must be in (0, 1], got {self.compression}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for name in ("growth_rate", "stem_channels", "bottleneck_factor", "input_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_sizes"] = list(self.block_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "block_sizes" in d:
            d["block_sizes"] = tuple(int(b) for b in d["block_sizes"])
        return cls(**d)


PRESETS = {
    "densenet121": ModelConfig(),
    "desk": ModelConfig(growth_rate=8, block_sizes=(2, 2, 2, 2), stem_channels=16, input_size=64),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[name].to_dict()
    d.update(overrides)
    return ModelConfig.from_dict(d)


@dataclass
class ChannelPlan:
    stem: int
    blocks: list[tuple[int, int]] = field(default_factory=list)
    transitions: list[tuple[int, int]] = field(default_factory=list)
    final: int = 0


def channel_plan(cfg: ModelConfig) -> ChannelPlan:
    plan = ChannelPlan(stem=cfg.stem_channels)
    ch = cfg.stem_channels
    for i, n_layers in enumerate(cfg.block_sizes):
        out = ch + n_layers * cfg.growth_rate
        plan.blocks.append((ch, out))
        ch = out
        if i < len(cfg.block_sizes) - 1:
            out = math.floor(cfg.compression * ch)
            plan.transitions.append((ch, out))
            ch = out
    plan.final = ch
    return plan


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in construction order."""
    plan = channel_plan(cfg)
    k, width = cfg.growth_rate, cfg.bottleneck_factor * cfg.growth_rate
    shapes: dict[str, tuple[int, ...]] = {}

    def bn(prefix, c):
        shapes[f"{prefix}.gamma"] = (c,)
        shapes[f"{prefix}.beta"] = (c,)

    shapes["stem.conv.weight"] = (cfg.stem_channels, 3, 7, 7)
    bn("stem.norm", cfg.stem_channels)
    for b, (c_in, _) in enumerate(plan.blocks, start=1):
        for layer in range(cfg.block_sizes[b - 1]):
            p = f"block{b}.layer{layer + 1}"
            c = c_in + layer * k
            bn(f"{p}.norm1", c)
            shapes[f"{p}.conv1.weight"] = (width, c, 1, 1)
            bn(f"{p}.norm2", width)
            shapes[f"{p}.conv2.weight"] = (k, width, 3, 3)
        if b <= len(plan.transitions):
            t_in, t_out = plan.transitions[b - 1]
            bn(f"transition{b}.norm", t_in)
            shapes[f"transition{b}.conv.weight"] = (t_out, t_in, 1, 1)
    bn("head.norm", plan.final)
    shapes["head.fc.weight"] = (cfg.num_classes, plan.final)
    shapes["head.fc.bias"] = (cfg.num_classes,)
    return shapes


class Model:
    """Parameters, BN running statistics and the forward pass.

    ``params`` maps names to gradient-tracking tensors; ``buffers`` maps
    ``<bn prefix>.running_mean``/``.running_var`` to numpy arrays.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                 seed: int = 0):
        self.cfg = cfg
        self.plan = channel_plan(cfg)
        self.params = params
        self.buffers = buffers
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(seed))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _bn(self, x, prefix, training):
        p = self.params
        return ad.batchnorm2d(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                              self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
                              training, self.cfg.bn_momentum, self.cfg.bn_eps)

    def _check_channels(self, x: Tensor, expected: int, where: str):
        if x.shape[1] != expected:
            raise AssertionError(f"{where}: {x.shape[1]} channels, plan says {expected}")

    def forward_stages(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None):
        """Return (logits, {stage name: activation tensor})."""
        cfg, p = self.cfg, self.params
        if x.data.ndim != 4 or x.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise ValueError(f"expected input (N, 3, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        stages = {}
        h = ad.conv2d(x, p["stem.conv.weight"], stride=2, padding=3)
        h = ad.relu(self._bn(h, "stem.norm", training))
        h = ad.pool2d(h, "max", 3, stride=2, padding=1)
        stages["stem"] = h
        for b, n_layers in enumerate(cfg.block_sizes, start=1):
            for layer in range(n_layers):
                pre = f"block{b}.layer{layer + 1}"
                y = ad.relu(self._bn(h, f"{pre}.norm1", training))
                y = ad.conv2d(y, p[f"{pre}.conv1.weight"])
                y = ad.relu(self._bn(y, f"{pre}.norm2", training))
                y = ad.conv2d(y, p[f"{pre}.conv2.weight"], padding=1)
                h = ad.concat_channels([h, y])
            self._check_channels(h, self.plan.blocks[b - 1][1], f"block{b}")
            stages[f"block{b}"] = h
            if b < len(cfg.block_sizes):
                h = ad.relu(self._bn(h, f"transition{b}.norm", training))
                h = ad.conv2d(h, p[f"transition{b}.conv.weight"])
                h = ad.pool2d(h, "avg", 2, stride=2)
                self._check_channels(h, self.plan.transitions[b - 1][1], f"transition{b}")
                stages[f"transition{b}"] = h
        h = ad.relu(self._bn(h, "head.norm", training))
        h = ad.global_avg_pool(h)
        h = ad.dropout(h, cfg.dropout_rate, training, rng or self.rng)
        logits = ad.linear(h, p["head.fc.weight"], p["head.fc.bias"])
        return logits, stages

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_stages(x, training, rng)[0]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "Model":
        params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        buffers = {n: b.copy() for n, b in self.buffers.items()}
        m = Model(self.cfg, params, buffers, self.seed)
        m.rng = np.random.Generator(np.random.PCG64())
        m.rng.bit_generator.state = self.rng.bit_generator.state
        return m


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate parameters deterministically from ``seed``.

    Conv kernels: normal with std sqrt(2 / fan_out). BN: gamma 1, beta 0.
    Linear: weight uniform in +/- 1/sqrt(fan_in), bias 0.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params, buffers = {}, {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("conv.weight") or ".conv1." in name or ".conv2." in name:
            fan_out = shape[0] * shape[2] * shape[3]
            data = rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape)
        elif name == "head.fc.weight":
            bound = 1.0 / math.sqrt(shape[1])
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            buffers[f"{prefix}.running_mean"] = np.zeros(shape, dtype=dtype)
            buffers[f"{prefix}.running_var"] = np.ones(shape, dtype=dtype)
    return Model(cfg, params, buffers, seed)


def forward_logits(model: Model, batch, mode: str = "eval", rng=None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(ad.as_tensor(batch), training=mode == "train", rng=rng)


def predict_proba(model: Model, batch) -> np.ndarray:
    logits = forward_logits(model, batch, "eval")
    return ad.softmax(logits.data.astype(np.float64))


def count_params(model_or_cfg) -> int:
    if isinstance(model_or_cfg, Model):
        return int(sum(t.size for t in model_or_cfg.params.values()))
    return int(sum(math.prod(s) for s in param_shapes(model_or_cfg).values()))
