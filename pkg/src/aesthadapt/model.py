"""Residual backbone, fully-connected scoring head and per-user residual adapters.

Parameters live in flat ``name -> ndarray`` dicts so that a user profile is
just another dict overlaid on the shared one. Naming scheme::

    stem.conv.w  stem.bn.{gamma,beta,mean,var}
    s{i}.b{j}.conv{1,2}.w  s{i}.b{j}.bn{1,2}.*  s{i}.b{j}.proj.w  s{i}.b{j}.proj_bn.*
    s{i}.b{j}.conv{1,2}.adapter.w            (full adapter)
    s{i}.b{j}.conv{1,2}.adapter.{a0,a1,a2}   (reduced adapter chain)
    head.{k}.fc.{w,b}  head.{k}.prelu.alpha  head.{k}.bn.*
    out.w  out.b
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import RandomSource, Tensor

BN_BUFFERS = ("mean", "var")


class TrainMode(str, enum.Enum):
    GENERIC_ALL = "generic_all"
    BOTTLENECK_ONLY = "bottleneck_only"
    FULL_FINETUNE = "full_finetune"
    ADAPTERS_PLUS_BOTTLENECK = "adapters_plus_bottleneck"


class Placement(str, enum.Enum):
    NONE = "none"
    ALL_BLOCKS = "all_blocks"
    LATE_BLOCKS = "late_blocks"


class ProfileMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 2
    input_size: int = 32
    head_width: int = 64
    head_blocks: int = 3
    prelu_alpha: float = 0.25
    dropout_p: float = 0.5
    stem_stride: int = 1

    def __post_init__(self):
        ch = tuple(int(c) for c in self.stage_channels)
        object.__setattr__(self, "stage_channels", ch)
        if len(ch) != 4:
            raise ValueError("backbone needs exactly 4 stages")
        if any(b <= a for a, b in zip(ch, ch[1:])) or ch[0] < 1:
            raise ValueError("stage channels must be positive and strictly increasing")
        if self.head_blocks != 3:
            raise ValueError("the scoring head has exactly 3 blocks")
        if self.blocks_per_stage < 1 or self.input_size < 1 or self.head_width < 1:
            raise ValueError("blocks_per_stage, input_size and head_width must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        return cls(stage_channels=(64, 128, 256, 512), input_size=224, head_width=1000, stem_stride=2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{**d, "stage_channels": tuple(d["stage_channels"])})


@dataclass(frozen=True)
class AdapterConfig:
    """Where adapters go and how they are factored.

    ``reduction`` is ``"full"`` (one K->K 1x1 conv) or one of ``"1"``,
    ``"quarter"``, ``"half"`` for a K->K1->K1->K chain with K1 = 1, K/4, K/2.
    """

    placement: Placement = Placement.NONE
    reduction: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.reduction not in ("full", "1", "quarter", "half"):
            raise ValueError(f"unknown adapter reduction {self.reduction!r}")

    def k1(self, k: int) -> int | None:
        if self.reduction == "full":
            return None
        if self.reduction == "1":
            return 1
        return max(1, k // (4 if self.reduction == "quarter" else 2))

    def to_dict(self) -> dict:
        return {"placement": self.placement.value, "reduction": self.reduction}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(Placement(d["placement"]), d["reduction"])


class ConvSpec(NamedTuple):
    name: str
    cin: int
    cout: int
    stride: int
    stage: int


@dataclass
class ParameterPartition:
    generic: dict[str, np.ndarray]
    user_specific: dict[str, np.ndarray]


@dataclass
class UserProfile:
    """One user's private tensors, keyed by the model names they override."""

    user_id: str
    mode: TrainMode
    adapter_config: AdapterConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def adapter_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if ".adapter." in k}

    @property
    def head_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(("head.", "out."))}

    @property
    def bn_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if _is_bn(k)}


def _is_bn(name: str) -> bool:
    parts = name.split(".")
    return len(parts) >= 2 and (parts[-2] == "bn" or parts[-2].startswith("bn") or parts[-2].endswith("_bn"))


def _is_head(name: str) -> bool:
    return name.startswith(("head.", "out."))


def _is_adapter(name: str) -> bool:
    return ".adapter." in name


class ForwardResult(NamedTuple):
    scores: Tensor
    leaves: dict[str, Tensor]
    buffers: dict[str, np.ndarray]


class AestheticsNet:
    """ResNet-style backbone plus scoring head; optionally carries adapters."""

    def __init__(self, config: BackboneConfig, adapter_config: AdapterConfig | None = None, dtype=np.float32):
        self.config = config
        self.adapter_config = adapter_config or AdapterConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    # -- structure ---------------------------------------------------------

    def block_convs(self) -> list[ConvSpec]:
        """The 3x3 convolutions inside residual blocks (adapter hosts)."""
        specs, cin = [], self.config.stage_channels[0]
        for s, cout in enumerate(self.config.stage_channels):
            for b in range(self.config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                specs.append(ConvSpec(f"s{s}.b{b}.conv1", cin, cout, stride, s))
                specs.append(ConvSpec(f"s{s}.b{b}.conv2", cout, cout, 1, s))
                cin = cout
        return specs

    def adapted_convs(self) -> list[ConvSpec]:
        placement = self.adapter_config.placement
        if placement is Placement.NONE:
            return []
        # late blocks: the three stages with the largest channel counts
        return [c for c in self.block_convs() if placement is Placement.ALL_BLOCKS or c.stage >= 1]

    def adapter_shapes(self, spec: ConvSpec) -> dict[str, tuple[int, ...]]:
        k1 = self.adapter_config.k1(spec.cout)
        base = f"{spec.name}.adapter"
        if k1 is None:
            return {f"{base}.w": (spec.cout, spec.cin, 1, 1)}
        return {
            f"{base}.a0": (k1, spec.cin, 1, 1),
            f"{base}.a1": (k1, k1, 1, 1),
            f"{base}.a2": (spec.cout, k1, 1, 1),
        }

    @property
    def has_adapters(self) -> bool:
        return any(_is_adapter(k) for k in self.params)

    def copy(self) -> "AestheticsNet":
        other = AestheticsNet(self.config, self.adapter_config, self.dtype)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward -----------------------------------------------------------

    def apply(
        self,
        images,
        training: bool = False,
        rng: RandomSource | None = None,
        trainable: set[str] | frozenset[str] = frozenset(),
        overrides: dict[str, np.ndarray] | None = None,
    ) -> ForwardResult:
        """Score a batch of images.

        ``trainable`` names become gradient-carrying leaves; ``overrides`` may
        hold arrays or ready-made Tensors. Batch norm runs in
        training mode only where its affine parameters are trainable, so a
        frozen backbone keeps its running statistics. Updated statistics are
        returned in ``buffers`` (the model itself is left untouched).
        """
        params = self.params if not overrides else {**self.params, **{k: v for k, v in overrides.items() if k in self.params}}
        buffers = self.buffers if not overrides else {**self.buffers, **{k: v for k, v in overrides.items() if k in self.buffers}}
        # a Tensor override is used as the leaf itself (handy for gradient checks)
        leaves = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=k in trainable) for k, v in params.items()}
        new_buffers = dict(buffers)
        cfg = self.config

        def bn(x, prefix):
            on = training and prefix + ".gamma" in trainable
            out, m, v = nx.batch_norm2d(
                x, leaves[prefix + ".gamma"], leaves[prefix + ".beta"], buffers[prefix + ".mean"], buffers[prefix + ".var"], on
            )
            new_buffers[prefix + ".mean"], new_buffers[prefix + ".var"] = m, v
            return out

        def conv_with_adapter(x, spec: ConvSpec):
            y = nx.conv2d(x, leaves[spec.name + ".w"], stride=spec.stride, padding=1)
            base = spec.name + ".adapter"
            if base + ".w" in leaves:
                y = nx.add(y, nx.conv2d(x, leaves[base + ".w"], stride=spec.stride))
            elif base + ".a0" in leaves:
                z = nx.conv2d(x, leaves[base + ".a0"], stride=spec.stride)
                z = nx.conv2d(z, leaves[base + ".a1"])
                y = nx.add(y, nx.conv2d(z, leaves[base + ".a2"]))
            return y

        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise nx.ShapeError(f"images must be [B,3,H,W], got {x.shape}")
        x = nx.adaptive_avg_pool2d(x, cfg.input_size, cfg.input_size)
        x = nx.relu(bn(nx.conv2d(x, leaves["stem.conv.w"], stride=cfg.stem_stride, padding=1), "stem.bn"))

        specs = iter(self.block_convs())
        for s in range(4):
            for b in range(cfg.blocks_per_stage):
                c1, c2 = next(specs), next(specs)
                pre = f"s{s}.b{b}"
                h = nx.relu(bn(conv_with_adapter(x, c1), pre + ".bn1"))
                h = bn(conv_with_adapter(h, c2), pre + ".bn2")
                if pre + ".proj.w" in leaves:
                    short = bn(nx.conv2d(x, leaves[pre + ".proj.w"], stride=c1.stride), pre + ".proj_bn")
                else:
                    short = x
                x = nx.relu(nx.add(h, short))

        h = nx.global_avg_pool(x)
        for k in range(cfg.head_blocks):
            pre = f"head.{k}"
            h = nx.linear(h, leaves[pre + ".fc.w"], leaves[pre + ".fc.b"])
            h = nx.prelu(h, leaves[pre + ".prelu.alpha"])
            h = nx.dropout(h, cfg.dropout_p, training, rng.child("dropout", k) if training and rng else None)
            h = bn(h, pre + ".bn")
        out = nx.linear(h, leaves["out.w"], leaves["out.b"])
        return ForwardResult(nx.reshape(out, (out.shape[0],)), leaves, new_buffers)


def _add_bn(model: AestheticsNet, prefix: str, c: int) -> None:
    model.params[prefix + ".gamma"] = np.ones(c, model.dtype)
    model.params[prefix + ".beta"] = np.zeros(c, model.dtype)
    model.buffers[prefix + ".mean"] = np.zeros(c, model.dtype)
    model.buffers[prefix + ".var"] = np.ones(c, model.dtype)


def build_backbone(config: BackboneConfig, rng: RandomSource, dtype=np.float32) -> AestheticsNet:
    """Fresh network with Kaiming-uniform weights and identity batch norms."""
    model = AestheticsNet(config, AdapterConfig(), dtype)
    init = rng.child("init")
    p = model.params

    def conv(name, cout, cin, k):
        p[name] = nx.kaiming_uniform((cout, cin, k, k), cin * k * k, init.child(name), dtype)

    c0 = config.stage_channels[0]
    conv("stem.conv.w", c0, 3, 3)
    _add_bn(model, "stem.bn", c0)
    for spec in model.block_convs():
        conv(spec.name + ".w", spec.cout, spec.cin, 3)
        _add_bn(model, spec.name.replace("conv", "bn"), spec.cout)
        if spec.name.endswith("conv1") and (spec.stride != 1 or spec.cin != spec.cout):
            pre = spec.name.rsplit(".", 1)[0]
            conv(pre + ".proj.w", spec.cout, spec.cin, 1)
            _add_bn(model, pre + ".proj_bn", spec.cout)

    width_in = config.stage_channels[-1]
    for k in range(config.head_blocks):
        pre = f"head.{k}"
        p[pre + ".fc.w"] = nx.kaiming_uniform((config.head_width, width_in), width_in, init.child(pre), dtype)
        p[pre + ".fc.b"] = np.zeros(config.head_width, dtype)
        p[pre + ".prelu.alpha"] = np.full((1,), config.prelu_alpha, dtype)
        _add_bn(model, pre + ".bn", config.head_width)
        width_in = config.head_width
    p["out.w"] = nx.kaiming_uniform((1, width_in), width_in, init.child("out"), dtype) / np.sqrt(2.0).astype(dtype)
    p["out.b"] = np.zeros(1, dtype)
    return model


def attach_adapters(model: AestheticsNet, adapter_config: AdapterConfig, rng: RandomSource | None = None) -> AestheticsNet:
    """Return a copy of ``model`` with adapter branches beside the selected 3x3 convs.

    Adapters start as exact no-ops: the full K->K weight is zero, and in a
    reduced chain the last 1x1 layer is zero while the first two get small
    random weights (an all-zero chain would have identically zero gradients).
    """
    if model.has_adapters or model.adapter_config.placement is not Placement.NONE:
        raise ValueError("model already carries adapters")
    adapted = model.copy()
    adapted.adapter_config = adapter_config
    rng = rng or RandomSource(0)
    for spec in adapted.adapted_convs():
        for name, shape in adapted.adapter_shapes(spec).items():
            if name.endswith((".w", ".a2")):
                adapted.params[name] = np.zeros(shape, model.dtype)
            else:
                adapted.params[name] = nx.kaiming_uniform(shape, shape[1], rng.child(name), model.dtype) * model.dtype.type(0.1)
    return adapted


def partition_parameters(model: AestheticsNet, mode: TrainMode | str) -> ParameterPartition:
    mode = TrainMode(mode)
    if mode is TrainMode.GENERIC_ALL:
        pick = lambda k: not _is_adapter(k)  # noqa: E731
    elif mode is TrainMode.BOTTLENECK_ONLY:
        pick = _is_head
    elif mode is TrainMode.FULL_FINETUNE:
        pick = lambda k: True  # noqa: E731
    else:
        if not model.has_adapters:
            raise ValueError("adapters_plus_bottleneck needs a model with adapters attached")
        pick = lambda k: _is_adapter(k) or _is_head(k) or _is_bn(k)  # noqa: E731
    user = {k: v for k, v in model.params.items() if pick(k)}
    generic = {k: v for k, v in model.params.items() if k not in user}
    return ParameterPartition(generic, user)


def parameter_count(model: AestheticsNet, partition: ParameterPartition) -> dict[str, int]:
    names = set(partition.generic) | set(partition.user_specific)
    if names != set(model.params) or set(partition.generic) & set(partition.user_specific):
        raise ValueError("partition does not match the model's parameters")
    return {
        "generic": int(sum(v.size for v in partition.generic.values())),
        "user_specific": int(sum(v.size for v in partition.user_specific.values())),
    }


def user_buffer_names(model: AestheticsNet, user_params) -> list[str]:
    """Running statistics owned by a user: those of every batch norm whose affine params are user-specific."""
    out = []
    for k in user_params:
        if _is_bn(k) and k.endswith(".gamma"):
            pre = k[: -len(".gamma")]
            out += [f"{pre}.{b}" for b in BN_BUFFERS if f"{pre}.{b}" in model.buffers]
    return out


def make_profile(model: AestheticsNet, user_id: str, mode: TrainMode | str) -> UserProfile:
    """Profile initialised from the model's current values for ``mode``'s user partition."""
    mode = TrainMode(mode)
    user = partition_parameters(model, mode).user_specific
    tensors = {k: v.copy() for k, v in user.items()}
    tensors.update({k: model.buffers[k].copy() for k in user_buffer_names(model, user)})
    return UserProfile(user_id, mode, model.adapter_config, tensors)


def check_profile(model: AestheticsNet, profile: UserProfile) -> None:
    if profile.adapter_config != model.adapter_config:
        raise ProfileMismatch(
            f"profile adapter config {profile.adapter_config.to_dict()} != model {model.adapter_config.to_dict()}"
        )
    generic = partition_parameters(model, profile.mode).generic
    for k, v in profile.tensors.items():
        ref = model.params.get(k, model.buffers.get(k))
        if ref is None:
            raise ProfileMismatch(f"profile tensor {k!r} has no counterpart in the model")
        if k in generic:
            raise ProfileMismatch(f"profile tensor {k!r} belongs to the generic partition")
        if ref.shape != v.shape:
            raise ProfileMismatch(f"profile tensor {k!r} has shape {v.shape}, model expects {ref.shape}")


def forward(
    model: AestheticsNet,
    profile: UserProfile | None,
    images,
    training: bool = False,
    rng: RandomSource | None = None,
) -> Tensor:
    """Predicted normalized rating per image, with ``profile`` overlaid on the shared weights."""
    if profile is not None:
        check_profile(model, profile)
    return model.apply(images, training=training, rng=rng, overrides=profile.tensors if profile else None).scores


def predict(model: AestheticsNet, profile: UserProfile | None, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode scores for a stack of preprocessed images, in batches."""
    if profile is not None:
        check_profile(model, profile)
    overrides = profile.tensors if profile else None
    out = [
        model.apply(images[i : i + batch_size], overrides=overrides).scores.data
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros(0, model.dtype)


def clone_with(model: AestheticsNet, overrides: dict[str, np.ndarray]) -> AestheticsNet:
    other = model.copy()
    for k, v in overrides.items():
        (other.params if k in other.params else other.buffers)[k] = v.copy()
    return other


__all__ = [
    "AdapterConfig",
    "AestheticsNet",
    "BackboneConfig",
    "ParameterPartition",
    "Placement",
    "ProfileMismatch",
    "TrainMode",
    "UserProfile",
    "attach_adapters",
    "build_backbone",
    "check_profile",
    "forward",
    "make_profile",
    "parameter_count",
    "partition_parameters",
    "predict",
]
