"""U-Net generator and patch discriminator built on services_autodiff."""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from models_schemas import KERNEL_SIZE, PADDING, Direction, DiscriminatorConfig, GeneratorConfig, Task, TrainConfig
from services_autodiff import (
    DTYPE,
    ShapeMismatchError,
    Tensor,
    concat_channels,
    conv2d,
    conv_transpose2d,
    dropout,
    instance_norm,
    leaky_relu,
    relu,
    tanh,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
DROPOUT_P = 0.5
DROPOUT_BLOCKS = 3
CHANNEL_CAP = 8

GENERATOR = "generator"
DISCRIMINATOR = "discriminator"

ModelConfig = Union[GeneratorConfig, DiscriminatorConfig]


@dataclass(frozen=True)
class LayerSpec:
    """One conv block: convolution, optional norm, activation, optional dropout."""
    block: int
    in_channels: int
    out_channels: int
    stride: int
    activation: Optional[str]
    transpose: bool = False
    norm: bool = False
    dropout: bool = False

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        k = KERNEL_SIZE
        if self.transpose:
            weight = (self.in_channels, self.out_channels, k, k)
        else:
            weight = (self.out_channels, self.in_channels, k, k)
        prefix = f"block{self.block}"
        shapes = [(f"{prefix}.conv.weight", weight), (f"{prefix}.conv.bias", (self.out_channels,))]
        if self.norm:
            shapes += [(f"{prefix}.norm.weight", (self.out_channels,)), (f"{prefix}.norm.bias", (self.out_channels,))]
        return shapes


def _level_channels(base: int, level: int) -> int:
    return min(base * 2 ** level, CHANNEL_CAP * base)


def unet_layout(cfg: GeneratorConfig) -> List[LayerSpec]:
    """Encoder blocks 0..depth-1, then decoder blocks, the last one producing the output."""
    depth = cfg.depth
    enc = [_level_channels(cfg.base_channels, i) for i in range(depth)]
    layers: List[LayerSpec] = []

    for i in range(depth):
        layers.append(LayerSpec(
            block=i,
            in_channels=cfg.in_channels if i == 0 else enc[i - 1],
            out_channels=enc[i],
            stride=2,
            activation="leaky_relu",
            norm=0 < i < depth - 1,
        ))

    # Decoder level j mirrors encoder level depth-1-j; after the first,
    # each input is the previous output concatenated with the skip.
    for j in range(depth):
        level = depth - 1 - j
        in_channels = enc[level] if j == 0 else 2 * enc[level]
        final = level == 0
        layers.append(LayerSpec(
            block=depth + j,
            in_channels=in_channels,
            out_channels=cfg.out_channels if final else enc[level - 1],
            stride=2,
            activation="tanh" if final else "relu",
            transpose=True,
            norm=not final,
            dropout=not final and j < DROPOUT_BLOCKS,
        ))
    return layers


def discriminator_layout(cfg: DiscriminatorConfig) -> List[LayerSpec]:
    layers: List[LayerSpec] = []
    channels = cfg.in_channels
    for i in range(cfg.n_stride2_layers):
        out = _level_channels(cfg.base_channels, i)
        layers.append(LayerSpec(block=i, in_channels=channels, out_channels=out, stride=2,
                                activation="leaky_relu", norm=i > 0))
        channels = out

    n = cfg.n_stride2_layers
    out = _level_channels(cfg.base_channels, n)
    layers.append(LayerSpec(block=n, in_channels=channels, out_channels=out, stride=1,
                            activation="leaky_relu", norm=True))
    # Head emits raw patch logits
    layers.append(LayerSpec(block=n + 1, in_channels=out, out_channels=1, stride=1, activation=None))
    return layers


def receptive_field(cfg: DiscriminatorConfig) -> int:
    """Nominal input window (pixels) seen by one output logit."""
    field = 1
    for spec in reversed(discriminator_layout(cfg)):
        field = (field - 1) * spec.stride + KERNEL_SIZE
    return field


class ModelParams:
    """Named, ordered learnable tensors of one network."""

    def __init__(self, kind: str, config: ModelConfig, entries: List[Tuple[str, Tensor]]):
        self.kind = kind
        self.config = config
        self._entries: Dict[str, Tensor] = {}
        for name, tensor in entries:
            if name in self._entries:
                raise ValueError(f"Duplicate parameter name {name}")
            self._entries[name] = tensor

    @classmethod
    def from_arrays(cls, kind: str, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        """Rebuild from stored arrays, validating names and shapes against the layout."""
        expected = parameter_shapes(kind, config)
        if [name for name, _ in expected] != list(arrays):
            missing = sorted(set(n for n, _ in expected) - set(arrays))
            extra = sorted(set(arrays) - set(n for n, _ in expected))
            raise ShapeMismatchError(f"Parameter names do not match the {kind} layout (missing {missing}, extra {extra})")
        entries = []
        for name, shape in expected:
            array = np.asarray(arrays[name], dtype=DTYPE)
            if array.shape != shape:
                raise ShapeMismatchError(f"{name}: stored shape {array.shape}, layout expects {shape}")
            entries.append((name, Tensor(array.copy(), requires_grad=True)))
        return cls(kind, config, entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._entries.items())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._entries.items()}

    def count(self) -> int:
        return sum(t.size for t in self._entries.values())

    @contextmanager
    def frozen(self):
        """Exclude these tensors from gradient computation inside the block."""
        flags = {name: t.requires_grad for name, t in self._entries.items()}
        for t in self._entries.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for name, t in self._entries.items():
                t.requires_grad = flags[name]


def parameter_shapes(kind: str, config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    layout = unet_layout(config) if kind == GENERATOR else discriminator_layout(config)
    return [entry for spec in layout for entry in spec.parameter_shapes()]


def parameter_count(params: ModelParams) -> int:
    return params.count()


def _init_params(kind: str, config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    entries = []
    for name, shape in parameter_shapes(kind, config):
        if name.endswith("conv.weight"):
            array = rng.normal(0.0, INIT_STD, size=shape)
        elif name.endswith("norm.weight"):
            array = np.ones(shape)
        else:
            array = np.zeros(shape)
        entries.append((name, Tensor(array.astype(DTYPE), requires_grad=True)))
    params = ModelParams(kind, config, entries)
    logger.info(f"Built {kind} with {params.count()} parameters in {len(entries)} tensors")
    return params


def build_unet(cfg: GeneratorConfig, rng: np.random.Generator) -> ModelParams:
    return _init_params(GENERATOR, cfg, rng)


def build_discriminator(cfg: DiscriminatorConfig, rng: np.random.Generator) -> ModelParams:
    return _init_params(DISCRIMINATOR, cfg, rng)


def _apply_block(
    params: ModelParams,
    spec: LayerSpec,
    x: Tensor,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    prefix = f"block{spec.block}"
    conv = conv_transpose2d if spec.transpose else conv2d
    h = conv(x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride=spec.stride, pad=PADDING)
    if spec.norm:
        h = instance_norm(h, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    if spec.activation == "leaky_relu":
        h = leaky_relu(h, LEAKY_SLOPE)
    elif spec.activation == "relu":
        h = relu(h)
    elif spec.activation == "tanh":
        h = tanh(h)
    if spec.dropout:
        h = dropout(h, DROPOUT_P, training, rng)
    return h


def _check_input(params: ModelParams, x: Tensor, kind: str, channels: int, size: Optional[int]) -> None:
    if params.kind != kind:
        raise ShapeMismatchError(f"Expected {kind} parameters, got {params.kind}")
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatchError(f"{kind} expects (N, {channels}, H, W) input, got {x.shape}")
    if size is not None and x.shape[2:] != (size, size):
        raise ShapeMismatchError(f"{kind} expects {size}x{size} input, got {x.shape[2]}x{x.shape[3]}")


def forward_generator(
    params: ModelParams,
    image: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Map (N, Cin, S, S) images to (N, Cout, S, S) outputs in [-1, 1]."""
    cfg: GeneratorConfig = params.config
    _check_input(params, image, GENERATOR, cfg.in_channels, cfg.image_size)

    layout = unet_layout(cfg)
    depth = cfg.depth
    skips: List[Tensor] = []
    h = image
    for spec in layout[:depth]:
        h = _apply_block(params, spec, h, training, rng)
        skips.append(h)

    for j, spec in enumerate(layout[depth:]):
        if j > 0:
            h = concat_channels(h, skips[depth - 1 - j])
        h = _apply_block(params, spec, h, training, rng)
    return h


def forward_discriminator(params: ModelParams, x: Tensor) -> Tensor:
    """Grid of per-patch realness logits, shape (N, 1, h, w)."""
    cfg: DiscriminatorConfig = params.config
    _check_input(params, x, DISCRIMINATOR, cfg.in_channels, None)

    h = x
    for spec in discriminator_layout(cfg):
        h = _apply_block(params, spec, h, training=False, rng=None)
    return h


@dataclass
class AdamState:
    """First/second moments per parameter name and the shared step counter."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros(t.shape, dtype=DTYPE) for name, t in params.items()},
            v={name: np.zeros(t.shape, dtype=DTYPE) for name, t in params.items()},
        )


# Network roles per task, in build and serialization order
CGAN_ROLES = ("generator", "discriminator")
CYCLEGAN_ROLES = ("gen_ab", "gen_ba", "disc_a", "disc_b")


def roles_for(task: Task) -> Tuple[str, ...]:
    return CGAN_ROLES if Task(task) == Task.CGAN else CYCLEGAN_ROLES


def role_configs(cfg: TrainConfig) -> Dict[str, Tuple[str, ModelConfig]]:
    """(kind, architecture) of every network a run trains."""
    if cfg.task == Task.CGAN:
        return {
            "generator": (GENERATOR, cfg.generator_config(Direction.A2B)),
            # Conditional: sees image and candidate mask stacked on channels
            "discriminator": (DISCRIMINATOR, cfg.discriminator_config(cfg.image_channels + 1)),
        }
    return {
        "gen_ab": (GENERATOR, cfg.generator_config(Direction.A2B)),
        "gen_ba": (GENERATOR, cfg.generator_config(Direction.B2A)),
        "disc_a": (DISCRIMINATOR, cfg.discriminator_config(cfg.image_channels)),
        "disc_b": (DISCRIMINATOR, cfg.discriminator_config(1)),
    }


def build_models(cfg: TrainConfig, rng: np.random.Generator) -> Dict[str, ModelParams]:
    return {role: _init_params(kind, config, rng) for role, (kind, config) in role_configs(cfg).items()}
