"""Toy triplane generator: mapping network, triplane generator, feature decoder."""

from __future__ import annotations

import dataclasses
import logging
import struct
from pathlib import Path
from typing import Literal, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import CheckpointError
from .numgrad import (
    Array,
    Node,
    ParamBuffer,
    as_node,
    const,
    interpolation_matrix,
    leaf,
    leaky_relu,
    reshape,
    separable_linear,
)

logger = logging.getLogger("dg3d")

CHECKPOINT_MAGIC = b"DG3D"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 16
    channels: int = 8
    resolution: int = 32
    # The dense head emits a coarse triplane that is bilinearly upsampled to
    # ``resolution``; detail above the coarse band is reachable only through
    # the learnable residual.
    gen_resolution: int = 8
    hidden: int = 64
    decoder_hidden: int = 64
    slope: float = 0.2
    mapping_layers: int = 2
    seed: int = 42

    def __post_init__(self) -> None:
        if self.resolution < 2 or self.gen_resolution < 2:
            raise ValueError(f"triplane resolution must be at least 2: {self}")
        if min(self.latent_dim, self.channels, self.hidden, self.decoder_hidden) < 1:
            raise ValueError(f"generator dimensions must be positive: {self}")


@dataclasses.dataclass(frozen=True)
class LatentCode:
    values: Array
    kind: Literal["noise", "style"]

    @staticmethod
    def sample(rng: np.random.Generator, dim: int) -> LatentCode:
        return LatentCode(rng.standard_normal(dim), "noise")


@dataclasses.dataclass(frozen=True)
class TriplaneGrid:
    """XY, XZ, YZ feature planes of shape (3, C, R, R) over the cube [-1, 1]^3."""

    planes: Array

    def __post_init__(self) -> None:
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 4 or planes.shape[0] != 3 or planes.shape[2] != planes.shape[3]:
            raise ValueError(f"triplane must have shape (3, C, R, R), got {planes.shape}")
        if not np.all(np.isfinite(planes)):
            raise ValueError("triplane holds non-finite values")
        object.__setattr__(self, "planes", planes)

    @property
    def channels(self) -> int:
        return int(self.planes.shape[1])

    @property
    def resolution(self) -> int:
        return int(self.planes.shape[2])


class LearnableTriplane:
    def __init__(self, channels: int, resolution: int) -> None:
        self.buffer = ParamBuffer(
            "residual", np.zeros((3, channels, resolution, resolution))
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.buffer.shape

    def grid(self) -> TriplaneGrid:
        return TriplaneGrid(self.buffer.values.copy())


@dataclasses.dataclass
class Dense:
    weight: ParamBuffer
    bias: ParamBuffer

    def graph(self, x: Union[Node, Array]) -> Node:
        return as_node(x) @ leaf(self.weight) + leaf(self.bias)

    def forward(self, x: Array) -> Array:
        out: Array = x @ self.weight.values + self.bias.values
        return out

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[1])


@dataclasses.dataclass
class MLP:
    """Dense layers with a leaky rectifier between them; ``slope=None`` means linear."""

    layers: list[Dense]
    slope: Optional[float]

    @staticmethod
    def initialize(
        name: str,
        sizes: Sequence[int],
        slope: Optional[float],
        rng: np.random.Generator,
        gain: float = 1.0,
    ) -> MLP:
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = gain * np.sqrt(2.0 / fan_in) if i < len(sizes) - 2 else gain / np.sqrt(fan_in)
            layers.append(
                Dense(
                    ParamBuffer(f"{name}.{i}.weight", rng.normal(0.0, std, (fan_in, fan_out))),
                    ParamBuffer(f"{name}.{i}.bias", np.zeros(fan_out)),
                )
            )
        return MLP(layers, slope)

    def graph(self, x: Union[Node, Array]) -> Node:
        out = as_node(x)
        for i, layer in enumerate(self.layers):
            out = layer.graph(out)
            if i + 1 < len(self.layers) and self.slope is not None:
                out = leaky_relu(out, self.slope)
        return out

    def forward(self, x: Array) -> Array:
        out = x
        for i, layer in enumerate(self.layers):
            out = layer.forward(out)
            if i + 1 < len(self.layers) and self.slope is not None:
                out = np.where(out > 0, out, self.slope * out)
        return out

    def buffers(self) -> list[ParamBuffer]:
        return [buffer for layer in self.layers for buffer in (layer.weight, layer.bias)]

    def frozen(self) -> MLP:
        return MLP(
            [Dense(layer.weight.copy(False), layer.bias.copy(False)) for layer in self.layers],
            self.slope,
        )


def _density_bump(resolution: int) -> Array:
    coords = np.linspace(-1.0, 1.0, resolution)
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    bump: Array = np.exp(-(rows**2 + cols**2) / 0.5)
    return bump


class GeneratorParams:
    """Weights of the three sub-networks and their trainable flags."""

    def __init__(
        self, config: GeneratorConfig, mapping: MLP, triplane_gen: MLP, decoder: MLP
    ) -> None:
        self.config = config
        self.mapping = mapping
        self.triplane_gen = triplane_gen
        self.decoder = decoder
        if triplane_gen.layers[-1].out_dim != 3 * config.channels * config.gen_resolution**2:
            raise ValueError("triplane_gen output does not match the configured triplane")
        self._upsample = interpolation_matrix(config.gen_resolution, config.resolution)

    @staticmethod
    def initialize(config: GeneratorConfig = GeneratorConfig()) -> GeneratorParams:
        """Seeded structure standing in for a pretrained generator.

        Channel 0 of every plane carries a central bump that the decoder turns
        into density, so renders show a lit blob whose colors depend on the
        latent; the remaining weights are small random perturbations.
        """
        rng = np.random.default_rng(config.seed)
        dim, chans, coarse = config.latent_dim, config.channels, config.gen_resolution
        mapping = MLP.initialize(
            "mapping", [dim] * (config.mapping_layers + 1), config.slope, rng
        )
        triplane_gen = MLP.initialize(
            "triplane_gen",
            [dim, config.hidden, 3 * chans * coarse * coarse],
            config.slope,
            rng,
            gain=0.3,
        )
        base = np.zeros((3, chans, coarse, coarse))
        base[:, 0] = _density_bump(coarse)
        base[:, 1:] = 0.3 * rng.standard_normal((3, chans - 1, coarse, coarse))
        triplane_gen.layers[-1].bias.values[:] = base.reshape(-1)
        decoder = MLP.initialize(
            "decoder", [chans, config.decoder_hidden, 4], config.slope, rng
        )
        first, last = decoder.layers
        first.weight.values[:, 0] = 0.0
        first.weight.values[0, 0] = 1.0
        first.bias.values[0] = -1.6
        last.weight.values[0, :] = 0.0
        last.weight.values[:, 0] = 0.0
        last.weight.values[0, 0] = 8.0
        last.bias.values[0] = -3.0
        return GeneratorParams(config, mapping, triplane_gen, decoder)

    def buffers(self) -> list[ParamBuffer]:
        return [
            *self.mapping.buffers(),
            *self.triplane_gen.buffers(),
            *self.decoder.buffers(),
        ]

    def set_trainable(
        self, mapping: bool = False, triplane_gen: bool = False, decoder: bool = False
    ) -> None:
        for network, flag in (
            (self.mapping, mapping),
            (self.triplane_gen, triplane_gen),
            (self.decoder, decoder),
        ):
            for buffer in network.buffers():
                buffer.trainable = flag
                buffer.zero_grad()

    def upsample(self, coarse: Union[Node, Array]) -> Node:
        return separable_linear(coarse, self._upsample, self._upsample)

    def state_dict(self) -> dict[str, Array]:
        config = dataclasses.asdict(self.config)
        return {
            **{f"config.{key}": np.array(float(value)) for key, value in config.items()},
            **{buffer.name: buffer.values.copy() for buffer in self.buffers()},
        }

    @staticmethod
    def from_state_dict(tensors: Mapping[str, Array]) -> GeneratorParams:
        fields = [field.name for field in dataclasses.fields(GeneratorConfig)]
        try:
            raw = {key: tensors[f"config.{key}"] for key in fields}
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks generator config entry {exc}") from exc
        config = GeneratorConfig(
            **{
                key: (float(value) if key == "slope" else int(value))
                for key, value in raw.items()
            }
        )
        params = GeneratorParams.initialize(config)
        for buffer in params.buffers():
            if buffer.name not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {buffer.name}")
            values = tensors[buffer.name]
            if values.shape != buffer.shape:
                raise CheckpointError(
                    f"tensor {buffer.name} has shape {values.shape}, expected {buffer.shape}"
                )
            buffer.values = values.astype(np.float64).copy()
            buffer.zero_grad()
        return params

    def __str__(self) -> str:
        return f"GeneratorParams {self.config}"


def mapping_graph(params: GeneratorParams, z: Union[Array, Node]) -> Node:
    z_node = as_node(z)
    if z_node.shape != (params.mapping.layers[0].in_dim,):
        raise ValueError(
            f"latent of shape {z_node.shape} for mapping input {params.mapping.layers[0].in_dim}"
        )
    return params.mapping.graph(z_node)


def mapping_forward(params: GeneratorParams, z: LatentCode) -> LatentCode:
    if z.kind != "noise":
        raise ValueError(f"mapping takes a noise code, got {z.kind}")
    if z.values.shape != (params.mapping.layers[0].in_dim,):
        raise ValueError(
            f"latent of shape {z.values.shape} for mapping input {params.mapping.layers[0].in_dim}"
        )
    return LatentCode(params.mapping.forward(z.values), "style")


def _residual_node(
    params: GeneratorParams, residual: Union[None, LearnableTriplane, ParamBuffer, Node, Array]
) -> Optional[Node]:
    if residual is None:
        return None
    if isinstance(residual, LearnableTriplane):
        node = leaf(residual.buffer)
    elif isinstance(residual, ParamBuffer):
        node = leaf(residual)
    else:
        node = as_node(residual)
    expected = (3, params.config.channels, params.config.resolution, params.config.resolution)
    if node.shape != expected:
        raise ValueError(f"residual of shape {node.shape}, expected {expected}")
    return node


def triplane_graph(
    params: GeneratorParams,
    w: Union[Array, Node],
    residual: Union[None, LearnableTriplane, ParamBuffer, Node, Array] = None,
) -> Node:
    """T = upsample(triplane_gen(w)) + residual, as a (3, C, R, R) node."""
    residual_node = _residual_node(params, residual)
    config = params.config
    flat = params.triplane_gen.graph(as_node(w))
    coarse = reshape(flat, (3, config.channels, config.gen_resolution, config.gen_resolution))
    planes = params.upsample(coarse)
    return planes if residual_node is None else planes + residual_node


def triplane_forward(
    params: GeneratorParams,
    w: LatentCode,
    residual: Optional[LearnableTriplane] = None,
) -> TriplaneGrid:
    if w.kind != "style":
        raise ValueError(f"triplane generator takes a style code, got {w.kind}")
    node = triplane_graph(
        params, const(w.values), None if residual is None else residual.buffer.values
    )
    return TriplaneGrid(node.value)


def clone_frozen(params: GeneratorParams) -> GeneratorParams:
    clone = GeneratorParams(
        params.config,
        params.mapping.frozen(),
        params.triplane_gen.frozen(),
        params.decoder.frozen(),
    )
    return clone


def replace_mapping(params: GeneratorParams, mapping: MLP) -> GeneratorParams:
    return GeneratorParams(params.config, mapping, params.triplane_gen, params.decoder)


def save_checkpoint(path: Path, tensors: Mapping[str, Array]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, values in tensors.items():
        array = np.asarray(values, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes(order="C"))
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Path) -> dict[str, Array]:
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a DG3D checkpoint (bad magic {data[:4]!r})")
    offset = 4

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(data):
            raise CheckpointError(f"{path} is truncated at byte {offset}")
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {version}")
    tensors: dict[str, Array] = {}
    while offset < len(data):
        (name_length,) = struct.unpack("<I", take(4))
        try:
            name = take(name_length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(
                f"{path} has a tensor name that is not UTF-8 before byte {offset}"
            ) from exc
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = (
            np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        )
    return tensors


def save_generator(
    path: Path,
    params: GeneratorParams,
    extra: Optional[Mapping[str, Array]] = None,
) -> None:
    save_checkpoint(path, {**params.state_dict(), **(extra or {})})


def load_generator(path: Path) -> tuple[GeneratorParams, dict[str, Array]]:
    """Parameters plus every tensor that is not part of the generator."""
    tensors = load_checkpoint(path)
    params = GeneratorParams.from_state_dict(tensors)
    known = set(params.state_dict())
    return params, {name: values for name, values in tensors.items() if name not in known}
