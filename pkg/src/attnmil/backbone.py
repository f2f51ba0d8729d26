"""Convolutional feature extractor and the model parameter container.

Each selected 2-D slice of a volume runs independently through a small
stack of same-padding convolutions (relu between layers, none after the
last), so spatial dimensions are preserved and every lattice location
keeps a one-to-one match with a voxel.  The per-location channel
vectors are the MIL instances everything downstream consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import VolumeSample
from .errors import (
    BadMagicError,
    DataFormatError,
    DimOverflowError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)

PARAMS_MAGIC = b"IAGP"
PARAMS_VERSION = 1


@dataclass
class BackboneConfig:
    """Architecture of the feature extractor."""

    channels: int = 16
    layers: int = 3
    kernel_size: int = 3
    in_channels: int = 1

    def validate(self) -> None:
        if self.channels < 1 or self.layers < 1 or self.in_channels < 1:
            raise ValueError(f"invalid backbone config {self}")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")


@dataclass
class FeatureMap:
    """Per-location instance features over the sampled spatial lattice.

    ``features`` is [num_locations, channels], ordered slice-major then
    row-major within a slice, matching ``mask[slice_indices].ravel()``.
    """

    features: Tensor
    depth: int
    height: int
    width: int

    @property
    def num_locations(self) -> int:
        return self.depth * self.height * self.width

    @property
    def channels(self) -> int:
        return self.features.data.shape[1]

    def values(self) -> np.ndarray:
        return self.features.data


@dataclass
class ModelParams:
    """All trainable tensors: conv stack plus the three linear heads."""

    layers: list  # [(kernels Tensor, bias Tensor), ...]
    attention_head: Tensor
    global_head: Tensor
    local_head: Tensor
    config: BackboneConfig = field(default_factory=BackboneConfig)

    def tensors(self) -> list[Tensor]:
        out = []
        for kernels, bias in self.layers:
            out.extend((kernels, bias))
        out.extend((self.attention_head, self.global_head, self.local_head))
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (kernels, bias) in enumerate(self.layers):
            out.append((f"layer{i}.kernels", kernels))
            out.append((f"layer{i}.bias", bias))
        out.append(("attention_head", self.attention_head))
        out.append(("global_head", self.global_head))
        out.append(("local_head", self.local_head))
        return out

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = np.zeros_like(t.data)

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def copy(self, tape: Tape | None = None) -> "ModelParams":
        """Deep copy, optionally bound to a different tape."""
        layers = [
            (Tensor(k.data, tape), Tensor(b.data, tape)) for k, b in self.layers
        ]
        return ModelParams(
            layers=layers,
            attention_head=Tensor(self.attention_head.data, tape),
            global_head=Tensor(self.global_head.data, tape),
            local_head=Tensor(self.local_head.data, tape),
            config=self.config,
        )

    def detached(self) -> "ModelParams":
        """Tape-free copy for pure forward evaluation."""
        return self.copy(tape=None)


def init_params(config: BackboneConfig = BackboneConfig(), rng=None,
                tape: Tape | None = None, seed: int | None = None) -> ModelParams:
    """Seeded uniform initialization in [-s, s] with s = 1/sqrt(fan_in)."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    k = config.kernel_size
    layers = []
    cin = config.in_channels
    for _ in range(config.layers):
        s = 1.0 / np.sqrt(cin * k * k)
        kernels = rng.uniform(-s, s, size=(config.channels, cin, k, k))
        bias = rng.uniform(-s, s, size=config.channels)
        layers.append((Tensor(kernels, tape), Tensor(bias, tape)))
        cin = config.channels
    s = 1.0 / np.sqrt(config.channels)
    heads = [
        Tensor(rng.uniform(-s, s, size=config.channels), tape) for _ in range(3)
    ]
    return ModelParams(layers, heads[0], heads[1], heads[2], config)


def extract_features(volume: VolumeSample, params: ModelParams,
                     slice_indices) -> FeatureMap:
    """Run the selected slices through the conv stack; concatenate along depth.

    ``slice_indices`` must be nonempty, strictly increasing and within
    the volume depth, so instance ordering is deterministic.
    """
    idx = list(slice_indices)
    if not idx:
        raise ShapeMismatchError("extract_features: empty slice selection")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ShapeMismatchError(
            f"extract_features: slice indices must be strictly increasing, got {idx}"
        )
    if idx[0] < 0 or idx[-1] >= volume.depth:
        raise ShapeMismatchError(
            f"extract_features: indices {idx} outside depth {volume.depth}"
        )
    c = params.config.channels
    for name, head in (("attention", params.attention_head),
                       ("global", params.global_head),
                       ("local", params.local_head)):
        if head.data.shape != (c,):
            raise ShapeMismatchError(
                f"extract_features: {name} head {head.data.shape} does not match "
                f"backbone channels {c}"
            )

    stack = volume.voxels[idx].astype(np.float64)[..., None]  # [N, H, W, 1]
    x = Tensor(stack)
    last = len(params.layers) - 1
    for i, (kernels, bias) in enumerate(params.layers):
        x = ad.conv2d_nhwc(x, kernels, bias)
        if i != last:
            x = ad.relu(x)
    features = ad.nhwc_rows(x)
    _, h, w = volume.voxels.shape
    return FeatureMap(features, depth=len(idx), height=h, width=w)


# ---------------------------------------------------------------------------
# parameter serialization: header with array shapes, then flat f64 payload


def save_params(params: ModelParams, path) -> None:
    arrays = [t.data for t in params.tensors()]
    parts = [PARAMS_MAGIC, struct.pack("<BI", PARAMS_VERSION, len(arrays))]
    for arr in arrays:
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path, tape: Tape | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 9:
        raise TruncatedFileError(f"{path}: too short for a parameter header")
    if raw[:4] != PARAMS_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {PARAMS_MAGIC!r}")
    version, n_arrays = struct.unpack_from("<BI", raw, 4)
    if version != PARAMS_VERSION:
        raise UnsupportedVersionError(f"{path}: parameter file version {version}")
    if n_arrays < 5 or n_arrays % 2 == 0:
        raise DataFormatError(
            f"{path}: {n_arrays} arrays cannot form a conv stack plus three heads"
        )
    offset = 9
    shapes = []
    for _ in range(n_arrays):
        if offset + 4 > len(raw):
            raise TruncatedFileError(f"{path}: header cut short")
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if ndim > 4:
            raise DimOverflowError(f"{path}: array rank {ndim}")
        if offset + 4 * ndim > len(raw):
            raise TruncatedFileError(f"{path}: header cut short")
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        if any(d < 1 for d in shape) or int(np.prod(shape, dtype=np.int64)) > 2**26:
            raise DimOverflowError(f"{path}: implausible array shape {shape}")
        shapes.append(shape)
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise TruncatedFileError(f"{path}: payload cut short")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays.append(arr.reshape(shape).copy())
        offset += 8 * count
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")

    n_layers = (n_arrays - 3) // 2
    layers = []
    for i in range(n_layers):
        kernels, bias = arrays[2 * i], arrays[2 * i + 1]
        if kernels.ndim != 4 or bias.ndim != 1 or kernels.shape[0] != bias.shape[0]:
            raise DataFormatError(
                f"{path}: layer {i} has shapes {kernels.shape} / {bias.shape}"
            )
        layers.append((Tensor(kernels, tape), Tensor(bias, tape)))
    heads = arrays[-3:]
    if any(h.ndim != 1 for h in heads):
        raise DataFormatError(f"{path}: head arrays must be vectors")
    config = BackboneConfig(
        channels=layers[-1][1].data.shape[0],
        layers=n_layers,
        kernel_size=layers[0][0].data.shape[2],
        in_channels=layers[0][0].data.shape[1],
    )
    return ModelParams(
        layers,
        Tensor(heads[0], tape),
        Tensor(heads[1], tape),
        Tensor(heads[2], tape),
        config,
    )
