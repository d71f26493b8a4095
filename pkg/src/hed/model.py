"""The trimmed multi-stage network with side outputs and a weighted-fusion layer."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .config import NetConfig
from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    pool2d,
    relu,
    sigmoid,
    upsample_bilinear,
    weighted_sum,
)

MAGIC = b"HEDW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


class ModelParams:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self, tensors: Optional[dict] = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list:
        return list(self.tensors)

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "ModelParams") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


def conv_name(stage: int, conv: int) -> str:
    """Parameter prefix for the ``conv``-th convolution (1-based) of ``stage`` (1-based)."""
    return f"conv{stage}_{conv}"


def expected_shapes(config: NetConfig) -> dict:
    shapes = {}
    k = config.kernel_size
    cin = config.input_channels
    for s, (convs, chans) in enumerate(config.stages, 1):
        for c in range(1, convs + 1):
            shapes[f"{conv_name(s, c)}.weight"] = (chans, cin, k, k)
            shapes[f"{conv_name(s, c)}.bias"] = (chans,)
            cin = chans
    for m, tap in enumerate(config.taps, 1):
        chans = config.stages[tap][1]
        shapes[f"side{m}.weight"] = (1, chans, 1, 1)
        shapes[f"side{m}.bias"] = (1,)
    shapes["fuse.weight"] = (config.num_sides,)
    return shapes


def build(config: NetConfig, seed: int = 0) -> ModelParams:
    """Initialize parameters: scaled normal trunk, zero side projections, constant fusion."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in expected_shapes(config).items():
        if name.startswith("conv") and name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        elif name == "fuse.weight":
            data = np.full(shape, config.fusion_weight_init)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class EdgeMaps:
    """Everything one forward pass produces for an image.

    ``sides`` and ``fused`` are probability maps (H, W); the activation fields keep
    the pre-sigmoid graph tensors of shape (1, 1, H, W) for loss computation.
    """

    fused: np.ndarray
    sides: list
    input_shape: tuple
    fused_activation: Tensor
    side_activations: list

    @property
    def num_sides(self) -> int:
        return len(self.sides)


def forward(params: ModelParams, config: NetConfig, image) -> EdgeMaps:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"forward expects a 1xCxHxW image, got {x.shape}")
    _, c, h, w = x.shape
    if c != config.input_channels:
        raise ShapeError(f"image has {c} channels, config expects {config.input_channels}")
    need = config.min_input_size
    if h < need or w < need:
        raise ShapeError(f"image {h}x{w} is below the minimum input size {need}x{need}")

    pad = config.kernel_size // 2
    taps = {tap: m for m, tap in enumerate(config.taps, 1)}
    strides = config.stage_strides()
    side_acts = []
    for s, (convs, _) in enumerate(config.stages):
        if s > 0:
            x = pool2d(x, 2, 2, config.pooling_mode)
        for ci in range(1, convs + 1):
            name = conv_name(s + 1, ci)
            x = relu(conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, pad=pad))
        if s in taps:
            m = taps[s]
            a = conv2d(x, params[f"side{m}.weight"], params[f"side{m}.bias"])
            side_acts.append(upsample_bilinear(a, strides[s], h, w))

    fused_act = weighted_sum(params["fuse.weight"], side_acts)
    return EdgeMaps(
        fused=sigmoid(fused_act).data[0, 0],
        sides=[sigmoid(a).data[0, 0] for a in side_acts],
        input_shape=(h, w),
        fused_activation=fused_act,
        side_activations=side_acts,
    )


def predict(params: ModelParams, config: NetConfig, image) -> EdgeMaps:
    """Inference-only forward: parameters are wrapped without gradient tracking."""
    frozen = ModelParams({k: Tensor(v.data) for k, v in params.items()})
    return forward(frozen, config, image)


# receptive fields -----------------------------------------------------------


def receptive_field_schedule(config: NetConfig, final_pool: bool = True) -> list:
    """(layer, receptive field, stride) for every conv and pool layer of the trunk.

    Layers are named ``c<stage>_<conv>`` and ``p<stage>``. With ``final_pool`` the
    pooling layer after the last stage is listed too (the untrimmed VGG layout).
    """
    rf, stride = 1, 1
    rows = []
    k = config.kernel_size
    n = len(config.stages)
    for s, (convs, _) in enumerate(config.stages, 1):
        for c in range(1, convs + 1):
            rf += (k - 1) * stride
            rows.append((f"c{s}_{c}", rf, stride))
        if s < n or final_pool:
            rf += (2 - 1) * stride
            stride *= 2
            rows.append((f"p{s}", rf, stride))
    return rows


def side_output_layers(config: NetConfig) -> list:
    """Names of the conv layers feeding each side output."""
    return [f"c{t + 1}_{config.stages[t][0]}" for t in config.taps]


# serialization --------------------------------------------------------------


def save(params: ModelParams, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path, config: Optional[NetConfig] = None) -> ModelParams:
    """Read a weights file; with ``config``, names and shapes are checked against it."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightsFormatError(f"truncated file: incomplete {what} at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "header") != MAGIC:
        raise WeightsFormatError("bad magic, not a HEDW weights file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    expected = expected_shapes(config) if config is not None else None
    params = ModelParams()
    for idx in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"record {idx} name length"))
        name = take(nlen, f"record {idx} name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"record {name!r} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"record {name!r} dims"))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * size, f"record {name!r}"), dtype="<f8").reshape(dims).astype(np.float64)
        if name in params:
            raise WeightsFormatError(f"duplicate record {name!r}")
        if expected is not None:
            if name not in expected:
                raise WeightsFormatError(f"unknown tensor {name!r} in weights file")
            if tuple(dims) != expected[name]:
                raise WeightsFormatError(f"record {name!r} has shape {tuple(dims)}, expected {expected[name]}")
        params[name] = Tensor(data, requires_grad=True, name=name)
    if pos != len(buf):
        raise WeightsFormatError(f"{len(buf) - pos} trailing bytes after last record")
    if expected is not None:
        missing = [k for k in expected if k not in params]
        if missing:
            raise WeightsFormatError(f"weights file lacks record {missing[0]!r}")
        params = ModelParams({k: params[k] for k in expected})
    return params
