"""Architecture descriptors and shape inference.

A network is written as " - "-separated blocks, e.g.::

    3*C 3x3x3 - P - 2*C 3x3 - P - NN

Grammar per block (multiplier optional, default 1):

    block := [n"*"]"C" kx"x"ky["x"kz]   n valid convolutions, ReLU
           | "P"                        2x2 in-plane max pool, ceil mode
           | [n"*"]"NN"                 n fully connected hidden layers

A 2D kernel "3x3" means kz = 1.  Convolutions use 32 output channels before
the first pool and 64 afterwards.  Every NN expands to Dense(hidden) + ReLU +
Dropout; the first one is preceded by a Flatten.  A final linear layer mapping
to 2 logits per ROI voxel is appended automatically.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import ArchSyntaxError, ShapeInferenceError

CHANNELS_PRE_POOL = 32
CHANNELS_POST_POOL = 64


@dataclass(frozen=True)
class Conv3D:
    kernel: tuple[int, int, int]
    out_channels: int


@dataclass(frozen=True)
class MaxPool2x2:
    """2x2 max pool over (x, y) with ceil semantics: odd edges keep a
    partial window, so the output extent is ceil(n/2).  z untouched."""


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class OutputDense:
    """Linear map onto 2 logits per ROI voxel; width fixed by the ROI."""


Layer = Conv3D | MaxPool2x2 | Flatten | Dense | Dropout | OutputDense


@dataclass(frozen=True)
class NetSpec:
    fov: tuple[int, int, int]
    roi: tuple[int, int, int]
    layers: tuple[Layer, ...]
    descriptor: str = ""
    hidden_width: int = 1024
    dropout_rate: float = 0.5

    @property
    def out_units(self) -> int:
        rx, ry, rz = self.roi
        return rx * ry * rz * 2

    def conv_layers(self) -> list[Conv3D]:
        return [l for l in self.layers if isinstance(l, Conv3D)]


_BLOCK_RE = re.compile(
    r"^(?:(?P<mult>\d+)\*)?(?P<kind>C|P|NN)(?:\s+(?P<kernel>\d+(?:x\d+){1,2}))?$"
)


def parse_arch(
    descriptor: str,
    fov: tuple[int, int, int] = (33, 33, 7),
    roi: tuple[int, int, int] = (5, 5, 1),
    hidden_width: int = 1024,
    dropout_rate: float = 0.5,
) -> NetSpec:
    """Parse a descriptor string into a validated NetSpec.

    Raises ArchSyntaxError for malformed strings and ShapeInferenceError when
    the layer stack collapses the field of view below 1 voxel (checked via
    infer_shapes, so a returned spec always has a consistent shape trace).
    """
    fov = tuple(int(v) for v in fov)
    roi = tuple(int(v) for v in roi)
    if len(fov) != 3 or min(fov) < 1:
        raise ValueError(f"bad fov {fov!r}")
    if len(roi) != 3 or min(roi) < 1:
        raise ValueError(f"bad roi {roi!r}")
    if hidden_width < 1:
        raise ValueError(f"hidden_width must be >= 1, got {hidden_width}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")

    text = descriptor.strip()
    if not text:
        raise ArchSyntaxError("empty descriptor")

    layers: list[Layer] = []
    seen_pool = False
    seen_nn = False
    for raw_block in text.split(" - "):
        block = raw_block.strip()
        m = _BLOCK_RE.match(block)
        if m is None:
            raise ArchSyntaxError(f"cannot parse block {block!r} in {descriptor!r}")
        mult = int(m.group("mult") or 1)
        kind = m.group("kind")
        kernel = m.group("kernel")
        if mult < 1:
            raise ArchSyntaxError(f"zero multiplier in block {block!r}")
        if kind == "C":
            if kernel is None:
                raise ArchSyntaxError(f"convolution block {block!r} needs a kernel")
            if seen_nn:
                raise ArchSyntaxError("convolution after fully connected stage")
            dims = [int(k) for k in kernel.split("x")]
            if len(dims) == 2:
                dims.append(1)
            if min(dims) < 1:
                raise ArchSyntaxError(f"bad kernel {kernel!r}")
            ch = CHANNELS_POST_POOL if seen_pool else CHANNELS_PRE_POOL
            layers.extend(Conv3D(tuple(dims), ch) for _ in range(mult))
        elif kind == "P":
            if kernel is not None:
                raise ArchSyntaxError(f"pool block takes no kernel: {block!r}")
            if seen_nn:
                raise ArchSyntaxError("pool after fully connected stage")
            layers.extend(MaxPool2x2() for _ in range(mult))
            seen_pool = True
        else:  # NN
            if kernel is not None:
                raise ArchSyntaxError(f"NN block takes no kernel: {block!r}")
            for _ in range(mult):
                if not seen_nn:
                    layers.append(Flatten())
                    seen_nn = True
                layers.append(Dense(hidden_width))
                layers.append(Dropout(dropout_rate))

    if not seen_nn:
        layers.append(Flatten())
    layers.append(OutputDense())

    spec = NetSpec(fov, roi, tuple(layers), text, hidden_width, dropout_rate)
    infer_shapes(spec)  # raises if the stack does not fit the fov
    return spec


def infer_shapes(spec: NetSpec) -> list[tuple]:
    """Activation shape after each layer, starting from the input.

    Spatial stages report (x, y, z, channels); flattened stages report
    (width,).  Raises ShapeInferenceError when any extent drops below 1 or a
    kernel exceeds its input.
    """
    shapes: list[tuple] = [spec.fov + (1,)]
    x, y, z, c = shapes[0]
    flat: int | None = None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv3D):
            if flat is not None:
                raise ShapeInferenceError("convolution after flatten")
            kx, ky, kz = layer.kernel
            x, y, z = x - kx + 1, y - ky + 1, z - kz + 1
            if min(x, y, z) < 1:
                raise ShapeInferenceError(
                    f"layer {i} ({layer}) collapses the volume to "
                    f"({x}, {y}, {z}) for fov {spec.fov}"
                )
            c = layer.out_channels
            shapes.append((x, y, z, c))
        elif isinstance(layer, MaxPool2x2):
            if flat is not None:
                raise ShapeInferenceError("pool after flatten")
            x, y = -(-x // 2), -(-y // 2)
            shapes.append((x, y, z, c))
        elif isinstance(layer, Flatten):
            flat = x * y * z * c
            shapes.append((flat,))
        elif isinstance(layer, Dense):
            if flat is None:
                raise ShapeInferenceError("dense layer before flatten")
            flat = layer.width
            shapes.append((flat,))
        elif isinstance(layer, Dropout):
            shapes.append(shapes[-1])
        elif isinstance(layer, OutputDense):
            if flat is None:
                raise ShapeInferenceError("output layer before flatten")
            flat = spec.out_units
            shapes.append((flat,))
        else:
            raise ShapeInferenceError(f"unknown layer {layer!r}")
    return shapes


def receptive_margins(spec: NetSpec) -> tuple[int, int, int]:
    """Margin between FOV and ROI per axis; must be symmetric (even gap)."""
    gaps = [f - r for f, r in zip(spec.fov, spec.roi)]
    if any(g < 0 for g in gaps):
        raise ValueError(f"roi {spec.roi} exceeds fov {spec.fov}")
    if any(g % 2 for g in gaps):
        raise ValueError(f"fov-roi gap must be even per axis, got {gaps}")
    return tuple(g // 2 for g in gaps)


def describe(spec: NetSpec) -> str:
    """Human-readable one-line shape trace, for logs and reports."""
    shapes = infer_shapes(spec)
    parts = ["x".join(str(d) for d in s) for s in shapes]
    return " -> ".join(parts)


def count_parameters(spec: NetSpec) -> int:
    shapes = infer_shapes(spec)
    total = 0
    prev = shapes[0]
    for layer, shape in zip(spec.layers, shapes[1:]):
        if isinstance(layer, Conv3D):
            kx, ky, kz = layer.kernel
            total += kx * ky * kz * prev[3] * layer.out_channels + layer.out_channels
        elif isinstance(layer, (Dense, OutputDense)):
            total += prev[0] * shape[0] + shape[0]
        prev = shape
    return total
