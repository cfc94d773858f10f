from __future__ import annotations

import re
from typing import Any, Dict, List, Set, Tuple, Type, TypeVar

import numpy as np

from .errors import InvalidInputError
from .numerics import FloatArray, RandomStream

LayerSpec = Dict[str, Any]

T = TypeVar("T")


def get_subclasses(cls: Type[T]) -> Set[Type[T]]:
    c = list(cls.__subclasses__())
    for sub in c:
        c.extend(get_subclasses(sub))
    return set(c)


class Layer:
    __slots__ = ()

    kind = ""
    parameters: Tuple[str, ...] = ()

    def spec(self) -> LayerSpec:
        return {"type": self.kind}

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape


class Affine(Layer):
    __slots__ = "weight", "bias"

    kind = "affine"
    parameters = ("weight", "bias")

    def __init__(self, weight: FloatArray, bias: FloatArray):
        self.weight = weight
        self.bias = bias

    def spec(self) -> LayerSpec:
        return {"type": self.kind, "units": int(self.weight.shape[0])}

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if input_shape != (self.weight.shape[1],):
            raise InvalidInputError(
                f"affine layer expects {self.weight.shape[1]} inputs, got {input_shape}"
            )
        return (self.weight.shape[0],)


class Conv2d(Layer):
    """Valid (unpadded) convolution over ``(H, W, C)`` inputs.

    ``weight`` has shape ``(kernel, kernel, in_channels, out_channels)``.
    """

    __slots__ = "weight", "bias", "stride"

    kind = "conv"
    parameters = ("weight", "bias")

    def __init__(self, weight: FloatArray, bias: FloatArray, stride: int = 1):
        self.weight = weight
        self.bias = bias
        self.stride = stride

    def spec(self) -> LayerSpec:
        return {
            "type": self.kind,
            "channels": int(self.weight.shape[3]),
            "kernel": int(self.weight.shape[0]),
            "stride": self.stride,
        }

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        kernel, _, in_channels, out_channels = self.weight.shape
        if len(input_shape) != 3 or input_shape[2] != in_channels:
            raise InvalidInputError(
                f"conv layer expects (H, W, {in_channels}) inputs, got {input_shape}"
            )
        height, width, _ = input_shape
        if height < kernel or width < kernel:
            raise InvalidInputError(
                f"kernel {kernel} does not fit input of shape {input_shape}"
            )
        return (
            (height - kernel) // self.stride + 1,
            (width - kernel) // self.stride + 1,
            out_channels,
        )


class ReLU(Layer):
    __slots__ = ()

    kind = "relu"


class AvgPool2d(Layer):
    __slots__ = ("size",)

    kind = "pool"

    def __init__(self, size: int):
        self.size = size

    def spec(self) -> LayerSpec:
        return {"type": self.kind, "size": self.size}

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(input_shape) != 3 or min(input_shape[:2]) < self.size:
            raise InvalidInputError(
                f"cannot pool {input_shape} with window {self.size}"
            )
        height, width, channels = input_shape
        return (height // self.size, width // self.size, channels)


class Flatten(Layer):
    __slots__ = ()

    kind = "flatten"

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (int(np.prod(input_shape)),)


PRESETS: Dict[str, str] = {
    "linear": "flatten-affine",
    "mlp": "flatten-affine64-relu-affine",
    "conv-a": "conv8k3s1-relu-pool2-conv16k3s1-relu-pool2-flatten-affine",
    "conv-b": "conv12k5s2-relu-flatten-affine32-relu-affine",
    "conv-c": "pool2-flatten-affine48-relu-affine",
}

_TOKEN_PATTERNS = {
    "affine": re.compile(r"affine(?P<units>\d+)?"),
    "conv": re.compile(r"conv(?P<channels>\d+)k(?P<kernel>\d+)(?:s(?P<stride>\d+))?"),
    "pool": re.compile(r"pool(?P<size>\d+)"),
    "relu": re.compile(r"relu"),
    "flatten": re.compile(r"flatten"),
}


def parse_architecture(text: str) -> List[LayerSpec]:
    """Parse a preset name or a dash-separated layer string.

    An ``affine`` token without a unit count maps to the class count.
    """
    text = PRESETS.get(text.strip(), text.strip())
    specs: List[LayerSpec] = []
    for token in text.split("-"):
        for kind, pattern in _TOKEN_PATTERNS.items():
            match = pattern.fullmatch(token)
            if match is None:
                continue
            spec: LayerSpec = {"type": kind}
            for key, value in match.groupdict().items():
                if value is not None:
                    spec[key] = int(value)
            if kind == "conv":
                spec.setdefault("stride", 1)
            specs.append(spec)
            break
        else:
            raise InvalidInputError(f"Unknown layer token: {token!r}")
    return specs


def _uniform(stream: RandomStream, fan_in: int, shape: Tuple[int, ...]) -> FloatArray:
    bound = 1.0 / np.sqrt(fan_in)
    return np.asarray(stream.uniform(-bound, bound, shape), dtype=np.float64)


def build_layers(
    architecture: List[LayerSpec],
    input_shape: Tuple[int, ...],
    num_classes: int,
    stream: RandomStream,
) -> List[Layer]:
    """Instantiate layers with uniform fan-in initialization drawn from ``stream``."""
    layers: List[Layer] = []
    shape = tuple(input_shape)
    for spec in architecture:
        kind = spec.get("type")
        layer: Layer
        if kind == "affine":
            if len(shape) != 1:
                raise InvalidInputError(f"affine layer needs flat input, got {shape}")
            units = int(spec.get("units") or num_classes)
            layer = Affine(
                _uniform(stream, shape[0], (units, shape[0])),
                _uniform(stream, shape[0], (units,)),
            )
        elif kind == "conv":
            if len(shape) != 3:
                raise InvalidInputError(f"conv layer needs (H, W, C) input, got {shape}")
            kernel, channels = int(spec["kernel"]), int(spec["channels"])
            fan_in = kernel * kernel * shape[2]
            layer = Conv2d(
                _uniform(stream, fan_in, (kernel, kernel, shape[2], channels)),
                _uniform(stream, fan_in, (channels,)),
                stride=int(spec.get("stride", 1)),
            )
        elif kind == "relu":
            layer = ReLU()
        elif kind == "pool":
            layer = AvgPool2d(int(spec["size"]))
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise InvalidInputError(f"Unknown layer type: {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    if shape != (num_classes,):
        raise InvalidInputError(
            f"architecture produces outputs of shape {shape}, expected ({num_classes},)"
        )
    return layers


def empty_layer(spec: LayerSpec) -> Layer:
    """Layer skeleton for ``spec`` whose parameters are filled in by a loader."""
    kind = spec.get("type")
    empty = np.zeros(0)
    if kind == "affine":
        return Affine(empty, empty)
    if kind == "conv":
        return Conv2d(empty, empty, stride=int(spec.get("stride", 1)))
    if kind == "relu":
        return ReLU()
    if kind == "pool":
        return AvgPool2d(int(spec["size"]))
    if kind == "flatten":
        return Flatten()
    raise InvalidInputError(f"Unknown layer type: {kind!r}")


__all__ = [
    "Affine",
    "AvgPool2d",
    "Conv2d",
    "Flatten",
    "Layer",
    "LayerSpec",
    "PRESETS",
    "ReLU",
    "build_layers",
    "parse_architecture",
]
