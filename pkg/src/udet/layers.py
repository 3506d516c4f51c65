"""Parameter-holding layers and the registry that names them."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype

Mode = Literal["train", "infer"]


@dataclass(frozen=True)
class LayerSpec:
    """One instantiated layer of the graph, for census and auditing."""

    name: str
    kind: str
    section: str
    params: int = 0


@dataclass(frozen=True)
class ParamInfo:
    # init scheme consumed by udet.train.init_weights
    init: str
    fan_in: int = 0
    fan_out: int = 0


class Registry:
    """Named parameters, non-trainable buffers and the ordered layer list."""

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or default_dtype())
        self.params: dict[str, Parameter] = {}
        self.info: dict[str, ParamInfo] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.layers: list[LayerSpec] = []
        self.norms: list = []  # BatchNorm2D modules, for momentum changes

    def param(self, name: str, shape: tuple, info: ParamInfo) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(np.zeros(shape, dtype=self.dtype), name=name)
        self.params[name] = p
        self.info[name] = info
        return p

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def layer(self, name: str, kind: str, section: str, params: int = 0) -> None:
        self.layers.append(LayerSpec(name, kind, section, params))


class Conv2D:
    def __init__(self, reg: Registry, name: str, spec: ops.Conv2DSpec, section: str, act: str = "relu"):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        fan_out = spec.out_channels * kh * kw
        init = "glorot" if act == "mish" else "he"
        self.weight = reg.param(f"{name}.weight", spec.weight_shape, ParamInfo(init, fan_in, fan_out))
        self.bias = reg.param(f"{name}.bias", (spec.out_channels,), ParamInfo("zero")) if spec.bias else None
        reg.layer(name, "conv2d", section, spec.parameter_count())

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.spec, self.weight, self.bias)


class TransposedConv2D:
    def __init__(self, reg: Registry, name: str, in_ch: int, out_ch: int, section: str, act: str = "relu"):
        self.spec = ops.Conv2DSpec(in_ch, out_ch, (2, 2), 2, "valid", True)
        init = "glorot" if act == "mish" else "he"
        self.weight = reg.param(f"{name}.weight", (in_ch, out_ch, 2, 2), ParamInfo(init, in_ch * 4, out_ch * 4))
        self.bias = reg.param(f"{name}.bias", (out_ch,), ParamInfo("zero"))
        reg.layer(name, "transposed_conv2d", section, self.spec.parameter_count())

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.spec, self.weight, self.bias)


class DepthwiseConv2D:
    def __init__(self, reg: Registry, name: str, channels: int, section: str, kernel: int = 3):
        self.weight = reg.param(f"{name}.weight", (channels, kernel, kernel),
                                ParamInfo("he", kernel * kernel, kernel * kernel))
        reg.layer(name, "depthwise_conv2d", section, kernel * kernel * channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight)


class BatchNorm2D:
    def __init__(self, reg: Registry, name: str, channels: int, section: str):
        self.spec = ops.BatchNormSpec(channels)
        self.gamma = reg.param(f"{name}.gamma", (channels,), ParamInfo("one"))
        self.beta = reg.param(f"{name}.beta", (channels,), ParamInfo("zero"))
        self.running_mean = reg.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = reg.buffer(f"{name}.running_var", np.ones(channels))
        self.updates = reg.buffer(f"{name}.updates", np.zeros(1))
        reg.layer(name, "batchnorm2d", section, self.spec.parameter_count())
        reg.norms.append(self)

    def set_momentum(self, momentum: float) -> None:
        self.spec = replace(self.spec, momentum=momentum)

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return ops.batchnorm2d(x, self.spec, self.gamma, self.beta,
                               self.running_mean, self.running_var, mode, self.updates)


class Activation:
    def __init__(self, reg: Optional[Registry], name: str, kind: str, section: str):
        self.kind = kind
        if reg is not None:
            reg.layer(name, kind, section)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.activation(self.kind, x)
