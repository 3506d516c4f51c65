"""U-Det assembly: encoder, Bi-FPN bridge, decoder, and ablation variants."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from . import ops
from .bifpn import BiFPN
from .layers import Activation, Conv2D, Mode, Registry, TransposedConv2D
from .tensor import Tensor, as_tensor, precision

logger = logging.getLogger(__name__)

BASE_CHANNELS = (64, 128, 256, 512, 1024)
BIFPN_WIDTH = 64
DROPOUT_RATE = 0.5
SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))


@dataclass(frozen=True)
class VariantSpec:
    use_mish: bool = True
    use_bifpn: bool = True
    use_expansion_path: bool = True

    @property
    def activation(self) -> str:
        return "mish" if self.use_mish else "relu"


VARIANTS = {
    "unet": VariantSpec(use_mish=False, use_bifpn=False, use_expansion_path=True),
    "unet_mish": VariantSpec(use_mish=True, use_bifpn=False, use_expansion_path=True),
    "encoder_bifpn": VariantSpec(use_mish=False, use_bifpn=True, use_expansion_path=False),
    "encoder_bifpn_mish": VariantSpec(use_mish=True, use_bifpn=True, use_expansion_path=False),
    "udet_relu": VariantSpec(use_mish=False, use_bifpn=True, use_expansion_path=True),
    "udet": VariantSpec(use_mish=True, use_bifpn=True, use_expansion_path=True),
}


def variant_name(v: VariantSpec) -> str:
    for name, spec in VARIANTS.items():
        if spec == v:
            return name
    raise ValueError(f"unnamed variant {v}")


def _parse_scale(width_scale) -> Fraction:
    scale = Fraction(width_scale).limit_denominator(64)
    if scale not in SCALES:
        raise ValueError(f"width_scale must be one of 1, 1/2, 1/4, 1/8; got {width_scale}")
    return scale


class ModelGraph:
    """Built U-Det (or ablation variant) with its named parameter registry."""

    def __init__(self, variant: VariantSpec, input_size: int, width_scale: Fraction, dtype=None):
        self.variant = variant
        self.input_size = input_size
        self.width_scale = width_scale
        self.reg = Registry(dtype)
        act = variant.activation
        ch = [int(c * width_scale) for c in BASE_CHANNELS]
        self.channels = tuple(ch)
        self.width = int(BIFPN_WIDTH * width_scale)
        reg = self.reg

        self.encoder = []
        prev = 1
        for d, c in enumerate(ch, start=1):
            blk = []
            for k in (1, 2):
                blk.append(Conv2D(reg, f"encoder.d{d}.conv{k}", ops.Conv2DSpec(prev, c), "encoder", act))
                blk.append(Activation(reg, f"encoder.d{d}.{act}{k}", act, "encoder"))
                prev = c
            self.encoder.append(blk)
            if d < len(ch):
                reg.layer(f"encoder.pool{d}", "maxpool2d", "encoder")
        reg.layer("encoder.d5.dropout", "dropout", "encoder")

        self.bifpn = BiFPN(reg, ch, self.width) if variant.use_bifpn else None

        self.decoder = []
        if variant.use_expansion_path:
            for d in (4, 3, 2, 1):
                c = ch[d - 1]
                skip = self.width if variant.use_bifpn else c
                stage = {
                    "up": TransposedConv2D(reg, f"decoder.d{d}.upconv", ch[d], c, "decoder", act),
                    "up_act": Activation(reg, f"decoder.d{d}.upconv_{act}", act, "decoder"),
                    "conv1": Conv2D(reg, f"decoder.d{d}.conv1", ops.Conv2DSpec(c + skip, c), "decoder", act),
                    "act1": Activation(reg, f"decoder.d{d}.{act}1", act, "decoder"),
                    "conv2": Conv2D(reg, f"decoder.d{d}.conv2", ops.Conv2DSpec(c, c), "decoder", act),
                    "act2": Activation(reg, f"decoder.d{d}.{act}2", act, "decoder"),
                }
                self.decoder.append((d, stage))
            head_in = ch[0]
        elif variant.use_bifpn:
            head_in = self.width
        else:
            raise ValueError("a variant needs the expansion path, the Bi-FPN, or both")
        self.head = Conv2D(reg, "head.conv", ops.Conv2DSpec(head_in, 1, (1, 1)), "decoder", "sigmoid")
        reg.layer("head.sigmoid", "sigmoid", "decoder")

    # -- registry views
    @property
    def params(self):
        return self.reg.params

    @property
    def buffers(self):
        return self.reg.buffers

    @property
    def layers(self):
        return self.reg.layers

    @property
    def dtype(self):
        return self.reg.dtype

    def parameters(self) -> list:
        return list(self.reg.params.values())

    def set_bn_momentum(self, momentum: float) -> None:
        if not 0 <= momentum < 1:
            raise ValueError(f"batch-norm momentum must lie in [0, 1), got {momentum}")
        for bn in self.reg.norms:
            bn.set_momentum(momentum)

    def zero_grads(self) -> None:
        for p in self.reg.params.values():
            p.grad = None

    def census(self, section: Optional[str] = None) -> dict:
        counts: dict[str, int] = {}
        for l in self.reg.layers:
            if section is None or l.section == section:
                counts[l.kind] = counts.get(l.kind, 0) + 1
        return counts

    def state_dict(self) -> dict:
        out = {name: p.data for name, p in self.reg.params.items()}
        out.update(self.reg.buffers)
        return out

    def load_state_dict(self, state: dict) -> None:
        expected = set(self.reg.params) | set(self.reg.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))[:5]
            extra = sorted(set(state) - expected)[:5]
            raise ValueError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, value in state.items():
            target = self.reg.params[name].data if name in self.reg.params else self.reg.buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    # -- forward
    def encode(self, x: Tensor, mode: Mode, rng) -> list:
        feats = []
        h = x
        for d, blk in enumerate(self.encoder, start=1):
            if d > 1:
                h = ops.maxpool2d(h)
            for layer in blk:
                h = layer(h)
            if d == len(self.encoder):
                h = ops.dropout(h, DROPOUT_RATE, mode, rng)
            feats.append(h)
        return feats

    def forward(self, x, mode: Mode = "infer", rng: Optional[np.random.Generator] = None) -> Tensor:
        x = as_tensor(x, self.dtype)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.input_size, self.input_size):
            raise ops.ShapeError(f"model expects (N,1,{self.input_size},{self.input_size}) input, got {x.shape}")
        if mode == "train" and rng is None:
            rng = np.random.default_rng(0)
        feats = self.encode(x, mode, rng)
        skips = self.bifpn(feats, mode) if self.bifpn is not None else feats
        if self.decoder:
            # the decoder starts from the raw bottleneck; Bi-FPN level 5 is not consumed
            h = feats[-1]
            for d, st in self.decoder:
                h = st["up_act"](st["up"](h))
                h = ops.concat_channels(h, skips[d - 1])
                h = st["act2"](st["conv2"](st["act1"](st["conv1"](h))))
        else:
            h = skips[0]
        return ops.sigmoid(self.head(h))

    __call__ = forward

    def __repr__(self) -> str:
        return (f"ModelGraph({variant_name(self.variant)}, input={self.input_size}, "
                f"width_scale={self.width_scale}, params={sum(p.size for p in self.parameters())})")


def build(variant: Union[VariantSpec, str] = "udet", input_size: int = 512, width_scale=1,
          dtype=None) -> ModelGraph:
    """Construct a model; parameters start at zero (see ``udet.train.init_weights``)."""
    if isinstance(variant, str):
        try:
            variant = VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    if input_size < 16 or input_size % 16:
        raise ValueError(f"input_size must be a positive multiple of 16, got {input_size}")
    scale = _parse_scale(width_scale)
    if dtype is None:
        return ModelGraph(variant, input_size, scale)
    with precision(dtype):
        return ModelGraph(variant, input_size, scale, dtype)


def forward(g: ModelGraph, x, mode: Mode = "infer", rng=None) -> Tensor:
    return g.forward(x, mode, rng)


# ---------------------------------------------------------------- audit

# Table-style targets for the full-size U-Det: (row, expected, relative tolerance)
AUDIT_TARGETS = (
    ("contraction convs", 1.884e7, 5e-4),
    ("bifpn lateral convs", 1.269e5, 5e-3),
    ("bifpn batchnorm", 3072, 0.0),
    ("bifpn depthwise convs", 4032, 0.0),
    ("expansion convs", 6.821e6, 5e-4),
    ("transposed convs", 2.786e6, 5e-4),
    ("total", 2.858e7, 1e-3),
)


def audit_parameters(g: ModelGraph) -> dict:
    """Per-row parameter counts in the grouping of the published layer table.

    Batch-norm rows count gamma, beta and both running statistics. Fusion
    weights are reported separately and left out of the total.
    """
    rows = {
        "contraction convs": 0,
        "bifpn lateral convs": 0,
        "bifpn batchnorm": 0,
        "bifpn depthwise convs": 0,
        "expansion convs": 0,
        "transposed convs": 0,
    }
    for l in g.layers:
        if l.kind == "conv2d" and l.section == "encoder":
            rows["contraction convs"] += l.params
        elif l.kind == "conv2d" and l.section == "bifpn":
            rows["bifpn lateral convs"] += l.params
        elif l.kind == "batchnorm2d":
            rows["bifpn batchnorm"] += l.params
        elif l.kind == "depthwise_conv2d":
            rows["bifpn depthwise convs"] += l.params
        elif l.kind == "conv2d" and l.section == "decoder":
            rows["expansion convs"] += l.params
        elif l.kind == "transposed_conv2d":
            rows["transposed convs"] += l.params
    rows["total"] = sum(rows.values())
    rows["fusion weights"] = sum(p.size for n, p in g.params.items() if n.endswith(".fusion"))
    return rows


def audit_diff(rows: dict) -> list:
    """[(row, computed, target, rel_diff, ok)] against the published U-Det counts."""
    out = []
    for name, target, tol in AUDIT_TARGETS:
        got = rows[name]
        rel = abs(got - target) / target
        out.append((name, got, target, rel, rel <= tol + 1e-12))
    return out


def format_audit(rows: dict, diff: Optional[list] = None) -> str:
    buf = io.StringIO()
    if diff is None:
        for name, val in rows.items():
            buf.write(f"{name:<24}{val:>14,}\n")
        return buf.getvalue()
    buf.write(f"{'row':<24}{'computed':>14}{'target':>14}{'rel diff':>12}  status\n")
    for name, got, target, rel, ok in diff:
        buf.write(f"{name:<24}{got:>14,}{target:>14.4g}{rel:>12.2e}  {'ok' if ok else 'MISMATCH'}\n")
    buf.write(f"{'fusion weights':<24}{rows['fusion weights']:>14,}  (not in table)\n")
    return buf.getvalue()
