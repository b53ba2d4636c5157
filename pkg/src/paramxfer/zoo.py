"""Desk-scale models whose weight slots can be stored factorized."""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import LowRankParam, ParamPartition, densify, reencode_truncated_svd


class ConfigError(ValueError):
    """Bad model or experiment configuration."""


KINDS = ("mlp_small", "mlp_large", "cnn_small", "cnn_large")

# (name, out_channels, stride) for 3x3 conv blocks with padding 1
_CNN_BLOCKS = {
    "cnn_small": [("conv1", 8, 1), ("conv2", 16, 2)],
    "cnn_large": [("conv1", 16, 1), ("conv2", 16, 2), ("conv3", 32, 1), ("conv4", 32, 2)],
}
_MLP_HIDDEN = {"mlp_small": (64, 64), "mlp_large": (256, 256, 128)}


@dataclass
class Slot:
    name: str
    kind: str  # "linear" or "conv"
    weight: Tensor | LowRankParam
    bias: Tensor
    stride: int = 1
    kernel_shape: tuple[int, int, int, int] | None = None

    @property
    def factorized(self) -> bool:
        return isinstance(self.weight, LowRankParam)

    def matrix(self) -> Tensor:
        """2-D weight view: ``out x in`` (linear) or ``out x in*kh*kw`` (conv)."""
        return densify(self.weight) if self.factorized else self.weight

    def parameters(self) -> list[Tensor]:
        w = self.weight.parameters() if self.factorized else [self.weight]
        return [*w, self.bias]


@dataclass
class ZooModel:
    kind: str
    classes: int
    input_shape: tuple[int, ...]
    slots: dict[str, Slot]
    partition: ParamPartition = field(default_factory=lambda: ParamPartition([]))

    def slot(self, name: str) -> Slot:
        try:
            return self.slots[name]
        except KeyError:
            raise ConfigError(f"{self.kind} has no slot {name!r}; slots are {list(self.slots)}") from None

    def factor(self, name: str) -> LowRankParam:
        s = self.slot(name)
        if not s.factorized:
            raise ConfigError(f"slot {name!r} of {self.kind} is not factorized")
        return s.weight

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for s in self.slots.values():
            if s.factorized:
                out[f"{s.name}.b"] = s.weight.b
                out[f"{s.name}.a"] = s.weight.a
            else:
                out[f"{s.name}.w"] = s.weight
            out[f"{s.name}.bias"] = s.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        if self.kind.startswith("mlp"):
            h = x if x.ndim == 2 else ad.reshape(x, (x.shape[0], -1))
            names = list(self.slots)
            for name in names:
                s = self.slots[name]
                h = ad.add_bias(ad.matmul(h, ad.transpose(s.matrix())), s.bias)
                if name != "head":
                    h = ad.relu(h)
            return h
        h = x if x.ndim == 4 else ad.reshape(x, (x.shape[0], *self.input_shape))
        for name, s in self.slots.items():
            if s.kind == "conv":
                h = ad.conv2d(h, s.matrix(), 3, 3, stride=s.stride, pad=1)
                b, c, hh, ww = h.shape
                # per-channel bias through the explicit row-add on a channels-last view
                flat = ad.reshape(ad.permute(h, (0, 2, 3, 1)), (b * hh * ww, c))
                flat = ad.relu(ad.add_bias(flat, s.bias))
                h = ad.permute(ad.reshape(flat, (b, hh, ww, c)), (0, 3, 1, 2))
            else:
                pooled = ad.mean(h, axis=(2, 3))
                h = ad.add_bias(ad.matmul(pooled, ad.transpose(s.matrix())), s.bias)
        return h

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def checkpoint_entries(self) -> dict:
        out = {}
        for s in self.slots.values():
            out[f"{s.name}.weight"] = s.weight
            out[f"{s.name}.bias"] = s.bias
        return out

    def clone(self) -> "ZooModel":
        return copy.deepcopy(self)


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _layer_shapes(kind: str, classes: int, input_shape: tuple[int, ...]):
    """Yield (name, layer kind, weight 2-D shape, stride, kernel shape)."""
    if kind in _MLP_HIDDEN:
        fan = int(np.prod(input_shape))
        for i, width in enumerate(_MLP_HIDDEN[kind], start=1):
            yield f"fc{i}", "linear", (width, fan), 1, None
            fan = width
        yield "head", "linear", (classes, fan), 1, None
    elif kind in _CNN_BLOCKS:
        if len(input_shape) != 3:
            raise ConfigError(f"{kind} needs a (channels, height, width) input shape, got {input_shape}")
        cin = input_shape[0]
        for name, cout, stride in _CNN_BLOCKS[kind]:
            yield name, "conv", (cout, cin * 9), stride, (cout, cin, 3, 3)
            cin = cout
        yield "head", "linear", (classes, cin), 1, None
    else:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def slot_names(kind: str, classes: int = 10, input_shape=(3, 8, 8)) -> list[str]:
    return [name for name, *_ in _layer_shapes(kind, classes, tuple(input_shape))]


def build_model(
    kind: str,
    classes: int,
    input_shape: tuple[int, ...],
    r: int = 8,
    transfer_slots: list[str] | tuple[str, ...] = (),
    seed: int = 0,
) -> ZooModel:
    """Build a zoo model with ``transfer_slots`` stored as rank-``r`` factors.

    Every slot first gets a dense Kaiming-uniform draw; factorized slots are then
    re-encoded at rank ``r`` so their ``a`` factor has orthonormal rows.
    """
    input_shape = tuple(int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    layers = list(_layer_shapes(kind, classes, input_shape))
    known = [name for name, *_ in layers]
    unknown = [s for s in transfer_slots if s not in known]
    if unknown:
        raise ConfigError(f"{kind} has no slot(s) {unknown}; slots are {known}")
    slots = {}
    for name, layer_kind, (rows, cols), stride, kshape in layers:
        w = _kaiming_uniform(rng, cols, (rows, cols))
        bias = Tensor(np.zeros(rows), requires_grad=True, name=f"{name}.bias")
        if name in transfer_slots:
            if r > min(rows, cols):
                raise ConfigError(f"rank {r} too large for slot {name!r} of shape {(rows, cols)}")
            with warnings.catch_warnings():
                # an init only needs a rank-r draw, not a converged spectrum
                warnings.simplefilter("ignore", RuntimeWarning)
                lr = reencode_truncated_svd(w, r, iters=200, seed=seed, slot_id=name).param
            lr.b.requires_grad = lr.a.requires_grad = True
            lr.shape = kshape
            weight = lr
        else:
            weight = Tensor(w, requires_grad=True, name=f"{name}.w")
        slots[name] = Slot(name, layer_kind, weight, bias, stride, kshape)
    local = [n for n in known if n not in transfer_slots]
    partition = ParamPartition(list(transfer_slots), local)
    return ZooModel(kind, classes, input_shape, slots, partition)


def factorize_slot(model: ZooModel, name: str, r: int, iters: int = 50, seed: int = 0) -> LowRankParam:
    """Re-encode a dense slot in place (used for frozen pretrained sources)."""
    s = model.slot(name)
    if s.factorized:
        return s.weight
    lr = reencode_truncated_svd(s.weight, r, iters=iters, seed=seed, slot_id=name).param
    lr.shape = s.kernel_shape
    lr.b.requires_grad = lr.a.requires_grad = s.weight.requires_grad
    s.weight = lr
    model.partition = ParamPartition(
        [*model.partition.transfer_slots, name],
        [n for n in model.partition.frozen_or_local if n != name],
    )
    return lr


def evaluate(model: ZooModel, x: np.ndarray, y: np.ndarray, batch: int = 512) -> tuple[float, float]:
    """Top-1 and top-5 accuracy on ``(x, y)``."""
    hit1 = hit5 = 0
    k = min(5, model.classes)
    for i in range(0, len(y), batch):
        logits = model.forward(Tensor(x[i : i + batch])).data
        labels = y[i : i + batch]
        top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        hit1 += int(np.sum(top[:, 0] == labels))
        hit5 += int(np.sum(np.any(top == labels[:, None], axis=1)))
    n = max(len(y), 1)
    return hit1 / n, hit5 / n
