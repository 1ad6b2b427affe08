"""Cutting a sequential network into client/server parts and putting it back together."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .costmodel import BYTES_PER_ELEMENT, ModelProfile
from .tensor import (
    Layer,
    NetworkSpec,
    Shape,
    Tensor,
    backprop,
    flatten_params,
    forward_trace,
    layer_shapes,
    param_count,
    sgd_step,
    softmax_cross_entropy,
)

class PlanError(ValueError):
    pass


class MergeError(ValueError):
    pass


class SplitMode(str, Enum):
    U_SHAPED = "u_shaped"
    VERTICAL = "vertical"


class PartRole(str, Enum):
    FRONT = "front"
    MIDDLE = "middle"
    REAR = "rear"


@dataclass(frozen=True)
class SplitPlan:
    cut1: int
    cut2: int | None = None
    mode: SplitMode = SplitMode.U_SHAPED

    def validate(self, layer_count: int) -> None:
        if self.mode is SplitMode.U_SHAPED:
            if self.cut2 is None or not (0 < self.cut1 < self.cut2 < layer_count):
                raise PlanError(
                    f"U-shaped plan needs 0 < cut1 < cut2 < {layer_count}, got ({self.cut1}, {self.cut2})"
                )
        else:
            if not 0 < self.cut1 < layer_count:
                raise PlanError(f"vertical plan needs 0 < cut1 < {layer_count}, got {self.cut1}")

    def ranges(self, layer_count: int) -> list[tuple[int, int]]:
        self.validate(layer_count)
        if self.mode is SplitMode.U_SHAPED:
            return [(0, self.cut1), (self.cut1, self.cut2), (self.cut2, layer_count)]
        return [(0, self.cut1), (self.cut1, layer_count)]

    def roles(self) -> list[PartRole]:
        if self.mode is SplitMode.U_SHAPED:
            return [PartRole.FRONT, PartRole.MIDDLE, PartRole.REAR]
        return [PartRole.FRONT, PartRole.REAR]


@dataclass(frozen=True)
class SubNetwork:
    role: PartRole
    layers: tuple[Layer, ...]
    origin_range: tuple[int, int]
    input_shape: Shape
    num_classes: int
    plan: SplitPlan
    architecture: tuple[str, ...]

    @property
    def offset(self) -> int:
        return self.origin_range[0]

    @property
    def output_shape(self) -> Shape:
        return layer_shapes(self.layers, self.input_shape, self.offset)[-1]

    def param_bytes(self) -> int:
        return param_count(self.layers) * BYTES_PER_ELEMENT

    def flops(self, batch: int = 1) -> int:
        shapes = layer_shapes(self.layers, self.input_shape, self.offset)
        return batch * sum(layer.flops(shapes[i]) for i, layer in enumerate(self.layers))

    def with_layers(self, layers: Sequence[Layer]) -> "SubNetwork":
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class SmashedData:
    """Activations (or their gradient) crossing a cut."""

    values: Tensor
    producer_cut: int
    batch_id: int

    @property
    def byte_size(self) -> int:
        return int(self.values.size) * BYTES_PER_ELEMENT


def split(net: NetworkSpec, plan: SplitPlan) -> tuple[SubNetwork, SubNetwork, SubNetwork | None]:
    """Partition ``net`` by ``plan``; vertical plans return ``(front, rear, None)``."""
    ranges = plan.ranges(len(net.layers))
    shapes = net.shapes
    arch = net.architecture()
    parts = [
        SubNetwork(role, net.layers[a:b], (a, b), shapes[a], net.num_classes, plan, arch)
        for role, (a, b) in zip(plan.roles(), ranges)
    ]
    if len(parts) == 2:
        return parts[0], parts[1], None
    return parts[0], parts[1], parts[2]


def merge(*parts: SubNetwork | None) -> NetworkSpec:
    """Reassemble an intact network from the parts of one plan."""
    parts = tuple(p for p in parts if p is not None)
    if not parts:
        raise MergeError("nothing to merge")
    plan, arch = parts[0].plan, parts[0].architecture
    for p in parts:
        if p.plan != plan:
            raise MergeError(f"part {p.role.value} was cut with {p.plan}, expected {plan}")
        if p.architecture != arch:
            raise MergeError(f"part {p.role.value} comes from a different architecture")
    roles = [p.role for p in parts]
    if roles != plan.roles():
        raise MergeError(f"expected parts {[r.value for r in plan.roles()]}, got {[r.value for r in roles]}")
    pos = 0
    for p in parts:
        if p.origin_range[0] != pos or p.origin_range[1] - p.origin_range[0] != len(p.layers):
            raise MergeError(f"part {p.role.value} covers {p.origin_range}, expected to start at {pos}")
        pos = p.origin_range[1]
    if pos != len(arch) - 1:
        raise MergeError(f"parts cover {pos} layers, architecture has {len(arch) - 1}")
    layers = tuple(layer for p in parts for layer in p.layers)
    net = NetworkSpec(layers, parts[0].input_shape, parts[0].num_classes)
    if net.architecture() != arch:
        raise MergeError("merged layers do not reproduce the original architecture")
    return net


def profile(net: NetworkSpec, plan: SplitPlan, batch: int, include_backward: bool = False) -> ModelProfile:
    """Per-batch sizes and FLOPs of each part under ``plan``.

    FLOPs count the forward pass only; ``include_backward`` adds the usual
    2x-forward estimate for the backward pass.
    """
    if batch < 1:
        raise PlanError(f"batch must be >= 1, got {batch}")
    front, second, third = split(net, plan)
    factor = 3 if include_backward else 1

    def smashed(part: SubNetwork) -> int:
        return math.prod(part.output_shape) * batch * BYTES_PER_ELEMENT

    if third is None:
        return ModelProfile(
            m1=front.param_bytes(),
            m2=second.param_bytes(),
            m3=0,
            flops_c=factor * front.flops(batch),
            flops_e=factor * second.flops(batch),
            d1=smashed(front),
            d2=0,
            batch_size=batch,
        )
    return ModelProfile(
        m1=front.param_bytes(),
        m2=second.param_bytes(),
        m3=third.param_bytes(),
        flops_c=factor * (front.flops(batch) + third.flops(batch)),
        flops_e=factor * second.flops(batch),
        d1=smashed(front),
        d2=smashed(second),
        batch_size=batch,
    )


# ---------------------------------------------------------------------------
# one relayed training step, used as a reference by tests and the simulator


def part_forward(part: SubNetwork, x: Tensor):
    return forward_trace(part.layers, x, part.offset)


def part_backward(part: SubNetwork, caches, grad: Tensor):
    return backprop(part.layers, caches, grad, part.offset)


def relay_step(
    front: SubNetwork,
    middle: SubNetwork,
    rear: SubNetwork,
    x: Tensor,
    target,
    lr: float,
) -> tuple[SubNetwork, SubNetwork, SubNetwork, float]:
    """One U-shaped forward/backward/update cycle, relaying activations and gradients."""
    d1, c1 = part_forward(front, x)
    d2, c2 = part_forward(middle, d1)
    logits, c3 = part_forward(rear, d2)
    loss, dz = softmax_cross_entropy(logits, target)
    g_d2, g3 = part_backward(rear, c3, dz)
    rear = sgd_step(rear, g3, lr)
    g_d1, g2 = part_backward(middle, c2, g_d2)
    middle = sgd_step(middle, g2, lr)
    _, g1 = part_backward(front, c1, g_d1)
    front = sgd_step(front, g1, lr)
    return front, middle, rear, loss


def parts_flat(parts: Sequence[SubNetwork | None]) -> np.ndarray:
    return flatten_params([layer for p in parts if p is not None for layer in p.layers])

