"""Dense float64 tensors and layer-wise reverse-mode differentiation.

A network is an immutable :class:`NetworkSpec`: an ordered tuple of layers,
each carrying its own parameter arrays. Tensors are plain ``numpy.ndarray``
objects in float64 with a leading batch dimension.

Differentiation is reverse mode at layer granularity: :func:`forward_trace`
records one cache per layer and :func:`backprop` walks the caches in reverse,
returning the gradient w.r.t. the input of the first traced layer together
with every parameter gradient. Running the two over any contiguous slice of
layers is what lets split parts relay smashed data and its gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, ClassVar, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import substream

Tensor = np.ndarray
Shape = tuple[int, ...]


class DimensionError(ValueError):
    """Input shape does not fit a layer."""

    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class NumericError(ArithmeticError):
    """A NaN or infinity appeared in a forward/backward pass or in the loss."""


def as_tensor(data: Any) -> Tensor:
    return np.ascontiguousarray(data, dtype=np.float64)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Layer:
    """Base class. Subclasses are frozen dataclasses; parameters live in ``params``."""

    kind: ClassVar[str] = "layer"
    params: dict[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    def param_shapes(self, in_shape: Shape) -> dict[str, Shape]:
        return {}

    def out_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, x: Tensor) -> tuple[Tensor, Any]:
        raise NotImplementedError

    def backward(self, cache: Any, grad: Tensor) -> tuple[Tensor, dict[str, np.ndarray]]:
        raise NotImplementedError

    def flops(self, in_shape: Shape) -> int:
        """Forward floating-point operations for one sample (multiply-add = 2)."""
        return 0

    def fans(self, in_shape: Shape) -> tuple[int, int]:
        return (1, 1)

    def with_params(self, params: dict[str, np.ndarray]) -> "Layer":
        return replace(self, params=params)

    def describe(self) -> str:
        fields = {k: v for k, v in self.__dict__.items() if k != "params"}
        inner = ", ".join(f"{k}={v}" for k, v in fields.items())
        return f"{self.kind}({inner})"


@dataclass(frozen=True)
class Dense(Layer):
    kind: ClassVar[str] = "dense"
    in_dim: int = 1
    out_dim: int = 1
    bias: bool = True

    def param_shapes(self, in_shape: Shape) -> dict[str, Shape]:
        shapes: dict[str, Shape] = {"W": (self.in_dim, self.out_dim)}
        if self.bias:
            shapes["b"] = (self.out_dim,)
        return shapes

    def out_shape(self, in_shape: Shape) -> Shape:
        if in_shape != (self.in_dim,):
            raise ValueError(f"dense expects ({self.in_dim},), got {in_shape}")
        return (self.out_dim,)

    def forward(self, x):
        y = x @ self.params["W"]
        if self.bias:
            y = y + self.params["b"]
        return y, x

    def backward(self, cache, grad):
        x = cache
        grads = {"W": x.T @ grad}
        if self.bias:
            grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T, grads

    def flops(self, in_shape):
        return 2 * self.in_dim * self.out_dim

    def fans(self, in_shape):
        return (self.in_dim, self.out_dim)


@dataclass(frozen=True)
class Conv2D(Layer):
    kind: ClassVar[str] = "conv2d"
    in_ch: int = 1
    out_ch: int = 1
    kernel: int = 3
    stride: int = 1
    pad: int = 0

    def _spatial(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return ho, wo

    def param_shapes(self, in_shape):
        return {"W": (self.out_ch, self.in_ch, self.kernel, self.kernel), "b": (self.out_ch,)}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ValueError(f"conv2d expects ({self.in_ch}, H, W), got {in_shape}")
        if self.stride < 1 or self.pad < 0:
            raise ValueError("conv2d needs stride >= 1 and pad >= 0")
        ho, wo = self._spatial(in_shape[1], in_shape[2])
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {self.kernel} larger than padded input {in_shape}")
        return (self.out_ch, ho, wo)

    def forward(self, x):
        b, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self._spatial(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        wm = self.params["W"].reshape(self.out_ch, -1)
        y = cols @ wm.T + self.params["b"]
        y = y.reshape(b, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, cache, grad):
        cols, (b, c, h, w) = cache
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = grad.shape[2], grad.shape[3]
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        wm = self.params["W"].reshape(self.out_ch, -1)
        grads = {"W": (gm.T @ cols).reshape(self.params["W"].shape), "b": gm.sum(axis=0)}
        gcols = (gm @ wm).reshape(b, ho, wo, c, k, k)
        gxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return np.ascontiguousarray(gx), grads

    def flops(self, in_shape):
        _, ho, wo = self.out_shape(in_shape)
        return 2 * self.in_ch * self.kernel * self.kernel * self.out_ch * ho * wo

    def fans(self, in_shape):
        k2 = self.kernel * self.kernel
        return (self.in_ch * k2, self.out_ch * k2)


@dataclass(frozen=True)
class MaxPool(Layer):
    """Non-overlapping max pooling (stride = window); trailing rows/cols are dropped."""

    kind: ClassVar[str] = "maxpool"
    window: int = 2

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"maxpool expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ValueError(f"maxpool window {self.window} larger than input {in_shape}")
        return (c, h // self.window, w // self.window)

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.window
        ho, wo = h // k, w // k
        xr = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, cache, grad):
        idx, (b, c, h, w) = cache
        k = self.window
        ho, wo = h // k, w // k
        gr = np.zeros((b, c, ho, wo, k * k))
        np.put_along_axis(gr, idx[..., None], grad[..., None], axis=-1)
        gr = gr.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
        gx = np.zeros((b, c, h, w))
        gx[:, :, : ho * k, : wo * k] = gr
        return gx, {}


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, grad):
        return np.where(cache, grad, 0.0), {}


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache), {}


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Dense, Conv2D, MaxPool, ReLU, Flatten)
}


# ---------------------------------------------------------------------------
# networks


def layer_shapes(layers: Sequence[Layer], input_shape: Shape, offset: int = 0) -> list[Shape]:
    """Per-sample shapes ``[input, out_0, out_1, ...]``; raises DimensionError."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        try:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        except ValueError as exc:
            raise DimensionError(offset + i, str(exc)) from None
    return shapes


def _check_params(layers: Sequence[Layer], shapes: Sequence[Shape], offset: int = 0) -> None:
    for i, layer in enumerate(layers):
        expected = layer.param_shapes(shapes[i])
        if set(expected) != set(layer.params):
            raise DimensionError(
                offset + i, f"parameters {sorted(layer.params)} do not match {sorted(expected)}"
            )
        for name, shape in expected.items():
            if layer.params[name].shape != shape:
                raise DimensionError(
                    offset + i, f"param {name} has shape {layer.params[name].shape}, expected {shape}"
                )


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]
    input_shape: Shape
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shapes = layer_shapes(self.layers, self.input_shape)
        if shapes[-1] != (self.num_classes,):
            raise DimensionError(
                len(self.layers) - 1,
                f"final output {shapes[-1]} does not match num_classes={self.num_classes}",
            )
        _check_params(self.layers, shapes)

    @property
    def shapes(self) -> list[Shape]:
        return layer_shapes(self.layers, self.input_shape)

    def __len__(self) -> int:
        return len(self.layers)

    def architecture(self) -> tuple[str, ...]:
        """Parameter-free description used to check that parts belong together."""
        return tuple(layer.describe() for layer in self.layers) + (str(self.input_shape),)


@dataclass
class GradientSet:
    grads: tuple[dict[str, np.ndarray], ...]
    loss: float
    input_grad: Tensor | None = None
    logit_grad: Tensor | None = None


def build_network(
    layers: Sequence[Layer],
    input_shape: Shape,
    num_classes: int,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> NetworkSpec:
    """Attach freshly initialised parameters to parameter-free layer descriptions.

    Weights are uniform on (-a, a) with a = sqrt(6 / (fan_in + fan_out));
    biases start at zero.
    """
    rng = rng if rng is not None else substream(seed, "init")
    shapes = layer_shapes(layers, input_shape)
    out = []
    for i, layer in enumerate(layers):
        params = {}
        for name, shape in layer.param_shapes(shapes[i]).items():
            if name == "b":
                params[name] = np.zeros(shape)
            else:
                fan_in, fan_out = layer.fans(shapes[i])
                a = math.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-a, a, size=shape)
        out.append(layer.with_params(params))
    return NetworkSpec(tuple(out), tuple(input_shape), num_classes)


def mlp(sizes: Sequence[int], seed: int = 0) -> NetworkSpec:
    """Dense/ReLU stack; ``sizes = [in, hidden..., classes]``."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(in_dim=a, out_dim=b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return build_network(layers, (sizes[0],), sizes[-1], seed=seed)


def lenet(num_classes: int = 10, seed: int = 0) -> NetworkSpec:
    """Small LeNet-class CNN for 1x28x28 inputs: 22,048 parameters at 10 classes."""
    layers = [
        Conv2D(in_ch=1, out_ch=3, kernel=5, pad=2),
        ReLU(),
        MaxPool(window=2),
        Conv2D(in_ch=3, out_ch=20, kernel=5),
        ReLU(),
        MaxPool(window=2),
        Flatten(),
        Dense(in_dim=500, out_dim=40),
        ReLU(),
        Dense(in_dim=40, out_dim=num_classes),
    ]
    return build_network(layers, (1, 28, 28), num_classes, seed=seed)


def param_count(layers: Sequence[Layer]) -> int:
    return sum(int(p.size) for layer in layers for p in layer.params.values())


def flatten_params(layers: Sequence[Layer]) -> np.ndarray:
    chunks = [layer.params[name].ravel() for layer in layers for name in sorted(layer.params)]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def unflatten_like(layers: Sequence[Layer], vec: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Split a flat vector into per-layer dicts shaped like ``layers``' params."""
    out, pos = [], 0
    for layer in layers:
        d = {}
        for name in sorted(layer.params):
            shape = layer.params[name].shape
            n = int(np.prod(shape))
            d[name] = vec[pos : pos + n].reshape(shape)
            pos += n
        out.append(d)
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match {pos} parameters")
    return out


def with_flat_params(net: NetworkSpec, vec: np.ndarray) -> NetworkSpec:
    parts = unflatten_like(net.layers, np.asarray(vec, dtype=np.float64))
    layers = tuple(layer.with_params({k: v.copy() for k, v in p.items()}) for layer, p in zip(net.layers, parts))
    return replace(net, layers=layers)


# ---------------------------------------------------------------------------
# forward / backward


def forward_trace(layers: Sequence[Layer], x: Tensor, offset: int = 0) -> tuple[Tensor, list[Any]]:
    caches = []
    for i, layer in enumerate(layers):
        x, cache = layer.forward(x)
        _check_finite(x, f"output of layer {offset + i}")
        caches.append(cache)
    return x, caches


def backprop(
    layers: Sequence[Layer], caches: Sequence[Any], grad: Tensor, offset: int = 0
) -> tuple[Tensor, list[dict[str, np.ndarray]]]:
    """Vector-Jacobian product through ``layers`` given the upstream gradient."""
    grads: list[dict[str, np.ndarray]] = [dict() for _ in layers]
    for i in range(len(layers) - 1, -1, -1):
        grad, grads[i] = layers[i].backward(caches[i], grad)
        _check_finite(grad, f"gradient into layer {offset + i}")
    return grad, grads


def _check_input(net, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[1:] != tuple(net.input_shape):
        raise DimensionError(0, f"input batch shape {x.shape} does not match (batch, *{tuple(net.input_shape)})")
    return x


def forward(net, x: Tensor) -> Tensor:
    """Run ``net`` (a NetworkSpec or any object with ``layers``/``input_shape``)."""
    x = _check_input(net, x)
    y, _ = forward_trace(net.layers, x, getattr(net, "offset", 0))
    return y


def softmax(z: Tensor) -> Tensor:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def as_targets(target: Any, k: int, batch: int) -> np.ndarray:
    """Accept class indices, a [batch, k] array, or an object with ``.values``."""
    values = getattr(target, "values", target)
    t = np.asarray(values)
    if t.ndim == 1 and t.shape[0] == batch and np.issubdtype(t.dtype, np.integer):
        if np.any((t < 0) | (t >= k)):
            raise ValueError(f"class index out of range for k={k}")
        onehot = np.zeros((batch, k))
        onehot[np.arange(batch), t] = 1.0
        return onehot
    t = t.astype(np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape != (batch, k):
        raise ValueError(f"target shape {t.shape} does not match ({batch}, {k})")
    return t


def softmax_cross_entropy(logits: Tensor, target: Any) -> tuple[float, Tensor]:
    """Mean-over-batch cross entropy with (possibly soft, unnormalised) targets.

    Returns the loss and its gradient w.r.t. the logits.
    """
    b, k = logits.shape
    t = as_targets(target, k, b)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(t * logp).sum() / b)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    p = np.exp(logp)
    grad = (p * t.sum(axis=1, keepdims=True) - t) / b
    return loss, grad


def backward(net, x: Tensor, target: Any) -> GradientSet:
    """Gradients of the mean soft-label cross entropy w.r.t. every parameter and the input."""
    x = _check_input(net, x)
    logits, caches = forward_trace(net.layers, x)
    loss, dz = softmax_cross_entropy(logits, target)
    gx, grads = backprop(net.layers, caches, dz)
    return GradientSet(tuple(grads), loss, input_grad=gx, logit_grad=dz)


def sgd_step(net, grads: GradientSet | Sequence[dict], lr: float, correction: Sequence[dict] | None = None):
    """``W <- W - lr * (grad + correction)`` for every parameter; returns a new network."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    gs = grads.grads if isinstance(grads, GradientSet) else tuple(grads)
    if len(gs) != len(net.layers):
        raise DimensionError(len(gs), f"{len(gs)} gradient entries for {len(net.layers)} layers")
    layers = []
    for i, (layer, g) in enumerate(zip(net.layers, gs)):
        if set(g) != set(layer.params):
            raise DimensionError(i, f"gradient keys {sorted(g)} do not match parameters {sorted(layer.params)}")
        new = {}
        for name, w in layer.params.items():
            step = g[name]
            if step.shape != w.shape:
                raise DimensionError(i, f"gradient {name} shape {step.shape} != {w.shape}")
            if correction is not None:
                step = step + correction[i][name]
            new[name] = w - lr * step
        layers.append(layer.with_params(new))
    return replace(net, layers=tuple(layers))


def predict(net, x: Tensor, batch_size: int = 512) -> np.ndarray:
    out = [forward(net, x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net, x: Tensor, labels: np.ndarray) -> float:
    """Percentage of correct predictions (test corrects / total * 100)."""
    if len(labels) == 0:
        return 0.0
    return float((predict(net, x) == labels).sum()) / len(labels) * 100.0
