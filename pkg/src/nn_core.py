"""
Minimal differentiable numerical core.

Sequential networks of dense / conv1d / activation / softmax layers with a hand-written
backward pass, flat parameter vectors, SGD and Adam steps, and a finite-difference gradient
checker. All arithmetic is float64.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

ACTIVATIONS = ("relu", "tanh", "leaky_relu", "sigmoid")
LAYER_KINDS = ("dense", "conv1d", "softmax") + ACTIVATIONS


class ShapeMismatchError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel_width: int = 0
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}', expected one of {LAYER_KINDS}")
        if self.kind in ("dense", "conv1d") and (self.in_dim <= 0 or self.out_dim <= 0):
            raise ValueError(f"{self.kind} layer needs positive dims, got {self.in_dim}->{self.out_dim}")
        if self.kind == "conv1d" and (self.kernel_width <= 0 or self.kernel_width % 2 == 0):
            raise ValueError(f"conv1d kernel width must be odd and positive, got {self.kernel_width}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv1d")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == "dense":
            return [("W", (self.in_dim, self.out_dim)), ("b", (self.out_dim,))]
        if self.kind == "conv1d":
            return [("W", (self.out_dim, self.in_dim, self.kernel_width)), ("b", (self.out_dim,))]
        return []

    @property
    def fan_in(self) -> int:
        return self.in_dim * max(self.kernel_width, 1)


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim)


def conv1d(in_channels: int, out_channels: int, kernel_width: int) -> LayerSpec:
    return LayerSpec("conv1d", in_channels, out_channels, kernel_width)


def activation(kind: str, leaky_slope: float = 0.01) -> LayerSpec:
    if kind not in ACTIVATIONS:
        raise ValueError(f"Unknown activation '{kind}'")
    return LayerSpec(kind, leaky_slope=leaky_slope)


def softmax_layer() -> LayerSpec:
    return LayerSpec("softmax")


def mlp(in_dim: int, hidden_units: int, hidden_layers: int, out_dim: int,
        hidden_activation: str = "relu", output_activation: str | None = None) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    width = in_dim
    for _ in range(hidden_layers):
        layers += [dense(width, hidden_units), activation(hidden_activation)]
        width = hidden_units
    layers.append(dense(width, out_dim))
    if output_activation:
        layers.append(activation(output_activation))
    return layers


@dataclass
class ParamVector:
    """Flat float64 values plus an ordered (layer-id, shape) layout."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if expected != self.values.size:
            raise LayoutMismatchError(
                f"ParamVector has {self.values.size} values but layout describes {expected}"
            )

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        size = sum(int(np.prod(shape)) for _, shape in layout)
        return cls(np.zeros(size), layout)

    @classmethod
    def concat(cls, parts: Sequence[tuple[str, "ParamVector"]]) -> "ParamVector":
        layout = []
        for prefix, part in parts:
            layout += [(f"{prefix}.{name}" if prefix else name, shape) for name, shape in part.layout]
        values = np.concatenate([part.values for _, part in parts]) if parts else np.zeros(0)
        return cls(values, tuple(layout))

    def split(self, prefixes: Sequence[str]) -> dict[str, "ParamVector"]:
        """Inverse of `concat` for the given prefixes."""
        out = {}
        offset = 0
        for prefix in prefixes:
            layout, size = [], 0
            for name, shape in self.layout:
                if name.startswith(prefix + "."):
                    layout.append((name[len(prefix) + 1:], shape))
                    size += int(np.prod(shape))
            out[prefix] = ParamVector(self.values[offset:offset + size].copy(), tuple(layout))
            offset += size
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Reshaped views keyed by layer id (writes go through to `values`)."""
        views = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            views[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return views

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("ParamVector layouts differ")

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_bytes(self) -> bytes:
        header = json.dumps({"layout": [[name, list(shape)] for name, shape in self.layout]})
        return header.encode("utf-8") + b"\n" + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        header, _, payload = blob.partition(b"\n")
        layout = tuple((name, tuple(shape)) for name, shape in json.loads(header)["layout"])
        return cls(np.frombuffer(payload, dtype="<f8").astype(np.float64), layout)


def save_params(params: ParamVector, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(params.to_bytes())
    return path


def load_params(path: str | Path) -> ParamVector:
    return ParamVector.from_bytes(Path(path).read_bytes())


def param_layout(layers: Sequence[LayerSpec]) -> tuple[tuple[str, tuple[int, ...]], ...]:
    return tuple(
        (f"{index}.{name}", shape)
        for index, layer in enumerate(layers)
        for name, shape in layer.param_shapes()
    )


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> ParamVector:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every parametrised layer."""
    layout, chunks = [], []
    for index, layer in enumerate(layers):
        bound = 1.0 / np.sqrt(max(layer.fan_in, 1))
        for name, shape in layer.param_shapes():
            layout.append((f"{index}.{name}", shape))
            chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, tuple(layout))


def _conv_windows(x: np.ndarray, kernel_width: int) -> np.ndarray:
    pad = kernel_width // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return sliding_window_view(padded, kernel_width, axis=2)  # (B, C, L, k)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Network:
    """
    A sequential network over a ParamVector.

    Dense layers take (batch, features); conv1d takes (batch, channels, length) and keeps the
    length via zero padding. A 1-D input to a dense-first network is treated as one sample.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: ParamVector | None = None,
                 rng: np.random.Generator | None = None):
        self.layers = list(layers)
        if params is None:
            params = init_params(self.layers, rng if rng is not None else np.random.default_rng(0))
        if params.layout != param_layout(self.layers):
            raise LayoutMismatchError("ParamVector layout does not match the layer specs")
        self.params = params
        self._cache: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._squeeze = False
        self.input_grad: np.ndarray | None = None

    @property
    def layout(self):
        return self.params.layout

    def _check_input(self, index: int, layer: LayerSpec, x: np.ndarray) -> None:
        if layer.kind == "dense" and (x.ndim != 2 or x.shape[1] != layer.in_dim):
            raise ShapeMismatchError(
                f"layer {index} (dense {layer.in_dim}->{layer.out_dim}) got input of shape {x.shape}"
            )
        if layer.kind == "conv1d":
            if x.ndim != 3 or x.shape[1] != layer.in_dim:
                raise ShapeMismatchError(
                    f"layer {index} (conv1d {layer.in_dim}->{layer.out_dim}) got input of shape {x.shape}"
                )
            if layer.kernel_width > x.shape[2]:
                raise ShapeMismatchError(
                    f"layer {index} (conv1d) kernel width {layer.kernel_width} exceeds input length {x.shape[2]}"
                )

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._squeeze = x.ndim == 1 and bool(self.layers) and self.layers[0].kind == "dense"
        if self._squeeze:
            x = x[None, :]
        arrays = self.params.arrays()
        cache = []
        for index, layer in enumerate(self.layers):
            self._check_input(index, layer, x)
            if layer.kind == "dense":
                out = x @ arrays[f"{index}.W"] + arrays[f"{index}.b"]
            elif layer.kind == "conv1d":
                windows = _conv_windows(x, layer.kernel_width)
                out = np.einsum("bctj,ocj->bot", windows, arrays[f"{index}.W"])
                out += arrays[f"{index}.b"][None, :, None]
            elif layer.kind == "relu":
                out = np.maximum(x, 0.0)
            elif layer.kind == "leaky_relu":
                out = np.where(x > 0, x, layer.leaky_slope * x)
            elif layer.kind == "tanh":
                out = np.tanh(x)
            elif layer.kind == "sigmoid":
                out = expit(x)
            else:
                out = softmax(x, axis=-1)
            cache.append((x, out))
            x = out
        self._cache = cache
        return x[0] if self._squeeze else x

    def backward(self, upstream: np.ndarray) -> ParamVector:
        """Gradient of sum(upstream * output) w.r.t. the parameters; input gradient kept in `input_grad`."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(upstream, dtype=np.float64)
        if self._squeeze:
            g = g[None, ...]
        out_shape = self._cache[-1][1].shape if self._cache else g.shape
        if g.shape != out_shape:
            raise ShapeMismatchError(f"upstream gradient shape {g.shape} does not match output {out_shape}")
        grad = ParamVector.zeros(self.params.layout)
        grads = grad.arrays()
        arrays = self.params.arrays()
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            x, out = self._cache[index]
            if layer.kind == "dense":
                W = arrays[f"{index}.W"]
                grads[f"{index}.W"][...] = x.T @ g
                grads[f"{index}.b"][...] = g.sum(axis=0)
                g = g @ W.T
            elif layer.kind == "conv1d":
                W = arrays[f"{index}.W"]
                k = layer.kernel_width
                pad = k // 2
                windows = _conv_windows(x, k)
                grads[f"{index}.W"][...] = np.einsum("bot,bctj->ocj", g, windows)
                grads[f"{index}.b"][...] = g.sum(axis=(0, 2))
                length = x.shape[2]
                dpadded = np.zeros((x.shape[0], x.shape[1], length + 2 * pad))
                for j in range(k):
                    dpadded[:, :, j:j + length] += np.einsum("bot,oc->bct", g, W[:, :, j])
                g = dpadded[:, :, pad:pad + length]
            elif layer.kind == "relu":
                g = g * (x > 0)
            elif layer.kind == "leaky_relu":
                g = g * np.where(x > 0, 1.0, layer.leaky_slope)
            elif layer.kind == "tanh":
                g = g * (1.0 - out ** 2)
            elif layer.kind == "sigmoid":
                g = g * out * (1.0 - out)
            else:
                g = out * (g - np.sum(g * out, axis=-1, keepdims=True))
        self.input_grad = g[0] if self._squeeze else g
        return grad


def sgd_step(params: ParamVector, grad: ParamVector, learning_rate: float) -> ParamVector:
    params.check_layout(grad)
    if learning_rate < 0:
        raise ValueError(f"learning rate must be non-negative, got {learning_rate}")
    return ParamVector(params.values - learning_rate * grad.values, params.layout)


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: ParamVector, grad: ParamVector) -> ParamVector:
        return sgd_step(params, grad, self.learning_rate)


class Adam:
    """Adam behind the same `step(params, grad)` interface as SGD."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None
        self._t = 0

    def step(self, params: ParamVector, grad: ParamVector) -> ParamVector:
        params.check_layout(grad)
        if self._m is None or self._m.shape != grad.values.shape:
            self._m = np.zeros_like(grad.values)
            self._v = np.zeros_like(grad.values)
            self._t = 0
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad.values
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad.values ** 2
        m_hat = self._m / (1 - self.beta1 ** self._t)
        v_hat = self._v / (1 - self.beta2 ** self._t)
        return ParamVector(params.values - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps), params.layout)


def make_optimizer(name: str, learning_rate: float) -> SGD | Adam:
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate)
    raise ValueError(f"Unknown optimizer '{name}', expected 'sgd' or 'adam'")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def finite_difference_gradient(objective: Callable[[np.ndarray], float], values: np.ndarray,
                               step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar objective over a flat vector."""
    values = np.asarray(values, dtype=np.float64)
    numeric = np.zeros_like(values)
    for i in range(values.size):
        plus = values.copy()
        minus = values.copy()
        plus[i] += step
        minus[i] -= step
        numeric[i] = (objective(plus) - objective(minus)) / (2 * step)
    return numeric


@dataclass(frozen=True)
class GradCheckReport:
    errors: np.ndarray = field(repr=False)
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(net: Network, x: np.ndarray, tolerance: float = 1e-4, step: float = 1e-5,
               seed: int = 0) -> GradCheckReport:
    """
    Compare `net.backward` against central finite differences.

    The scalar probed is sum(r * net(x)) for a fixed random projection r, which exercises
    every output coordinate.
    """
    rng = np.random.default_rng(seed)
    output = net.forward(x)
    projection = rng.normal(size=output.shape)
    analytic = net.backward(projection).values.copy()
    original = net.params

    def objective(values: np.ndarray) -> float:
        net.params = ParamVector(values, original.layout)
        return float(np.sum(projection * net.forward(x)))

    try:
        numeric = finite_difference_gradient(objective, original.values, step)
    finally:
        net.params = original
    errors = relative_error(analytic, numeric)
    max_error = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(errors=errors, max_error=max_error, tolerance=tolerance)


def blend(target: ParamVector, source: ParamVector, rate: float) -> ParamVector:
    """rate * source + (1 - rate) * target."""
    target.check_layout(source)
    return ParamVector(rate * source.values + (1.0 - rate) * target.values, target.layout)


def weighted_average(parts: Iterable[ParamVector], weights: Sequence[float]) -> ParamVector:
    parts = list(parts)
    if not parts:
        raise ValueError("cannot average zero ParamVectors")
    for part in parts[1:]:
        parts[0].check_layout(part)
    if len(weights) != len(parts):
        raise ValueError(f"{len(parts)} ParamVectors but {len(weights)} weights")
    total = np.zeros_like(parts[0].values)
    for part, weight in zip(parts, weights):
        total = total + float(weight) * part.values
    return ParamVector(total, parts[0].layout)


def scale_output_layer(net: Network, factor: float) -> None:
    """Shrink the last parametrised layer in place so the initial outputs sit near zero."""
    if factor <= 0:
        raise ValueError(f"output scale must be positive, got {factor}")
    last = max(i for i, layer in enumerate(net.layers) if layer.has_params)
    for name, view in net.params.arrays().items():
        if name.startswith(f"{last}."):
            view *= factor
