"""
Per-slice digital twin: a graph-attention demand forecaster.

Pipeline for one window of node demand (V nodes x L steps):
    temporal conv + tanh + recency-weighted pooling  -> node features B (V x F)
    adaptive graph  A = ReLU(tanh(β(M1 M2ᵀ - M2 M1ᵀ))), Mk = tanh(β (E ⊙ B) Θk)
    graph-embedded features X = B + A B
    GAT attention over N_v = {z : A_vz > 0} ∪ {v}, output X' = σ(α X Ws)
    head on the sum-pooled X' -> next-step slice demand

With `residual` on, the head adds to a linear skip path over the newest node levels and the
lagged slice totals. Pre-training fits the skip path by least squares and then trains every
stage online with the MAE loss.
"""

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.linalg import lstsq
from scipy.special import expit

from config import get_logger
from nn_core import Network, ParamVector, activation, conv1d, dense, make_optimizer, param_layout, softmax
from traffic_gen import DemandTensor

logger = get_logger(__name__)

GRAPH_PARAMS = ("E", "theta1", "theta2", "Wz", "q", "Ws")


class NonFiniteLossError(ArithmeticError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


class TwinConfig(BaseModel):
    window: int = Field(12, ge=1)
    kernel_width: int = Field(3, ge=1)
    channels: int = Field(1, ge=1)  # Z
    embed_dim: int = Field(16, ge=1)  # e
    feature_dim: int = Field(16, ge=1)  # F
    attention_dim: int = Field(16, ge=1)  # D
    output_dim: int = Field(16, ge=1)  # H
    beta: float = Field(1.0, gt=0)
    leaky_slope: float = Field(0.2, ge=0)
    pooling_decay: float = Field(0.5, gt=0, le=1)  # weight ratio between consecutive steps; 1 is mean pooling
    head_mode: Literal["linear", "softmax"] = "linear"
    residual: bool = True  # linear head only: add the skip path
    optimizer: Literal["sgd", "adam"] = "adam"
    learning_rate: float = Field(1e-5, ge=0)
    pretrain_steps: int = Field(300, ge=0)
    pretrain_epochs: int = Field(3, ge=0)

    @model_validator(mode="after")
    def check_shapes(self):
        if self.embed_dim != self.feature_dim:
            raise ValueError("embed_dim must equal feature_dim (node embeddings gate the features elementwise)")
        if self.kernel_width % 2 == 0 or self.kernel_width > self.window:
            raise ValueError("kernel_width must be odd and no longer than the window")
        return self


@dataclass(frozen=True)
class GraphSnapshot:
    adjacency: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        A = self.adjacency
        if np.any(np.diag(A) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if np.any(np.minimum(A, A.T)[~np.eye(len(A), dtype=bool)] != 0):
            raise ValueError("adjacency support must be antisymmetric")
        if np.any(A < 0) or np.any(A > 1):
            raise ValueError("adjacency entries must lie in [0, 1]")


@dataclass(frozen=True)
class ForecastRecord:
    t: int
    actual: float
    predicted: float
    model_id: str

    def __post_init__(self):
        if not (np.isfinite(self.actual) and np.isfinite(self.predicted)):
            raise ValueError(f"non-finite forecast record at t={self.t}: {self.actual}, {self.predicted}")


def rmse_of(actual, predicted) -> float:
    errors = np.asarray(actual, dtype=np.float64) - np.asarray(predicted, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("RMSE of an empty record set is undefined")
    return float(np.sqrt(np.mean(errors ** 2)))


def rmse(records: Sequence[ForecastRecord]) -> float:
    return rmse_of([r.actual for r in records], [r.predicted for r in records])


def running_rmse(records: Sequence[ForecastRecord]) -> np.ndarray:
    """rmse(records[:n]) for n = 1..len(records)."""
    if not records:
        raise ValueError("RMSE of an empty record set is undefined")
    errors = np.array([r.actual - r.predicted for r in records])
    return np.sqrt(np.cumsum(errors ** 2) / np.arange(1, len(errors) + 1))


def mae_loss(actual, predicted) -> float:
    return float(np.mean(np.abs(np.asarray(actual, dtype=np.float64) - np.asarray(predicted, dtype=np.float64))))


def pairwise_products(M1: np.ndarray, M2: np.ndarray) -> np.ndarray:
    """P_ij = Σ_k M1_ik M2_jk, summed in the same order for every (i, j) so M1 = M2 gives an exactly symmetric P."""
    return (M1[:, None, :] * M2[None, :, :]).sum(axis=2)


def pooling_weights(length: int, decay: float = 1.0) -> np.ndarray:
    """Temporal pooling weights, newest step last, summing to 1: w_t ∝ decay^(length-1-t)."""
    if length < 1:
        raise ValueError(f"pooling needs at least one step, got {length}")
    weights = decay ** np.arange(length - 1, -1, -1, dtype=np.float64)
    return weights / weights.sum()


def extract_features(conv_net: Network, window: np.ndarray, decay: float = 1.0) -> np.ndarray:
    """Per-node temporal conv + tanh, pooled over time with `pooling_weights`: (V, Z, L) or (V, L) -> (V, F)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[:, None, :]
    kernel = conv_net.layers[0].kernel_width
    if window.shape[2] < kernel:
        raise ValueError(f"window of length {window.shape[2]} is shorter than the kernel width {kernel}")
    return conv_net.forward(window) @ pooling_weights(window.shape[2], decay)


def skip_inputs(window: np.ndarray) -> np.ndarray:
    """
    Regressors of the skip path for a normalised (V, Z, L) or (V, L) window: the newest node
    levels over V, then the node-mean level of each earlier step, newest first (V + L - 1 values).
    """
    window = np.asarray(window, dtype=np.float64)
    levels = window[:, 0, :] if window.ndim == 3 else window
    totals = levels.mean(axis=0)
    return np.concatenate([levels[:, -1] / len(levels), totals[-2::-1]])


@dataclass(frozen=True)
class LearnedGraph:
    adjacency: np.ndarray = field(repr=False)
    pre_activation: np.ndarray = field(repr=False)  # S
    filters: tuple[np.ndarray, np.ndarray] = field(repr=False)  # M1, M2
    gated: np.ndarray = field(repr=False)  # E ⊙ B


def learn_graph(B: np.ndarray, E: np.ndarray, theta1: np.ndarray, theta2: np.ndarray, beta: float) -> LearnedGraph:
    gated = E * B
    M1 = np.tanh(beta * (gated @ theta1))
    M2 = np.tanh(beta * (gated @ theta2))
    P = pairwise_products(M1, M2)
    S = np.tanh(beta * (P - P.T))
    return LearnedGraph(adjacency=np.maximum(S, 0.0), pre_activation=S, filters=(M1, M2), gated=gated)


def neighbourhood_mask(A: np.ndarray) -> np.ndarray:
    return (A > 0) | np.eye(len(A), dtype=bool)


def attention_logits(X: np.ndarray, Wz: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """pre[v, z] = q_src·(Wz x_z) + q_dst·(Wz x_v); returns (pre, h)."""
    h = X @ Wz
    D = Wz.shape[1]
    return (h @ q[D:])[:, None] + (h @ q[:D])[None, :], h


def gat_attention(X: np.ndarray, A: np.ndarray, Wz: np.ndarray, q: np.ndarray,
                  leaky_slope: float = 0.2) -> np.ndarray:
    """α[v, z]: softmax over z ∈ N_v of LeakyReLU(qᵀ[Wz x_z ‖ Wz x_v]); each row sums to 1."""
    pre, _ = attention_logits(X, Wz, q)
    logits = np.where(pre > 0, pre, leaky_slope * pre)
    logits = np.where(neighbourhood_mask(A), logits, -np.inf)
    return softmax(logits, axis=1)


def gat_output(X: np.ndarray, alpha: np.ndarray, Ws: np.ndarray) -> np.ndarray:
    return expit(alpha @ (X @ Ws))


def node_weights(X_out: np.ndarray, head: Network) -> np.ndarray:
    return softmax(head.forward(X_out)[:, 0])


def predict(X_out: np.ndarray, head: Network, head_mode: str = "linear",
            node_levels: np.ndarray | None = None, offset: float = 0.0, clip: bool = True) -> float:
    """
    linear: ψ·(Σ_v x'_v) + b + offset.
    softmax: weights softmax_v(x'_v ψ + b) over nodes, rescaled by the node levels.
    Clipped at 0 unless `clip` is off (the training path needs the raw value).
    """
    if head_mode == "linear":
        raw = float(head.forward(X_out.sum(axis=0)[None, :])[0, 0]) + offset
    elif head_mode == "softmax":
        if node_levels is None:
            raise ValueError("softmax head needs the window's node demand levels to rescale")
        raw = float(node_weights(X_out, head) @ node_levels)
    else:
        raise ValueError(f"Unknown head mode '{head_mode}'")
    return max(raw, 0.0) if clip else raw


@dataclass
class _ForwardCache:
    window: np.ndarray
    B: np.ndarray
    graph: LearnedGraph
    X: np.ndarray
    h: np.ndarray
    pre: np.ndarray
    alpha: np.ndarray
    G: np.ndarray
    X_out: np.ndarray
    node_levels: np.ndarray
    head_weights: np.ndarray | None
    raw: float


class TwinModel:
    """Parameters and forward/backward of one slice's twin."""

    def __init__(self, num_nodes: int, cfg: TwinConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg if cfg is not None else TwinConfig()
        self.num_nodes = num_nodes
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.cfg
        self.conv = Network([conv1d(c.channels, c.feature_dim, c.kernel_width), activation("tanh")], rng=rng)
        F, D, H = c.feature_dim, c.attention_dim, c.output_dim
        bound_f = 1.0 / np.sqrt(F)
        graph = {
            "E": rng.uniform(-1.0, 1.0, size=(num_nodes, F)),
            "theta1": rng.uniform(-bound_f, bound_f, size=(F, F)),
            "theta2": rng.uniform(-bound_f, bound_f, size=(F, F)),
            "Wz": rng.uniform(-bound_f, bound_f, size=(F, D)),
            "q": rng.uniform(-1.0 / np.sqrt(2 * D), 1.0 / np.sqrt(2 * D), size=(2 * D,)),
            "Ws": rng.uniform(-bound_f, bound_f, size=(F, H)),
        }
        self.graph = ParamVector(np.concatenate([graph[k].ravel() for k in GRAPH_PARAMS]),
                                 tuple((k, graph[k].shape) for k in GRAPH_PARAMS))
        self.head = Network([dense(H, 1)], rng=rng)
        self.skip: Network | None = None
        if self.uses_skip:
            # zero head: the forecast starts as the skip path alone
            self.head.params = ParamVector.zeros(self.head.layout)
            self.skip = Network([dense(num_nodes + c.window - 1, 1)],
                                params=ParamVector.zeros(param_layout([dense(num_nodes + c.window - 1, 1)])))
        self.scale = 1.0
        self.optimizer = make_optimizer(c.optimizer, c.learning_rate)
        self._cache: _ForwardCache | None = None

    @property
    def uses_skip(self) -> bool:
        return self.cfg.residual and self.cfg.head_mode == "linear"

    def _parts(self) -> list[tuple[str, ParamVector]]:
        parts = [("conv", self.conv.params), ("graph", self.graph), ("head", self.head.params)]
        if self.skip is not None:
            parts.append(("skip", self.skip.params))
        return parts

    def parameters(self) -> ParamVector:
        return ParamVector.concat(self._parts())

    def load_parameters(self, params: ParamVector) -> None:
        self.parameters().check_layout(params)
        parts = params.split([name for name, _ in self._parts()])
        self.conv.params = parts["conv"]
        self.graph = parts["graph"]
        self.head.params = parts["head"]
        if self.skip is not None:
            self.skip.params = parts["skip"]

    def fit_scale(self, history: np.ndarray) -> None:
        """Normalise inputs by the mean node demand of a history (V x T)."""
        level = float(np.mean(history))
        self.scale = level if level > 0 else 1.0

    def _normalised(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 2:
            window = window[:, None, :]
        if window.shape[0] != self.num_nodes:
            raise ValueError(f"window has {window.shape[0]} nodes, twin was built for {self.num_nodes}")
        return window / self.scale

    def fit_skip(self, windows: Sequence[np.ndarray], targets: Sequence[float]) -> None:
        """Least-squares fit of the skip path on (window, next slice total in Mb/s) pairs."""
        if self.skip is None:
            raise RuntimeError("this twin has no skip path")
        if len(windows) != len(targets) or not windows:
            raise ValueError(f"skip fit needs matching, non-empty windows and targets, got {len(windows)} "
                             f"and {len(targets)}")
        regressors = np.array([skip_inputs(self._normalised(w)) for w in windows])
        y = np.asarray(targets, dtype=np.float64) / (self.scale * self.num_nodes)
        centre, y_mean = regressors.mean(axis=0), float(y.mean())
        weights = lstsq(regressors - centre, y - y_mean)[0]
        self.skip.params = ParamVector(np.concatenate([weights, [y_mean - centre @ weights]]), self.skip.layout)

    def forward(self, window: np.ndarray) -> float:
        """Normalised, unclipped forecast of the next slice total (mean node level units)."""
        c = self.cfg
        w = self._normalised(window)
        g = self.graph.arrays()
        B = extract_features(self.conv, w, c.pooling_decay)
        graph = learn_graph(B, g["E"], g["theta1"], g["theta2"], c.beta)
        A = graph.adjacency
        X = B + A @ B
        pre, h = attention_logits(X, g["Wz"], g["q"])
        alpha = gat_attention(X, A, g["Wz"], g["q"], c.leaky_slope)
        G = X @ g["Ws"]
        X_out = gat_output(X, alpha, g["Ws"])
        node_levels = w[:, 0, -1]
        head_weights = None
        if c.head_mode == "linear":
            offset = float(self.skip.forward(skip_inputs(w)[None, :])[0, 0]) if self.skip is not None else 0.0
            raw = predict(X_out, self.head, "linear", offset=offset, clip=False)
        else:
            raw = predict(X_out, self.head, "softmax", node_levels, clip=False)
            head_weights = node_weights(X_out, self.head)
        self._cache = _ForwardCache(w, B, graph, X, h, pre, alpha, G, X_out, node_levels, head_weights, raw)
        return raw

    def forecast(self, window: np.ndarray) -> float:
        """Next-step slice demand in Mb/s, clipped at 0."""
        return max(self.forward(window), 0.0) * self.scale * self.num_nodes

    def backward(self, upstream: float) -> ParamVector:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        c, k = self.cfg, self._cache
        g = self.graph.arrays()
        beta = c.beta
        if c.head_mode == "linear":
            head_grad = self.head.backward(np.array([[upstream]]))
            dX_out = np.repeat(self.head.input_grad, self.num_nodes, axis=0)
        else:
            dweights = upstream * k.node_levels
            dlogits = k.head_weights * (dweights - np.sum(k.head_weights * dweights))
            head_grad = self.head.backward(dlogits[:, None])
            dX_out = self.head.input_grad
        dO = dX_out * k.X_out * (1.0 - k.X_out)
        dalpha = dO @ k.G.T
        dG = k.alpha.T @ dO
        dWs = k.X.T @ dG
        dX = dG @ g["Ws"].T
        de = k.alpha * (dalpha - np.sum(k.alpha * dalpha, axis=1, keepdims=True))
        dpre = de * np.where(k.pre > 0, 1.0, c.leaky_slope)
        ds_dst = dpre.sum(axis=1)
        ds_src = dpre.sum(axis=0)
        D = g["Wz"].shape[1]
        dq = np.concatenate([k.h.T @ ds_src, k.h.T @ ds_dst])
        dh = np.outer(ds_src, g["q"][:D]) + np.outer(ds_dst, g["q"][D:])
        dWz = k.X.T @ dh
        dX += dh @ g["Wz"].T
        A = k.graph.adjacency
        S = k.graph.pre_activation
        dB = dX + A.T @ dX
        dA = dX @ k.B.T
        dC = dA * (S > 0) * beta * (1.0 - S ** 2)
        dP = dC - dC.T
        M1, M2 = k.graph.filters
        dQ1 = (dP @ M2) * beta * (1.0 - M1 ** 2)
        dQ2 = (dP.T @ M1) * beta * (1.0 - M2 ** 2)
        gated = k.graph.gated
        dtheta1 = gated.T @ dQ1
        dtheta2 = gated.T @ dQ2
        dgated = dQ1 @ g["theta1"].T + dQ2 @ g["theta2"].T
        dE = dgated * k.B
        dB += dgated * g["E"]
        pool = pooling_weights(k.window.shape[2], c.pooling_decay)
        conv_grad = self.conv.backward(dB[:, :, None] * pool[None, None, :])
        graph_grad = {"E": dE, "theta1": dtheta1, "theta2": dtheta2, "Wz": dWz, "q": dq, "Ws": dWs}
        graph_pv = ParamVector(np.concatenate([graph_grad[name].ravel() for name in GRAPH_PARAMS]), self.graph.layout)
        grads = [("conv", conv_grad), ("graph", graph_pv), ("head", head_grad)]
        if self.skip is not None:
            grads.append(("skip", self.skip.backward(np.array([[upstream]]))))
        return ParamVector.concat(grads)

    def loss_and_gradient(self, window: np.ndarray, target: float) -> tuple[float, ParamVector]:
        """MAE between the normalised forecast and target (Mb/s slice total); subgradient 0 at the kink."""
        raw = self.forward(window)
        target_norm = target / (self.scale * self.num_nodes)
        loss = abs(raw - target_norm)
        if not np.isfinite(loss):
            raise NonFiniteLossError("twin loss is not finite", {
                "prediction": raw, "target": target_norm, "scale": self.scale,
                "max_abs_param": float(np.max(np.abs(self.parameters().values))),
            })
        return loss, self.backward(float(np.sign(raw - target_norm)))


@dataclass(frozen=True)
class TrainStepResult:
    loss: float
    prediction: float


def train_step(model: TwinModel, window: np.ndarray, target: float) -> TrainStepResult:
    """One optimiser step on the MAE loss for a single (window, next total) pair."""
    loss, grad = model.loss_and_gradient(window, target)
    prediction = max(model._cache.raw, 0.0) * model.scale * model.num_nodes
    model.load_parameters(model.optimizer.step(model.parameters(), grad))
    return TrainStepResult(loss=loss, prediction=prediction)


def pretrain(model: TwinModel, tensor: DemandTensor, end: int, epochs: int | None = None) -> list[float]:
    """
    Fit the scale on steps [0, end), least-squares fit the skip path on every window inside it,
    then run epochs of train_step over the same windows.
    """
    epochs = model.cfg.pretrain_epochs if epochs is None else epochs
    L = model.cfg.window
    model.fit_scale(tensor.values[0, :end].T)
    totals = tensor.totals()
    ends = range(L - 1, end - 1)
    if model.skip is not None and len(ends) > 0:
        model.fit_skip([tensor.window(e, L) for e in ends], [float(totals[e + 1]) for e in ends])
    history = []
    for _ in range(epochs):
        losses = [train_step(model, tensor.window(e, L), float(totals[e + 1])).loss for e in ends]
        if losses:
            history.append(float(np.mean(losses)))
    if history:
        logger.debug("twin %s pretrained: epoch MAE %s", tensor.slice_id, ["%.4f" % h for h in history])
    return history
