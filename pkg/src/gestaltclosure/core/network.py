"""
Small NumPy network engine: conv/pool/dense layers with exact backpropagation, the
simple-network builder, and RMSProp.

Tensors are NHWC. Layers are stateless between calls apart from their parameters:
`forward` returns a cache that the caller hands back to `backward`, so a network with
frozen weights can serve concurrent forward passes.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import structlog

from ..config.settings import Head, NetConfig, NetKind
from .errors import NonFiniteError, ShapeMismatchError, UnknownLayerError

logger = structlog.get_logger(__name__)

Params = Dict[str, np.ndarray]

PENULTIMATE = "fc_finale"
OUTPUT = "output"


class Loss(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"


# Layers -----------------------------------------------------------------


class Layer:
    params: Params

    def __init__(self):
        self.params = {}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, cache) -> Tuple[np.ndarray, Params]:
        raise NotImplementedError


def im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches of a padded NHWC batch as an (N*out_h*out_w, k*k*C) matrix."""
    n, _, _, c = xp.shape
    cols = np.empty((n, out_h, out_w, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + out_h, j:j + out_w, :]
    return cols.reshape(n * out_h * out_w, k * k * c)


def col2im(dcols: np.ndarray, padded_shape: Tuple[int, ...], k: int, out_h: int, out_w: int):
    n, _, _, c = padded_shape
    dcols = dcols.reshape(n, out_h, out_w, k, k, c)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + out_h, j:j + out_w, :] += dcols[:, :, :, i, j, :]
    return dxp


class Conv2D(Layer):
    """3x3 (by default) stride-1 convolution with 'same' zero padding."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        if weight.shape[0] != weight.shape[1] or weight.shape[0] % 2 == 0:
            raise ShapeMismatchError(f"conv kernel must be square and odd, got {weight.shape}")
        self.params = {"W": weight, "b": bias}

    @property
    def kernel_size(self) -> int:
        return self.params["W"].shape[0]

    def forward(self, x):
        k = self.kernel_size
        pad = k // 2
        n, h, w, c = x.shape
        if c != self.params["W"].shape[2]:
            raise ShapeMismatchError(f"conv expects {self.params['W'].shape[2]} channels, got {c}")
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = im2col(xp, k, h, w)
        w2d = self.params["W"].reshape(-1, self.params["W"].shape[3])
        out = cols @ w2d + self.params["b"]
        return out.reshape(n, h, w, -1), (cols, xp.shape)

    def backward(self, dout, cache):
        cols, padded_shape = cache
        k = self.kernel_size
        pad = k // 2
        n, h, w, f = dout.shape
        dflat = dout.reshape(-1, f)
        w2d = self.params["W"].reshape(-1, f)
        grads = {
            "W": (cols.T @ dflat).reshape(self.params["W"].shape),
            "b": dflat.sum(axis=0),
        }
        dxp = col2im(dflat @ w2d.T, padded_shape, k, h, w)
        return dxp[:, pad:pad + h, pad:pad + w, :], grads


class MaxPool2D(Layer):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped."""

    def forward(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        blocks = (
            x[:, :2 * ho, :2 * wo, :]
            .reshape(n, ho, 2, wo, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, 4)
        )
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache):
        idx, in_shape = cache
        n, h, w, c = in_shape
        ho, wo = h // 2, w // 2
        routed = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
        # Ties go to the first maximum only.
        np.put_along_axis(routed, idx[..., None], dout[..., None], axis=-1)
        routed = routed.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(in_shape, dtype=dout.dtype)
        dx[:, :2 * ho, :2 * wo, :] = routed.reshape(n, 2 * ho, 2 * wo, c)
        return dx, {}


class Dense(Layer):
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        self.params = {"W": weight, "b": bias}

    def forward(self, x):
        if x.shape[1] != self.params["W"].shape[0]:
            raise ShapeMismatchError(
                f"dense expects {self.params['W'].shape[0]} inputs, got {x.shape[1]}"
            )
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dout, cache):
        x = cache
        grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["W"].T, grads


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache, {}


class Tanh(Layer):
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, dout, cache):
        return dout * (1.0 - cache ** 2), {}


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh}


# Heads and losses -------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy_from_logits(z: np.ndarray, onehot: np.ndarray) -> float:
    m = z.max(axis=1, keepdims=True)
    logsumexp = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    return float(-(onehot * (z - logsumexp)).sum(axis=1).mean())


def binary_cross_entropy_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float((np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean())


# Network ----------------------------------------------------------------


@dataclass
class Stage:
    """A named group of layers whose final output can be recorded."""

    name: str
    layers: List[Layer]


@dataclass
class ForwardPass:
    probabilities: np.ndarray
    logits: np.ndarray
    activations: Dict[str, np.ndarray]
    caches: Optional[List[List[object]]] = field(default=None, repr=False)


class Network:
    """Sequential network built from stages; see `build_network`."""

    def __init__(self, config: NetConfig, stages: List[Stage], seed: int, debug: bool = False):
        self.config = config
        self.stages = stages
        self.seed = seed
        self.debug = debug
        self.dtype = np.dtype(config.precision)

    @property
    def layer_names(self) -> List[str]:
        return [s.name for s in self.stages]

    @property
    def probe_layers(self) -> List[str]:
        """Recordable hidden layers, shallow to deep (everything but the head)."""
        return [s.name for s in self.stages if s.name != OUTPUT]

    @property
    def head(self) -> Head:
        return self.config.head  # type: ignore[return-value]

    def parameters(self) -> Params:
        params = {}
        for stage in self.stages:
            for layer in stage.layers:
                for key, value in layer.params.items():
                    params[f"{stage.name}.{key}"] = value
        return params

    def set_parameters(self, params: Params) -> None:
        current = self.parameters()
        if set(params) != set(current):
            missing = sorted(set(current) ^ set(params))
            raise ShapeMismatchError(f"parameter names differ: {missing}")
        for stage in self.stages:
            for layer in stage.layers:
                for key in layer.params:
                    name = f"{stage.name}.{key}"
                    if params[name].shape != layer.params[key].shape:
                        raise ShapeMismatchError(
                            f"{name}: expected {layer.params[key].shape}, got {params[name].shape}"
                        )
                    layer.params[key] = np.array(params[name], dtype=self.dtype, copy=True)

    def copy_parameters(self) -> Params:
        return {k: v.copy() for k, v in self.parameters().items()}

    def _check_finite(self, what: str, arr: np.ndarray) -> None:
        if self.debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in {what}")

    def forward(
        self, batch: np.ndarray, record_layers: Iterable[str] = (), keep_caches: bool = False
    ) -> ForwardPass:
        record = set(record_layers)
        unknown = record - set(self.layer_names)
        if unknown:
            raise UnknownLayerError(sorted(unknown)[0], self.layer_names)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeMismatchError(
                f"expected batch of shape N x {'x'.join(map(str, self.config.input_shape))}, "
                f"got {batch.shape}"
            )

        x = batch.astype(self.dtype, copy=False)
        activations: Dict[str, np.ndarray] = {}
        caches: List[List[object]] = []
        for stage in self.stages:
            stage_caches = []
            for layer in stage.layers:
                x, cache = layer.forward(x)
                if keep_caches:
                    stage_caches.append(cache)
            caches.append(stage_caches)
            self._check_finite(stage.name, x)
            if stage.name in record:
                activations[stage.name] = x.reshape(x.shape[0], -1).copy()

        logits = x
        probs = softmax(logits) if self.head == Head.SOFTMAX else sigmoid(logits)
        if OUTPUT in record:
            activations[OUTPUT] = probs.copy()
        return ForwardPass(probs, logits, activations, caches if keep_caches else None)

    def backward(
        self, batch: np.ndarray, targets: np.ndarray, loss: Optional[Loss] = None
    ) -> Tuple[Params, float, np.ndarray]:
        """Mean batch loss, exact gradients of every parameter, and the probabilities."""
        loss = loss or self.default_loss()
        if (loss == Loss.CROSS_ENTROPY) != (self.head == Head.SOFTMAX):
            raise ShapeMismatchError(f"loss {loss.value} does not match head {self.head.value}")

        fp = self.forward(batch, keep_caches=True)
        n = batch.shape[0]
        targets = self.encode_targets(targets)

        if loss == Loss.CROSS_ENTROPY:
            value = cross_entropy_from_logits(fp.logits, targets)
        else:
            value = binary_cross_entropy_from_logits(fp.logits, targets)
        if not np.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss {value}; logits range "
                f"[{np.nanmin(fp.logits):.3g}, {np.nanmax(fp.logits):.3g}]"
            )

        dout = (fp.probabilities - targets) / n
        grads: Params = {}
        for stage, stage_caches in zip(reversed(self.stages), reversed(fp.caches or [])):
            for layer, cache in zip(reversed(stage.layers), reversed(stage_caches)):
                dout, layer_grads = layer.backward(dout, cache)
                for key, g in layer_grads.items():
                    grads[f"{stage.name}.{key}"] = g
            self._check_finite(f"gradient of {stage.name}", dout)
        return grads, value, fp.probabilities

    def default_loss(self) -> Loss:
        return Loss.CROSS_ENTROPY if self.head == Head.SOFTMAX else Loss.BINARY_CROSS_ENTROPY

    def encode_targets(self, targets: np.ndarray) -> np.ndarray:
        """Integer labels or ready-made targets, shaped to the head."""
        targets = np.asarray(targets)
        n_out = self.config.output_units
        if self.head == Head.SOFTMAX:
            if targets.ndim == 1:
                onehot = np.zeros((targets.shape[0], n_out), dtype=self.dtype)
                onehot[np.arange(targets.shape[0]), targets.astype(int)] = 1.0
                return onehot
            if targets.shape[1] != n_out:
                raise ShapeMismatchError(f"targets have {targets.shape[1]} columns, head has {n_out}")
            return targets.astype(self.dtype)
        if targets.ndim == 1:
            targets = targets[:, None]
        if targets.shape[1] != 1:
            raise ShapeMismatchError("sigmoid head expects one target per example")
        return targets.astype(self.dtype)

    def predict(self, probabilities: np.ndarray) -> np.ndarray:
        if self.head == Head.SOFTMAX:
            return probabilities.argmax(axis=1)
        return (probabilities[:, 0] >= 0.5).astype(int)


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    limit = np.sqrt(gain / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_network(config: NetConfig, seed: int, debug: bool = False) -> Network:
    """Build the simple conv or fully connected network.

    Conv: n_layers x (3x3 conv -> activation -> 2x2 max-pool) named conv2d_1..,
    FullyConnected: flatten then n_layers dense+activation layers named dense_1..,
    both followed by the 512-unit `fc_finale` and the `output` head.
    Hidden weights are drawn U(+-sqrt(6/fan_in)), head weights U(+-sqrt(3/fan_in)),
    biases start at zero; draws happen in layer order from one seeded generator.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.precision)
    act = ACTIVATIONS[config.activation]
    h, w, c = config.input_shape
    stages: List[Stage] = []

    if config.kind == NetKind.CONV:
        channels = c
        for i, width in enumerate(config.widths, start=1):
            weight = _uniform(rng, (3, 3, channels, width), 9 * channels, 6.0, dtype)
            conv = Conv2D(weight, np.zeros(width, dtype=dtype))
            stages.append(Stage(f"conv2d_{i}", [conv, act(), MaxPool2D()]))
            channels = width
            h, w = h // 2, w // 2
        features = h * w * channels
        prefix: List[Layer] = [Flatten()]
    else:
        features = h * w * c
        first = True
        for i, width in enumerate(config.widths, start=1):
            weight = _uniform(rng, (features, width), features, 6.0, dtype)
            layers: List[Layer] = [Flatten()] if first else []
            layers += [Dense(weight, np.zeros(width, dtype=dtype)), act()]
            stages.append(Stage(f"dense_{i}", layers))
            features = width
            first = False
        prefix = []

    width = config.penultimate_width
    weight = _uniform(rng, (features, width), features, 6.0, dtype)
    stages.append(Stage(PENULTIMATE, prefix + [Dense(weight, np.zeros(width, dtype=dtype)), act()]))

    n_out = config.output_units
    weight = _uniform(rng, (width, n_out), width, 3.0, dtype)
    stages.append(Stage(OUTPUT, [Dense(weight, np.zeros(n_out, dtype=dtype))]))

    net = Network(config, stages, seed, debug)
    logger.debug(
        "network_built",
        kind=config.kind.value,
        n_layers=config.n_layers,
        n_classes=config.n_classes,
        parameters=int(sum(p.size for p in net.parameters().values())),
        seed=seed,
    )
    return net


def probe_layer_names(config: NetConfig) -> List[str]:
    """Hidden stage names of the network `build_network(config, ...)` would build."""
    prefix = "conv2d" if config.kind == NetKind.CONV else "dense"
    return [f"{prefix}_{i}" for i in range(1, config.n_layers + 1)] + [PENULTIMATE]


def forward(
    net: Network, batch: np.ndarray, record_layers: Iterable[str] = ()
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    fp = net.forward(batch, record_layers)
    return fp.probabilities, fp.activations


def backward(
    net: Network, batch: np.ndarray, targets: np.ndarray, loss: Optional[Loss] = None
) -> Tuple[Params, float]:
    grads, value, _ = net.backward(batch, targets, loss)
    return grads, value


# Optimizer --------------------------------------------------------------


@dataclass
class RMSPropState:
    accumulators: Params = field(default_factory=dict)
    rho: float = 0.9
    epsilon: float = 1e-8
    steps: int = 0

    def restore(self, snapshot: "RMSPropState") -> None:
        """Return to the accumulators and step count of an earlier copy."""
        self.accumulators = {k: v.copy() for k, v in snapshot.accumulators.items()}
        self.steps = snapshot.steps


def rmsprop_step(state: RMSPropState, params: Params, gradients: Params, lr: float) -> Params:
    """In-place RMSProp update: a = rho*a + (1-rho)*g^2; p -= lr*g/(sqrt(a)+eps)."""
    for name, g in gradients.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    for name, g in gradients.items():
        p = params[name]
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(p)
            state.accumulators[name] = acc
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        p -= (lr * g / (np.sqrt(acc) + state.epsilon)).astype(p.dtype, copy=False)
    state.steps += 1
    return params


class RMSProp:
    def __init__(self, net: Network, lr: float, rho: float = 0.9, epsilon: float = 1e-8):
        self.net = net
        self.lr = lr
        self.state = RMSPropState(rho=rho, epsilon=epsilon)

    def step(self, gradients: Params, lr: Optional[float] = None) -> None:
        rmsprop_step(self.state, self.net.parameters(), gradients, self.lr if lr is None else lr)
