"""Small dense-network engine: layers, multi-task loss, Adam, gradient checking, binary weights."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from memtl.errors import InvalidParameterError, StaleCacheError, TrainingDiverged

ACTIVATIONS = ("relu", "sigmoid", "identity", "softmax")

MAGIC = b"MEMTLNN\x00"
WEIGHTS_FORMAT_VERSION = 1


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "identity":
        return z
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    raise InvalidParameterError(f"unknown activation {kind!r}")


def _activation_grad(z: np.ndarray, a: np.ndarray, grad_a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return grad_a * (z > 0)
    if kind == "sigmoid":
        return grad_a * a * (1.0 - a)
    if kind == "identity":
        return grad_a
    # softmax: J^T g = a * (g - <g, a>)
    return a * (grad_a - np.sum(grad_a * a, axis=1, keepdims=True))


class DenseLayer:
    """Affine map ``W x + b`` followed by an elementwise (or softmax) activation.

    ``weights`` is ``(out, in)``.  ``version`` is bumped on every parameter
    update so that forward caches can detect staleness.
    """

    def __init__(self, weights, biases, activation: str = "relu", trainable: bool = True):
        if activation not in ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {activation!r}")
        self.weights = np.array(weights, dtype=np.float64)
        self.biases = np.array(biases, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.biases.size:
            raise InvalidParameterError(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not match"
            )
        self.activation = activation
        self.trainable = trainable
        self.version = 0
        self.assert_finite()

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator, trainable: bool = True):
        """Uniform fan-in scaled init (He bound for relu, LeCun bound otherwise); zero biases."""
        limit = np.sqrt((6.0 if activation == "relu" else 3.0) / n_in)
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation, trainable)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def spec(self) -> dict:
        return {"n_in": self.n_in, "n_out": self.n_out, "activation": self.activation, "trainable": self.trainable}

    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights, self.biases

    def assert_finite(self) -> None:
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise TrainingDiverged("non-finite layer parameters")

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.biases.copy(), self.activation, self.trainable)

    def param_bytes(self) -> bytes:
        return self.weights.astype("<f8").tobytes() + self.biases.astype("<f8").tobytes()


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    versions: tuple[int, ...]


class Network:
    """An ordered stack of dense layers.  Stacks may share layer objects."""

    def __init__(self, layers):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise InvalidParameterError(f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}")

    @classmethod
    def build(cls, sizes, activations, rng, trainable=True) -> "Network":
        if len(activations) != len(sizes) - 1:
            raise InvalidParameterError("need one activation per layer")
        return cls(
            DenseLayer.init(a, b, act, rng, trainable)
            for a, b, act in zip(sizes[:-1], sizes[1:], activations)
        )

    def __add__(self, other: "Network") -> "Network":
        return Network(self.layers + other.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def set_trainable(self, flag: bool) -> None:
        for layer in self.layers:
            layer.trainable = flag

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        a = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if a.shape[1] != self.n_in:
            raise InvalidParameterError(f"input has {a.shape[1]} features, network expects {self.n_in}")
        cache = ForwardCache([], [], [], tuple(layer.version for layer in self.layers))
        for layer in self.layers:
            cache.inputs.append(a)
            z = a @ layer.weights.T + layer.biases
            a = _activate(z, layer.activation)
            cache.pre.append(z)
            cache.post.append(a)
        return a, cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray):
        """Reverse pass.  Returns ``(grads, grad_input)``.

        ``grads[i]`` is ``(dW, db)`` for trainable layers and ``None`` for
        frozen ones; frozen layers still pass the gradient down.
        """
        if cache.versions != tuple(layer.version for layer in self.layers):
            raise StaleCacheError("forward cache predates a parameter update")
        grads = [None] * len(self.layers)
        g = np.atleast_2d(grad_out)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dz = _activation_grad(cache.pre[i], cache.post[i], g, layer.activation)
            if layer.trainable:
                grads[i] = (dz.T @ cache.inputs[i], dz.sum(axis=0))
            g = dz @ layer.weights
        return grads, g

    def param_bytes(self) -> bytes:
        return b"".join(layer.param_bytes() for layer in self.layers)

    def copy(self) -> "Network":
        return Network(layer.copy() for layer in self.layers)

    # -- serialisation -------------------------------------------------

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"format_version": WEIGHTS_FORMAT_VERSION, "layer_specs": [l.spec for l in self.layers]},
            separators=(",", ":"),
        ).encode()
        return MAGIC + struct.pack("<I", len(header)) + header + self.param_bytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Network":
        if blob[: len(MAGIC)] != MAGIC:
            raise InvalidParameterError("not a weights file")
        (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(blob[start : start + hlen])
        if header["format_version"] != WEIGHTS_FORMAT_VERSION:
            raise InvalidParameterError(f"unsupported weights format {header['format_version']}")
        offset = start + hlen
        layers = []
        for spec in header["layer_specs"]:
            n_w = spec["n_out"] * spec["n_in"]
            flat = np.frombuffer(blob, dtype="<f8", count=n_w + spec["n_out"], offset=offset)
            offset += 8 * flat.size
            w = flat[:n_w].reshape(spec["n_out"], spec["n_in"])
            layers.append(DenseLayer(w, flat[n_w:], spec["activation"], spec["trainable"]))
        if offset != len(blob):
            raise InvalidParameterError(f"{len(blob) - offset} trailing bytes in weights file")
        return cls(layers)

    def save(self, path) -> int:
        blob = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        return len(blob)

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy of ``sigmoid(z)`` against ``y``, computed from logits."""
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def combined_loss(out: np.ndarray, d_star: np.ndarray, r_star: np.ndarray, lambda_reg: float = 1.0):
    """Multi-task loss on ``out = [class logits | regression values]``.

    Mean BCE over the decision logits plus ``lambda_reg`` times the MSE of the
    allocation outputs, both averaged over batch and MTs.  Returns
    ``(loss, grad_out)``.
    """
    out = np.atleast_2d(out)
    d_star = np.atleast_2d(d_star).astype(np.float64)
    r_star = np.atleast_2d(r_star).astype(np.float64)
    n = d_star.shape[1]
    if out.shape[1] != 2 * n or r_star.shape[1] != n:
        raise InvalidParameterError(f"output width {out.shape[1]} does not match 2N = {2 * n}")
    logits, reg = out[:, :n], out[:, n:]
    count = d_star.size
    diff = reg - r_star
    loss = bce_with_logits(logits, d_star).sum() / count + lambda_reg * np.sum(diff**2) / count
    grad = np.empty_like(out)
    grad[:, :n] = (sigmoid(logits) - d_star) / count
    grad[:, n:] = 2.0 * lambda_reg * diff / count
    return float(loss), grad


@dataclass
class Adam:
    """Bias-corrected Adam over the trainable layers it is stepped with."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    moments: dict = field(default_factory=dict)

    def step(self, layers, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for layer, g in zip(layers, grads):
            if g is None or not layer.trainable:
                continue
            state = self.moments.get(id(layer))
            if state is None:
                state = [np.zeros_like(p) for p in layer.params() for _ in range(2)]
                self.moments[id(layer)] = state
            for k, (param, grad) in enumerate(zip(layer.params(), g)):
                m, v = state[2 * k], state[2 * k + 1]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            layer.version += 1
            layer.assert_finite()


def grad_check(network: Network, x, target, h: float = 1e-5, loss_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``target`` is passed to ``loss_fn(out, *target)``; the default loss is
    :func:`combined_loss` with ``target = (d_star, r_star)``.  Frozen layers
    are skipped.  Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    loss_fn = loss_fn or combined_loss
    out, cache = network.forward(x)
    _, g_out = loss_fn(out, *target)
    grads, _ = network.backward(cache, g_out)
    worst = 0.0
    for layer, g in zip(network.layers, grads):
        if g is None:
            continue
        for param, analytic in zip(layer.params(), g):
            flat, aflat = param.reshape(-1), analytic.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = loss_fn(network.predict(x), *target)[0]
                flat[j] = orig - h
                down = loss_fn(network.predict(x), *target)[0]
                flat[j] = orig
                numeric = (up - down) / (2.0 * h)
                denom = max(abs(aflat[j]), abs(numeric), 1e-6)
                worst = max(worst, abs(aflat[j] - numeric) / denom)
    return worst
