"""Small feed-forward networks with hand-written reverse-mode gradients.

Everything here works on a flat parameter vector so that optimizers,
checkpoints and finite-difference probes can treat a model as one array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DimensionMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def _tanh_grad(h, a):
    return 1.0 - a * a


def _relu_grad(h, a):
    return (h > 0).astype(h.dtype)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda h: np.maximum(h, 0.0), _relu_grad),
}


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(d["input_dim"], tuple(d["hidden"]), d["output_dim"], d.get("activation", "tanh"))


@dataclass(frozen=True)
class ParamLayout:
    """Maps a flat parameter vector to per-layer (W, b) views.

    W of layer i has shape (fan_in, fan_out) and is stored row-major,
    followed by its bias.
    """

    spec: MLPSpec
    slices: tuple = field(init=False)

    def __post_init__(self):
        d = self.spec.dims
        out, off = [], 0
        for i in range(len(d) - 1):
            nw = d[i] * d[i + 1]
            out.append(((off, off + nw, (d[i], d[i + 1])), (off + nw, off + nw + d[i + 1])))
            off += nw + d[i + 1]
        object.__setattr__(self, "slices", tuple(out))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if params.shape != (self.spec.n_params,):
            raise DimensionMismatch(
                f"expected {self.spec.n_params} parameters, got shape {params.shape}"
            )
        layers = []
        for (w0, w1, shape), (b0, b1) in self.slices:
            layers.append((params[w0:w1].reshape(shape), params[b0:b1]))
        return layers

    def pack(self, layers) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(spec: MLPSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    d = spec.dims
    layers = []
    for i in range(len(d) - 1):
        bound = 1.0 / math.sqrt(d[i])
        W = rng.uniform(-bound, bound, size=(d[i], d[i + 1]))
        b = rng.uniform(-bound, bound, size=d[i + 1])
        layers.append((W, b))
    return ParamLayout(spec).pack(layers)


def _as_batch(spec: MLPSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, spec.input_dim) if spec.input_dim > 1 else x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"input must have {spec.input_dim} columns, got {x.shape}")
    return x


def forward_cache(spec: MLPSpec, params: np.ndarray, x):
    x = _as_batch(spec, x)
    act, _ = ACTIVATIONS[spec.activation]
    layers = ParamLayout(spec).unpack(params)
    cache = [x]
    a = x
    for i, (W, b) in enumerate(layers):
        h = a @ W + b
        if i < len(layers) - 1:
            a = act(h)
            cache.append((h, a))
        else:
            a = h
    return a, cache


def forward(spec: MLPSpec, params: np.ndarray, x) -> np.ndarray:
    return forward_cache(spec, params, x)[0]


def backward_cache(spec: MLPSpec, params: np.ndarray, cache, dout):
    """Gradient of sum(dout * output) w.r.t. parameters and inputs.

    Pass dout already scaled by the loss reduction (e.g. 1/n for a mean).
    """
    _, act_grad = ACTIVATIONS[spec.activation]
    layers = ParamLayout(spec).unpack(params)
    dout = np.asarray(dout, dtype=float)
    x = cache[0]
    if dout.shape != (x.shape[0], spec.output_dim):
        raise DimensionMismatch(
            f"output gradient shape {dout.shape} != {(x.shape[0], spec.output_dim)}"
        )
    grads = [None] * len(layers)
    d = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_prev = cache[i] if i == 0 else cache[i][1]
        grads[i] = (a_prev.T @ d, d.sum(axis=0))
        d = d @ W.T
        if i > 0:
            h, a = cache[i]
            d = d * act_grad(h, a)
    return ParamLayout(spec).pack(grads), d


def backward(spec: MLPSpec, params: np.ndarray, x, dout):
    _, cache = forward_cache(spec, params, x)
    return backward_cache(spec, params, cache, dout)[0]


class MLP:
    """Parameter vector bundled with its spec."""

    def __init__(self, spec: MLPSpec, params: np.ndarray | None = None, rng=None):
        self.spec = spec
        if params is None:
            params = init_params(spec, np.random.default_rng(rng))
        params = np.asarray(params, dtype=float)
        if params.shape != (spec.n_params,):
            raise DimensionMismatch(f"expected {spec.n_params} parameters, got {params.shape}")
        self.params = params

    def __call__(self, x) -> np.ndarray:
        return forward(self.spec, self.params, x)

    def forward(self, x):
        return forward_cache(self.spec, self.params, x)

    def backward(self, cache, dout):
        return backward_cache(self.spec, self.params, cache, dout)

    def output_bias(self) -> np.ndarray:
        return self.params[-self.spec.output_dim:]

    def copy(self) -> "MLP":
        return MLP(self.spec, self.params.copy())

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        return cls(MLPSpec.from_dict(d["spec"]), np.asarray(d["params"], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MLP":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- heads


def gaussian_nll_loss(mu, log_sigma, y):
    """Per-sample Gaussian NLL with sigma = exp(log_sigma).

    Returns (loss, d loss/d mu, d loss/d log_sigma), all elementwise.
    """
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    r = np.asarray(y, dtype=float) - mu
    inv_var = np.exp(-2.0 * log_sigma)
    loss = 0.5 * r * r * inv_var + log_sigma + LOG_SQRT_2PI
    return loss, -r * inv_var, 1.0 - r * r * inv_var


def gaussian_head(out: np.ndarray):
    """Split a 2-column output into (mu, sigma)."""
    return out[:, 0], np.exp(out[:, 1])


def exp_head(out: np.ndarray) -> np.ndarray:
    return np.exp(out[:, 0])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. softmax probabilities to one w.r.t. logits."""
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    return np.exp(log_sigmoid(z))


# ------------------------------------------------------------ optimizers


class Optimizer:
    """First-order optimizer acting in place on one flat parameter vector."""

    def __init__(self, n_params: int, method: str = "adam", step_size: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {method!r}")
        if step_size <= 0:
            raise ValueError("step_size must be positive")
        self.method = method
        self.step_size = step_size
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params) if method == "adam" else None
        self.v = np.zeros(n_params) if method == "adam" else None

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if grads.shape != params.shape:
            raise DimensionMismatch(f"grad shape {grads.shape} != param shape {params.shape}")
        if not np.all(np.isfinite(grads)):
            bad = np.flatnonzero(~np.isfinite(grads))
            raise NonFiniteGradient(
                f"non-finite gradient at step {self.t + 1}: {bad.size} entries, first index {bad[0]}"
            )
        self.t += 1
        if self.method == "sgd":
            params -= self.step_size * grads
            return params
        b1, b2 = self.betas
        self.m *= b1
        self.m += (1 - b1) * grads
        self.v *= b2
        self.v += (1 - b2) * grads * grads
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        params -= self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)
        return params
