"""Joint importance estimation: learn U(x) and V(y) with U(x)V(y) ~ D_T(x,y)/D_S(x,y).

Both objectives have the form E_S log(1 + r) + E_T log(1 + 1/r), minimised
at r = dT/dS. ``l_sup`` uses r = U(x)V(y) on labeled target data;
``l_unsup`` uses r = U(x)Vt(x) where Vt(x) averages V over labels drawn
from a source conditional model at x.

U is a softmax classifier over K sub-domains times K positive scores,
which keeps U close to piecewise constant.

Discrete counterparts (``discrete_*``) operate on finite joint tables and
serve as exact checks of the population-level claims.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .adaptation import (ClassifierConfig, NonFiniteLoss, TrainConfig, TrainedPredictor, _fit_classifier,
                         label_bins, predict, train_plain)
from .nets import MLP, MLPSpec, Optimizer, softmax, softmax_backward

R_FLOOR = 1e-12
TINY = 1e-300  # keeps d/dU finite when U underflows
WEIGHT_CLIP = (1e-3, 1e3)


@dataclass
class ImportanceConfig:
    K: int = 2
    c_hidden: tuple = (32,)
    v_hidden: tuple = (32,)
    activation: str = "tanh"
    steps: int = 3000
    batch_size: int = 128
    step_size: float = 1e-2
    mc_samples: int = 16
    conditional: str = "binned"
    n_bins: int = 20
    entropy_weight: float = 0.0
    seed: int = 0


class UModel:
    """U(x) = sum_k exp(log_scores[k]) * softmax(C(x))[k]."""

    def __init__(self, C: MLP, log_scores):
        self.C = C
        self.log_scores = np.asarray(log_scores, dtype=float)

    @classmethod
    def init(cls, K: int, hidden=(32,), activation="tanh", rng=None):
        if K < 1:
            raise ValueError("K must be >= 1")
        rng = np.random.default_rng(rng)
        C = MLP(MLPSpec(1, tuple(hidden), K, activation), rng=rng)
        return cls(C, np.zeros(K))

    @property
    def K(self) -> int:
        return self.log_scores.size

    def assignments(self, x) -> np.ndarray:
        return softmax(self.C(x))

    def __call__(self, x) -> np.ndarray:
        return self.assignments(x) @ np.exp(self.log_scores)

    def forward(self, x):
        z, cache = self.C.forward(x)
        p = softmax(z)
        S = np.exp(self.log_scores)
        return p @ S, (cache, p, S)

    def backward(self, state, dU):
        """Gradients (C params, log_scores) of sum(dU * U)."""
        cache, p, S = state
        g_scores = (dU[:, None] * p).sum(axis=0) * S
        dz = softmax_backward(p, dU[:, None] * S[None, :])
        return self.C.backward(cache, dz)[0], g_scores

    def to_dict(self):
        return {"C": self.C.to_dict(), "log_scores": self.log_scores.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(MLP.from_dict(d["C"]), d["log_scores"])


class VModel:
    """V(y) = exp(net(y))."""

    def __init__(self, net: MLP):
        self.net = net

    @classmethod
    def init(cls, hidden=(32,), activation="tanh", rng=None):
        return cls(MLP(MLPSpec(1, tuple(hidden), 1, activation), rng=np.random.default_rng(rng)))

    def __call__(self, y) -> np.ndarray:
        return np.exp(self.net(np.ravel(y))[:, 0]).reshape(np.shape(y))

    def forward(self, y):
        out, cache = self.net.forward(np.ravel(y))
        return np.exp(out[:, 0]), cache

    def backward(self, cache, V, dV):
        return self.net.backward(cache, (dV * V)[:, None])[0]

    def fold_scale(self, k: float) -> None:
        """Multiply V by k through the output bias."""
        self.net.output_bias()[0] += math.log(k)

    def to_dict(self):
        return {"net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(MLP.from_dict(d["net"]))


class GaussianConditional:
    """Source conditional y | x ~ N(mu(x), sigma(x)) from a trained predictor."""

    def __init__(self, model: TrainedPredictor):
        self.model = model

    @classmethod
    def fit(cls, x, y, config: TrainConfig | None = None, seed: int = 0):
        return cls(train_plain(x, y, config or TrainConfig(seed=seed), method="source_conditional"))

    def sample(self, x, M: int, rng) -> np.ndarray:
        mu, sigma = predict(self.model, x)
        return mu[:, None] + sigma[:, None] * rng.standard_normal((x.size, M))


class BinnedConditional:
    """Source conditional as a softmax over equal-width label bins on [-1, 1].

    Sampling picks a bin by stratified inverse-CDF draws, then a uniform
    point inside it. Unlike a Gaussian, this can represent a density jump.
    """

    def __init__(self, net: MLP, n_bins: int):
        self.net = net
        self.n_bins = n_bins

    @classmethod
    def fit(cls, x, y, n_bins: int = 20, config: ClassifierConfig | None = None, seed: int = 0):
        cfg = config or ClassifierConfig(seed=seed, steps=2000)
        return cls(_fit_classifier(np.asarray(x, float), label_bins(y, n_bins), n_bins, cfg), n_bins)

    def probs(self, x) -> np.ndarray:
        return softmax(self.net(np.atleast_1d(np.asarray(x, float))))

    def sample(self, x, M: int, rng) -> np.ndarray:
        cdf = np.cumsum(self.probs(x), axis=1)
        u = (np.arange(M) + rng.random((x.size, M))) / M
        b = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(axis=2), self.n_bins - 1)
        return -1.0 + (b + rng.random((x.size, M))) * (2.0 / self.n_bins)


class VTildeEstimator:
    """Monte-Carlo Vt(x) = mean_m V(y_m), y_m drawn from a source conditional at x.

    The draws for a given input array are fixed by ``seed`` and ``stream``,
    so repeated calls on the same inputs see the same label samples.
    """

    def __init__(self, conditional, mc_samples: int = 16, seed: int = 0):
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if isinstance(conditional, TrainedPredictor):
            conditional = GaussianConditional(conditional)
        self.conditional = conditional
        self.M = mc_samples
        self.seed = seed

    def label_samples(self, x, stream: int = 0) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.conditional.sample(x, self.M, np.random.default_rng([self.seed, stream]))

    def __call__(self, V: VModel, x, stream: int = 0) -> np.ndarray:
        return V(self.label_samples(x, stream)).mean(axis=1)


@dataclass
class FittedImportance:
    U: UModel
    V: VModel

    def __call__(self, x, y) -> np.ndarray:
        return self.U(x) * self.V(y)

    def weights(self, x, y) -> np.ndarray:
        return np.clip(self(x, y), *WEIGHT_CLIP)

    def to_dict(self):
        return {"U": self.U.to_dict(), "V": self.V.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(UModel.from_dict(d["U"]), VModel.from_dict(d["V"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _normalized(w, n):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=float)
    return w / w.sum()


def _ratio_terms(r_s, r_t, ws, wt):
    """Loss and d loss / d log r for both sides."""
    if not (np.all(np.isfinite(r_s)) and np.all(np.isfinite(r_t))):
        raise NonFiniteLoss("non-finite importance ratio")
    rt = np.maximum(r_t, R_FLOOR)
    loss = float(np.dot(ws, np.log1p(r_s)) + np.dot(wt, np.log1p(1.0 / rt)))
    if not math.isfinite(loss):
        raise NonFiniteLoss("non-finite JIA loss")
    g_s = ws * r_s / (1.0 + r_s)
    g_t = -wt / (1.0 + rt)
    return loss, g_s, g_t


def _entropy_penalty(p, weight, n_total):
    """Mean assignment entropy of C and its gradient w.r.t. the probabilities."""
    if weight == 0:
        return 0.0, None
    lp = np.log(np.maximum(p, 1e-300))
    ent = -np.sum(p * lp) / n_total
    return weight * ent, -weight * (lp + 1.0) / n_total


def l_sup(U: UModel, V: VModel, xs, ys, xt, yt, ws=None, wt=None, entropy_weight: float = 0.0):
    """Supervised JIA loss and gradients.

    Returns (loss, grads) with grads = (C params, log_scores, V params).
    Optional per-sample weights turn each batch into a weighted sample.
    """
    xs, ys, xt, yt = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (xs, ys, xt, yt))
    if xs.size == 0 or xt.size == 0:
        raise ValueError("both batches must be non-empty")
    ws, wt = _normalized(ws, xs.size), _normalized(wt, xt.size)
    x = np.concatenate([xs, xt])
    u, ustate = U.forward(x)
    v, vcache = V.forward(np.concatenate([ys, yt]))
    r = u * v
    ns = xs.size
    loss, g_s, g_t = _ratio_terms(r[:ns], r[ns:], ws, wt)
    g_logr = np.concatenate([g_s, g_t])
    ent, dp = _entropy_penalty(ustate[1], entropy_weight, x.size)
    gC, gS = U.backward(ustate, g_logr / np.maximum(u, TINY))
    if dp is not None:
        gC = gC + U.C.backward(ustate[0], softmax_backward(ustate[1], dp))[0]
    gV = V.backward(vcache, v, g_logr / np.maximum(v, TINY))
    return loss + ent, (gC, gS, gV)


def l_unsup(U: UModel, V: VModel, xs, xt, ys_samples, yt_samples, ws=None, wt=None,
            entropy_weight: float = 0.0):
    """Unsupervised JIA loss with Vt(x) from fixed label samples of shape (n, M).

    Gradients reach V through V(y_m).
    """
    xs, xt = np.atleast_1d(np.asarray(xs, float)), np.atleast_1d(np.asarray(xt, float))
    ys_samples = np.asarray(ys_samples, float).reshape(xs.size, -1)
    yt_samples = np.asarray(yt_samples, float).reshape(xt.size, -1)
    if xs.size == 0 or xt.size == 0:
        raise ValueError("both batches must be non-empty")
    ws, wt = _normalized(ws, xs.size), _normalized(wt, xt.size)
    x = np.concatenate([xs, xt])
    samples = np.concatenate([ys_samples, yt_samples])
    n, M = samples.shape
    u, ustate = U.forward(x)
    vflat, vcache = V.forward(samples)
    vt = vflat.reshape(n, M).mean(axis=1)
    r = u * vt
    ns = xs.size
    loss, g_s, g_t = _ratio_terms(r[:ns], r[ns:], ws, wt)
    g_logr = np.concatenate([g_s, g_t])
    ent, dp = _entropy_penalty(ustate[1], entropy_weight, n)
    gC, gS = U.backward(ustate, g_logr / np.maximum(u, TINY))
    if dp is not None:
        gC = gC + U.C.backward(ustate[0], softmax_backward(ustate[1], dp))[0]
    dv = np.repeat(g_logr / np.maximum(vt, TINY) / M, M)
    gV = V.backward(vcache, vflat, dv)
    return loss + ent, (gC, gS, gV)


def normalize_factors(U: UModel, V: VModel, source_x, source_y) -> float:
    """Rescale V so the source mean of U(x)V(y) is 1. Returns the factor applied."""
    m = float(np.mean(U(source_x) * V(source_y)))
    if not (m > 0 and math.isfinite(m)):
        raise NonFiniteLoss(f"cannot normalize: source mean of U*V is {m!r}")
    V.fold_scale(1.0 / m)
    return 1.0 / m


def _bind(U: UModel, V: VModel):
    """Concatenate all parameters into one vector that U and V view into."""
    theta = np.concatenate([U.C.params, U.log_scores, V.net.params])
    a = U.C.spec.n_params
    b = a + U.K
    U.C.params, U.log_scores, V.net.params = theta[:a], theta[a:b], theta[b:]
    return theta


def _init_models(cfg: ImportanceConfig, init):
    if init is not None:
        U, V = init
        return UModel(U.C.copy(), U.log_scores.copy()), VModel(V.net.copy())
    rng = np.random.default_rng([cfg.seed, 41])
    return (UModel.init(cfg.K, cfg.c_hidden, cfg.activation, rng),
            VModel.init(cfg.v_hidden, cfg.activation, rng))


def _sgd_loop(cfg, U, V, n_s, n_t, loss_fn):
    theta = _bind(U, V)
    opt = Optimizer(theta.size, "adam", cfg.step_size)
    rng = np.random.default_rng([cfg.seed, 43])
    for step in range(cfg.steps):
        bs = rng.integers(0, n_s, size=min(cfg.batch_size, n_s))
        bt = rng.integers(0, n_t, size=min(cfg.batch_size, n_t))
        loss, (gC, gS, gV) = loss_fn(bs, bt)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"JIA loss non-finite at step {step}")
        opt.step(theta, np.concatenate([gC, gS, gV]))
    # detach the views
    return UModel(U.C.copy(), U.log_scores.copy()), VModel(V.net.copy())


def fit_supervised(source_x, source_y, target_x, target_y, config: ImportanceConfig | None = None,
                   init=None) -> FittedImportance:
    cfg = config or ImportanceConfig()
    xs, ys = np.asarray(source_x, float), np.asarray(source_y, float)
    xt, yt = np.asarray(target_x, float), np.asarray(target_y, float)
    U, V = _init_models(cfg, init)

    def loss_fn(bs, bt):
        return l_sup(U, V, xs[bs], ys[bs], xt[bt], yt[bt], entropy_weight=cfg.entropy_weight)

    U, V = _sgd_loop(cfg, U, V, xs.size, xt.size, loss_fn)
    normalize_factors(U, V, xs, ys)
    return FittedImportance(U, V)


def fit_source_conditional(x, y, config: ImportanceConfig):
    if config.conditional == "binned":
        return BinnedConditional.fit(x, y, config.n_bins, seed=config.seed)
    if config.conditional == "gaussian":
        return GaussianConditional.fit(x, y, seed=config.seed)
    raise ValueError(f"unknown conditional {config.conditional!r}")


def fit_unsupervised(source_x, source_y, target_x, config: ImportanceConfig | None = None,
                     conditional=None, init=None) -> FittedImportance:
    """Two stages: a source conditional (unless given), then l_unsup over (U, V)."""
    cfg = config or ImportanceConfig()
    xs, ys = np.asarray(source_x, float), np.asarray(source_y, float)
    xt = np.asarray(target_x, float)
    if conditional is None:
        conditional = fit_source_conditional(xs, ys, cfg)
    vt = VTildeEstimator(conditional, cfg.mc_samples, cfg.seed)
    ys_m = vt.label_samples(xs, stream=0)
    yt_m = vt.label_samples(xt, stream=1)
    U, V = _init_models(cfg, init)

    def loss_fn(bs, bt):
        return l_unsup(U, V, xs[bs], xt[bt], ys_m[bs], yt_m[bt], entropy_weight=cfg.entropy_weight)

    U, V = _sgd_loop(cfg, U, V, xs.size, xt.size, loss_fn)
    normalize_factors(U, V, xs, ys)
    return FittedImportance(U, V)


def quadrant_products(fitted: FittedImportance, x, y) -> np.ndarray:
    """Mean of U(x)V(y) over the samples falling in each quadrant (++, +-, -+, --)."""
    from .toy import quadrant_index

    q = quadrant_index(x, y)
    w = fitted(x, y)
    return np.array([w[q == k].mean() if np.any(q == k) else np.nan for k in range(4)])


# ------------------------------------------------------- discrete versions


def discrete_l_sup(log_u, log_v, ps, pt) -> float:
    """Population l_sup on finite joint tables with U, V given by log factors."""
    r = np.exp(np.add.outer(log_u, log_v))
    a, b = ps > 0, pt > 0
    return float(np.sum(ps[a] * np.log1p(r[a])) + np.sum(pt[b] * np.log1p(1.0 / r[b])))


def discrete_l_unsup(log_u, log_v, ps, pt) -> float:
    """Population l_unsup with Vt(x) = sum_y D_S(y|x) V(y)."""
    px_s, px_t = ps.sum(axis=1), pt.sum(axis=1)
    live = px_s > 0
    vt = np.zeros_like(px_s)
    vt[live] = (ps[live] @ np.exp(log_v)) / px_s[live]
    r = np.exp(log_u) * vt
    b = px_t > 0
    return float(np.sum(px_s[live] * np.log1p(r[live])) + np.sum(px_t[b] * np.log1p(1.0 / r[b])))


def _grad_sup(theta, ps, pt, nx):
    lu, lv = theta[:nx], theta[nx:]
    r = np.exp(np.add.outer(lu, lv))
    g = ps * r / (1 + r) - pt / (1 + r)
    return discrete_l_sup(lu, lv, ps, pt), np.concatenate([g.sum(axis=1), g.sum(axis=0)])


def _grad_unsup(theta, ps, pt, nx):
    lu, lv = theta[:nx], theta[nx:]
    px_s, px_t = ps.sum(axis=1), pt.sum(axis=1)
    V = np.exp(lv)
    vt = (ps @ V) / px_s
    r = np.exp(lu) * vt
    g_logr = px_s * r / (1 + r) - px_t / (1 + r)
    g_v = ((g_logr / vt / px_s)[:, None] * ps).sum(axis=0) * V
    return discrete_l_unsup(lu, lv, ps, pt), np.concatenate([g_logr, g_v])


def fit_discrete(ps, pt, objective: str = "sup", x0=None):
    """Minimise a discrete JIA objective over log factors with L-BFGS.

    Tables must have full source support. Returns (u, v, loss).
    """
    ps, pt = np.asarray(ps, float), np.asarray(pt, float)
    nx, ny = ps.shape
    fn = {"sup": _grad_sup, "unsup": _grad_unsup}[objective]
    x0 = np.zeros(nx + ny) if x0 is None else np.asarray(x0, float)
    res = minimize(fn, x0, args=(ps, pt, nx), jac=True, method="L-BFGS-B",
                   options={"maxiter": 10000, "ftol": 1e-15, "gtol": 1e-12})
    return np.exp(res.x[:nx]), np.exp(res.x[nx:]), float(res.fun)
