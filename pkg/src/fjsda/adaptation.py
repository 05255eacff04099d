"""Gaussian predictors trained on (reweighted) source data, with or without
an adversarial feature-alignment term, plus the weight estimators used by
the covariate-shift and label-shift baselines.

All methods share one trainer, :func:`train_adversarial`:

* source_only / target_only: unit weights, no adversary
* ssbc, bbsc: estimated weights, no adversary
* dann: unit weights, adversary
* iwdan: label-bin weights, adversary
* jiada: joint-importance weights U(x)V(y), adversary
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from . import nets
from .nets import MLP, MLPSpec, Optimizer, gaussian_nll_loss, log_sigmoid, softmax

log = logging.getLogger(__name__)

METHODS = ("source_only", "target_only", "ssbc", "bbsc", "dann", "iwdan", "jiada")
WEIGHT_CLIP = (1e-3, 1e3)


class NonFiniteLoss(FloatingPointError):
    pass


class DegenerateClassifier(UserWarning):
    pass


class SingularConfusion(UserWarning):
    pass


class DiscriminatorCollapse(UserWarning):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 128
    step_size: float = 1e-3
    optimizer: str = "adam"
    feature_dim: int = 16
    encoder_hidden: tuple = (64,)
    predictor_hidden: tuple = (64, 64)
    disc_hidden: tuple = (64, 64)
    activation: str = "tanh"
    lam: float = 1.0
    warmup_frac: float = 0.2
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:16]


@dataclass
class TrainedPredictor:
    encoder: MLP
    predictor: MLP
    provenance: dict = field(default_factory=dict)

    def __call__(self, x):
        return predict(self, x)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "predictor": self.predictor.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedPredictor":
        return cls(MLP.from_dict(d["encoder"]), MLP.from_dict(d["predictor"]), d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TrainedPredictor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict(model: TrainedPredictor, x):
    """Return (mu, sigma) arrays for the inputs x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = model.predictor(model.encoder(x))
    return out[:, 0], np.exp(out[:, 1])


def _batches(rng, n, batch_size):
    """Endless stream of index batches, reshuffled each epoch."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i:i + batch_size]


def _specs(cfg: TrainConfig):
    enc = MLPSpec(1, tuple(cfg.encoder_hidden), cfg.feature_dim, cfg.activation)
    pred = MLPSpec(cfg.feature_dim, tuple(cfg.predictor_hidden), 2, cfg.activation)
    disc = MLPSpec(cfg.feature_dim, tuple(cfg.disc_hidden), 1, cfg.activation)
    return enc, pred, disc


def train_adversarial(source_x, source_y, target_x, weights=None, lam: float = 1.0,
                      config: TrainConfig | None = None, method: str = "dann",
                      log_path=None) -> TrainedPredictor:
    """Importance-weighted domain-adversarial training of a Gaussian predictor.

    Per batch: one discriminator step on the weighted source / unweighted
    target classification loss, then one encoder+predictor step on the
    weighted NLL minus lam_t times that loss. lam_t ramps linearly to
    ``lam`` over the first ``warmup_frac`` of steps. With ``lam == 0`` the
    discriminator is skipped entirely.
    """
    cfg = config or TrainConfig()
    xs = np.asarray(source_x, dtype=float)
    ys = np.asarray(source_y, dtype=float)
    xt = np.asarray(target_x, dtype=float) if target_x is not None else None
    w = np.ones_like(xs) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != xs.shape:
        raise ValueError("one weight per source sample required")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    adversarial = lam > 0
    if adversarial and (xt is None or xt.size == 0):
        raise ValueError("adversarial training needs target inputs")

    rng = np.random.default_rng([cfg.seed, 17])
    enc_spec, pred_spec, disc_spec = _specs(cfg)
    E, F = MLP(enc_spec, rng=rng), MLP(pred_spec, rng=rng)
    D = MLP(disc_spec, rng=rng) if adversarial else None
    opt_ef = Optimizer(E.spec.n_params + F.spec.n_params, cfg.optimizer, cfg.step_size)
    theta = np.concatenate([E.params, F.params])
    E.params, F.params = theta[:E.spec.n_params], theta[E.spec.n_params:]
    opt_d = Optimizer(D.spec.n_params, cfg.optimizer, cfg.step_size) if adversarial else None

    bs = min(cfg.batch_size, xs.size)
    src_batches = _batches(rng, xs.size, bs)
    tgt_batches = _batches(rng, xt.size, min(cfg.batch_size, xt.size)) if adversarial else None
    warm = max(1, int(cfg.warmup_frac * cfg.steps))
    low_d, collapsed = 0, False
    logf = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.steps):
            bi = next(src_batches)
            xb, yb, wb = xs[bi], ys[bi], w[bi]
            hs, cache_es = E.forward(xb)
            lam_t = lam * min(1.0, (step + 1) / warm) if adversarial else 0.0
            loss_d = 0.0
            if adversarial:
                tb = next(tgt_batches)
                ht, cache_et = E.forward(xt[tb])
                loss_d, gd, _, _ = _disc_pass(D, hs, ht, wb)
                opt_d.step(D.params, gd)
                low_d = low_d + 1 if loss_d < 0.01 else 0
                if low_d >= 100 and not collapsed:
                    collapsed = True
                    warnings.warn(f"discriminator loss below 0.01 for 100 steps at step {step}",
                                  DiscriminatorCollapse, stacklevel=2)

            loss_pred, gF, dhs = prediction_pass(F, hs, yb, wb)
            if not np.isfinite(loss_pred) or not np.isfinite(loss_d):
                raise NonFiniteLoss(f"{method}: non-finite loss at step {step}")
            if adversarial:
                # encoder ascends the discriminator loss, D held at its new value
                _, _, dh_s, dh_t = _disc_pass(D, hs, ht, wb)
                dhs = dhs - lam_t * dh_s
                gE_t = E.backward(cache_et, -lam_t * dh_t)[0]
            else:
                gE_t = 0.0
            gE = E.backward(cache_es, dhs)[0] + gE_t
            opt_ef.step(theta, np.concatenate([gE, gF]))
            if logf is not None:
                logf.write(json.dumps({"step": step, "loss_pred": loss_pred,
                                       "loss_disc": float(loss_d), "lambda": lam_t}) + "\n")
    finally:
        if logf is not None:
            logf.close()

    E = MLP(E.spec, E.params.copy())
    F = MLP(F.spec, F.params.copy())
    prov = {"method": method, "seed": cfg.seed, "config_digest": cfg.digest(), "lam": lam}
    return TrainedPredictor(E, F, prov)


def prediction_pass(F: MLP, h, y, w):
    """Weighted mean Gaussian NLL of predictor F on features h.

    Returns (loss, grad wrt F params, grad wrt h).
    """
    out, cache = F.forward(h)
    nll, dmu, dls = gaussian_nll_loss(out[:, 0], out[:, 1], y)
    scale = w / len(y)
    gF, dh = F.backward(cache, np.stack([dmu * scale, dls * scale], axis=1))
    return float(np.mean(w * nll)), gF, dh


def _disc_pass(D: MLP, hs, ht, wb):
    """Weighted domain-classification loss; D(h) = P(source | h).

    Returns (loss, grad wrt D params, grad wrt source features, grad wrt
    target features).
    """
    zs, cs = D.forward(hs)
    zt, ct = D.forward(ht)
    loss = -(np.mean(wb * log_sigmoid(zs[:, 0])) + np.mean(log_sigmoid(-zt[:, 0])))
    gzs = (-wb * (1.0 - nets.sigmoid(zs[:, 0])) / len(hs))[:, None]
    gzt = (nets.sigmoid(zt[:, 0]) / len(ht))[:, None]
    gs, dh_s = D.backward(cs, gzs)
    gt, dh_t = D.backward(ct, gzt)
    return float(loss), gs + gt, dh_s, dh_t


def train_plain(x, y, config: TrainConfig | None = None, weights=None, method: str = "plain",
                log_path=None) -> TrainedPredictor:
    """Minimise the (optionally weighted) mean Gaussian NLL on one dataset."""
    return train_adversarial(x, y, None, weights=weights, lam=0.0, config=config,
                             method=method, log_path=log_path)


def gaussian_nll(model: TrainedPredictor, x, y) -> float:
    mu, sigma = predict(model, x)
    loss, _, _ = gaussian_nll_loss(mu, np.log(sigma), y)
    return float(np.mean(loss))


# ---------------------------------------------------------- weight estimators


@dataclass
class ClassifierConfig:
    hidden: tuple = (32,)
    steps: int = 1500
    step_size: float = 1e-2
    activation: str = "tanh"
    seed: int = 0


def _fit_classifier(x, labels, n_classes, cfg: ClassifierConfig) -> MLP:
    """Full-batch softmax regression with an MLP on 1-d inputs."""
    rng = np.random.default_rng([cfg.seed, 29])
    net = MLP(MLPSpec(1, tuple(cfg.hidden), n_classes, cfg.activation), rng=rng)
    opt = Optimizer(net.spec.n_params, "adam", cfg.step_size)
    onehot = np.eye(n_classes)[labels]
    for _ in range(cfg.steps):
        _, g = classifier_pass(net, x, onehot)
        opt.step(net.params, g)
    return net


def classifier_pass(net: MLP, x, onehot):
    """Mean softmax cross-entropy and its gradient wrt the net parameters."""
    z, cache = net.forward(x)
    zc = z - z.max(axis=1, keepdims=True)
    logp = zc - np.log(np.exp(zc).sum(axis=1, keepdims=True))
    loss = -np.mean(np.sum(onehot * logp, axis=1))
    g, _ = net.backward(cache, (softmax(z) - onehot) / len(x))
    return float(loss), g


def ssbc_weights(source_x, target_x, config: ClassifierConfig | None = None):
    """Covariate-shift weights D_T(x)/D_S(x) from a source-vs-target classifier.

    Trained on the pooled sample, so the odds are corrected by n_S/n_T.
    """
    cfg = config or ClassifierConfig()
    xs = np.asarray(source_x, dtype=float)
    xt = np.asarray(target_x, dtype=float)
    if xs.size == 0 or xt.size == 0:
        raise ValueError("both domains must be non-empty")
    x = np.concatenate([xs, xt])
    lab = np.concatenate([np.zeros(xs.size, int), np.ones(xt.size, int)])
    net = _fit_classifier(x, lab, 2, cfg)
    z = net(xs)
    log_odds = z[:, 1] - z[:, 0]
    w = np.exp(log_odds) * (xs.size / xt.size)
    w = np.clip(w, *WEIGHT_CLIP)
    if np.std(w) <= 1e-6 * np.mean(w):
        warnings.warn("domain classifier is constant; weights are uniform", DegenerateClassifier, stacklevel=2)
    return w


def label_bins(y, n_bins: int) -> np.ndarray:
    """Equal-width bins over [-1, 1]; bin 0 is the lowest."""
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    return np.clip(np.searchsorted(edges, np.asarray(y), side="right") - 1, 0, n_bins - 1)


def solve_label_importance(confusion, target_pred, source_prior=None):
    """Solve C r = mu for per-bin importance r.

    ``confusion[i, j]`` is the source joint probability of (predicted i,
    true j). Negative components are set to 0 and r is rescaled so that
    sum_j source_prior[j] r[j] = 1.
    """
    C = np.asarray(confusion, dtype=float)
    mu = np.asarray(target_pred, dtype=float)
    if source_prior is None:
        source_prior = C.sum(axis=0)
    if np.linalg.matrix_rank(C) < C.shape[0] or np.linalg.cond(C) > 1e12:
        warnings.warn("confusion matrix is singular; using nonnegative least squares",
                      SingularConfusion, stacklevel=2)
        r, _ = nnls(C, mu)
    else:
        r = np.linalg.solve(C, mu)
    r = np.maximum(r, 0.0)
    mass = float(np.dot(source_prior, r))
    if mass > 0:
        r = r / mass
    return r


def bbsc_weights(source_x, source_y, target_x, n_bins: int = 2, config: ClassifierConfig | None = None):
    """Black-box label-shift weights over ``n_bins`` label bins.

    Returns (per-sample weights, per-bin importance r).
    """
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    cfg = config or ClassifierConfig()
    xs = np.asarray(source_x, dtype=float)
    xt = np.asarray(target_x, dtype=float)
    bins = label_bins(source_y, n_bins)
    net = _fit_classifier(xs, bins, n_bins, cfg)
    pred_s = np.argmax(net(xs), axis=1)
    pred_t = np.argmax(net(xt), axis=1)
    C = np.zeros((n_bins, n_bins))
    np.add.at(C, (pred_s, bins), 1.0)
    C /= xs.size
    mu = np.bincount(pred_t, minlength=n_bins) / xt.size
    r = solve_label_importance(C, mu)
    return np.clip(r[bins], *WEIGHT_CLIP), r
