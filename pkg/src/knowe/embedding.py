"""MLP embedding with hand-written backprop and contrastive base-session training."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .classifier import cross_entropy, raw_logits
from .errors import ConfigError, ShapeError
from .numerics import FLOAT, Rng, check_finite, checksum

log = logging.getLogger(__name__)

Q_EPS = 1e-12


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 50
    tau: float = 0.2
    clip_norm: float | None = None  # rescale each step's gradients to this global L2 norm at most

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and weight_decay >= 0 required")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or None")


@dataclass
class EmbeddingNet:
    """Trunk ``[Linear -> ReLU] * L`` producing f, plus a one-hidden-layer projection head producing q.

    Inputs are standardized by the fixed ``input_mean`` / ``input_scale`` before the
    first layer. Weights are stored ``(fan_in, fan_out)`` and applied as ``x @ W + b``.
    """

    trunk: list  # [(W, b), ...]
    head: list  # [(W1, b1), (W2, b2)]
    input_mean: np.ndarray
    input_scale: np.ndarray
    frozen: bool = False

    @classmethod
    def create(
        cls,
        input_dim: int,
        rng: np.random.Generator,
        hidden=(64, 64),
        feature_dim: int = 32,
        proj_hidden: int = 64,
        proj_dim: int = 32,
        X_ref=None,
    ) -> "EmbeddingNet":
        dims = [input_dim, *hidden, feature_dim]
        trunk = [_he(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        head = [_he(rng, feature_dim, proj_hidden), _he(rng, proj_hidden, proj_dim)]
        if X_ref is not None and len(X_ref):
            X_ref = np.asarray(X_ref, dtype=FLOAT)
            mean = X_ref.mean(axis=0)
            scale = X_ref.std(axis=0)
            scale[scale < 1e-12] = 1.0
        else:
            mean, scale = np.zeros(input_dim), np.ones(input_dim)
        return cls(trunk, head, mean, scale)

    @property
    def input_dim(self) -> int:
        return self.trunk[0][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.trunk[-1][0].shape[1]

    def params(self) -> list:
        return [p for layer in self.trunk + self.head for p in layer]

    def trunk_params(self) -> list:
        return [p for layer in self.trunk for p in layer]

    def checksum(self) -> str:
        return checksum(self.params() + [self.input_mean, self.input_scale])

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(
            [(W.copy(), b.copy()) for W, b in self.trunk],
            [(W.copy(), b.copy()) for W, b in self.head],
            self.input_mean.copy(),
            self.input_scale.copy(),
            self.frozen,
        )

    def features(self, X) -> np.ndarray:
        h = self._standardize(X)
        for W, b in self.trunk:
            h = np.maximum(h @ W + b, 0.0)
        return h

    def project(self, F) -> np.ndarray:
        (W1, b1), (W2, b2) = self.head
        z = np.maximum(F @ W1 + b1, 0.0) @ W2 + b2
        n = np.linalg.norm(z, axis=-1, keepdims=True)
        return z / np.maximum(n, Q_EPS)

    def forward(self, x):
        """Return ``(f, q)``; q is unit-norm (or zero if the projection vanishes)."""
        single = np.ndim(x) == 1
        f = self.features(np.atleast_2d(x))
        q = self.project(f)
        return (f[0], q[0]) if single else (f, q)

    def forward_cache(self, X):
        """Batch forward keeping the activations needed by :meth:`backward`."""
        acts = [self._standardize(X)]
        for W, b in self.trunk:
            acts.append(np.maximum(acts[-1] @ W + b, 0.0))
        f = acts[-1]
        (W1, b1), (W2, b2) = self.head
        hid = np.maximum(f @ W1 + b1, 0.0)
        z = hid @ W2 + b2
        n = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), Q_EPS)
        q = z / n
        return f, q, (acts, hid, z, n, q)

    def backward(self, cache, dF=None, dQ=None) -> list:
        """Gradients for :meth:`params` given upstream gradients w.r.t. f and q."""
        acts, hid, z, n, q = cache
        (W1, b1), (W2, b2) = self.head
        B = len(acts[0])
        grads_head = [np.zeros_like(W1), np.zeros_like(b1), np.zeros_like(W2), np.zeros_like(b2)]
        g = np.zeros((B, self.feature_dim)) if dF is None else np.array(dF, dtype=FLOAT)
        if dQ is not None:
            dz = (dQ - q * np.sum(q * dQ, axis=1, keepdims=True)) / n
            grads_head[2] = hid.T @ dz
            grads_head[3] = dz.sum(axis=0)
            dh = (dz @ W2.T) * (hid > 0)
            grads_head[0] = acts[-1].T @ dh
            grads_head[1] = dh.sum(axis=0)
            g = g + dh @ W1.T
        grads_trunk = []
        for i in range(len(self.trunk) - 1, -1, -1):
            W, _ = self.trunk[i]
            g = g * (acts[i + 1] > 0)
            grads_trunk.append((acts[i].T @ g, g.sum(axis=0)))
            if i:
                g = g @ W.T
        out = []
        for gW, gb in reversed(grads_trunk):
            out += [gW, gb]
        return out + grads_head

    def _standardize(self, X):
        X = np.atleast_2d(check_finite(X, "input"))
        if X.shape[1] != self.input_dim:
            raise ShapeError(f"input dim {X.shape[1]} != net input dim {self.input_dim}")
        return (X - self.input_mean) / self.input_scale


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)


def info_nce(q, k_pos, k_negs, tau: float):
    """Single-sample contrastive term ``-log(e^{q.k+/tau} / (e^{q.k+/tau} + sum e^{q.k-/tau}))``.

    Returns ``(loss, dloss/dq)``.
    """
    q = np.asarray(q, dtype=FLOAT)
    K = np.vstack([np.asarray(k_pos, dtype=FLOAT)[None, :]] + [np.atleast_2d(k) for k in k_negs if len(k)])
    s = K @ q / tau
    s = s - s.max()
    p = np.exp(s) / np.exp(s).sum()
    loss = -np.log(p[0])
    dq = (p @ K - K[0]) / tau
    return float(loss), dq


def contrastive_loss(q, k, coarse, tau: float):
    """Batch contrastive loss summed over samples.

    For sample n the positive key is ``k[n]`` and the negatives are ``k[m]`` for
    every other batch member m of the same coarse class. Keys are treated as
    constants (stop-gradient). Returns ``(loss, dloss/dq)``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=FLOAT))
    k = np.atleast_2d(np.asarray(k, dtype=FLOAT))
    if len(q) == 0:
        raise ConfigError("empty contrastive batch")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    coarse = np.asarray(coarse)
    mask = coarse[:, None] == coarse[None, :]
    S = np.where(mask, q @ k.T / tau, -np.inf)
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    Z = E.sum(axis=1, keepdims=True)
    P = E / Z
    loss = float(np.sum(np.log(Z[:, 0]) - np.diag(S)))
    dq = (P @ k - k) / tau
    return loss, dq


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, params: list, opt: OptimConfig):
        self.params = params
        self.opt = opt
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list, trainable: list | None = None):
        sgd_step(self.params, grads, self.velocity, self.opt, trainable)


def sgd_step(params: list, grads: list, velocity: list, opt: OptimConfig, trainable=None) -> list:
    """In-place ``v <- m v + g + wd p ; p <- p - lr v``.

    ``trainable`` is an optional per-parameter mask (bool array broadcastable to the
    parameter, or a bool); masked entries keep both value and velocity untouched.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if opt.clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if total > opt.clip_norm:
            grads = [g * (opt.clip_norm / total) for g in grads]
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if p.shape != g.shape:
            raise ShapeError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        m = True if trainable is None else trainable[i]
        if m is False:
            continue
        new_v = opt.momentum * v + g + opt.weight_decay * p
        if m is True:
            v[...] = new_v
            p -= opt.lr * new_v
        else:
            m = np.broadcast_to(np.asarray(m, dtype=bool), p.shape)
            v[m] = new_v[m]
            p[m] -= opt.lr * new_v[m]
    return params


@dataclass
class BaseTraining:
    net: EmbeddingNet
    coarse_W: np.ndarray  # temporary coarse head, (d, R), bias-free
    loss_trace: list  # mean loss per epoch
    single_member_samples: int = 0


def train_base(
    net: EmbeddingNet,
    base_train,
    opt: OptimConfig,
    hierarchy,
    seed: int,
    contrastive: bool = True,
    view_sigma: float = 0.1,
    coarse_W=None,
    cosine_head: bool = True,
    lam: float = 0.5,
) -> BaseTraining:
    """Base-session training on coarse labels with ``L_con / B + CE_coarse``.

    Two views of each sample are formed by Gaussian jitter of scale ``view_sigma``.
    Queries come from the first view, keys from the second through the same network
    with gradients blocked. The coarse CE uses a temporary bias-free linear head,
    cosine-normalized with temperature ``lam`` unless ``cosine_head`` is False,
    trained jointly and returned for the caller to keep or drop.
    """
    rng = Rng(seed)
    d = net.feature_dim
    if coarse_W is None:
        coarse_W = rng.fork("init/coarse-head").normal(0.0, 1.0 / np.sqrt(d), size=(d, hierarchy.R))
    coarse_W = np.array(coarse_W, dtype=FLOAT)
    trace = []
    singles = 0
    if net.frozen or opt.epochs == 0:
        return BaseTraining(net, coarse_W, trace, 0)
    params = net.params() + [coarse_W]
    sgd = SGD(params, opt)
    shuffle = rng.fork("base/shuffle")
    views = rng.fork("base/views")
    X, y = base_train.X, base_train.coarse
    n = len(X)
    for _ in range(opt.epochs):
        perm = shuffle.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n, opt.batch_size):
            idx = perm[s:s + opt.batch_size]
            xb, yb = X[idx], y[idx]
            B = len(idx)
            v1 = xb + view_sigma * views.normal(size=xb.shape)
            v2 = xb + view_sigma * views.normal(size=xb.shape)
            f, q, cache = net.forward_cache(v1)
            loss, dWc, dF = cross_entropy(coarse_W, f, yb, cosine_head, lam if cosine_head else 1.0)
            dQ = None
            if contrastive:
                counts = np.bincount(yb, minlength=hierarchy.R)
                singles += int(np.sum(counts == 1))
                _, k = net.forward(v2)
                lc, dQ = contrastive_loss(q, k, yb, opt.tau)
                loss += lc / B
                dQ /= B
            grads = net.backward(cache, dF, dQ) + [dWc]
            sgd.step(grads)
            total += loss
            batches += 1
        trace.append(total / max(batches, 1))
    if singles:
        log.info("%d batch samples had no same-class negative; they contributed CE only", singles)
    return BaseTraining(net, coarse_W, trace, singles)


def nn_probe_accuracy(net: EmbeddingNet, X_train, y_train, X_test, y_test) -> float:
    """1-nearest-neighbour accuracy in feature space."""
    A = net.features(X_train)
    B = net.features(X_test)
    d2 = (B**2).sum(1)[:, None] - 2 * B @ A.T + (A**2).sum(1)[None, :]
    pred = np.asarray(y_train)[np.argmin(d2, axis=1)]
    return float(np.mean(pred == np.asarray(y_test)))


def coarse_head_accuracy(net: EmbeddingNet, coarse_W, X, y, cosine_head: bool = True) -> float:
    pred = np.argmax(raw_logits(coarse_W, net.features(X), cosine_head), axis=1)
    return float(np.mean(pred == np.asarray(y)))
