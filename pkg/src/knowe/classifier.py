"""Bias-free linear head with optional cosine normalization and per-session column blocks.

Columns are stored as ``W[:, i]`` (shape ``d x n_columns``). Block 0 holds the R
coarse columns, block t >= 1 the C columns added in session t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, NumericError, ShapeError
from .numerics import FLOAT, check_finite, log_softmax, softmax

ZERO_NORM = 1e-12


@dataclass
class ClassifierHead:
    W: np.ndarray
    frozen: np.ndarray
    blocks: list = field(default_factory=list)  # column count per block
    normalize: bool = True
    lam: float = 1.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=FLOAT)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        if not self.blocks:
            self.blocks = [self.W.shape[1]]
        if sum(self.blocks) != self.W.shape[1] or len(self.frozen) != self.W.shape[1]:
            raise ShapeError("blocks and frozen mask must cover every column")

    @classmethod
    def from_coarse(cls, coarse_W, normalize: bool, lam: float) -> "ClassifierHead":
        W = np.array(coarse_W, dtype=FLOAT)
        return cls(W, np.zeros(W.shape[1], dtype=bool), [W.shape[1]], normalize, lam)

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n_columns(self) -> int:
        return self.W.shape[1]

    @property
    def session_count(self) -> int:
        return len(self.blocks) - 1

    def block_slice(self, t: int) -> slice:
        if not 0 <= t < len(self.blocks):
            raise ShapeError(f"block {t} does not exist ({len(self.blocks)} blocks)")
        start = sum(self.blocks[:t])
        return slice(start, start + self.blocks[t])

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.W.copy(), self.frozen.copy(), list(self.blocks), self.normalize, self.lam)


@dataclass(frozen=True)
class InitSpec:
    kind: str = "gaussian"
    sigma: float | None = None  # None -> 1/sqrt(d)


def _column_norms(W):
    n = np.linalg.norm(W, axis=0)
    if np.any(n < ZERO_NORM):
        raise NumericError(f"zero-norm classifier column(s) {np.flatnonzero(n < ZERO_NORM).tolist()}")
    return n


def _row_norms(F):
    n = np.linalg.norm(F, axis=1)
    if np.any(n < ZERO_NORM):
        raise NumericError("zero feature vector under cosine normalization")
    return n


def raw_logits(W, F, normalize: bool) -> np.ndarray:
    F = np.atleast_2d(check_finite(F, "features"))
    if F.shape[1] != W.shape[0]:
        raise ShapeError(f"feature dim {F.shape[1]} != head dim {W.shape[0]}")
    # einsum keeps each entry's summation order independent of the column count,
    # so a column's logits do not shift when other columns are appended
    if not normalize:
        return np.einsum("nd,dk->nk", F, W)
    Wn = W / _column_norms(W)
    Fn = F / _row_norms(F)[:, None]
    return np.clip(np.einsum("nd,dk->nk", Fn, Wn), -1.0, 1.0)


def logits(head: ClassifierHead, f) -> np.ndarray:
    """Cosine logits in [-1, 1] when ``head.normalize``, plain ``w_i . f`` otherwise."""
    single = np.ndim(f) == 1
    out = raw_logits(head.W, f, head.normalize)
    return out[0] if single else out


def predict_proba(head: ClassifierHead, f) -> np.ndarray:
    return softmax(logits(head, f), head.lam)


def predict(head: ClassifierHead, F) -> np.ndarray:
    # np.argmax resolves ties to the lowest column index
    return np.argmax(logits(head, np.atleast_2d(F)), axis=1)


def augment(head: ClassifierHead, C: int, init_spec: InitSpec, rng: np.random.Generator) -> ClassifierHead:
    """Append a block of C fresh columns and freeze every earlier column."""
    new = init_columns(head.d, C, init_spec, rng)
    return ClassifierHead(
        np.concatenate([head.W, new], axis=1),
        np.concatenate([np.ones(head.n_columns, dtype=bool), np.zeros(C, dtype=bool)]),
        list(head.blocks) + [C],
        head.normalize,
        head.lam,
    )


def init_columns(d: int, C: int, init_spec: InitSpec, rng: np.random.Generator) -> np.ndarray:
    if init_spec.kind != "gaussian":
        raise ValueError(f"unknown init kind {init_spec.kind!r}")
    sigma = init_spec.sigma if init_spec.sigma is not None else 1.0 / np.sqrt(d)
    return rng.normal(0.0, sigma, size=(d, C))


def cross_entropy(W, F, targets, normalize: bool, lam: float = 1.0, trainable=None):
    """Mean softmax cross-entropy of ``logits / lam`` with gradients.

    Returns ``(loss, dW, dF)``. Under normalization the weight gradient is the
    projected form ``(I - w_hat w_hat^T) dL/dw_hat / |w|``; columns where
    ``trainable`` is False get an exactly zero gradient.
    """
    W = np.asarray(W, dtype=FLOAT)
    F = np.atleast_2d(np.asarray(F, dtype=FLOAT))
    targets = np.asarray(targets, dtype=np.int64)
    N = len(F)
    if normalize:
        wn = _column_norms(W)
        fn = _row_norms(F)
        Wh = W / wn
        Fh = F / fn[:, None]
        O = Fh @ Wh
    else:
        O = F @ W
    logp = log_softmax(O, lam)
    loss = -logp[np.arange(N), targets].mean()
    G = np.exp(logp)
    G[np.arange(N), targets] -= 1.0
    G /= N * lam
    if normalize:
        dWh = Fh.T @ G
        dW = (dWh - Wh * np.sum(Wh * dWh, axis=0)) / wn
        dFh = G @ Wh.T
        dF = (dFh - Fh * np.sum(Fh * dFh, axis=1, keepdims=True)) / fn[:, None]
    else:
        dW = F.T @ G
        dF = G @ W.T
    if trainable is not None:
        dW[:, ~np.asarray(trainable, dtype=bool)] = 0.0
    return float(loss), dW, dF


def normalized_weight_grad(head: ClassifierHead, F, targets) -> np.ndarray:
    """Gradient of the loss w.r.t. the unit columns w_hat, treated as free variables."""
    F = np.atleast_2d(np.asarray(F, dtype=FLOAT))
    targets = np.asarray(targets, dtype=np.int64)
    N = len(F)
    Wh = head.W / _column_norms(head.W)
    Fh = F / _row_norms(F)[:, None]
    G = softmax(Fh @ Wh, head.lam)
    G[np.arange(N), targets] -= 1.0
    G /= N * head.lam
    g = Fh.T @ G
    g[:, head.frozen] = 0.0
    return g


def support_loss_grad(head: ClassifierHead, F, labels, t: int):
    """Support-set loss of session t and its gradient w.r.t. W.

    ``labels`` are head column indices and must lie in block t. The softmax runs
    over every column; frozen columns receive a zero gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    sl = head.block_slice(t)
    if t == 0 or np.any((labels < sl.start) | (labels >= sl.stop)):
        raise LabelError(f"labels must lie in block {t} = columns [{sl.start}, {sl.stop})")
    loss, dW, _ = cross_entropy(head.W, F, labels, head.normalize, head.lam, ~head.frozen)
    return loss, dW


def frobenius_block_norm(head: ClassifierHead, t: int) -> float:
    return float(np.sqrt(np.sum(head.W[:, head.block_slice(t)] ** 2)))
