"""Numeric checks of the stability / plasticity theory and the freezing ablation grid.

Variants used in the stability comparison (embedding frozen in all four):

    a  raw head,        unfrozen classifier
    b  normalized head, unfrozen classifier
    c  raw head,        frozen classifier
    d  normalized head, frozen classifier
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .classifier import ClassifierHead, cross_entropy, normalized_weight_grad, raw_logits
from .data import SessionStream
from .errors import ConfigError, UndefinedMetric
from .numerics import Rng
from .protocol import Preset, RunFlags, block_init, run_base_session, run_experiment

VARIANTS = {
    "a": dict(normalize_weights=False, freeze_classifier=False),
    "b": dict(normalize_weights=True, freeze_classifier=False),
    "c": dict(normalize_weights=False, freeze_classifier=True),
    "d": dict(normalize_weights=True, freeze_classifier=True),
}
LR_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
N_PROBES = 32
STATIONARY_TOL = 1e-9


def worker_count() -> int:
    """Parallel cells allowed by ``KNWE_THREADS`` (default 1)."""
    raw = os.environ.get("KNWE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KNWE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("KNWE_THREADS must be >= 1")
    return n


def parallel_map(fn, items, threads: int | None = None) -> list:
    items = list(items)
    threads = worker_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


# --- stability decay -------------------------------------------------------


@dataclass
class LogitTrace:
    """Logits of a fixed probe panel recorded at the end of every session.

    ``logits[t]`` has shape ``(n_probes, n_columns)``. With ``scheduled`` the
    column set is the final head's at every t, columns not created yet taking
    their scheduled initial values; otherwise only the ``n_existing[t]``
    columns present at t are recorded.
    """

    logits: list = field(default_factory=list)
    n_existing: list = field(default_factory=list)
    scheduled: bool = False

    @property
    def T(self) -> int:
        return len(self.logits) - 1


def decay_degree(o_t, o_T) -> float:
    """Sum over columns of the squared relative logit change from o_t to o_T."""
    o_t = np.asarray(o_t, dtype=float)
    o_T = np.asarray(o_T, dtype=float)
    if o_t.shape != o_T.shape:
        raise ConfigError(f"logit vectors differ in shape: {o_t.shape} vs {o_T.shape}")
    if np.any(o_t == 0):
        raise UndefinedMetric("zero logit in the denominator")
    return float(np.sum(((o_T - o_t) / o_t) ** 2))


@dataclass
class DecayResult:
    values: np.ndarray  # per probe, nan where undefined
    skipped: int

    @property
    def median(self) -> float:
        ok = self.values[~np.isnan(self.values)]
        return float(np.median(ok)) if len(ok) else float("nan")


def stability_decay(trace: LogitTrace, t: int = 0, T: int | None = None) -> DecayResult:
    """D between sessions t and T for every probe; probes with a zero logit are skipped."""
    T = trace.T if T is None else T
    if not 0 <= t <= T <= trace.T:
        raise ConfigError(f"need 0 <= t <= T <= {trace.T}, got t={t}, T={T}")
    cols = trace.logits[t].shape[1] if trace.scheduled else trace.n_existing[t]
    vals, skipped = [], 0
    for o_t, o_T in zip(trace.logits[t][:, :cols], trace.logits[T][:, :cols]):
        try:
            vals.append(decay_degree(o_t, o_T))
        except UndefinedMetric:
            vals.append(np.nan)
            skipped += 1
    return DecayResult(np.array(vals), skipped)


def probe_panel(stream: SessionStream, seed: int, n: int = N_PROBES) -> np.ndarray:
    X = stream.base_test.X
    idx = Rng(seed).fork("analysis/probes").choice(len(X), size=min(n, len(X)), replace=False)
    return X[np.sort(idx)]


def scheduled_weights(head: ClassifierHead, seed: int, T: int, C: int) -> np.ndarray:
    """Current columns followed by the initial columns of the blocks still to come."""
    blocks = [head.W] + [block_init(seed, u, head.d, C) for u in range(head.session_count + 1, T + 1)]
    return np.concatenate(blocks, axis=1)


def record_trace(
    stream: SessionStream, flags: RunFlags, preset: Preset, seed: int, probes, base=None, scheduled: bool = False
):
    """Run an experiment while recording probe logits after every session."""
    trace = LogitTrace(scheduled=scheduled)

    def hook(t, model):
        F = model.net.features(probes)
        W = scheduled_weights(model.head, seed, stream.T, stream.C) if scheduled else model.head.W
        trace.logits.append(raw_logits(W, F, model.head.normalize))
        trace.n_existing.append(model.head.n_columns)

    exp = run_experiment(stream, flags, preset, seed, base=base, on_session_end=hook)
    return trace, exp


@dataclass
class VariantReport:
    medians: dict  # variant -> median D pooled over seeds
    per_seed: list  # one dict variant -> median D per seed
    skipped: dict  # variant -> probes skipped for a zero logit
    seeds: list

    def seed_ordering(self) -> list:
        """Per seed: D_d below D_b and D_c, and D_a the largest of the four."""
        out = []
        for m in self.per_seed:
            out.append(m["d"] < m["b"] and m["d"] < m["c"] and m["a"] == max(m.values()))
        return out

    @property
    def chains(self) -> dict:
        m = self.medians
        return {
            "d<b<a": bool(m["d"] < m["b"] < m["a"]),
            "d<c<a": bool(m["d"] < m["c"] < m["a"]),
        }


def _variant_cell(args):
    stream, preset, seed, scheduled = args
    base = run_base_session(stream, RunFlags(), preset, seed)
    probes = probe_panel(stream, seed)
    medians, skipped, pooled = {}, {}, {}
    for name, over in VARIANTS.items():
        trace, _ = record_trace(stream, RunFlags(**over), preset, seed, probes, base=base, scheduled=scheduled)
        res = stability_decay(trace)
        medians[name] = res.median
        skipped[name] = res.skipped
        pooled[name] = res.values
    return medians, skipped, pooled


def compare_variants(streams: dict, preset: Preset, scheduled: bool = False, threads: int | None = None):
    """Stability decay of variants a-d, one stream per seed (``{seed: stream}``)."""
    if len(streams) < 5:
        raise ConfigError(f"compare_variants needs at least 5 seeds, got {len(streams)}")
    seeds = sorted(streams)
    cells = parallel_map(_variant_cell, [(streams[s], preset, s, scheduled) for s in seeds], threads)
    per_seed = [c[0] for c in cells]
    skipped = {v: sum(c[1][v] for c in cells) for v in VARIANTS}
    medians = {}
    for v in VARIANTS:
        vals = np.concatenate([c[2][v] for c in cells])
        vals = vals[~np.isnan(vals)]
        medians[v] = float(np.median(vals)) if len(vals) else float("nan")
    return VariantReport(medians, per_seed, skipped, seeds)


# --- plasticity --------------------------------------------------------------


@dataclass
class PlasticityReport:
    deltas: dict  # lr -> L(W - lr dW) - L(W)
    inner: float  # <dW, g>
    grad_norm: float

    @property
    def stationary(self) -> bool:
        return self.grad_norm < STATIONARY_TOL

    @property
    def largest_descent_lr(self) -> float | None:
        ok = [lr for lr, d in self.deltas.items() if d < 0]
        return max(ok) if ok else None


def plasticity_probe(head: ClassifierHead, F, targets, lr_grid=LR_GRID) -> PlasticityReport:
    """Loss change along the update direction of a normalized head.

    The update direction is the gradient of the loss w.r.t. the raw columns
    (the projected form); ``g`` is the gradient w.r.t. the unit columns.
    """
    if not head.normalize:
        raise ConfigError("plasticity_probe needs a normalized head")
    trainable = ~head.frozen
    loss, dW, _ = cross_entropy(head.W, F, targets, True, head.lam, trainable)
    g = normalized_weight_grad(head, F, targets)
    deltas = {}
    for lr in lr_grid:
        new, _, _ = cross_entropy(head.W - lr * dW, F, targets, True, head.lam, trainable)
        deltas[lr] = new - loss
    return PlasticityReport(deltas, float(np.sum(dW * g)), float(np.linalg.norm(dW)))


def random_plasticity_case(rng: np.random.Generator, d: int, R: int, C: int, K: int, T: int, lam: float):
    """A random normalized head at a random session plus a support-style batch."""
    t = int(rng.integers(1, T + 1))
    n = R + C * t
    W = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, n))
    frozen = np.ones(n, dtype=bool)
    frozen[n - C:] = False
    head = ClassifierHead(W, frozen, [R] + [C] * t, True, lam)
    # ReLU-like non-negative features
    F = np.abs(rng.normal(size=(C * K, d)))
    targets = np.repeat(np.arange(n - C, n), K)
    return head, F, targets


def plasticity_trials(n_trials: int, seed: int, d: int, R: int, C: int, K: int, T: int, lam: float = 0.5,
                      lr_grid=LR_GRID) -> list:
    rng = Rng(seed).fork("analysis/plasticity")
    return [plasticity_probe(*random_plasticity_case(rng, d, R, C, K, T, lam), lr_grid) for _ in range(n_trials)]


# --- weight growth -----------------------------------------------------------


@dataclass
class NormTrace:
    norms: list  # Frobenius norm of each new-class block, sessions 1..T
    outliers: list  # bool per block
    pairs: list  # (t-1, t, grew) for pairs with neither block an outlier

    @property
    def growth_fraction(self) -> float | None:
        return float(np.mean([g for _, _, g in self.pairs])) if self.pairs else None


def mad_outliers(values, k: float = 3.0) -> list:
    """Flag values further than k MADs from the running median of the values so far."""
    out = []
    for i, v in enumerate(values):
        seen = np.asarray(values[: i + 1], dtype=float)
        med = np.median(seen)
        mad = np.median(np.abs(seen - med))
        out.append(bool(mad > 0 and abs(v - med) > k * mad))
    return out


def weight_norm_trace(block_norms, k: float = 3.0) -> NormTrace:
    """Growth of new-class block norms; ``block_norms`` includes the coarse block 0."""
    norms = [float(x) for x in block_norms[1:]]
    bad = mad_outliers(norms, k)
    pairs = []
    for i in range(1, len(norms)):
        if not (bad[i - 1] or bad[i]):
            pairs.append((i, i + 1, norms[i] > norms[i - 1]))
    return NormTrace(norms, bad, pairs)


def pooled_growth(traces) -> float | None:
    pairs = [g for tr in traces for _, _, g in tr.pairs]
    return float(np.mean(pairs)) if pairs else None


# --- ablation grid -------------------------------------------------------------


@dataclass
class AblationCell:
    seed: int
    p: bool  # normalize
    q: bool  # freeze classifier
    e: bool  # freeze embedding
    A_bar: float
    F: float | None


TRUTH_ROWS = (
    # (p, q, r expected by the conjectures)
    (False, False, True),
    (True, True, False),
    (True, False, False),
    (False, True, False),
)


def _ablation_cell(args):
    stream, preset, seed = args
    base = run_base_session(stream, RunFlags(), preset, seed)
    cells = []
    for p, q, e in itertools.product((True, False), repeat=3):
        flags = RunFlags(normalize_weights=p, freeze_classifier=q, freeze_embedding=e)
        s = run_experiment(stream, flags, preset, seed, base=base).summary
        cells.append(AblationCell(seed, p, q, e, s.A_bar, s.F))
    return cells


def ablation_grid(streams: dict, preset: Preset, eps: float = 1.0, threads: int | None = None):
    """All 8 flag combinations per seed, the four-row truth table and the verdicts.

    r holds in a (p, q) cell when freezing the embedding raises the median
    (over seeds) of the paired difference in A_bar by more than ``eps`` points.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    seeds = sorted(streams)
    cells = [c for group in parallel_map(_ablation_cell, [(streams[s], preset, s) for s in seeds], threads)
             for c in group]
    return cells, truth_table(cells, eps)


def truth_table(cells, eps: float) -> dict:
    by = {(c.seed, c.p, c.q, c.e): c for c in cells}
    seeds = sorted({c.seed for c in cells})
    r = {}
    rows = []
    for p, q, expected in TRUTH_ROWS:
        deltas = [100 * (by[s, p, q, True].A_bar - by[s, p, q, False].A_bar) for s in seeds]
        delta = float(np.median(deltas))
        r[p, q] = delta > eps
        rows.append(dict(p=p, q=q, delta=delta, deltas=deltas, r=r[p, q], expected_r=expected,
                         agrees=r[p, q] == expected))
    c2 = r[False, False]
    c4 = not any(r[p, q] for p, q in r if p or q)
    c3 = all(r[p, q] == (not (p or q)) for p, q in r)
    return dict(
        eps=eps,
        rows=rows,
        verdicts=dict(c2=bool(c2), c3=bool(c3), c4=bool(c4), biconditional=bool(c2 and c4)),
    )


def rank_consistency(cells) -> float:
    """Spearman correlation of median A_bar against median F across flag configurations."""
    configs = sorted({(c.p, c.q, c.e) for c in cells})
    a, f = [], []
    for cfg in configs:
        sel = [c for c in cells if (c.p, c.q, c.e) == cfg and c.F is not None]
        if sel:
            a.append(np.median([c.A_bar for c in sel]))
            f.append(np.median([c.F for c in sel]))
    if len(a) < 3:
        raise UndefinedMetric("too few configurations with defined F")
    return float(spearmanr(a, f).statistic)
