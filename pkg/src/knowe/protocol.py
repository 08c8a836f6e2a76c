"""Base session, incremental sessions, evaluation and whole-experiment orchestration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .classifier import ClassifierHead, InitSpec, augment, cross_entropy, frobenius_block_norm, init_columns, predict
from .data import SessionStream
from .embedding import SGD, EmbeddingNet, OptimConfig, coarse_head_accuracy, train_base
from .errors import ConfigError, LabelError, UndefinedMetric
from .numerics import Rng

MODES = ("knowe", "ft_baseline", "joint_upper_bound")


@dataclass(frozen=True)
class RunFlags:
    contrastive_base: bool = True
    freeze_embedding: bool = True
    normalize_weights: bool = True
    freeze_classifier: bool = True
    mode: str = "knowe"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "RunFlags":
        if mode == "ft_baseline":
            base = dict(contrastive_base=False, freeze_embedding=False, normalize_weights=False, freeze_classifier=False)
        else:
            base = {}
        base.update(overrides)
        return cls(mode=mode, **base)


@dataclass(frozen=True)
class Preset:
    name: str
    base: OptimConfig
    session: OptimConfig
    lam: float = 0.5
    hidden: tuple = (64, 64)
    feature_dim: int = 32
    proj_dim: int = 32
    view_sigma: float | None = None  # None -> a tenth of the mean per-feature spread of the base split


PRESETS = {
    "paper": Preset(
        "paper",
        base=OptimConfig(lr=0.12, momentum=0.9, weight_decay=5e-4, batch_size=256, epochs=200, tau=0.2),
        session=OptimConfig(lr=0.1, momentum=0.9, weight_decay=5e-4, batch_size=256, epochs=200, tau=0.2),
        lam=0.5,
    ),
    "desk": Preset(
        "desk",
        base=OptimConfig(lr=0.03, momentum=0.9, weight_decay=5e-4, batch_size=64, epochs=30, tau=0.2),
        session=OptimConfig(lr=0.1, momentum=0.9, weight_decay=5e-4, batch_size=64, epochs=50, tau=0.2, clip_norm=5.0),
        lam=0.5,
    ),
}


@dataclass
class Model:
    net: EmbeddingNet
    head: ClassifierHead
    flags: RunFlags
    seed: int
    t: int = 0
    base_coarse_accuracy: float | None = None

    def copy(self) -> "Model":
        return Model(self.net.copy(), self.head.copy(), self.flags, self.seed, self.t, self.base_coarse_accuracy)


@dataclass
class SessionReport:
    t: int
    A_c: float | None
    A_f: float | None
    A_t: float
    now_acc: float | None
    confusion: np.ndarray
    block_norms: list
    n_queries: int = 0


@dataclass
class ExperimentSummary:
    A_bar: float
    F: float | None
    F_f: dict
    F_c: dict
    A_t: list
    A_c: list
    A_f: list
    block_norms: list


@dataclass
class Experiment:
    reports: list
    summary: ExperimentSummary
    model: Model
    extras: dict = field(default_factory=dict)


def block_rng(seed: int, t: int) -> np.random.Generator:
    return Rng(seed).fork(f"head/block/{t}")


def block_init(seed: int, t: int, d: int, C: int) -> np.ndarray:
    """Initial columns of session block t; identical whenever the block is (re)created."""
    return init_columns(d, C, InitSpec(), block_rng(seed, t))


def view_sigma_for(preset: Preset, stream: SessionStream) -> float:
    if preset.view_sigma is not None:
        return preset.view_sigma
    return 0.1 * float(np.mean(stream.base_train.X.std(axis=0)))


def run_base_session(stream: SessionStream, flags: RunFlags, preset: Preset, seed: int) -> Model:
    rng = Rng(seed)
    ds = stream.base_train
    net = EmbeddingNet.create(
        ds.input_dim,
        rng.fork("init/embedding"),
        hidden=preset.hidden,
        feature_dim=preset.feature_dim,
        proj_dim=preset.proj_dim,
        X_ref=ds.X,
    )
    result = train_base(
        net,
        ds,
        preset.base,
        stream.hierarchy,
        seed,
        contrastive=flags.contrastive_base,
        view_sigma=view_sigma_for(preset, stream),
        lam=preset.lam,
    )
    acc = None
    if len(stream.base_test):
        acc = coarse_head_accuracy(net, result.coarse_W, stream.base_test.X, stream.base_test.coarse)
    model = Model(net, ClassifierHead.from_coarse(result.coarse_W, True, preset.lam), flags, seed, 0, acc)
    return configure(model, flags, preset)


def configure(model: Model, flags: RunFlags, preset: Preset) -> Model:
    """Copy of a base-session model set up for the given flags (head mode, embedding freeze).

    Base training does not depend on the normalization or freezing flags, so one
    base model can seed several variants.
    """
    if model.t != 0:
        raise ConfigError("only base-session models can be reconfigured")
    m = model.copy()
    m.flags = flags
    m.head.normalize = flags.normalize_weights
    m.head.lam = preset.lam if flags.normalize_weights else 1.0
    m.net.frozen = flags.freeze_embedding
    return m


def _column_labels(stream: SessionStream, fine_ids) -> np.ndarray:
    col = stream.fine_column()
    return np.array([col[int(f)] for f in fine_ids], dtype=np.int64)


def run_incremental_session(
    model: Model, stream: SessionStream, t: int, flags: RunFlags, preset: Preset, seed: int
) -> Model:
    """Train session t on its support set; mutates and returns ``model``."""
    if t != model.t + 1:
        raise ConfigError(f"session {t} cannot follow session {model.t}")
    C = stream.C
    head = augment(model.head, C, InitSpec(), block_rng(seed, t))
    if flags.mode == "joint_upper_bound":
        for u in range(1, t + 1):
            head.W[:, head.block_slice(u)] = block_init(seed, u, head.d, C)
        head.frozen[:] = False
        head.frozen[head.block_slice(0)] = flags.freeze_classifier
        X = np.concatenate([stream.supports[u].X for u in range(t)])
        y = _column_labels(stream, np.concatenate([stream.supports[u].fine for u in range(t)]))
    else:
        if not flags.freeze_classifier:
            head.frozen[:] = False
        X = stream.supports[t - 1].X
        y = _column_labels(stream, stream.supports[t - 1].fine)
        sl = head.block_slice(t)
        if np.any((y < sl.start) | (y >= sl.stop)):
            raise LabelError(f"support labels of session {t} fall outside block {t}")
    model.head = head
    _train_head(model, X, y, preset.session, Rng(seed).fork(f"session/{t}/shuffle"))
    model.t = t
    return model


def _train_head(model: Model, X, y, opt: OptimConfig, shuffle: np.random.Generator):
    net, head = model.net, model.head
    trainable = ~head.frozen
    head_sgd = SGD([head.W], opt)
    net_sgd = None if net.frozen else SGD(net.trunk_params(), opt)
    F_all = net.features(X) if net.frozen else None
    n = len(X)
    n_trunk = 2 * len(net.trunk)
    for _ in range(opt.epochs):
        perm = shuffle.permutation(n)
        for s in range(0, n, opt.batch_size):
            idx = perm[s:s + opt.batch_size]
            if net_sgd is None:
                F = F_all[idx]
            else:
                F, _, cache = net.forward_cache(X[idx])
            _, dW, dF = cross_entropy(head.W, F, y[idx], head.normalize, head.lam, trainable)
            head_sgd.step([dW], [trainable[None, :]])
            if net_sgd is not None:
                net_sgd.step(net.backward(cache, dF, None)[:n_trunk])


def evaluate(model: Model, stream: SessionStream, t: int) -> SessionReport:
    Q = stream.queries[t]
    if len(Q) == 0:
        raise ConfigError(f"query set of session {t} is empty")
    head = model.head
    pred = predict(head, model.net.features(Q.X))
    col = stream.fine_column()
    true = np.array(
        [col[int(lab)] if fine else int(lab) for lab, fine in zip(Q.label, Q.is_fine)], dtype=np.int64
    )
    correct = pred == true
    A_c = float(correct[~Q.is_fine].mean()) if np.any(~Q.is_fine) else None
    A_f = float(correct[Q.is_fine].mean()) if np.any(Q.is_fine) else None
    now_acc = None
    if t >= 1:
        now = Q.is_fine & np.isin(Q.label, stream.session_classes[t - 1])
        if now.any():
            now_acc = float(correct[now].mean())
    n = head.n_columns
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    norms = [frobenius_block_norm(head, u) for u in range(len(head.blocks))]
    return SessionReport(t, A_c, A_f, float(correct.mean()), now_acc, confusion, norms, len(Q))


def summarize(reports: list, stream: SessionStream) -> ExperimentSummary:
    A_t = [r.A_t for r in reports]
    A_c = [r.A_c for r in reports]
    A_f = [r.A_f for r in reports]
    series = metrics.MetricSeries(A_t, A_c, A_f, stream.cumulative_fine(), stream.hierarchy.N_f)
    try:
        F = metrics.overall_forgetting(series)
    except UndefinedMetric:
        F = None
    Ff, Fc = metrics.per_session_forgetting(series)
    return ExperimentSummary(
        A_bar=metrics.average_accuracy(A_t),
        F=F,
        F_f=Ff,
        F_c=Fc,
        A_t=A_t,
        A_c=A_c,
        A_f=A_f,
        block_norms=list(reports[-1].block_norms),
    )


def run_experiment(
    stream: SessionStream,
    flags: RunFlags,
    preset: Preset,
    seed: int,
    base: Model | None = None,
    on_session_end=None,
) -> Experiment:
    """Base session plus T incremental sessions, evaluated after each one.

    ``base`` may carry a pre-trained base-session model (trained with the same
    ``contrastive_base`` setting and seed); it is copied, never mutated.
    ``on_session_end(t, model)`` is called after each session's evaluation.
    """
    if base is None:
        model = run_base_session(stream, flags, preset, seed)
    else:
        model = configure(base, flags, preset)
    reports = [evaluate(model, stream, 0)]
    if on_session_end:
        on_session_end(0, model)
    for t in range(1, stream.T + 1):
        run_incremental_session(model, stream, t, flags, preset, seed)
        reports.append(evaluate(model, stream, t))
        if on_session_end:
            on_session_end(t, model)
    return Experiment(reports, summarize(reports, stream), model)


def with_epochs(preset: Preset, base_epochs: int | None = None, session_epochs: int | None = None) -> Preset:
    base = preset.base if base_epochs is None else replace(preset.base, epochs=base_epochs)
    session = preset.session if session_epochs is None else replace(preset.session, epochs=session_epochs)
    return replace(preset, base=base, session=session)
