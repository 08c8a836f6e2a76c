"""Label hierarchies, synthetic hierarchical Gaussians, feature-file I/O and session streams."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyError, FormatError, GenError
from .numerics import FLOAT, Rng

COARSE_POOL_RULES = ("until_first_refined", "until_all_refined")


@dataclass(frozen=True)
class Hierarchy:
    R: int
    children: dict  # coarse id -> tuple of fine ids

    def __post_init__(self):
        if self.R < 1 or sorted(self.children) != list(range(self.R)):
            raise ConfigError("children must be keyed by coarse ids 0..R-1")
        seen = [f for r in range(self.R) for f in self.children[r]]
        if any(len(self.children[r]) == 0 for r in range(self.R)):
            raise ConfigError("every coarse class needs at least one fine class")
        if sorted(seen) != list(range(len(seen))):
            raise ConfigError("fine ids must partition 0..N_f-1")

    @property
    def N_f(self) -> int:
        return sum(len(c) for c in self.children.values())

    @property
    def fine_to_coarse(self) -> np.ndarray:
        out = np.empty(self.N_f, dtype=np.int64)
        for r, kids in self.children.items():
            out[list(kids)] = r
        return out


def build_hierarchy(R: int, fine_per_coarse: int) -> Hierarchy:
    if R < 2 or fine_per_coarse < 2:
        raise ConfigError(f"need R >= 2 and fine_per_coarse >= 2, got ({R}, {fine_per_coarse})")
    children = {r: tuple(range(r * fine_per_coarse, (r + 1) * fine_per_coarse)) for r in range(R)}
    return Hierarchy(R, children)


@dataclass
class LabeledDataset:
    X: np.ndarray  # (n, input_dim)
    coarse: np.ndarray  # (n,) int
    fine: np.ndarray  # (n,) int
    hierarchy: Hierarchy
    fine_centers: np.ndarray | None = field(default=None, repr=False)
    coarse_centers: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=FLOAT)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        self.fine = np.asarray(self.fine, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.coarse) or len(self.X) != len(self.fine):
            raise FormatError("X must be (n, D) with one coarse and one fine id per row")
        if len(self.fine) and (self.fine.min() < 0 or self.fine.max() >= self.hierarchy.N_f):
            raise FormatError("fine id outside hierarchy")
        if len(self.fine) and np.any(self.hierarchy.fine_to_coarse[self.fine] != self.coarse):
            raise FormatError("coarse id disagrees with hierarchy")

    def __len__(self):
        return len(self.X)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.coarse[idx], self.fine[idx], self.hierarchy)

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.hierarchy == other.hierarchy
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.coarse, other.coarse)
            and np.array_equal(self.fine, other.fine)
        )


@dataclass(frozen=True)
class SyntheticParams:
    input_dim: int = 16
    coarse_sep: float = 10.0
    fine_sep: float = 2.0
    noise_sigma: float = 0.3
    n_per_fine: int = 60
    max_tries: int = 2000


def generate_synthetic(h: Hierarchy, params: SyntheticParams, seed: int) -> LabeledDataset:
    """Hierarchical Gaussian mixture.

    Coarse centers are rejection-sampled to be at least ``coarse_sep`` apart, each
    fine center sits at distance ``fine_sep`` from its parent in a random direction,
    and samples add isotropic noise of scale ``noise_sigma``.
    """
    p = params
    if not (p.coarse_sep > p.fine_sep > p.noise_sigma >= 0):
        raise ConfigError("need coarse_sep > fine_sep > noise_sigma >= 0")
    if p.input_dim < 1 or p.n_per_fine < 1:
        raise ConfigError("input_dim and n_per_fine must be positive")
    rng = Rng(seed).fork("data/synthetic")
    D = p.input_dim
    # typical pairwise distance of draws is ~1.5 * coarse_sep
    spread = 1.5 * p.coarse_sep / math.sqrt(2 * D)
    centers = []
    for r in range(h.R):
        for _ in range(p.max_tries):
            c = rng.normal(0.0, spread, size=D)
            if all(np.linalg.norm(c - o) >= p.coarse_sep for o in centers):
                centers.append(c)
                break
        else:
            raise GenError(
                f"could not place coarse center {r} at separation {p.coarse_sep} in dimension {D}"
            )
    coarse_centers = np.array(centers)
    fine_centers = np.empty((h.N_f, D))
    for r, kids in h.children.items():
        for f in kids:
            u = rng.normal(size=D)
            u /= np.linalg.norm(u)
            fine_centers[f] = coarse_centers[r] + p.fine_sep * u
    fine = np.repeat(np.arange(h.N_f), p.n_per_fine)
    X = fine_centers[fine] + p.noise_sigma * rng.normal(size=(len(fine), D))
    coarse = h.fine_to_coarse[fine]
    return LabeledDataset(X, coarse, fine, h, fine_centers=fine_centers, coarse_centers=coarse_centers)


def export_feature_file(ds: LabeledDataset, path) -> None:
    path = Path(path)
    header = ["coarse_id", "fine_id"] + [f"f{i}" for i in range(ds.input_dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, c, f in zip(ds.X, ds.coarse, ds.fine):
            w.writerow([int(c), int(f)] + [repr(float(v)) for v in x])


def load_feature_file(path) -> tuple[Hierarchy, LabeledDataset]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyError(f"{path}: empty file")
    header = rows[0]
    D = len(header) - 2
    expected = ["coarse_id", "fine_id"] + [f"f{i}" for i in range(D)]
    if D < 1 or header != expected:
        raise FormatError(f"{path}: bad header {header[:4]}...")
    body = [r for r in rows[1:] if r]
    if not body:
        raise EmptyError(f"{path}: header only, no samples")
    coarse_raw, fine_raw, X = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != D + 2:
            raise FormatError(f"{path}:{lineno}: expected {D + 2} fields, got {len(row)}")
        try:
            c, f = int(row[0]), int(row[1])
            x = [float(v) for v in row[2:]]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        if c < 0 or f < 0:
            raise FormatError(f"{path}:{lineno}: ids must be non-negative")
        coarse_raw.append(c)
        fine_raw.append(f)
        X.append(x)
    parent = {}
    for c, f in zip(coarse_raw, fine_raw):
        if parent.setdefault(f, c) != c:
            raise FormatError(f"{path}: fine id {f} appears under coarse ids {parent[f]} and {c}")
    cmap = {c: i for i, c in enumerate(sorted(set(coarse_raw)))}
    fmap = {f: i for i, f in enumerate(sorted(parent))}
    children = {cmap[c]: [] for c in cmap}
    for f in sorted(parent):
        children[cmap[parent[f]]].append(fmap[f])
    h = Hierarchy(len(cmap), {r: tuple(v) for r, v in children.items()})
    ds = LabeledDataset(
        np.array(X, dtype=FLOAT),
        [cmap[c] for c in coarse_raw],
        [fmap[f] for f in fine_raw],
        h,
    )
    return h, ds


@dataclass
class QuerySet:
    X: np.ndarray
    label: np.ndarray  # coarse id where is_fine is False, fine id otherwise
    is_fine: np.ndarray

    def __len__(self):
        return len(self.X)


@dataclass
class SupportSet:
    X: np.ndarray
    fine: np.ndarray

    def __len__(self):
        return len(self.X)


@dataclass
class SessionStream:
    hierarchy: Hierarchy
    base_train: LabeledDataset
    base_test: LabeledDataset
    session_classes: list  # session t (1-based) -> list of fine ids, stored at index t-1
    supports: list  # index t-1
    queries: list  # index t, t = 0..T
    coarse_pool: list  # index t -> coarse ids queried at coarse granularity
    C: int
    K: int
    H: int
    T: int

    @property
    def R(self) -> int:
        return self.hierarchy.R

    def fine_column(self) -> dict:
        """Head column of every fine class that appears in the stream."""
        out = {}
        for t, classes in enumerate(self.session_classes):
            for j, f in enumerate(classes):
                out[f] = self.R + self.C * t + j
        return out

    def seen_fine(self, t: int) -> list:
        return [f for s in self.session_classes[:t] for f in s]

    def cumulative_fine(self) -> list:
        """c_t: number of fine classes seen through session t, t = 1..T."""
        return [self.C * t for t in range(1, self.T + 1)]


@dataclass(frozen=True)
class StreamLayout:
    R: int
    fine_per_coarse: int
    C: int
    K: int
    H: int
    T: int


# "cifar" mirrors the small CIFAR-style tree; "desk" keeps several coarse classes
# unrefined until late sessions so coarse accuracy stays measurable through T-1
LAYOUTS = {
    "cifar": StreamLayout(R=5, fine_per_coarse=4, C=5, K=5, H=15, T=4),
    "desk": StreamLayout(R=12, fine_per_coarse=2, C=2, K=5, H=15, T=4),
}


def layout_stream(layout: StreamLayout, params: SyntheticParams, seed: int) -> SessionStream:
    """Synthetic dataset plus session stream for a named layout, both from one seed."""
    ds = generate_synthetic(build_hierarchy(layout.R, layout.fine_per_coarse), params, seed)
    return make_session_stream(ds, layout.C, layout.K, layout.H, layout.T, seed)


def make_session_stream(
    ds: LabeledDataset,
    C: int,
    K: int,
    H: int,
    T: int,
    seed: int,
    coarse_pool: str = "until_first_refined",
    base_holdout: float = 0.2,
) -> SessionStream:
    """Slice a dataset into a base split plus T C-way K-shot sessions with query sets.

    Every fine class reserves H query samples; scheduled classes also reserve K
    support samples. The remainder (coarse labels only) forms the base split,
    ``base_holdout`` of which is held out. Coarse-granularity queries for a coarse
    class are drawn from the query pools of its not-yet-seen children.

    ``coarse_pool`` selects when a coarse class stops being queried at coarse
    granularity: once the first of its children has appeared (default) or only
    once all of them have.
    """
    h = ds.hierarchy
    if coarse_pool not in COARSE_POOL_RULES:
        raise ConfigError(f"coarse_pool must be one of {COARSE_POOL_RULES}")
    if min(C, K, H) < 1 or T < 0:
        raise ConfigError("C, K, H must be positive and T non-negative")
    if T * C > h.N_f:
        raise ConfigError(f"T*C = {T * C} exceeds the {h.N_f} fine classes")
    if not 0.0 <= base_holdout < 1.0:
        raise ConfigError("base_holdout must lie in [0, 1)")
    root = Rng(seed)
    order = root.fork("stream/classes").permutation(h.N_f)
    session_classes = [sorted(int(f) for f in order[t * C:(t + 1) * C]) for t in range(T)]
    scheduled = {f for s in session_classes for f in s}

    split_rng = root.fork("stream/split")
    support_idx, query_idx, base_idx = {}, {}, []
    for f in range(h.N_f):
        idx = np.flatnonzero(ds.fine == f)
        need = H + (K if f in scheduled else 0)
        if len(idx) < need:
            raise ConfigError(f"fine class {f} has {len(idx)} samples, needs {need}")
        idx = split_rng.permutation(idx)
        query_idx[f] = np.sort(idx[:H])
        if f in scheduled:
            support_idx[f] = np.sort(idx[H:H + K])
            base_idx.extend(idx[H + K:])
        else:
            base_idx.extend(idx[H:])
    base_idx = split_rng.permutation(np.array(base_idx, dtype=np.int64))
    n_test = int(round(base_holdout * len(base_idx)))
    base_test = ds.subset(np.sort(base_idx[:n_test]))
    base_train = ds.subset(np.sort(base_idx[n_test:]))

    supports = []
    for classes in session_classes:
        idx = np.concatenate([support_idx[f] for f in classes])
        supports.append(SupportSet(ds.X[idx], ds.fine[idx]))

    queries, pools = [], []
    for t in range(T + 1):
        seen = set(f for s in session_classes[:t] for f in s)
        pool = []
        for r in range(h.R):
            kids = h.children[r]
            unseen = [f for f in kids if f not in seen]
            if coarse_pool == "until_all_refined":
                keep = len(unseen) > 0
            else:
                keep = len(unseen) == len(kids)
            if keep:
                pool.append(r)
        pools.append(pool)
        qrng = root.fork(f"stream/coarse-query/{t}")
        Xs, labels, fine_flag = [], [], []
        for r in pool:
            cand = np.concatenate([query_idx[f] for f in h.children[r] if f not in seen])
            pick = np.sort(qrng.choice(cand, size=min(H, len(cand)), replace=False))
            Xs.append(ds.X[pick])
            labels.append(np.full(len(pick), r))
            fine_flag.append(np.zeros(len(pick), dtype=bool))
        for s in session_classes[:t]:
            for f in s:
                Xs.append(ds.X[query_idx[f]])
                labels.append(np.full(H, f))
                fine_flag.append(np.ones(H, dtype=bool))
        if Xs:
            q = QuerySet(np.concatenate(Xs), np.concatenate(labels).astype(np.int64), np.concatenate(fine_flag))
        else:
            q = QuerySet(np.zeros((0, ds.input_dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool))
        queries.append(q)

    return SessionStream(
        hierarchy=h,
        base_train=base_train,
        base_test=base_test,
        session_classes=session_classes,
        supports=supports,
        queries=queries,
        coarse_pool=pools,
        C=C,
        K=K,
        H=H,
        T=T,
    )
