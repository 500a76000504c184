"""Euclidean k-means: k-means++ seeding, Lloyd iterations, assignment and
nearest-to-center retrieval.

Determinism rules:

* ties always go to the lowest index (center or sample);
* squared distances are computed row by row in fixed-size chunks, so the
  thread count never changes any value;
* cluster means and the inertia use ``math.fsum`` (exactly rounded), which
  makes them independent of sample order.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import BadMagicError, FeatureMatrix, LabelVector, _read_exact
from .rng import Rng

CBK_MAGIC = b"CB1\x00"
_CHUNK = 512


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 2000
    max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0
    n_init: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")


@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray
    inertia: float = 0.0
    n_iters_run: int = 0
    converged: bool = False
    inertia_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centers must be a non-empty 2-D array")
        if not np.all(np.isfinite(c)):
            raise ValueError("centers must be finite")
        if self.inertia < 0:
            raise ValueError("inertia must be >= 0")
        c.flags.writeable = False
        object.__setattr__(self, "centers", c)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def n_dims(self) -> int:
        return self.centers.shape[1]


def _as_array(X) -> np.ndarray:
    return X.data if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)


def default_threads() -> int:
    env = os.environ.get("CT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _sq_dists_chunk(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(X: np.ndarray, centers: np.ndarray, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Labels (lowest index on ties) and squared distance to the chosen center."""
    n = X.shape[0]
    # keep the n*k*d temporary bounded
    step = max(1, min(_CHUNK, (1 << 22) // max(1, centers.shape[0] * X.shape[1])))
    bounds = [(s, min(n, s + step)) for s in range(0, n, step)]

    def work(b):
        d2 = _sq_dists_chunk(X[b[0]:b[1]], centers)
        lab = np.argmin(d2, axis=1)
        return lab, d2[np.arange(len(lab)), lab]

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    labels = np.concatenate([p[0] for p in parts])
    d2 = np.concatenate([p[1] for p in parts])
    return labels, d2


def kmeanspp_init(X, cfg: KMeansConfig, rng: Rng) -> Codebook:
    """k-means++ seeding: first center uniform, the rest by D^2 sampling.

    If every remaining point coincides with a chosen center (total D^2 is 0),
    a uniform point that differs from all centers is sought for up to
    ``n_samples`` draws; after that a duplicate center is accepted.
    """
    X = _as_array(X)
    n = X.shape[0]
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds n_samples={n}")
    chosen = [rng.below(n)]
    d2 = _sq_dists_chunk(X, X[chosen[0]][None, :])[:, 0]
    for _ in range(1, cfg.k):
        total = math.fsum(d2)
        if total > 0:
            cum = np.cumsum(d2)
            u = rng.uniform() * cum[-1]
            idx = int(np.searchsorted(cum, u, side="right"))
            idx = min(idx, n - 1)
            while d2[idx] == 0:  # float edge at the top of the cumulative sum
                idx -= 1
        else:
            idx = rng.below(n)
            for _retry in range(n):
                if not any(np.array_equal(X[idx], X[c]) for c in chosen):
                    break
                idx = rng.below(n)
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists_chunk(X, X[idx][None, :])[:, 0])
    return Codebook(X[chosen].copy())


def _cluster_means(X: np.ndarray, labels: np.ndarray, old: np.ndarray) -> tuple[np.ndarray, list[int]]:
    k, d = old.shape
    centers = old.copy()
    empty = []
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    starts = np.searchsorted(sorted_labels, np.arange(k + 1))
    for c in range(k):
        members = X[order[starts[c]:starts[c + 1]]]
        if len(members) == 0:
            empty.append(c)
            continue
        centers[c] = [math.fsum(col) / len(members) for col in members.T]
    return centers, empty


def _repair_empty(X, labels, centers, empty) -> np.ndarray:
    """Move each empty center onto the point farthest from its own center."""
    d2 = np.einsum("nd,nd->n", X - centers[labels], X - centers[labels])
    for c in empty:
        idx = int(np.argmax(d2))
        centers[c] = X[idx]
        d2[idx] = -1.0
    return centers


def lloyd_fit(X, cfg: KMeansConfig, rng: Rng | None = None, init_centers=None, threads: int = 1) -> Codebook:
    """Fit k-means with Lloyd's algorithm.

    Stops when the relative inertia decrease drops below ``cfg.tol``, when
    the assignment no longer changes, or after ``cfg.max_iters`` updates.
    With ``n_init > 1`` the restart with the lowest inertia wins (earliest on
    ties). ``init_centers`` bypasses k-means++ (and forces a single run).
    """
    X = _as_array(X)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if rng is None:
        rng = Rng(cfg.seed)
    best = None
    runs = 1 if init_centers is not None else cfg.n_init
    for _ in range(runs):
        if init_centers is not None:
            centers = np.array(init_centers, dtype=np.float64)
            if centers.shape != (cfg.k, X.shape[1]):
                raise ValueError(f"init_centers shape {centers.shape} != ({cfg.k}, {X.shape[1]})")
        else:
            centers = kmeanspp_init(X, cfg, rng).centers.copy()
        cb = _lloyd_single(X, centers, cfg, threads)
        if best is None or cb.inertia < best.inertia:
            best = cb
    return best


def _lloyd_single(X, centers, cfg: KMeansConfig, threads: int) -> Codebook:
    labels, d2 = _nearest(X, centers, threads)
    inertia = math.fsum(d2)
    history = [inertia]
    converged = False
    n_iters = 0
    while n_iters < cfg.max_iters:
        new_centers, empty = _cluster_means(X, labels, centers)
        if empty:
            new_centers = _repair_empty(X, labels, new_centers, empty)
        new_labels, new_d2 = _nearest(X, new_centers, threads)
        new_inertia = math.fsum(new_d2)
        n_iters += 1
        stable = np.array_equal(new_labels, labels) and not empty
        drop = inertia - new_inertia
        centers, labels, d2 = new_centers, new_labels, new_d2
        history.append(new_inertia)
        if stable or inertia == 0 or drop <= cfg.tol * inertia:
            inertia = new_inertia
            converged = True
            break
        inertia = new_inertia
    return Codebook(centers, inertia, n_iters, converged, tuple(history))


def assign(X, cb: Codebook, threads: int = 1) -> LabelVector:
    """Pseudo-label each row with its nearest center (lowest index on ties)."""
    X = _as_array(X)
    if X.shape[1] != cb.n_dims:
        raise ValueError(f"dimension mismatch: features have {X.shape[1]} dims, codebook {cb.n_dims}")
    labels, _ = _nearest(X, cb.centers, threads)
    return LabelVector(labels, cb.k)


def inertia(X, cb: Codebook) -> float:
    X = _as_array(X)
    _, d2 = _nearest(X, cb.centers)
    return math.fsum(d2)


def nearest_to_center(X, cb: Codebook, c: int, m: int) -> list[tuple[int, float]]:
    """The ``m`` samples closest to center ``c`` as ``(sample_id, squared_distance)``."""
    X = _as_array(X)
    if not 0 <= c < cb.k:
        raise ValueError(f"cluster id {c} out of range [0, {cb.k})")
    if not 0 <= m <= X.shape[0]:
        raise ValueError(f"m={m} must be within [0, {X.shape[0]}]")
    if X.shape[1] != cb.n_dims:
        raise ValueError("dimension mismatch")
    diff = X - cb.centers[c]
    d2 = np.einsum("nd,nd->n", diff, diff)
    order = np.lexsort((np.arange(len(d2)), d2))[:m]
    return [(int(i), float(d2[i])) for i in order]


def l2_normalize(X) -> np.ndarray:
    X = _as_array(X)
    norms = np.sqrt(np.einsum("nd,nd->n", X, X))
    norms[norms == 0] = 1.0
    return X / norms[:, None]


def write_codebook(cb: Codebook, path) -> None:
    header = CBK_MAGIC + struct.pack("<IId", cb.k, cb.n_dims, cb.inertia)
    Path(path).write_bytes(header + cb.centers.astype("<f8").tobytes())


def read_codebook(path) -> Codebook:
    buf = Path(path).read_bytes()
    if buf[:4] != CBK_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CBK_MAGIC!r}, found {buf[:4]!r}")
    k, d, inertia_ = struct.unpack("<IId", _read_exact(buf, 4, 16, "CBK1 header"))
    payload = _read_exact(buf, 20, 8 * k * d, "CBK1 payload")
    centers = np.frombuffer(payload, dtype="<f8").reshape(k, d)
    return Codebook(centers, inertia_)
