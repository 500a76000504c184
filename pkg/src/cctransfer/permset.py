"""Permutation sets with a minimum pairwise Hamming distance.

A set with minimum distance 3 over 9 tiles stays unambiguous when any two
tiles are hidden: two members that agree on the 7 visible positions would
be at distance <= 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng

DEFAULT_BUDGET = 10**6


class BudgetExhaustedError(RuntimeError):
    """Raised when no set of the requested size was found (unsatisfiable or out of budget)."""


def _check_perm(p, name="permutation") -> np.ndarray:
    arr = np.asarray(p, dtype=np.int64)
    if arr.ndim != 1 or not np.array_equal(np.sort(arr), np.arange(len(arr))):
        raise ValueError(f"{name} {list(p)!r} is not a permutation of 0..{len(arr) - 1}")
    return arr


def hamming(p, q) -> int:
    """Number of positions where ``p`` and ``q`` differ."""
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    a = _check_perm(p, "p")
    b = _check_perm(q, "q")
    return int(np.count_nonzero(a != b))


def inverse(p) -> list[int]:
    inv = [0] * len(p)
    for i, v in enumerate(p):
        inv[v] = i
    return inv


@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray  # (size, n_tiles) int
    min_hamming: int
    seed: int = 0

    def __post_init__(self):
        arr = np.array(self.perms, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("a permutation set needs at least one permutation")
        for row in arr:
            _check_perm(row)
        arr.flags.writeable = False
        object.__setattr__(self, "perms", arr)

    @property
    def n_tiles(self) -> int:
        return self.perms.shape[1]

    def __len__(self) -> int:
        return self.perms.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.perms[i]


def generate(n_tiles: int = 9, target_size: int = 701, min_hamming: int = 3, seed: int = 0,
             budget: int = DEFAULT_BUDGET) -> PermutationSet:
    """Greedy rejection sampling, identity first.

    Uniform permutations (Fisher-Yates) are accepted when they are at least
    ``min_hamming`` away from everything accepted so far. Gives up after
    ``budget`` draws, or earlier once every one of the ``n_tiles!``
    permutations has been accepted or rejected at least once.
    """
    if n_tiles < 2 or target_size < 1 or min_hamming < 1:
        raise ValueError("need n_tiles >= 2, target_size >= 1, min_hamming >= 1")
    rng = Rng(seed)
    total = math.factorial(n_tiles)
    accepted = np.empty((target_size, n_tiles), dtype=np.int8)
    accepted[0] = np.arange(n_tiles)
    count = 1
    seen = {tuple(range(n_tiles))}
    draws = 0
    while count < target_size:
        if draws >= budget or len(seen) >= total:
            raise BudgetExhaustedError(
                f"unsatisfiable-or-budget: found {count}/{target_size} permutations of {n_tiles} "
                f"with min Hamming {min_hamming} after {draws} draws"
            )
        cand = rng.permutation(n_tiles)
        draws += 1
        key = tuple(cand)
        if key in seen:
            continue
        seen.add(key)
        row = np.asarray(cand, dtype=np.int8)
        dist = np.count_nonzero(accepted[:count] != row, axis=1)
        if dist.min() >= min_hamming:
            accepted[count] = row
            count += 1
    return PermutationSet(accepted.astype(np.int64), min_hamming, seed)


def pairwise_hamming(perms: np.ndarray) -> np.ndarray:
    perms = np.asarray(perms)
    out = np.empty((len(perms), len(perms)), dtype=np.int64)
    for i in range(len(perms)):
        out[i] = np.count_nonzero(perms != perms[i], axis=1)
    return out


@dataclass(frozen=True)
class VerifyReport:
    size: int
    n_tiles: int
    min_hamming_observed: int  # n_tiles + 1 when there is no pair
    mean_hamming_observed: float | None  # mean fraction of differing positions
    all_valid: bool

    def as_dict(self) -> dict:
        return {
            "size": self.size,
            "n_tiles": self.n_tiles,
            "min_hamming_observed": self.min_hamming_observed,
            "mean_normalized_hamming": self.mean_hamming_observed,
            "all_valid": self.all_valid,
        }

    def __str__(self) -> str:
        mean = "n/a" if self.mean_hamming_observed is None else f"{self.mean_hamming_observed:.4f}"
        return (f"size={self.size} n_tiles={self.n_tiles} "
                f"min_hamming={self.min_hamming_observed} mean_normalized_hamming={mean}")


def verify(ps: PermutationSet, verbose: bool = False) -> VerifyReport:
    """Exact pairwise scan of a permutation set."""
    size = len(ps)
    dist = pairwise_hamming(ps.perms)
    iu = np.triu_indices(size, k=1)
    pairs = dist[iu]
    if pairs.size == 0:
        report = VerifyReport(size, ps.n_tiles, ps.n_tiles + 1, None, True)
    else:
        report = VerifyReport(
            size, ps.n_tiles, int(pairs.min()),
            float(pairs.sum()) / (pairs.size * ps.n_tiles),
            bool(pairs.min() >= 1),
        )
    if verbose:
        print(report)
    return report


def save(ps: PermutationSet, path) -> None:
    lines = [f"{ps.n_tiles} {len(ps)} {ps.min_hamming} {ps.seed}"]
    lines += [" ".join(str(int(v)) for v in row) for row in ps.perms]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> PermutationSet:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty permutation file")
    n_tiles, size, min_h, seed = (int(v) for v in lines[0].split())
    rows = [[int(v) for v in ln.split()] for ln in lines[1:]]
    if len(rows) != size:
        raise ValueError(f"{path}: header declares {size} permutations, found {len(rows)}")
    if any(len(r) != n_tiles for r in rows):
        raise ValueError(f"{path}: every permutation must have {n_tiles} entries")
    return PermutationSet(np.array(rows), min_h, seed)


def ambiguous_pairs(perms: np.ndarray, hidden) -> int:
    """Count member pairs that agree on every position outside ``hidden``."""
    perms = np.asarray(perms)
    visible = [j for j in range(perms.shape[1]) if j not in set(hidden)]
    _, counts = np.unique(perms[:, visible], axis=0, return_counts=True)
    return int(sum(c * (c - 1) // 2 for c in counts))
