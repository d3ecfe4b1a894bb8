"""Reference-frame selection over a frame-distance matrix.

A frame i is covered by reference j when d(i, j) <= rho. Three
selectors: exact minimum-cardinality cover by branch-and-bound (small
N), greedy submodular max-coverage under a budget, and the equitemporal
baseline. All ties break toward lower frame indices so runs reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ILP_CAP = 200


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionResult:
    """references ordered as selected; assignment[i] is the reference
    minimizing d(i, .) (lowest index on ties) regardless of coverage;
    uncovered lists frames beyond rho of every reference."""

    references: tuple
    coverage: int
    assignment: np.ndarray
    uncovered: tuple
    rho: float
    method: str

    def to_dict(self) -> dict:
        return {
            "references": [int(r) for r in self.references],
            "coverage": int(self.coverage),
            "assignment": [int(a) for a in self.assignment],
            "uncovered": [int(u) for u in self.uncovered],
            "rho": float(self.rho),
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(tuple(d["references"]), int(d["coverage"]),
                   np.asarray(d["assignment"], dtype=np.int64),
                   tuple(d["uncovered"]), float(d["rho"]), d["method"])


def _check_dm(dm):
    dm = np.asarray(dm, dtype=np.float64)
    if dm.ndim != 2 or dm.shape[0] != dm.shape[1]:
        raise SelectionError("distance matrix must be square")
    return dm


def selection_from_refs(dm, refs, rho: float, method: str) -> SelectionResult:
    """Assemble assignment/coverage/uncovered for a chosen reference set."""
    dm = _check_dm(dm)
    n = dm.shape[0]
    refs = tuple(int(r) for r in refs)
    if not refs or len(set(refs)) != len(refs) or any(not 0 <= r < n for r in refs):
        raise SelectionError("references must be distinct frames")
    ordered = sorted(refs)
    sub = dm[:, ordered]                      # (n, |R|)
    pick = np.argmin(sub, axis=1)             # first minimum = lowest ref index
    assignment = np.array([ordered[p] for p in pick], dtype=np.int64)
    dist = sub[np.arange(n), pick]
    covered = dist <= rho
    uncovered = tuple(int(i) for i in np.flatnonzero(~covered))
    return SelectionResult(refs, int(covered.sum()), assignment, uncovered,
                           float(rho), method)


def greedy_max_coverage(dm, rho: float, m: int) -> SelectionResult:
    """Budgeted max coverage: repeatedly add the frame covering the most
    still-uncovered frames; stop early when the marginal gain is zero."""
    dm = _check_dm(dm)
    n = dm.shape[0]
    if not 1 <= m <= n:
        raise SelectionError(f"budget must be in [1, {n}]")
    within = dm <= rho  # within[i, j]: j covers i
    covered = np.zeros(n, dtype=bool)
    chosen = []
    taken = np.zeros(n, dtype=bool)
    for _ in range(m):
        gains = within[~covered].sum(axis=0)
        gains[taken] = -1
        j = int(np.argmax(gains))  # argmax takes the first (lowest) maximum
        if gains[j] <= 0:
            break
        chosen.append(j)
        taken[j] = True
        covered |= within[:, j]
    return selection_from_refs(dm, chosen, rho, "greedy")


def equitemporal(n_frames: int, m: int, dm=None, rho: float = 0.1) -> SelectionResult:
    """References sampled regularly in time: floor(j*N/M) for j=0..M-1.

    With a distance matrix the result carries real assignments and
    coverage; without one, only the reference list is meaningful
    (assignment falls back to nearest-in-time, coverage to |R|).
    """
    if not 1 <= m <= n_frames:
        raise SelectionError(f"budget must be in [1, {n_frames}]")
    refs = sorted({int(np.floor(j * n_frames / m)) for j in range(m)})
    if dm is not None:
        return selection_from_refs(dm, refs, rho, "equitemporal")
    arr = np.array(refs)
    assignment = np.array([arr[np.argmin(np.abs(arr - i))] for i in range(n_frames)],
                          dtype=np.int64)
    uncovered = tuple(i for i in range(n_frames) if i not in set(refs))
    return SelectionResult(tuple(refs), len(refs), assignment, uncovered,
                           float(rho), "equitemporal")


def _greedy_cover_size(within, n) -> int:
    """Greedy full set cover; upper bound for the exact solver."""
    covered = np.zeros(n, dtype=bool)
    count = 0
    while not covered.all():
        gains = within[~covered].sum(axis=0)
        j = int(np.argmax(gains))
        if gains[j] <= 0:  # pragma: no cover - i in E_i makes this impossible
            return n
        covered |= within[:, j]
        count += 1
    return count


def _disjoint_lower_bound(within, uncovered, available) -> int:
    """Count frames whose candidate-cover sets are pairwise disjoint; a
    cover needs one distinct reference per such frame."""
    used = np.zeros(within.shape[0], dtype=bool)
    count = 0
    for i in uncovered:
        cand = within[i] & available
        if not cand.any():
            return 10 ** 9  # frame cannot be covered at all: prune branch
        if not (cand & used).any():
            used |= cand
            count += 1
    return count


def solve_ilp_exact(dm, rho: float, cap: int = DEFAULT_ILP_CAP) -> SelectionResult:
    """Minimum-cardinality full cover, branch-and-bound.

    Branches on the lowest-index uncovered frame over its candidate
    references in ascending order (excluding candidates already branched
    at the same node, so each cover is enumerated once). Nodes are pruned
    with the disjoint-set lower bound; ties on size resolve to the
    lexicographically smallest reference set.
    """
    dm = _check_dm(dm)
    n = dm.shape[0]
    if n > cap:
        raise SelectionError(
            f"exact cover capped at {cap} frames (got {n}); use greedy_max_coverage")
    within = dm <= rho
    np.fill_diagonal(within, True)  # d(i,i)=0: self-coverage always holds

    best_size = _greedy_cover_size(within, n)
    best_set = None

    def search(chosen, covered, available):
        nonlocal best_size, best_set
        if covered.all():
            cand = tuple(sorted(chosen))
            if len(cand) < best_size or (len(cand) == best_size
                                         and (best_set is None or cand < best_set)):
                best_size = len(cand)
                best_set = cand
            return
        uncovered = np.flatnonzero(~covered)
        lb = _disjoint_lower_bound(within, uncovered, available)
        if len(chosen) + lb > best_size:
            return
        f = int(uncovered[0])
        cands = np.flatnonzero(within[f] & available)
        branch_avail = available.copy()
        for j in cands:
            j = int(j)
            branch_avail[j] = False  # later branches may not reuse j
            avail_j = branch_avail.copy()
            avail_j[j] = False
            search(chosen + [j], covered | within[:, j], avail_j)

    search([], np.zeros(n, dtype=bool), np.ones(n, dtype=bool))
    # the optimal path is never pruned (len + lb <= best_size along it)
    assert best_set is not None
    return selection_from_refs(dm, best_set, rho, "ilp")
