"""Sequence-ordering metrics and the open-path solver.

The ordering problem is turned into a tour problem by appending a null
node connected to every real node with zero-weight edges in both
directions; the tour is cut at the null node to recover the open path.
Instances with up to 12 real nodes are solved exactly (Held-Karp dynamic
program, lexicographically smallest path among cost ties); larger ones
fall back to nearest-neighbor construction plus deterministic
first-improvement 2-opt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

EXACT_LIMIT = 12  # real nodes; with the null node this is the classic 13


# ---------------------------------------------------------------------------
# Rank metrics
# ---------------------------------------------------------------------------

def kendall_tau(a, b) -> float:
    """Pair-counting tau between two equal-length sequences (ties count 0)."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ShapeError(f"kendall_tau: lengths differ, {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ParameterError("kendall_tau needs at least 2 elements")
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = (a[i] > a[j]) - (a[i] < a[j])
            t = (b[i] > b[j]) - (b[i] < b[j])
            if s * t > 0:
                concordant += 1
            elif s * t < 0:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


def rankdata_average(x) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Pearson correlation of average ranks. Constant inputs give 0."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"spearman_rho: need equal 1-d inputs, {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ParameterError("spearman_rho needs at least 2 elements")
    ra, rb = rankdata_average(a), rankdata_average(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0
    return float((da * db).sum() / denom)


def edit_distance(a, b) -> int:
    """Levenshtein distance between two sequences (lengths may differ)."""
    a, b = list(a), list(b)
    if not a and not b:
        raise ParameterError("edit_distance needs at least one nonempty sequence")
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# Open-path solver
# ---------------------------------------------------------------------------

@dataclass
class PathSolution:
    order: list[int]      # permutation of range(n)
    cost: float
    solver: str           # "exact" | "heuristic"


def path_cost(weights: np.ndarray, order) -> float:
    return float(sum(weights[order[i], order[i + 1]] for i in range(len(order) - 1)))


def _held_karp(weights: np.ndarray) -> list[int]:
    """Exact minimum-cost open path over all nodes (free endpoints).

    States carry (cost, path) and ties prefer the lexicographically
    smaller path, so equal-weight instances return the identity order.
    """
    n = weights.shape[0]
    if n == 1:
        return [0]
    best: dict[tuple[int, int], tuple[float, tuple[int, ...]]] = {
        (1 << k, k): (0.0, (k,)) for k in range(n)}
    for mask in range(1, 1 << n):
        for last in range(n):
            state = best.get((mask, last))
            if state is None:
                continue
            cost, path = state
            for nxt in range(n):
                if mask & (1 << nxt):
                    continue
                cand = (cost + weights[last, nxt], path + (nxt,))
                key = (mask | (1 << nxt), nxt)
                if key not in best or cand < best[key]:
                    best[key] = cand
    full = (1 << n) - 1
    winner = min(best[(full, last)] for last in range(n) if (full, last) in best)
    return list(winner[1])


def _nearest_neighbor(weights: np.ndarray) -> list[int]:
    """Greedy path from the null node: always the cheapest unvisited next
    (ties to the lowest index). The null->first edge costs 0 for every
    node, so the walk starts at node 0."""
    n = weights.shape[0]
    unvisited = list(range(n))
    order = [unvisited.pop(0)]
    while unvisited:
        cur = order[-1]
        nxt = min(unvisited, key=lambda j: (weights[cur, j], j))
        unvisited.remove(nxt)
        order.append(nxt)
    return order


def _local_search(weights: np.ndarray, order: list[int],
                  max_passes: int = 1000) -> list[int]:
    """First-improvement sweeps with deterministic ascending scan order.

    Moves: 2-opt segment reversals, then single/short segment relocation
    (edges are directed, so reversals alone stall in poor local optima).
    Candidate costs are recomputed exactly.
    """
    order = list(order)
    cost = path_cost(weights, order)
    n = len(order)
    for _ in range(max_passes):
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                cand = order[:i] + order[i:j + 1][::-1] + order[j + 1:]
                cand_cost = path_cost(weights, cand)
                if cand_cost < cost - 1e-12:
                    order, cost, improved = cand, cand_cost, True
                    break
            if improved:
                break
        if improved:
            continue
        for seg_len in (1, 2, 3):
            for i in range(n - seg_len + 1):
                seg = order[i:i + seg_len]
                rest = order[:i] + order[i + seg_len:]
                for j in range(len(rest) + 1):
                    cand = rest[:j] + seg + rest[j:]
                    if cand == order:
                        continue
                    cand_cost = path_cost(weights, cand)
                    if cand_cost < cost - 1e-12:
                        order, cost, improved = cand, cand_cost, True
                        break
                if improved:
                    break
            if improved:
                break
        if not improved:
            break
    return order


_BEAM_WIDTH = 2048
_BEAM_LIMIT = 60  # int64 bitmask bound with headroom


def _beam_dp(weights: np.ndarray, beam: int = _BEAM_WIDTH) -> list[int]:
    """Held-Karp restricted to the ``beam`` cheapest states per level.

    Deterministic (cost ties break on the packed state key); exhaustive,
    hence exact, whenever the level frontier fits inside the beam.
    """
    n = weights.shape[0]
    all_nodes = np.arange(n, dtype=np.int64)
    levels = [(np.int64(1) << all_nodes, all_nodes.copy(), np.zeros(n),
               np.full(n, -1, dtype=np.int64))]
    for _ in range(1, n):
        masks, lasts, costs, _ = levels[-1]
        m = len(masks)
        ext_cost = (costs[:, None] + weights[lasts, :]).reshape(-1)
        ext_mask = (masks[:, None] | (np.int64(1) << all_nodes)[None, :]).reshape(-1)
        valid = (((masks[:, None] >> all_nodes[None, :]) & 1) == 0).reshape(-1)
        idx = np.where(valid)[0]
        fc, fm = ext_cost[idx], ext_mask[idx]
        fl = np.tile(all_nodes, m)[idx]
        fp = np.repeat(np.arange(m, dtype=np.int64), n)[idx]
        key = fm * n + fl
        order = np.lexsort((fc, key))
        keep = np.ones(len(order), dtype=bool)
        keep[1:] = key[order][1:] != key[order][:-1]
        sel = order[keep]
        if len(sel) > beam:
            sel = sel[np.lexsort((key[sel], fc[sel]))[:beam]]
        levels.append((fm[sel], fl[sel], fc[sel], fp[sel]))
    masks, lasts, costs, _ = levels[-1]
    idx = int(np.lexsort((lasts, costs))[0])
    path_rev = []
    for level in range(n - 1, 0, -1):
        _, lasts_l, _, parents_l = levels[level]
        path_rev.append(int(lasts_l[idx]))
        idx = int(parents_l[idx])
    path_rev.append(int(levels[0][1][idx]))
    return path_rev[::-1]


def solve_open_path(weights: np.ndarray, mode: str = "auto") -> PathSolution:
    """Minimum-cost directed open path visiting every node exactly once."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        raise ShapeError(f"weights must be square, got {weights.shape}")
    n = weights.shape[0]
    if n < 2:
        raise ParameterError("open path needs at least 2 nodes")
    if mode not in ("auto", "exact", "heuristic"):
        raise ParameterError(f"unknown solver mode {mode!r}")
    if mode == "auto":
        mode = "exact" if n <= EXACT_LIMIT else "heuristic"
    if mode == "exact":
        if n > 16:
            raise ParameterError(f"exact solver refuses n={n} (> 16) instances")
        order = _held_karp(weights)
    else:
        order = _local_search(weights, _nearest_neighbor(weights))
        if n <= _BEAM_LIMIT:
            polished = _local_search(weights, _beam_dp(weights))
            if path_cost(weights, polished) < path_cost(weights, order) - 1e-12:
                order = polished
    return PathSolution(order=order, cost=path_cost(weights, order), solver=mode)


def brute_force_open_path(weights: np.ndarray) -> PathSolution:
    """Reference oracle: enumerate all permutations (test-sized inputs only)."""
    import itertools
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if n > 9:
        raise ParameterError("brute force is for n <= 9")
    best = min(itertools.permutations(range(n)),
               key=lambda p: (path_cost(weights, p), p))
    return PathSolution(order=list(best), cost=path_cost(weights, best),
                        solver="brute")
