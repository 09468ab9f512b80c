"""Exact and heuristic solvers for the group-selection problem.

Every solver returns a :class:`SolverResult` whose allocation is binary and
feasible (``check_constraints`` reports nothing).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .problem import (
    FEAS_RTOL,
    Allocation,
    ProblemInstance,
    check_constraints,
    load_satisfied,
    min_power_batch,
    min_power_for_selection,
    objective,
)

MAX_ENUM = 24
_CHUNK = 1 << 15
_TIE_RTOL = 1e-12


class SizeError(ValueError):
    pass


@dataclass
class SolverResult:
    allocation: Allocation
    objective: float
    feasible: bool
    solver_name: str
    wall_time: float
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "solver": self.solver_name,
            "objective": self.objective,
            "feasible": self.feasible,
            "wall_time_s": self.wall_time,
            "allocation": self.allocation.to_dict(),
            "info": self.info,
        }


def _finish(inst: ProblemInstance, x, p, name: str, t0: float, **info) -> SolverResult:
    alloc = Allocation(np.asarray(x, dtype=np.float64), np.asarray(p, dtype=np.float64))
    report = check_constraints(inst, alloc)
    return SolverResult(alloc, objective(inst, alloc), report.feasible, name,
                        time.perf_counter() - t0, info)


def _targets(inst: ProblemInstance, loads: np.ndarray) -> np.ndarray:
    return np.expm1(loads / inst.time_budget / inst.bandwidth * np.log(2.0))


def _enumerate_best(inst: ProblemInstance, n_bits: int, expand) -> tuple[np.ndarray, np.ndarray]:
    """Scan codes 0..2^n_bits-1 (bit 0 of x is the most significant).

    ``expand`` maps a (M, n_bits) 0/1 matrix to flat group selections.
    Returns the best selection and its minimal powers; ties prefer fewer
    selected groups, then the lexicographically smallest selection.
    """
    shifts = np.arange(n_bits - 1, -1, -1, dtype=np.int64)
    owner_matrix = np.zeros((inst.num_groups, inst.num_drones))
    owner_matrix[np.arange(inst.num_groups), inst.owner] = inst.volumes
    best = None  # (objective, count, code, x, p)
    total = 1 << n_bits
    for start in range(0, total, _CHUNK):
        codes = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        bits = ((codes[:, None] >> shifts) & 1).astype(np.float64)
        X = expand(bits)
        obj = X @ inst.utilities
        feasible, p = min_power_batch(inst.gains, _targets(inst, X @ owner_matrix),
                                      inst.noise_power, inst.power_budget)
        if not feasible.any():
            continue
        idx = np.flatnonzero(feasible)
        top = obj[idx].max()
        if best is not None and top < best[0] - _TIE_RTOL * max(1.0, abs(best[0])):
            continue
        tied = idx[obj[idx] >= top - _TIE_RTOL * max(1.0, abs(top))]
        counts = X[tied].sum(axis=1)
        tied = tied[counts == counts.min()]
        j = tied[0]  # smallest code in chunk == lexicographically smallest x
        cand = (obj[j], int(X[j].sum()), int(codes[j]), X[j].copy(), p[j].copy())
        if best is None:
            best = cand
            continue
        if cand[0] > best[0] + _TIE_RTOL * max(1.0, abs(best[0])):
            best = cand
        elif abs(cand[0] - best[0]) <= _TIE_RTOL * max(1.0, abs(best[0])):
            if (cand[1], cand[2]) < (best[1], best[2]):
                best = cand
    if best is None:  # unreachable: the empty selection is always feasible
        return np.zeros(inst.num_groups), np.zeros(inst.num_drones)
    return best[3], best[4]


def brute_force_oracle(inst: ProblemInstance, max_groups: int = MAX_ENUM) -> SolverResult:
    """Exact optimum by enumerating every selection with the power-control oracle."""
    if inst.num_groups > max_groups:
        raise SizeError(f"{inst.num_groups} groups exceeds the enumeration guard of {max_groups}")
    t0 = time.perf_counter()
    x, p = _enumerate_best(inst, inst.num_groups, lambda bits: bits)
    return _finish(inst, x, p, "oracle", t0)


def drone_granularity(inst: ProblemInstance, max_drones: int = MAX_ENUM) -> SolverResult:
    """Optimum over all-or-nothing selections per drone (no image partitioning)."""
    if inst.num_drones > max_drones:
        raise SizeError(f"{inst.num_drones} drones exceeds the enumeration guard of {max_drones}")
    t0 = time.perf_counter()
    owner = inst.owner
    x, p = _enumerate_best(inst, inst.num_drones, lambda bits: bits[:, owner])
    return _finish(inst, x, p, "stt", t0)


def drop_until_feasible(inst: ProblemInstance, x: np.ndarray, powers: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop lowest-utility selected groups of each violating drone; powers stay fixed.

    Ties in utility drop the larger volume first, then the higher index.
    Returns the repaired selection and the number of groups dropped.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    capacity = inst.time_budget * inst.rates(powers)
    loads = inst.drone_loads(x)
    dropped = 0
    for k in np.flatnonzero(~load_satisfied(loads, capacity)):
        lo, hi = inst.offsets[k], inst.offsets[k + 1]
        chosen = [g for g in range(lo, hi) if x[g] > 0]
        chosen.sort(key=lambda g: (inst.utilities[g], -inst.volumes[g], -g))
        load = loads[k]
        for g in chosen:
            if load <= capacity[k] * (1.0 + FEAS_RTOL):
                break
            x[g] = 0.0
            load -= inst.volumes[g]
            dropped += 1
    return x, dropped


def threshold_and_repair(inst: ProblemInstance, relaxed: Allocation, threshold: float = 0.5,
                         reoptimize_power: bool = False, name: str = "repair") -> SolverResult:
    """Binarize a relaxed allocation and drop groups until every load fits its capacity."""
    t0 = time.perf_counter()
    x = (np.asarray(relaxed.selection) > threshold).astype(np.float64)
    p = np.asarray(relaxed.powers, dtype=np.float64).copy()
    before = int(x.sum())
    x, dropped = drop_until_feasible(inst, x, p)
    if reoptimize_power:
        sol = min_power_for_selection(inst, x)
        if sol.feasible:
            p = sol.powers
    return _finish(inst, x, p, name, t0, selected_before_repair=before, dropped=dropped)


def _shrink_to_feasible(inst: ProblemInstance, order: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Select ``order`` (best first); drop from the tail until the min-power solution fits."""
    order = list(order)
    while True:
        x = np.zeros(inst.num_groups)
        x[order] = 1.0
        sol = min_power_for_selection(inst, x)
        if sol.feasible:
            return x, sol.powers
        order.pop()


def gw2_greedy(inst: ProblemInstance, budget_groups: int = 5) -> SolverResult:
    """Top-``budget_groups`` groups by utility (ties: smaller volume), shrunk to feasibility."""
    t0 = time.perf_counter()
    order = sorted(range(inst.num_groups),
                   key=lambda g: (-inst.utilities[g], inst.volumes[g], g))
    x, p = _shrink_to_feasible(inst, order[:budget_groups])
    return _finish(inst, x, p, "gw2", t0, budget_groups=budget_groups)


def project_capped_simplex(q: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {q >= 0, sum(q) <= 1}."""
    clipped = np.maximum(q, 0.0)
    if clipped.sum() <= 1.0:
        return clipped
    u = np.sort(q)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, len(q) + 1) > 0)[0][-1]
    return np.maximum(q - css[rho] / (rho + 1.0), 0.0)


def _sum_rate_and_grad(G: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum spectral efficiency (nats) and its gradient for normalised gains G = H P_sum / sigma^2."""
    total = G @ q + 1.0
    signal = np.diag(G) * q
    noise_int = total - signal
    value = np.sum(np.log(total) - np.log(noise_int))
    # d/dq_j [log(total_k) - log(noise_int_k)]
    grad = (G / total[:, None]).sum(axis=0)
    Goff = G.copy()
    np.fill_diagonal(Goff, 0.0)
    grad -= (Goff / noise_int[:, None]).sum(axis=0)
    return float(value), grad


def max_sum_rate_powers(inst: ProblemInstance, starts: int = 20, iters: int = 500,
                        seed: int = 0) -> np.ndarray:
    """Multi-start projected gradient ascent with Armijo backtracking on the sum rate."""
    G = inst.gains * inst.power_budget / inst.noise_power
    K = inst.num_drones
    rng = np.random.default_rng(seed)
    inits = [np.full(K, 1.0 / K)] + [rng.dirichlet(np.ones(K)) for _ in range(starts - 1)]
    best_q, best_val = None, -np.inf
    for q in inits:
        val, grad = _sum_rate_and_grad(G, q)
        step = 1.0 / max(np.abs(grad).max(), 1e-12)
        for _ in range(iters):
            while True:
                cand = project_capped_simplex(q + step * grad)
                cval, cgrad = _sum_rate_and_grad(G, cand)
                if cval >= val + 1e-4 * grad @ (cand - q) or step < 1e-20:
                    break
                step *= 0.5
            moved = np.abs(cand - q).max()
            q, val, grad = cand, cval, cgrad
            step *= 2.0
            if moved < 1e-13:
                break
        if val > best_val:
            best_q, best_val = q, val
    return best_q * inst.power_budget


def gw1_sumrate(inst: ProblemInstance, starts: int = 20, iters: int = 500,
                seed: int = 0) -> SolverResult:
    """Sum-rate power allocation, then per-drone packing by descending volume (utility-blind)."""
    t0 = time.perf_counter()
    p = max_sum_rate_powers(inst, starts, iters, seed)
    capacity = inst.time_budget * inst.rates(p)
    x = np.zeros(inst.num_groups)
    for k in range(inst.num_drones):
        lo, hi = inst.offsets[k], inst.offsets[k + 1]
        room = capacity[k] * (1.0 + FEAS_RTOL)
        for g in sorted(range(lo, hi), key=lambda g: (-inst.volumes[g], g)):
            if inst.volumes[g] <= room:
                x[g] = 1.0
                room -= inst.volumes[g]
    return _finish(inst, x, p, "gw1", t0)


def channel_blind(inst: ProblemInstance, budget_bits: float | None = None) -> SolverResult:
    """Utility-ranked selection under a volume budget, uniform power, then repair."""
    t0 = time.perf_counter()
    order = sorted(range(inst.num_groups),
                   key=lambda g: (-inst.utilities[g], inst.volumes[g], g))
    budget = np.inf if budget_bits is None else budget_bits
    x = np.zeros(inst.num_groups)
    used = 0.0
    for g in order:
        if used + inst.volumes[g] > budget:
            break
        x[g] = 1.0
        used += inst.volumes[g]
    p = np.full(inst.num_drones, inst.power_budget / inst.num_drones)
    before = int(x.sum())
    x, dropped = drop_until_feasible(inst, x, p)
    return _finish(inst, x, p, "blind", t0, selected_before_repair=before, dropped=dropped)


SOLVERS = {
    "oracle": brute_force_oracle,
    "gw1": gw1_sumrate,
    "gw2": gw2_greedy,
    "stt": drone_granularity,
    "blind": channel_blind,
}
