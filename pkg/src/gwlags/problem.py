"""Group-selection / power-allocation problem instances and their feasibility.

An instance asks for a binary selection ``x`` over every image group of every
drone plus a power vector ``p`` maximising the selected utility, subject to
each drone uploading its selected volume within the time budget at the rate
its SINR allows, and the total power budget.

Ragged per-drone arrays are stored flat in drone-major order; ``owner[g]``
gives the drone of flat group ``g``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelRealization, compute_rates

SCHEMA_VERSION = 1
FEAS_RTOL = 1e-9
MBIT = 1e6


class ShapeError(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ProblemInstance:
    groups_per_drone: tuple[int, ...]
    utilities: np.ndarray  # (I_hat,)
    volumes: np.ndarray  # (I_hat,) bits
    channel: ChannelRealization
    time_budget: float = 50.0
    power_budget: float = 0.1
    noise_power: float = 1e-13
    bandwidth: float = 3e6
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        gpd = tuple(int(i) for i in self.groups_per_drone)
        object.__setattr__(self, "groups_per_drone", gpd)
        object.__setattr__(self, "utilities", _frozen(self.utilities))
        object.__setattr__(self, "volumes", _frozen(self.volumes))
        if any(i < 1 for i in gpd):
            raise ShapeError("every drone needs at least one group")
        n = sum(gpd)
        if self.utilities.shape != (n,) or self.volumes.shape != (n,):
            raise ShapeError(f"expected {n} groups, got utilities {self.utilities.shape}, "
                             f"volumes {self.volumes.shape}")
        if self.channel.composite_gains.shape != (len(gpd), len(gpd)):
            raise ShapeError("channel gain matrix does not match the number of drones")
        if np.any(self.utilities < 0) or not np.all(np.isfinite(self.utilities)):
            raise ValueError("utilities must be finite and >= 0")
        if np.any(self.volumes <= 0):
            raise ValueError("volumes must be > 0")
        for name in ("time_budget", "power_budget", "noise_power", "bandwidth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def num_drones(self) -> int:
        return len(self.groups_per_drone)

    @property
    def num_groups(self) -> int:
        return int(self.utilities.shape[0])

    @property
    def gains(self) -> np.ndarray:
        return self.channel.composite_gains

    @property
    def owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_drones), self.groups_per_drone)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.groups_per_drone)])

    def ragged(self, flat) -> list[np.ndarray]:
        o = self.offsets
        return [np.asarray(flat)[o[k]:o[k + 1]] for k in range(self.num_drones)]

    def drone_loads(self, x) -> np.ndarray:
        """Selected volume per drone in bits."""
        return np.bincount(self.owner, weights=np.asarray(x, dtype=np.float64) * self.volumes,
                           minlength=self.num_drones)

    def rates(self, p) -> np.ndarray:
        return compute_rates(self.gains, p, self.noise_power, self.bandwidth)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "problem_instance",
            "groups_per_drone": list(self.groups_per_drone),
            "utilities": [r.tolist() for r in self.ragged(self.utilities)],
            "volumes_bits": [r.tolist() for r in self.ragged(self.volumes)],
            "time_budget_s": self.time_budget,
            "power_budget_w": self.power_budget,
            "noise_power_w": self.noise_power,
            "bandwidth_hz": self.bandwidth,
            "channel": self.channel.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProblemInstance":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported instance schema {doc.get('schema_version')!r}")
        return cls(
            groups_per_drone=tuple(doc["groups_per_drone"]),
            utilities=np.concatenate([np.asarray(r, dtype=np.float64) for r in doc["utilities"]]),
            volumes=np.concatenate([np.asarray(r, dtype=np.float64) for r in doc["volumes_bits"]]),
            channel=ChannelRealization.from_dict(doc["channel"]),
            time_budget=float(doc["time_budget_s"]),
            power_budget=float(doc["power_budget_w"]),
            noise_power=float(doc["noise_power_w"]),
            bandwidth=float(doc["bandwidth_hz"]),
            meta=doc.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "ProblemInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Allocation:
    selection: np.ndarray  # (I_hat,) in [0, 1]
    powers: np.ndarray  # (K,) watts

    def __post_init__(self):
        self.selection = np.asarray(self.selection, dtype=np.float64)
        self.powers = np.asarray(self.powers, dtype=np.float64)

    def binarized(self, threshold: float = 0.5) -> "Allocation":
        return Allocation((self.selection > threshold).astype(np.float64), self.powers.copy())

    def to_dict(self) -> dict:
        return {"selection": self.selection.tolist(), "powers_w": self.powers.tolist()}


@dataclass
class FeasibilityReport:
    load: np.ndarray  # bits per drone
    capacity: np.ndarray  # T * R_k, bits
    violated: np.ndarray  # bool per drone
    power_violation: bool
    box_violation: bool
    spectral_radius: float | None = None
    min_power: np.ndarray | None = None

    @property
    def feasible(self) -> bool:
        return not (self.violated.any() or self.power_violation or self.box_violation)

    @property
    def num_violated(self) -> int:
        return int(self.violated.sum())

    def to_dict(self) -> dict:
        return {
            "load_mbit": (self.load / MBIT).tolist(),
            "capacity_mbit": (self.capacity / MBIT).tolist(),
            "violated": self.violated.tolist(),
            "power_violation": self.power_violation,
            "box_violation": self.box_violation,
            "spectral_radius": self.spectral_radius,
            "min_power_w": None if self.min_power is None else self.min_power.tolist(),
        }


def _check_shapes(inst: ProblemInstance, alloc: Allocation) -> None:
    if alloc.selection.shape != (inst.num_groups,):
        raise ShapeError(f"selection shape {alloc.selection.shape} != ({inst.num_groups},)")
    if alloc.powers.shape != (inst.num_drones,):
        raise ShapeError(f"powers shape {alloc.powers.shape} != ({inst.num_drones},)")


def objective(inst: ProblemInstance, alloc: Allocation) -> float:
    _check_shapes(inst, alloc)
    return float(alloc.selection @ inst.utilities)


def load_satisfied(load, capacity) -> np.ndarray:
    return np.asarray(load) <= np.asarray(capacity) * (1.0 + FEAS_RTOL)


def check_constraints(inst: ProblemInstance, alloc: Allocation) -> FeasibilityReport:
    """Per-drone load vs capacity, power budget and box checks. Never raises on infeasibility."""
    _check_shapes(inst, alloc)
    x, p = alloc.selection, alloc.powers
    box = bool(np.any(x < 0) or np.any(x > 1) or np.any(p < 0))
    load = inst.drone_loads(x)
    capacity = inst.time_budget * inst.rates(np.maximum(p, 0.0))
    return FeasibilityReport(
        load=load,
        capacity=capacity,
        violated=~load_satisfied(load, capacity),
        power_violation=bool(p.sum() > inst.power_budget * (1.0 + FEAS_RTOL)),
        box_violation=box,
    )


def violation_rate(reports) -> float:
    """Fraction of (drone, instance) pairs whose load exceeds capacity."""
    reports = list(reports)
    total = sum(r.violated.size for r in reports)
    return sum(r.num_violated for r in reports) / total if total else 0.0


# --- power control -------------------------------------------------------

def sinr_targets(inst: ProblemInstance, x) -> np.ndarray:
    """gamma_k = 2^(L_k / B) - 1 with L_k the required rate in bit/s."""
    required = inst.drone_loads(x) / inst.time_budget
    return np.expm1(required / inst.bandwidth * np.log(2.0))


def interference_system(H: np.ndarray, gamma: np.ndarray, noise_power: float):
    """A[k, j] = gamma_k H[k, j] / H[k, k] (j != k), b_k = gamma_k sigma^2 / H[k, k]."""
    d = np.diag(H)
    A = (gamma / d)[:, None] * H
    np.fill_diagonal(A, 0.0)
    return A, gamma * noise_power / d


def spectral_radius(A: np.ndarray, iters: int = 200, tol: float = 1e-10):
    """Perron root of a nonnegative matrix by shifted power iteration.

    Iterates on I + A (aperiodic, same Perron vector) and tracks the
    Collatz-Wielandt bracket min/max (Av)_i / v_i, which encloses rho(A) for
    any positive v.  Returns (estimate, lower, upper).
    """
    n = A.shape[0]
    if n == 0:
        return 0.0, 0.0, 0.0
    v = np.ones(n) / n
    lo, hi = 0.0, np.inf
    for _ in range(iters):
        Av = A @ v
        ratio = Av / v
        lo, hi = max(lo, ratio.min()), min(hi, ratio.max())
        if hi - lo <= tol * max(1.0, hi):
            break
        v = v + Av
        v /= v.sum()
    return 0.5 * (lo + hi), lo, hi


@dataclass
class PowerSolution:
    feasible: bool
    powers: np.ndarray | None  # componentwise-minimal p*, None when rho(A) >= 1
    spectral_radius: float

    def __iter__(self):
        return iter((self.feasible, self.powers))


def min_power_for_selection(inst: ProblemInstance, x) -> PowerSolution:
    """Minimal power vector meeting every drone's rate requirement for selection ``x``.

    Drones with zero load get zero power and drop out of the interference
    system.  Feasible iff rho(A) < 1, p* >= 0 and sum(p*) <= P_sum.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (inst.num_groups,):
        raise ShapeError(f"selection shape {x.shape} != ({inst.num_groups},)")
    gamma = sinr_targets(inst, x)
    active = gamma > 0
    K = inst.num_drones
    if not active.any():
        return PowerSolution(True, np.zeros(K), 0.0)
    A, b = interference_system(inst.gains, gamma, inst.noise_power)
    Aa, ba = A[np.ix_(active, active)], b[active]
    rho, lo, hi = spectral_radius(Aa)
    p_active = None
    if hi < 1.0:
        p_active = np.linalg.solve(np.eye(len(ba)) - Aa, ba)
    elif lo < 1.0:
        # bracket straddles 1: (I - A) is a nonsingular M-matrix iff the solve is positive
        try:
            cand = np.linalg.solve(np.eye(len(ba)) - Aa, ba)
            if np.all(np.isfinite(cand)) and np.all(cand > 0):
                p_active = cand
        except np.linalg.LinAlgError:
            pass
    if p_active is None:
        return PowerSolution(False, None, max(rho, 1.0))
    p = np.zeros(K)
    p[active] = p_active
    feasible = bool(np.all(p >= 0) and p.sum() <= inst.power_budget * (1.0 + FEAS_RTOL))
    return PowerSolution(feasible, p, rho)


def min_power_batch(H: np.ndarray, gamma: np.ndarray, noise_power: float,
                    power_budget: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised feasibility for many SINR-target vectors ``gamma`` (M, K).

    Uses the M-matrix characterisation: with b > 0 on active drones,
    rho(A) < 1 iff the solution of (I - A) p = b is strictly positive there.
    Returns (feasible (M,), powers (M, K)); powers are NaN where rho >= 1.
    """
    gamma = np.atleast_2d(gamma)
    M, K = gamma.shape
    d = np.diag(H)
    A = (gamma / d)[:, :, None] * H[None, :, :]
    idx = np.arange(K)
    A[:, idx, idx] = 0.0
    b = gamma * noise_power / d
    system = np.eye(K)[None] - A
    try:
        p = np.linalg.solve(system, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        p = np.empty((M, K))
        for m in range(M):
            try:
                p[m] = np.linalg.solve(system[m], b[m])
            except np.linalg.LinAlgError:
                p[m] = np.nan
    active = gamma > 0
    ok = np.all(np.isfinite(p), axis=1) & np.all(np.where(active, p > 0, True), axis=1)
    p = np.where(active, p, 0.0)
    p[~ok] = np.nan
    feasible = ok & (np.where(ok[:, None], p, 0.0).sum(axis=1) <= power_budget * (1.0 + FEAS_RTOL))
    return feasible, p
