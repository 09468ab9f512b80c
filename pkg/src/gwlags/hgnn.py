"""Groupwise heterogeneous GNN producing relaxed selections and powers.

Drone nodes carry the desired-link gain, group nodes carry (utility,
volume), and directed drone-to-drone edges carry interference gains.  A
batch of instances is flattened into one disjoint graph; every neighbour
mean is a constant sparse averaging matrix applied with ``linear_map``, so
the layer count and widths alone fix the parameter count.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .problem import MBIT, Allocation, ProblemInstance
from .solvers import SolverResult, threshold_and_repair

GAIN_LOG_CENTER = -10.0
GAIN_LOG_SCALE = 3.0
GAIN_FLOOR = 1e-30
UTILITY_SCALE = 1.0
VOLUME_SCALE = MBIT
POWER_EPS = 1e-12
DENSE_OPERATOR_MAX = 4096


@dataclass(frozen=True)
class HgnnConfig:
    num_layers: int = 6
    hidden_dims: tuple[int, ...] = (32, 64, 128, 256, 128, 64)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", dims)
        if len(dims) != self.num_layers:
            raise ValueError(f"hidden_dims has {len(dims)} entries for {self.num_layers} layers")
        if any(d < 1 for d in dims):
            raise ValueError("hidden widths must be positive")

    @property
    def encoder_dim(self) -> int:
        return self.hidden_dims[0]

    def layer_widths(self) -> list[tuple[int, int]]:
        """(input, output) width of each message-passing layer."""
        ins = (self.encoder_dim,) + self.hidden_dims[:-1]
        return list(zip(ins, self.hidden_dims))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def init_params(cfg: HgnnConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def dense(name, fan_in, fan_out):
        params[f"{name}.W"] = _glorot(rng, fan_in, fan_out)
        params[f"{name}.b"] = _zeros(fan_out)

    def mlp(name, fan_in, fan_out):
        dense(f"{name}.0", fan_in, fan_out)
        dense(f"{name}.1", fan_out, fan_out)

    d0 = cfg.encoder_dim
    dense("fc1", 1, d0)
    dense("fc2", 2, d0)
    dense("fc3", 1, d0)
    for l, (din, dout) in enumerate(cfg.layer_widths(), start=1):
        dense(f"l{l}.edge", d0, din)
        for u in ("U1", "U2", "U3", "G1", "G2"):
            mlp(f"l{l}.{u}", din, dout)
        mlp(f"l{l}.G3", 2 * din, dout)
    dL = cfg.hidden_dims[-1]
    dense("fc4", dL, 1)
    dense("fc5", dL, 1)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


def _dense(params, name, x):
    return ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _mlp(params, name, x):
    return _dense(params, f"{name}.1", ad.relu(_dense(params, f"{name}.0", x)))


def _norm_gain(h) -> np.ndarray:
    return (np.log10(np.maximum(h, GAIN_FLOOR)) - GAIN_LOG_CENTER) / GAIN_LOG_SCALE


Operator = np.ndarray | sp.csr_matrix  # dense below DENSE_OPERATOR_MAX entries


class InputError(ValueError):
    pass


@dataclass
class GraphBatch:
    """Disjoint union of instance graphs with constant aggregation operators."""

    instances: list[ProblemInstance]
    drone_in: np.ndarray  # (nD, 1)
    group_in: np.ndarray  # (nG, 2)
    edge_in: np.ndarray  # (nE, 1)
    group_mean_others: Operator  # (nG, nG) 1/I_k over same-drone j != i
    group_from_drone: Operator  # (nG, nD)
    drone_from_groups: Operator  # (nD, nG) 1/I_k
    edge_source: Operator  # (nE, nD) edge (k, m) -> f_m
    drone_from_edges: Operator  # (nD, nE) 1/(K - 1)
    drone_segment: np.ndarray  # (nD,) instance index
    drone_slot: np.ndarray  # (nD,) drone index within its instance
    group_offsets: list[int] = field(default_factory=list)
    drone_offsets: list[int] = field(default_factory=list)
    # constants for the rate and load terms
    gain_diag: np.ndarray | None = None  # (nD, 1)
    gain_offdiag: Operator | None = None  # (nD, nD)
    noise: np.ndarray | None = None  # (nD, 1)
    capacity_scale: np.ndarray | None = None  # (nD, 1) T * B / 1 Mbit
    load_matrix: Operator | None = None  # (nD, nG) ones
    volumes_mbit: np.ndarray | None = None  # (nG, 1)
    utilities: np.ndarray | None = None  # (nG, 1)
    power_budget: np.ndarray | None = None  # (B,)

    @property
    def num_instances(self) -> int:
        return len(self.instances)


def build_batch(instances) -> GraphBatch:
    instances = list(instances)
    drone_in, group_in, edge_in = [], [], []
    gmo, gfd, dfg, esrc, dfe, hoff = [], [], [], [], [], []
    seg, slot, gdiag, noise, cap, lm, vol, util, budget = [], [], [], [], [], [], [], [], []
    g_off, d_off, nE = [0], [0], 0
    for b, inst in enumerate(instances):
        H = inst.gains
        vals = [H, inst.utilities, inst.volumes]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise InputError(f"instance {b} has non-finite inputs")
        K, d0, g0 = inst.num_drones, d_off[-1], g_off[-1]
        drone_in.append(_norm_gain(np.diag(H)))
        group_in.append(np.stack([np.log1p(inst.utilities / UTILITY_SCALE),
                                  np.log1p(inst.volumes / VOLUME_SCALE)], axis=1))
        owner = inst.owner
        for g in range(inst.num_groups):
            k = owner[g]
            Ik = inst.groups_per_drone[k]
            gfd.append((g0 + g, d0 + k, 1.0))
            dfg.append((d0 + k, g0 + g, 1.0 / Ik))
            lm.append((d0 + k, g0 + g, 1.0))
            for h in range(inst.offsets[k], inst.offsets[k + 1]):
                if h != g:
                    gmo.append((g0 + g, g0 + h, 1.0 / Ik))
        for k in range(K):
            for m in range(K):
                if m == k:
                    continue
                edge_in.append(_norm_gain(H[k, m]))
                esrc.append((nE, d0 + m, 1.0))
                dfe.append((d0 + k, nE, 1.0 / (K - 1)))
                hoff.append((d0 + k, d0 + m, H[k, m]))
                nE += 1
        seg.append(np.full(K, b))
        slot.append(np.arange(K))
        gdiag.append(np.diag(H))
        noise.append(np.full(K, inst.noise_power))
        cap.append(np.full(K, inst.time_budget * inst.bandwidth / MBIT))
        vol.append(inst.volumes / MBIT)
        util.append(inst.utilities)
        budget.append(inst.power_budget)
        d_off.append(d0 + K)
        g_off.append(g0 + inst.num_groups)
    nD, nG = d_off[-1], g_off[-1]

    def coo(entries, shape):
        # small operators are faster dense; scipy's per-call overhead dominates below this size
        dense = shape[0] * shape[1] <= DENSE_OPERATOR_MAX
        if not entries:
            return np.zeros(shape) if dense else sp.csr_matrix(shape)
        r, c, v = (np.asarray(a) for a in zip(*entries))
        if not dense:
            return sp.csr_matrix((v, (r, c)), shape=shape)
        m = np.zeros(shape)
        np.add.at(m, (r, c), v)
        return m

    col = lambda parts: np.concatenate(parts)[:, None]
    return GraphBatch(
        instances=instances,
        drone_in=col(drone_in),
        group_in=np.concatenate(group_in, axis=0),
        edge_in=np.asarray(edge_in, dtype=np.float64).reshape(nE, 1),
        group_mean_others=coo(gmo, (nG, nG)),
        group_from_drone=coo(gfd, (nG, nD)),
        drone_from_groups=coo(dfg, (nD, nG)),
        edge_source=coo(esrc, (nE, nD)),
        drone_from_edges=coo(dfe, (nD, nE)),
        drone_segment=np.concatenate(seg),
        drone_slot=np.concatenate(slot),
        group_offsets=g_off,
        drone_offsets=d_off,
        gain_diag=col(gdiag),
        gain_offdiag=coo(hoff, (nD, nD)),
        noise=col(noise),
        capacity_scale=col(cap),
        load_matrix=coo(lm, (nD, nG)),
        volumes_mbit=col(vol),
        utilities=col(util),
        power_budget=np.asarray(budget, dtype=np.float64),
    )


def encode(batch: GraphBatch, params) -> tuple[Tensor, Tensor, Tensor]:
    f = _dense(params, "fc1", Tensor(batch.drone_in))
    g = _dense(params, "fc2", Tensor(batch.group_in))
    e = _dense(params, "fc3", Tensor(batch.edge_in))
    return f, g, e


def message_pass(batch: GraphBatch, f: Tensor, g: Tensor, e0: Tensor, params, layer: int):
    """One synchronous layer: both updates read only the previous layer's features."""
    p = f"l{layer}"
    e = _dense(params, f"{p}.edge", e0)
    g_new = ad.add(ad.add(_mlp(params, f"{p}.U1", g),
                          ad.linear_map(batch.group_mean_others, _mlp(params, f"{p}.U2", g))),
                   ad.linear_map(batch.group_from_drone, _mlp(params, f"{p}.U3", f)))
    neighbour = ad.concat([ad.linear_map(batch.edge_source, f), e], axis=1)
    f_new = ad.add(ad.add(_mlp(params, f"{p}.G1", f),
                          ad.linear_map(batch.drone_from_groups, _mlp(params, f"{p}.G2", g))),
                   ad.linear_map(batch.drone_from_edges, _mlp(params, f"{p}.G3", neighbour)))
    return f_new, g_new


@dataclass
class RelaxedOutput:
    selection: Tensor  # (nG, 1) in (0, 1)
    powers: Tensor  # (nD, 1), each instance sums to its budget
    power_fallback: np.ndarray  # (B,) bool, uniform split used

    def allocations(self, batch: GraphBatch) -> list[Allocation]:
        x, p = self.selection.data[:, 0], self.powers.data[:, 0]
        go, do = batch.group_offsets, batch.drone_offsets
        return [Allocation(x[go[b]:go[b + 1]].copy(), p[do[b]:do[b + 1]].copy())
                for b in range(batch.num_instances)]


def decode(batch: GraphBatch, f: Tensor, g: Tensor, params) -> RelaxedOutput:
    raw = ad.relu(_dense(params, "fc4", f))
    p, fallback = ad.l1_normalize(raw, batch.power_budget, batch.drone_segment, eps=POWER_EPS)
    x = ad.sigmoid(_dense(params, "fc5", g))
    return RelaxedOutput(x, p, fallback)


def forward(batch: GraphBatch, params, cfg: HgnnConfig) -> RelaxedOutput:
    f, g, e0 = encode(batch, params)
    for layer in range(1, cfg.num_layers + 1):
        f, g = message_pass(batch, f, g, e0, params, layer)
    return decode(batch, f, g, params)


def predict(instances, params, cfg: HgnnConfig) -> list[Allocation]:
    """Relaxed allocations without recording a tape."""
    batch = build_batch(instances)
    with ad.no_grad():
        return forward(batch, params, cfg).allocations(batch)


def hgnn_solve(inst: ProblemInstance, params, cfg: HgnnConfig, threshold: float = 0.5,
               reoptimize_power: bool = False) -> SolverResult:
    """Forward, threshold and repair one instance; wall time covers all three."""
    t0 = time.perf_counter()
    relaxed = predict([inst], params, cfg)[0]
    res = threshold_and_repair(inst, relaxed, threshold, reoptimize_power, name="hgnn")
    res.wall_time = time.perf_counter() - t0
    return res


def hgnn_info(params, cfg: HgnnConfig) -> dict:
    return {
        "num_layers": cfg.num_layers,
        "hidden_dims": list(cfg.hidden_dims),
        "parameter_count": param_count(params),
        "config_hash": cfg.config_hash(),
    }
