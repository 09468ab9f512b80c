"""Unsupervised Lagrangian dual training of the HGNN scheduler.

Each step: forward a batch, take an Adam step on the Lagrangian loss, then
move the per-drone multipliers along the batch-mean constraint slack and
project them back onto mu >= 0.  Loads and capacities are in Mbit by default.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .generate import InstanceConfig, sample_instance
from .hgnn import GraphBatch, HgnnConfig, RelaxedOutput, build_batch, forward, predict
from .problem import MBIT, ProblemInstance, check_constraints, objective, violation_rate
from .solvers import threshold_and_repair

log = logging.getLogger(__name__)

X_CLAMP = 1e-6
HISTORY_SCHEMA = 1
MU_INITS = ("zero", "price")
PRICE_SAMPLE = 512


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 400
    batch_size: int = 128
    learning_rate: float = 1e-4
    psi: float = 0.1
    tau: float = 1e-3
    seed: int = 0
    val_size: int = 1024
    threshold: float = 0.5
    load_unit_bits: float = 1e6
    mu_init: str = "price"

    def __post_init__(self):
        if self.mu_init not in MU_INITS:
            raise ValueError(f"mu_init must be one of {MU_INITS}, got {self.mu_init!r}")
        for name in ("epochs", "steps_per_epoch", "batch_size", "val_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "psi", "tau"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0")


def paper_train_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def desk_train_config(**overrides) -> TrainConfig:
    # psi = 0.1 leaves x = 0 and x = 1 absorbing at this scale; 0.01 does not
    cfg = TrainConfig(epochs=20, steps_per_epoch=100, batch_size=64, learning_rate=3e-5,
                      psi=0.01, tau=1e-8, val_size=256)
    return replace(cfg, **overrides)


TRAIN_PRESETS = {"paper": paper_train_config, "desk": desk_train_config}


@dataclass
class DualState:
    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if np.any(self.mu < 0):
            raise ValueError("multipliers must be nonnegative")

    @classmethod
    def zeros(cls, num_drones: int) -> "DualState":
        return cls(np.zeros(num_drones))


@dataclass
class LossTerms:
    loss: Tensor
    utility: float
    penalty: float
    regularizer: float
    slack: np.ndarray  # (B, K) load minus capacity, in load units


def _per_instance(batch: GraphBatch, column: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((batch.num_instances, K))
    out[batch.drone_segment, batch.drone_slot] = column[:, 0]
    return out


def lagrangian_loss(batch: GraphBatch, out: RelaxedOutput, mu, psi: float,
                    load_unit_bits: float = MBIT) -> LossTerms:
    """Batch mean of -utility + sum_k mu_k (load_k - T R_k) + psi * sum log x log(1 - x).

    Loads and capacities are expressed in units of ``load_unit_bits``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    for inst in batch.instances:
        if inst.num_drones != mu.shape[0]:
            raise ValueError(f"mu has {mu.shape[0]} entries for an instance with "
                             f"{inst.num_drones} drones")
    B = batch.num_instances
    x, p = out.selection, out.powers
    utility = ad.sum_(ad.mul(x, batch.utilities))
    unit = MBIT / load_unit_bits
    load = ad.linear_map(batch.load_matrix, ad.mul(x, batch.volumes_mbit * unit))
    signal = ad.mul(p, batch.gain_diag)
    interference = ad.add(ad.linear_map(batch.gain_offdiag, p), batch.noise)
    capacity = ad.mul(ad.log2(ad.add(ad.div(signal, interference), 1.0)), batch.capacity_scale * unit)
    slack = ad.sub(load, capacity)
    penalty = ad.sum_(ad.mul(slack, mu[batch.drone_slot][:, None]))
    xc = ad.clamp(x, X_CLAMP, 1.0 - X_CLAMP)
    reg = ad.sum_(ad.mul(ad.log(xc), ad.log(ad.sub(1.0, xc))))
    total = ad.add(ad.add(ad.mul(utility, -1.0), penalty), ad.mul(reg, psi))
    loss = ad.mul(total, 1.0 / B)
    return LossTerms(loss, utility.item() / B, penalty.item() / B, reg.item() / B,
                     _per_instance(batch, slack.data, mu.shape[0]))


def update_multipliers(mu, slack: np.ndarray, tau: float) -> np.ndarray:
    """Projected subgradient step mu <- max(0, mu + tau * batch-mean slack)."""
    mu = np.asarray(mu, dtype=np.float64)
    return np.maximum(0.0, mu + tau * np.asarray(slack).mean(axis=0))


# --- instance sources -----------------------------------------------------

class SyntheticSource:
    """Fresh i.i.d. instances; batch ``step`` depends only on (seed, step)."""

    def __init__(self, cfg: InstanceConfig, seed: int):
        self.cfg = cfg
        self.seed = seed

    @property
    def num_drones(self) -> int:
        return self.cfg.deployment.num_drones

    def batch(self, step: int, size: int) -> list[ProblemInstance]:
        rng = np.random.default_rng([self.seed, 1, step])
        return [sample_instance(self.cfg, rng) for _ in range(size)]


class PoolSource:
    """Sample (with replacement) from a fixed list of instances."""

    def __init__(self, instances: Sequence[ProblemInstance], seed: int):
        if not instances:
            raise ValueError("instance pool is empty")
        self.instances = list(instances)
        self.seed = seed

    @property
    def num_drones(self) -> int:
        return self.instances[0].num_drones

    def batch(self, step: int, size: int) -> list[ProblemInstance]:
        rng = np.random.default_rng([self.seed, 2, step])
        return [self.instances[i] for i in rng.integers(0, len(self.instances), size)]


# --- evaluation -----------------------------------------------------------

@dataclass
class EvalSummary:
    objective: float  # thresholded + repaired
    objective_pre_repair: float  # thresholded only (may be infeasible)
    violation_rate: float  # thresholded, predicted powers
    post_repair_violation_rate: float


def evaluate(instances, params, hcfg: HgnnConfig, threshold: float = 0.5,
             chunk: int = 256) -> EvalSummary:
    pre_obj, post_obj, pre_reports, post_reports = [], [], [], []
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        for inst, relaxed in zip(part, predict(part, params, hcfg)):
            hard = relaxed.binarized(threshold)
            pre_obj.append(objective(inst, hard))
            pre_reports.append(check_constraints(inst, hard))
            res = threshold_and_repair(inst, relaxed, threshold)
            post_obj.append(res.objective)
            post_reports.append(check_constraints(inst, res.allocation))
    return EvalSummary(float(np.mean(post_obj)), float(np.mean(pre_obj)),
                       violation_rate(pre_reports), violation_rate(post_reports))


# --- training loop ----------------------------------------------------------

@dataclass
class TrainState:
    params: dict[str, Tensor]
    dual: DualState
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0  # epochs completed
    history: list[dict] = field(default_factory=list)


def train_step(batch_instances, state: TrainState, hcfg: HgnnConfig, tcfg: TrainConfig) -> LossTerms:
    batch = build_batch(batch_instances)
    for p in state.params.values():
        p.zero_grad()
    out = forward(batch, state.params, hcfg)
    terms = lagrangian_loss(batch, out, state.dual.mu, tcfg.psi, tcfg.load_unit_bits)
    if not np.isfinite(terms.loss.item()):
        raise TrainingDiverged(f"non-finite loss at epoch {state.epoch + 1}, "
                               f"adam step {state.adam.step}: {terms.loss.item()}")
    ad.backward(terms.loss)
    grads = {n: p.grad for n, p in state.params.items() if p.grad is not None}
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {n} at adam step {state.adam.step}")
    ad.adam_step(state.params, grads, state.adam, tcfg.learning_rate)
    state.dual.mu = update_multipliers(state.dual.mu, terms.slack, tcfg.tau)
    return terms


def train(tcfg: TrainConfig, hcfg: HgnnConfig, source, state: TrainState,
          val_instances: Sequence[ProblemInstance],
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run epochs ``state.epoch + 1 .. tcfg.epochs``; batches are keyed by global step."""
    while state.epoch < tcfg.epochs:
        t0 = time.perf_counter()
        losses = []
        for step in range(tcfg.steps_per_epoch):
            global_step = state.epoch * tcfg.steps_per_epoch + step
            terms = train_step(source.batch(global_step, tcfg.batch_size), state, hcfg, tcfg)
            losses.append(terms.loss.item())
        state.epoch += 1
        summary = evaluate(val_instances, state.params, hcfg, tcfg.threshold)
        row = {
            "epoch": state.epoch,
            "train_loss": float(np.mean(losses)),
            "val_objective": summary.objective,
            "val_objective_pre_repair": summary.objective_pre_repair,
            "violation_rate": summary.violation_rate,
            "post_repair_violation_rate": summary.post_repair_violation_rate,
            "wall_time_s": time.perf_counter() - t0,
        }
        row.update({f"mu_{k}": float(m) for k, m in enumerate(state.dual.mu)})
        state.history.append(row)
        log.info("epoch %d loss %.4f val_obj %.4f viol %.4f mu %s", state.epoch,
                 row["train_loss"], row["val_objective"], row["violation_rate"],
                 np.array2string(state.dual.mu, precision=4))
        if on_epoch is not None:
            on_epoch(state)
    return state


def price_multipliers(instances: Sequence[ProblemInstance], load_unit_bits: float = MBIT) -> np.ndarray:
    """Per-drone utility per load unit, pooled over ``instances``.

    This is the multiplier at which selecting an average group is break-even,
    a neutral starting point for the dual ascent.
    """
    K = instances[0].num_drones
    util, vol = np.zeros(K), np.zeros(K)
    for inst in instances:
        util += np.bincount(inst.owner, weights=inst.utilities, minlength=K)
        vol += inst.drone_loads(np.ones(inst.num_groups)) / load_unit_bits
    return util / vol


def new_state(hcfg: HgnnConfig, num_drones: int, seed: int, mu=None) -> TrainState:
    from .hgnn import init_params

    dual = DualState.zeros(num_drones) if mu is None else DualState(mu)
    return TrainState(init_params(hcfg, seed), dual)


def start_state(tcfg: TrainConfig, hcfg: HgnnConfig, source) -> TrainState:
    """Fresh parameters and multipliers initialised per ``tcfg.mu_init``."""
    mu = None
    if tcfg.mu_init == "price":
        # the dual dynamics are sensitive to a few percent of error here, so
        # estimate from more instances than one batch holds
        sample = source.batch(0, max(tcfg.batch_size, PRICE_SAMPLE))
        mu = price_multipliers(sample, tcfg.load_unit_bits)
    return new_state(hcfg, source.num_drones, tcfg.seed, mu)


def write_history(path, history: list[dict]) -> None:
    if not history:
        Path(path).write_text("")
        return
    fields = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)


def save_state(path, state: TrainState, hcfg: HgnnConfig, tcfg: TrainConfig,
               extra: dict | None = None) -> None:
    meta = {
        "hgnn": {"num_layers": hcfg.num_layers, "hidden_dims": list(hcfg.hidden_dims)},
        "train": asdict(tcfg),
        "epoch": state.epoch,
        "mu": state.dual.mu.tolist(),
        "adam": {
            "step": state.adam.step,
            "m": {k: v.ravel().tolist() for k, v in state.adam.m.items()},
            "v": {k: v.ravel().tolist() for k, v in state.adam.v.items()},
        },
        "history": state.history,
        "history_schema": HISTORY_SCHEMA,
    }
    meta.update(extra or {})
    ad.save_checkpoint(path, state.params, meta)


def load_state(path) -> tuple[TrainState, HgnnConfig, TrainConfig, dict]:
    params, meta = ad.load_checkpoint(path)
    hcfg = HgnnConfig(meta["hgnn"]["num_layers"], tuple(meta["hgnn"]["hidden_dims"]))
    tcfg = TrainConfig(**meta["train"])
    adam_meta = meta.get("adam", {"step": 0, "m": {}, "v": {}})
    shapes = {n: p.shape for n, p in params.items()}
    adam = AdamState(
        step=adam_meta["step"],
        m={k: np.asarray(v, float).reshape(shapes[k]) for k, v in adam_meta["m"].items()},
        v={k: np.asarray(v, float).reshape(shapes[k]) for k, v in adam_meta["v"].items()},
    )
    state = TrainState(params, DualState(meta["mu"]), adam, meta.get("epoch", 0),
                       meta.get("history", []))
    return state, hcfg, tcfg, meta
