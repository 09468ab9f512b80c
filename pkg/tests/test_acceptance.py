"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict that the terminal summary prints
under "acceptance criteria".  Criteria 4 to 6 share one desk-preset
training run.
"""

import time

import numpy as np
import pytest

from conftest import (
    ACCEPTANCE_RESULTS,
    far_drone_fixture,
    fixed_point_powers,
    permute_instance,
    random_ragged_instance,
)
from gwlags import autodiff as ad
from gwlags.channel import DeploymentConfig
from gwlags.generate import InstanceConfig, desk_preset, paper_preset, sample_instances
from gwlags.hgnn import HgnnConfig, build_batch, forward, hgnn_solve, init_params, predict
from gwlags.problem import check_constraints, min_power_for_selection
from gwlags.solvers import SOLVERS, brute_force_oracle, threshold_and_repair
from gwlags.trainer import (
    SyntheticSource,
    desk_train_config,
    evaluate,
    lagrangian_loss,
    start_state,
    train,
)
from gwlags.utility import gs_loss, ssim

VAL_SEED, HELDOUT_SEED, DOMINANCE_SEED = 7777, 4242, 4243


def record(n: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[n] = (bool(ok), title, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")


# --- shared training run ------------------------------------------------------------

@pytest.fixture(scope="session")
def trained():
    """Desk-preset training from scratch; returns (params, hgnn config, state, seconds)."""
    tcfg, hcfg = desk_train_config(), HgnnConfig()
    source = SyntheticSource(desk_preset(), tcfg.seed)
    val = sample_instances(desk_preset(), tcfg.val_size, VAL_SEED)
    t0 = time.perf_counter()
    state = train(tcfg, hcfg, source, start_state(tcfg, hcfg, source), val)
    return state.params, hcfg, state, time.perf_counter() - t0


# --- 1 ------------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    # the default widths carry 1.27M parameters; a full sweep of central
    # differences over those does not fit the time limit, so the same
    # six-layer architecture is checked at reduced widths
    cfg = HgnnConfig(6, (4, 4, 6, 8, 6, 4))
    icfg = InstanceConfig(DeploymentConfig(num_antennas=4, num_drones=2), groups_per_drone=(2, 2))
    batch = build_batch(sample_instances(icfg, 1, 0))
    params = init_params(cfg, 0)
    r = np.random.default_rng(1)
    for name, p in params.items():
        if name.endswith(".b"):
            p.data[:] = r.normal(0.0, 0.1, p.shape)  # keep ReLU inputs off their kink
    mu, psi, h = np.array([0.003, 0.005]), 0.1, 1e-6

    def loss_value():
        with ad.no_grad():
            return lagrangian_loss(batch, forward(batch, params, cfg), mu, psi).loss.item()

    t0 = time.perf_counter()
    for p in params.values():
        p.zero_grad()
    ad.backward(lagrangian_loss(batch, forward(batch, params, cfg), mu, psi).loss)
    worst, count = 0.0, 0
    for p in params.values():
        flat, grad = p.data.reshape(-1), p.grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_value()
            flat[i] = old - h
            down = loss_value()
            flat[i] = old
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(grad[i]))
            rel = 0.0 if scale == 0.0 else abs(fd - grad[i]) / scale
            worst = max(worst, rel)
            count += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60.0
    record(1, "gradient fidelity", ok,
           f"{count} parameters, max rel err {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-4
    assert elapsed < 60.0


# --- 2 ------------------------------------------------------------------------------

def test_criterion_2_permutation_equivariance():
    cfg = HgnnConfig()
    params = init_params(cfg, 0)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        inst = random_ragged_instance(rng)
        drone_perm = rng.permutation(inst.num_drones)
        group_perms = [rng.permutation(i) for i in inst.groups_per_drone]
        perm_inst, index = permute_instance(inst, drone_perm, group_perms)
        a, b = predict([inst], params, cfg)[0], predict([perm_inst], params, cfg)[0]
        worst = max(worst, np.max(np.abs(b.selection - a.selection[index])),
                    np.max(np.abs(b.powers - a.powers[drone_perm])))
    record(2, "permutation equivariance", worst <= 1e-9, f"100 instances, max dev {worst:.2e}")
    assert worst <= 1e-9


# --- 3 ------------------------------------------------------------------------------

def test_criterion_3_power_control_oracle():
    rng = np.random.default_rng(3)
    insts = sample_instances(desk_preset(), 200, 33)
    t0 = time.perf_counter()
    feasible_checked, worst, mismatches, checked = 0, 0.0, 0, 0
    while feasible_checked < 500:
        inst = insts[int(rng.integers(len(insts)))]
        x = (rng.random(inst.num_groups) < rng.uniform(0.1, 0.9)).astype(float)
        sol = min_power_for_selection(inst, x)
        p_fp, converged = fixed_point_powers(inst, x, steps=10_000)
        checked += 1
        if (sol.powers is None) == converged:
            mismatches += 1
        if sol.feasible:
            scale = np.maximum(np.abs(p_fp), 1e-300)
            worst = max(worst, float(np.max(np.abs(sol.powers - p_fp) / scale)))
            feasible_checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and mismatches == 0 and elapsed < 60.0
    record(3, "power-control oracle", ok,
           f"500 feasible of {checked} sampled, max rel err {worst:.2e}, "
           f"{mismatches} divergence mismatches, {elapsed:.1f} s")
    assert worst <= 1e-8
    assert mismatches == 0
    assert elapsed < 60.0


# --- 4 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_oracle_dominance(trained):
    params, hcfg, _, _ = trained
    insts = sample_instances(desk_preset(), 200, DOMINANCE_SEED)
    t0 = time.perf_counter()
    beaten, infeasible = [], []
    for n, inst in enumerate(insts):
        best = brute_force_oracle(inst)
        results = [SOLVERS[name](inst) for name in ("gw1", "gw2", "stt", "blind")]
        results.append(hgnn_solve(inst, params, hcfg))
        for res in [best] + results:
            if not (res.feasible and check_constraints(inst, res.allocation).feasible):
                infeasible.append((n, res.solver_name))
        for res in results:
            if res.objective > best.objective * (1 + 1e-12):
                beaten.append((n, res.solver_name))
    elapsed = time.perf_counter() - t0
    ok = not beaten and not infeasible and elapsed < 300.0
    record(4, "oracle dominance", ok,
           f"200 instances, {len(beaten)} dominance failures, {len(infeasible)} infeasible, "
           f"{elapsed:.0f} s")
    assert not beaten
    assert not infeasible
    assert elapsed < 300.0


# --- 5 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_learned_policy_quality(trained):
    params, hcfg, _, seconds = trained
    insts = sample_instances(desk_preset(), 100, HELDOUT_SEED)
    oracle = np.mean([brute_force_oracle(i).objective for i in insts])
    policy = evaluate(insts, params, hcfg).objective
    gw1 = np.mean([SOLVERS["gw1"](i).objective for i in insts])
    blind = np.mean([SOLVERS["blind"](i).objective for i in insts])
    ratio = policy / oracle
    ok = ratio >= 0.8 and policy > gw1 and policy > blind and seconds <= 900
    record(5, "learned-policy quality", ok,
           f"policy/oracle {ratio:.3f}, policy {policy:.3f} vs gw1 {gw1:.3f} blind {blind:.3f}, "
           f"training {seconds:.0f} s")
    assert seconds <= 900
    assert ratio >= 0.8
    assert policy > gw1 and policy > blind


# --- 6 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_constraint_behaviour(trained):
    params, hcfg, state, _ = trained
    final = state.history[-1]
    pre, post = final["violation_rate"], final["post_repair_violation_rate"]
    ok = pre < 0.05 and post == 0.0
    record(6, "constraint behaviour", ok,
           f"final pre-repair violation {pre:.3f}, post-repair {post:.3f}")
    assert post == 0.0
    assert pre < 0.05


# --- 7 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_latency(trained):
    params, hcfg, _, _ = trained  # the policy is size-independent; reuse the trained weights
    insts = sample_instances(paper_preset(), 3, 77)
    inst = insts[0]
    assert inst.num_groups == 20 and inst.num_drones == 5
    for _ in range(10):
        hgnn_solve(inst, params, hcfg)
    times = []
    for _ in range(100):
        t0 = time.perf_counter()
        relaxed = predict([inst], params, hcfg)[0]
        threshold_and_repair(inst, relaxed)
        times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    oracle_times = []
    for i in insts:
        t0 = time.perf_counter()
        brute_force_oracle(i)
        oracle_times.append(time.perf_counter() - t0)
    speedup = float(np.median(oracle_times)) / median
    ok = median < 0.010 and speedup >= 100
    record(7, "latency", ok, f"median {median * 1e3:.2f} ms, {speedup:.0f}x faster than the oracle")
    assert median < 0.010
    assert speedup >= 100


# --- 8 ------------------------------------------------------------------------------

def test_criterion_8_gs_loss_unit():
    r = np.random.default_rng(8)
    corpus = []
    for i in range(10):
        h, w = 24 + 3 * i, 30 + 2 * i
        img = r.uniform(0, 1, (h, w) if i % 2 else (h, w, 3))
        corpus.append(img)
    self_dev = max(max(abs(ssim(v, v) - 1.0), abs(gs_loss(v, v))) for v in corpus)
    c1 = 0.01 ** 2
    mix_dev = 0.0
    for a, b in [(0.2, 0.5), (0.0, 1.0), (0.7, 0.65), (0.4, 0.1)]:
        va, vb = np.full((16, 16), a), np.full((16, 16), b)
        s = (2 * a * b + c1) / (a * a + b * b + c1)
        expected = 0.8 * abs(a - b) + 0.2 * (1 - s)
        mix_dev = max(mix_dev, abs(gs_loss(va, vb) - expected))
    ok = self_dev <= 1e-12 and mix_dev <= 1e-12
    record(8, "GS-loss unit checks", ok, f"self dev {self_dev:.1e}, mixture dev {mix_dev:.1e}")
    assert self_dev <= 1e-12
    assert mix_dev <= 1e-12


# --- 9 ------------------------------------------------------------------------------

def test_criterion_9_groupwise_beats_drone_granularity():
    inst = far_drone_fixture()
    group = brute_force_oracle(inst).objective
    drone = SOLVERS["stt"](inst).objective
    record(9, "groupwise vs drone granularity", group > drone,
           f"groupwise {group:.3f}, drone-granular {drone:.3f}")
    assert group > drone
