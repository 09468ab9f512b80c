import numpy as np
import pytest

from gwlags.channel import ChannelRealization, Receiver
from gwlags.problem import ProblemInstance, interference_system, sinr_targets


def make_instance(H, utilities, volumes, groups_per_drone, *, time_budget=50.0,
                  power_budget=0.1, noise_power=1e-13, bandwidth=3e6) -> ProblemInstance:
    """Instance with an explicit composite gain matrix (no antenna vectors behind it)."""
    H = np.asarray(H, dtype=np.float64)
    K = H.shape[0]
    channel = ChannelRealization(
        drone_positions=np.zeros((K, 2)),
        channel_vectors=np.zeros((K, 1), dtype=complex),
        receiver=Receiver.MRC,
        composite_gains=H,
    )
    return ProblemInstance(tuple(groups_per_drone), np.asarray(utilities, float),
                           np.asarray(volumes, float), channel, time_budget=time_budget,
                           power_budget=power_budget, noise_power=noise_power, bandwidth=bandwidth)


def fixed_point_powers(inst, x, steps=10_000):
    """Iterate p <- A p + b from zero; returns (p, converged)."""
    gamma = sinr_targets(inst, x)
    A, b = interference_system(inst.gains, gamma, inst.noise_power)
    p = np.zeros_like(b)
    for _ in range(steps):
        nxt = A @ p + b
        if not np.all(np.isfinite(nxt)) or nxt.max(initial=0.0) > 1e12:
            return nxt, False
        if np.allclose(nxt, p, rtol=1e-15, atol=0.0):
            return nxt, True
        p = nxt
    return p, bool(np.allclose(A @ p + b, p, rtol=1e-12, atol=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def far_drone_fixture() -> ProblemInstance:
    """Near drone with two modest groups; far drone holding one small high-utility group
    and one bulky low-utility group.  Shipping the far drone whole is infeasible."""
    H = np.array([[1e-9, 1e-16], [1e-16, 1e-12]])
    return make_instance(H, [1.0, 1.0, 5.0, 0.1], [1e8, 1e8, 5e7, 1e9], (2, 2))


def permute_instance(inst: ProblemInstance, drone_perm, group_perms):
    """Reorder drones by ``drone_perm`` and each drone's groups by ``group_perms[k]``.

    Returns (permuted instance, flat index map) where new flat group n came
    from old flat group ``index[n]``.
    """
    offsets = inst.offsets
    index = np.concatenate([offsets[k] + np.asarray(group_perms[k]) for k in drone_perm])
    H = inst.gains[np.ix_(drone_perm, drone_perm)]
    channel = ChannelRealization(
        drone_positions=inst.channel.drone_positions[drone_perm],
        channel_vectors=inst.channel.channel_vectors[drone_perm],
        receiver=inst.channel.receiver,
        composite_gains=H,
    )
    permuted = ProblemInstance(
        tuple(inst.groups_per_drone[k] for k in drone_perm),
        inst.utilities[index], inst.volumes[index], channel,
        time_budget=inst.time_budget, power_budget=inst.power_budget,
        noise_power=inst.noise_power, bandwidth=inst.bandwidth)
    return permuted, index


def random_ragged_instance(rng, K=None, max_groups=4, N=4):
    """Synthetic instance with random K and per-drone group counts."""
    from gwlags.channel import DeploymentConfig
    from gwlags.generate import InstanceConfig, sample_instance

    K = int(rng.integers(2, 6)) if K is None else K
    gpd = tuple(int(i) for i in rng.integers(1, max_groups + 1, K))
    cfg = InstanceConfig(deployment=DeploymentConfig(num_antennas=N, num_drones=K),
                         groups_per_drone=gpd)
    return sample_instance(cfg, rng)


# --- acceptance reporting ---------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
