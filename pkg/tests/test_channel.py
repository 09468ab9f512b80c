import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwlags.channel import (
    ChannelRealization,
    ConfigError,
    DegenerateChannelError,
    DeploymentConfig,
    NumericalError,
    Receiver,
    compute_rates,
    draw_channels,
    irc_receiver,
    load_deployment,
    mrc_receiver,
    realization_from_vectors,
    rician_channel,
    sinr,
    steering_vector,
)


def random_channels(rng, K, N, scale=1e-5):
    return np.sqrt(scale / 2) * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N)))


def test_default_config_matches_experiment_setup():
    cfg = DeploymentConfig()
    assert cfg.area_side == 500.0
    assert cfg.path_loss_ref == pytest.approx(1e-3)
    assert cfg.extra_loss == pytest.approx(1e-2)
    assert cfg.path_loss_exp == 2.0
    assert cfg.rician_k == pytest.approx(10.0)
    assert cfg.noise_power == pytest.approx(1e-13)
    assert cfg.bandwidth == 3e6
    assert cfg.receiver is Receiver.MRC


@pytest.mark.parametrize("bad", [dict(num_antennas=0), dict(num_drones=0), dict(noise_power=0.0),
                                 dict(path_loss_ref=-1.0), dict(path_loss_exp=-0.5)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        DeploymentConfig(**bad)


def test_config_file_accepts_db_keys(tmp_path):
    path = tmp_path / "deploy.toml"
    path.write_text("num_antennas = 8\nnoise_power_dbm = -100\nrician_k_db = 10\n"
                    "path_loss_ref_db = -30\nextra_loss_db = -20\nreceiver = 'irc'\n")
    cfg = load_deployment(path)
    assert cfg.num_antennas == 8
    assert cfg.noise_power == pytest.approx(1e-13, rel=1e-12)
    assert cfg.rician_k == pytest.approx(10.0, rel=1e-12)
    assert cfg.path_loss_ref == pytest.approx(1e-3, rel=1e-12)
    assert cfg.extra_loss == pytest.approx(1e-2, rel=1e-12)
    assert cfg.receiver is Receiver.IRC


def test_config_file_unknown_key(tmp_path):
    path = tmp_path / "deploy.toml"
    path.write_text("antennas = 8\n")
    with pytest.raises(ConfigError):
        load_deployment(path)


def test_los_limit_gives_deterministic_norm():
    cfg = DeploymentConfig(num_antennas=16, rician_k=1e12)
    rng = np.random.default_rng(0)
    for d in (1.0, 37.0, 350.0):
        h = rician_channel(d, rng.uniform(-np.pi, np.pi), cfg, rng)
        expected = cfg.path_loss_ref * cfg.extra_loss * d ** -2 * 16
        assert np.linalg.norm(h) ** 2 == pytest.approx(expected, rel=1e-4)


def test_broadside_steering_is_all_ones():
    np.testing.assert_allclose(steering_vector(0.0, 6), np.ones(6))
    assert np.all(np.abs(np.abs(steering_vector(1.1, 9)) - 1.0) < 1e-15)


def test_second_moment_monte_carlo():
    cfg = DeploymentConfig(num_antennas=4)
    rng = np.random.default_rng(123)
    d = 120.0
    norms = np.array([np.linalg.norm(rician_channel(d, rng.uniform(-np.pi, np.pi), cfg, rng)) ** 2
                      for _ in range(100_000)])
    expected = cfg.path_loss_ref * cfg.extra_loss * d ** -2
    assert np.mean(norms) / 4 == pytest.approx(expected, rel=0.02)


def test_draw_is_deterministic_and_positions_in_area():
    cfg = DeploymentConfig(num_antennas=8, num_drones=4, rng_seed=42)
    a, b = draw_channels(cfg), draw_channels(cfg)
    assert np.array_equal(a.channel_vectors, b.channel_vectors)
    assert np.array_equal(a.composite_gains, b.composite_gains)
    assert np.all(np.abs(a.drone_positions) <= 250.0)
    c = draw_channels(DeploymentConfig(num_antennas=8, num_drones=4, rng_seed=43))
    assert not np.array_equal(a.channel_vectors, c.channel_vectors)


def test_mrc_examples():
    h = np.array([[3.0, 4.0j]])
    w = mrc_receiver(h, 0)
    np.testing.assert_allclose(w, [0.6, 0.8j])
    real = realization_from_vectors(h, "mrc", 1e-13)
    assert real.composite_gains[0, 0] == pytest.approx(25.0)

    h2 = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=complex)
    assert realization_from_vectors(h2, "mrc", 1e-13).composite_gains[0, 1] == 0.0


def test_mrc_single_antenna():
    h = np.array([[2.0 - 1.0j], [0.5j], [3.0]])
    H = realization_from_vectors(h, "mrc", 1e-13).composite_gains
    for k in range(3):
        assert abs(abs(mrc_receiver(h, k)[0]) - 1.0) < 1e-15
        np.testing.assert_allclose(H[k], np.abs(h[:, 0]) ** 2)


def test_mrc_diagonal_equals_norm():
    h = random_channels(np.random.default_rng(1), 5, 8)
    H = realization_from_vectors(h, "mrc", 1e-13).composite_gains
    np.testing.assert_allclose(np.diag(H), np.linalg.norm(h, axis=1) ** 2, rtol=1e-12)


def test_zero_channel_is_degenerate():
    with pytest.raises(DegenerateChannelError):
        mrc_receiver(np.zeros((1, 4)), 0)
    with pytest.raises(DegenerateChannelError):
        irc_receiver(np.zeros((2, 4)), 0, 1e-13)


def test_irc_single_drone_matches_mrc_direction():
    h = random_channels(np.random.default_rng(2), 1, 6)
    w_irc, w_mrc = irc_receiver(h, 0, 1e-13), mrc_receiver(h, 0)
    assert abs(np.vdot(w_irc, w_mrc)) == pytest.approx(1.0, abs=1e-12)


def test_irc_collinear_interferer_gives_mrc_sinr():
    rng = np.random.default_rng(3)
    h0 = random_channels(rng, 1, 4)[0]
    h = np.stack([h0, (0.7 - 0.2j) * h0])
    sig2 = 1e-12
    p = np.ones(2)
    s_irc = sinr(realization_from_vectors(h, "irc", sig2).composite_gains, p, sig2)
    s_mrc = sinr(realization_from_vectors(h, "mrc", sig2).composite_gains, p, sig2)
    np.testing.assert_allclose(s_irc, s_mrc, rtol=1e-9)


def _rayleigh_sinr(h, k, sig2):
    others = np.delete(h, k, axis=0)
    R = others.T @ others.conj() + sig2 * np.eye(h.shape[1])
    return float(np.real(h[k].conj() @ np.linalg.solve(R, h[k])))


def test_irc_dominates_mrc_and_attains_rayleigh_bound():
    rng = np.random.default_rng(4)
    sig2 = 1e-13
    for _ in range(20):
        h = random_channels(rng, 4, 8, scale=rng.uniform(1e-11, 1e-8))
        p = np.ones(4)
        s_irc = sinr(realization_from_vectors(h, "irc", sig2).composite_gains, p, sig2)
        s_mrc = sinr(realization_from_vectors(h, "mrc", sig2).composite_gains, p, sig2)
        assert np.all(s_irc >= s_mrc * (1 - 1e-9))
        bound = [_rayleigh_sinr(h, k, sig2) for k in range(4)]
        np.testing.assert_allclose(s_irc, bound, rtol=1e-8)


def test_irc_ill_conditioned_raises():
    rng = np.random.default_rng(5)
    h = random_channels(rng, 3, 4, scale=1.0)
    with pytest.raises(NumericalError, match="ill-conditioned"):
        irc_receiver(h, 0, 1e-20)


@pytest.mark.parametrize("receiver", ["mrc", "irc"])
def test_common_scaling(receiver):
    rng = np.random.default_rng(6)
    h = random_channels(rng, 3, 6)
    c = 3.0 - 4.0j
    sig2 = 1e-13
    H = realization_from_vectors(h, receiver, sig2).composite_gains
    Hc = realization_from_vectors(c * h, receiver, sig2 * abs(c) ** 2).composite_gains
    # interference nulled by IRC sits at round-off, so compare on the matrix scale
    np.testing.assert_allclose(Hc, abs(c) ** 2 * H, rtol=1e-9, atol=1e-9 * Hc.max())
    p = np.array([0.01, 0.02, 0.03])
    np.testing.assert_allclose(sinr(Hc, p, sig2 * abs(c) ** 2), sinr(H, p, sig2), rtol=1e-9)


def test_rate_examples():
    assert compute_rates(np.array([[1.0]]), [1e-13], 1e-13, 1.0)[0] == pytest.approx(1.0)
    np.testing.assert_array_equal(compute_rates(np.eye(3), np.zeros(3), 1e-13, 3e6), 0.0)
    with pytest.raises(ValueError):
        compute_rates(np.eye(2), [-1e-3, 0.1], 1e-13, 3e6)


def test_rate_against_high_precision():
    H = np.array([[1.0, 0.1], [0.1, 1.0]])
    p = np.array([0.05, 0.05])
    got = compute_rates(H, p, 1e-13, 3e6)
    mpmath.mp.dps = 50
    s = mpmath.mpf
    ref = 3e6 * mpmath.log(1 + s(1) * s("0.05") / (s("0.1") * s("0.05") + s("1e-13")), 2)
    np.testing.assert_allclose(got, [float(ref)] * 2, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000), st.floats(1.01, 10.0))
def test_rate_monotone_in_own_power(K, seed, factor):
    rng = np.random.default_rng(seed)
    h = random_channels(rng, K, 4)
    H = realization_from_vectors(h, "mrc", 1e-13).composite_gains
    p = rng.uniform(0, 0.05, K)
    k = seed % K
    p2 = p.copy()
    p2[k] *= factor
    r1, r2 = compute_rates(H, p, 1e-13, 3e6), compute_rates(H, p2, 1e-13, 3e6)
    assert r2[k] >= r1[k]
    others = np.arange(K) != k
    assert np.all(r2[others] <= r1[others])


def test_rate_zero_iff_zero_power():
    H = np.array([[2.0, 0.5], [0.3, 1.0]]) * 1e-9
    r = compute_rates(H, np.array([0.0, 0.1]), 1e-13, 3e6)
    assert r[0] == 0.0 and r[1] > 0


def test_realization_json_round_trip():
    cfg = DeploymentConfig(num_antennas=4, num_drones=3, rng_seed=9)
    real = draw_channels(cfg)
    back = ChannelRealization.from_json(real.to_json())
    assert np.array_equal(back.channel_vectors, real.channel_vectors)
    assert np.array_equal(back.composite_gains, real.composite_gains)
    assert np.array_equal(back.drone_positions, real.drone_positions)
    assert back.receiver is real.receiver
