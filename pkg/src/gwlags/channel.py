"""Rician uplink channels, MRC/IRC combining and achievable rates.

All quantities are linear SI units (watts, hertz, linear gains); dB inputs
are converted once when a config is loaded.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class DegenerateChannelError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class Receiver(str, Enum):
    MRC = "mrc"
    IRC = "irc"


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


D_MIN = 1.0


@dataclass(frozen=True)
class DeploymentConfig:
    num_antennas: int = 64
    num_drones: int = 5
    area_side: float = 500.0
    path_loss_ref: float = 1e-3
    extra_loss: float = 1e-2
    path_loss_exp: float = 2.0
    rician_k: float = 10.0
    noise_power: float = 1e-13
    bandwidth: float = 3e6
    altitude: float = 0.0
    receiver: Receiver = Receiver.MRC
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.receiver, str) and not isinstance(self.receiver, Receiver):
            object.__setattr__(self, "receiver", Receiver(self.receiver.lower()))
        if int(self.num_antennas) < 1 or int(self.num_drones) < 1:
            raise ConfigError("num_antennas and num_drones must be positive integers")
        for name in ("area_side", "path_loss_ref", "extra_loss", "rician_k",
                     "noise_power", "bandwidth"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be finite and > 0, got {value}")
        if self.path_loss_exp < 0:
            raise ConfigError("path_loss_exp must be >= 0")
        if self.altitude < 0:
            raise ConfigError("altitude must be >= 0")


# key -> (field, converter); dB variants are converted here and nowhere else
_DB_KEYS = {
    "path_loss_ref_db": ("path_loss_ref", db_to_linear),
    "extra_loss_db": ("extra_loss", db_to_linear),
    "rician_k_db": ("rician_k", db_to_linear),
    "noise_power_dbm": ("noise_power", dbm_to_watts),
}


def config_from_mapping(values: dict, base: DeploymentConfig | None = None) -> DeploymentConfig:
    """Build a config from flat keys; unknown keys raise ConfigError."""
    known = {f.name for f in fields(DeploymentConfig)}
    updates = {}
    for key, value in values.items():
        if key in _DB_KEYS:
            name, conv = _DB_KEYS[key]
            updates[name] = conv(float(value))
        elif key in known:
            updates[key] = value
        else:
            raise ConfigError(f"unknown deployment key {key!r}")
    return replace(base or DeploymentConfig(), **updates)


def load_config_file(path) -> dict:
    """Read a flat TOML key-value file; a ``[deployment]`` table is also accepted."""
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@dataclass
class ChannelRealization:
    drone_positions: np.ndarray  # (K, 2) meters
    channel_vectors: np.ndarray  # (K, N) complex
    receiver: Receiver
    composite_gains: np.ndarray  # (K, K), H[k, j] = |w_k^H h_j|^2

    @property
    def num_drones(self) -> int:
        return self.channel_vectors.shape[0]

    def to_dict(self) -> dict:
        h = self.channel_vectors
        return {
            "drone_positions": self.drone_positions.tolist(),
            "channel_vectors": np.stack([h.real, h.imag], axis=-1).tolist(),
            "receiver": self.receiver.value,
            "composite_gains": self.composite_gains.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ChannelRealization":
        pairs = np.asarray(doc["channel_vectors"], dtype=np.float64)
        return cls(
            drone_positions=np.asarray(doc["drone_positions"], dtype=np.float64),
            channel_vectors=pairs[..., 0] + 1j * pairs[..., 1],
            receiver=Receiver(doc["receiver"]),
            composite_gains=np.asarray(doc["composite_gains"], dtype=np.float64),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ChannelRealization":
        return cls.from_dict(json.loads(text))


def steering_vector(theta: float, n: int) -> np.ndarray:
    """Half-wavelength ULA response [1, e^{-j pi sin t}, ..., e^{-j(n-1) pi sin t}]."""
    return np.exp(-1j * np.pi * np.sin(theta) * np.arange(n))


def rician_channel(distance: float, theta: float, config: DeploymentConfig,
                   rng: np.random.Generator) -> np.ndarray:
    n = config.num_antennas
    k = config.rician_k
    large_scale = config.path_loss_ref * config.extra_loss * distance ** (-config.path_loss_exp)
    nlos = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
    small = np.sqrt(k / (k + 1.0)) * steering_vector(theta, n) + np.sqrt(1.0 / (k + 1.0)) * nlos
    return np.sqrt(large_scale) * small


def draw_channels(config: DeploymentConfig, rng: np.random.Generator | None = None) -> ChannelRealization:
    """Place drones uniformly in the square (server at the origin) and draw their channels.

    ``rng`` defaults to a generator seeded by ``config.rng_seed``.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    K, N = config.num_drones, config.num_antennas
    half = config.area_side / 2.0
    positions = rng.uniform(-half, half, size=(K, 2))
    thetas = rng.uniform(-np.pi, np.pi, size=K)
    dist = np.sqrt(np.sum(positions ** 2, axis=1) + config.altitude ** 2)
    dist = np.maximum(dist, D_MIN)
    h = np.stack([rician_channel(dist[k], thetas[k], config, rng) for k in range(K)])
    return realization_from_vectors(h, config.receiver, config.noise_power, positions)


def realization_from_vectors(h: np.ndarray, receiver: Receiver | str, noise_power: float,
                             positions: np.ndarray | None = None) -> ChannelRealization:
    h = np.atleast_2d(np.asarray(h, dtype=np.complex128))
    receiver = Receiver(receiver)
    if receiver is Receiver.MRC:
        w = np.stack([mrc_receiver(h, k) for k in range(h.shape[0])])
    else:
        w = np.stack([irc_receiver(h, k, noise_power) for k in range(h.shape[0])])
    if positions is None:
        positions = np.zeros((h.shape[0], 2))
    return ChannelRealization(positions, h, receiver, composite_gains(w, h))


def composite_gains(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """H[k, j] = |w_k^H h_j|^2."""
    return np.abs(np.conj(w) @ h.T) ** 2


def mrc_receiver(h: np.ndarray, k: int) -> np.ndarray:
    hk = np.asarray(h[k], dtype=np.complex128)
    norm = np.linalg.norm(hk)
    if norm == 0:
        raise DegenerateChannelError(f"drone {k} has an all-zero channel vector")
    return hk / norm


def irc_receiver(h: np.ndarray, k: int, noise_power: float, max_cond: float = 1e12) -> np.ndarray:
    """Unit-norm whitened matched filter w ∝ R_k^{-1} h_k.

    R_k is the interference-plus-noise covariance seen by drone ``k``; this
    vector maximises the generalized Rayleigh quotient of (h_k h_k^H, R_k).
    """
    if noise_power <= 0:
        raise ValueError("noise_power must be > 0")
    h = np.atleast_2d(np.asarray(h, dtype=np.complex128))
    hk = h[k]
    if np.linalg.norm(hk) == 0:
        raise DegenerateChannelError(f"drone {k} has an all-zero channel vector")
    others = np.delete(h, k, axis=0)
    R = others.T @ others.conj() + noise_power * np.eye(h.shape[1])
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > max_cond:
        raise NumericalError(
            f"interference covariance for drone {k} is ill-conditioned (cond={cond:.3e} > {max_cond:.0e}); "
            f"noise_power={noise_power:.3e}, strongest interferer gain={np.max(np.sum(np.abs(others) ** 2, axis=1), initial=0):.3e}")
    w = cho_solve(cho_factor(R, lower=True), hk)
    return w / np.linalg.norm(w)


def sinr(H: np.ndarray, p: np.ndarray, noise_power: float) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    signal = np.diag(H) * p
    interference = H @ p - signal
    return signal / (interference + noise_power)


def compute_rates(H, p, noise_power: float, bandwidth: float) -> np.ndarray:
    """Achievable uplink rate per drone in bit/s.

    ``H`` may be a ChannelRealization or its composite-gain matrix.
    """
    if isinstance(H, ChannelRealization):
        H = H.composite_gains
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("powers must be nonnegative")
    if np.any(np.asarray(H) < 0):
        raise ValueError("composite gains must be nonnegative")
    return bandwidth * np.log2(1.0 + sinr(H, p, noise_power))


def config_to_dict(config: DeploymentConfig) -> dict:
    d = asdict(config)
    d["receiver"] = config.receiver.value
    return d


def load_deployment(path: str | Path | None = None, **overrides) -> DeploymentConfig:
    values = {}
    if path is not None:
        doc = load_config_file(path)
        values.update(doc.get("deployment", {k: v for k, v in doc.items() if not isinstance(v, dict)}))
    values.update(overrides)
    return config_from_mapping(values)
