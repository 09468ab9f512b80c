"""Instance sampling: channel draw + synthetic (or manifest) utilities and volumes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import DeploymentConfig, config_from_mapping, config_to_dict, draw_channels
from .problem import ProblemInstance
from .utility import SyntheticUtilityConfig


@dataclass(frozen=True)
class InstanceConfig:
    deployment: DeploymentConfig = field(default_factory=DeploymentConfig)
    groups_per_drone: tuple[int, ...] = (4, 4, 4, 4, 4)
    time_budget: float = 50.0
    power_budget: float = 0.1
    synthetic: SyntheticUtilityConfig = field(default_factory=SyntheticUtilityConfig)

    def __post_init__(self):
        gpd = tuple(int(i) for i in self.groups_per_drone)
        object.__setattr__(self, "groups_per_drone", gpd)
        if len(gpd) != self.deployment.num_drones:
            raise ValueError(f"groups_per_drone has {len(gpd)} entries for "
                             f"{self.deployment.num_drones} drones")

    def to_dict(self) -> dict:
        return {
            "deployment": config_to_dict(self.deployment),
            "groups_per_drone": list(self.groups_per_drone),
            "time_budget": self.time_budget,
            "power_budget": self.power_budget,
            "synthetic": asdict(self.synthetic),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InstanceConfig":
        return cls(
            deployment=config_from_mapping(doc.get("deployment", {})),
            groups_per_drone=tuple(doc["groups_per_drone"]),
            time_budget=float(doc.get("time_budget", 50.0)),
            power_budget=float(doc.get("power_budget", 0.1)),
            synthetic=SyntheticUtilityConfig(**doc.get("synthetic", {})),
        )


def paper_preset() -> InstanceConfig:
    """N = 64 antennas, K = 5 drones, 4 groups each."""
    return InstanceConfig(deployment=DeploymentConfig(num_antennas=64, num_drones=5),
                          groups_per_drone=(4,) * 5)


def desk_preset() -> InstanceConfig:
    """K = 3 drones with 3 groups each and N = 8 antennas."""
    return InstanceConfig(deployment=DeploymentConfig(num_antennas=8, num_drones=3),
                          groups_per_drone=(3,) * 3)


PRESETS = {"paper": paper_preset, "desk": desk_preset}


def with_drones(cfg: InstanceConfig, groups_per_drone) -> InstanceConfig:
    gpd = tuple(groups_per_drone)
    return replace(cfg, deployment=replace(cfg.deployment, num_drones=len(gpd)), groups_per_drone=gpd)


def sample_instance(cfg: InstanceConfig, rng: np.random.Generator, **meta) -> ProblemInstance:
    channel = draw_channels(cfg.deployment, rng)
    pi, q = cfg.synthetic.sample(rng, sum(cfg.groups_per_drone))
    return ProblemInstance(
        groups_per_drone=cfg.groups_per_drone,
        utilities=pi,
        volumes=q,
        channel=channel,
        time_budget=cfg.time_budget,
        power_budget=cfg.power_budget,
        noise_power=cfg.deployment.noise_power,
        bandwidth=cfg.deployment.bandwidth,
        meta={"source": "synthetic", **meta},
    )


def sample_instances(cfg: InstanceConfig, count: int, seed: int) -> list[ProblemInstance]:
    """``count`` instances; instance ``n`` depends only on (seed, n)."""
    return [sample_instance(cfg, np.random.default_rng([seed, n]), instance_id=n, seed=seed)
            for n in range(count)]


def instance_from_fragment(fragment: dict, cfg: InstanceConfig, rng: np.random.Generator) -> ProblemInstance:
    """Join a scored (utility, volume) fragment with a fresh channel draw."""
    gpd = tuple(fragment["groups_per_drone"])
    cfg = with_drones(cfg, gpd)
    return ProblemInstance(
        groups_per_drone=gpd,
        utilities=np.concatenate([np.asarray(r, float) for r in fragment["utilities"]]),
        volumes=np.concatenate([np.asarray(r, float) for r in fragment["volumes_bits"]]),
        channel=draw_channels(cfg.deployment, rng),
        time_budget=cfg.time_budget,
        power_budget=cfg.power_budget,
        noise_power=cfg.deployment.noise_power,
        bandwidth=cfg.deployment.bandwidth,
        meta={"source": "manifest"},
    )
