"""Image-group utilities: SSIM, the L1+SSIM splatting loss, and group scoring.

A group's utility is the summed loss between the current model's renders
and the ground-truth images of that group; higher means the group would
teach the model more.  Rendering itself happens elsewhere, renders arrive
here as PNG files listed in a group manifest.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5
GS_LAMBDA = 0.2
MANIFEST_SCHEMA = 1


class ImageDataError(ValueError):
    pass


def as_image(a) -> np.ndarray:
    """Validate a (H, W) or (H, W, C) array with values in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (2, 3) or a.shape[0] < 1 or a.shape[1] < 1:
        raise ImageDataError(f"image must be (H, W) or (H, W, C), got shape {a.shape}")
    if a.ndim == 3 and a.shape[2] not in (1, 3):
        raise ImageDataError(f"image must have 1 or 3 channels, got {a.shape[2]}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ImageDataError("pixel values must lie in [0, 1]")
    return a


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float64 in [0, 1] (grayscale or RGB)."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("LA",):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, FileNotFoundError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return as_image(np.clip(arr, 0.0, 1.0))


def save_image(path, a) -> None:
    """Write a [0, 1] array as an 8-bit PNG."""
    a = as_image(a)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    PILImage.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path)


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _blur(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(a, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def _ssim_channel(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a, mu_b = _blur(a, w), _blur(b, w)
    var_a = _blur(a * a, w) - mu_a ** 2
    var_b = _blur(b * b, w) - mu_b ** 2
    cov = _blur(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    smap = num / den
    pad = SSIM_WIN // 2
    if min(a.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def ssim(a, b) -> float:
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Pixel range is [0, 1]; the 5-pixel border affected by padding is excluded
    when the image is large enough.
    """
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ImageDataError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = _gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], w) for c in range(a.shape[2])]))


def gs_loss(rendered, truth, lam: float = GS_LAMBDA) -> float:
    """(1 - lam) * mean|rendered - truth| + lam * (1 - SSIM)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    rendered, truth = as_image(rendered), as_image(truth)
    if rendered.shape != truth.shape:
        raise ImageDataError(f"shape mismatch: {rendered.shape} vs {truth.shape}")
    l1 = float(np.mean(np.abs(rendered - truth)))
    return (1.0 - lam) * l1 + lam * (1.0 - ssim(rendered, truth))


# --- manifests ------------------------------------------------------------

@dataclass
class ImagePair:
    truth: Path
    rendered: Path
    pose: np.ndarray | None = None


@dataclass
class GroupEntry:
    pairs: list[ImagePair]
    volume_bits: float


@dataclass
class GroupManifest:
    drones: list[list[GroupEntry]]

    @property
    def groups_per_drone(self) -> list[int]:
        return [len(d) for d in self.drones]

    @classmethod
    def load(cls, path) -> "GroupManifest":
        """Parse a manifest JSON; image paths are relative to the manifest's directory."""
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("schema_version") != MANIFEST_SCHEMA:
            raise ImageDataError(f"unsupported manifest schema {doc.get('schema_version')!r}")
        base = path.parent
        drones = []
        for k, drone in enumerate(doc["drones"]):
            groups = []
            for i, group in enumerate(drone["groups"]):
                pairs = [ImagePair(base / p["truth"], base / p["rendered"],
                                   None if p.get("pose") is None else np.asarray(p["pose"], float))
                         for p in group["pairs"]]
                if not pairs:
                    raise ImageDataError(f"group ({k}, {i}) has no image pairs")
                if not group["volume_bits"] > 0:
                    raise ImageDataError(f"group ({k}, {i}) volume must be > 0")
                groups.append(GroupEntry(pairs, float(group["volume_bits"])))
            drones.append(groups)
        return cls(drones)


def pair_loss(pair: ImagePair, lam: float = GS_LAMBDA) -> float:
    rendered, truth = load_image(pair.rendered), load_image(pair.truth)
    if rendered.shape != truth.shape:
        raise ImageDataError(f"shape mismatch between {pair.rendered} {rendered.shape} "
                             f"and {pair.truth} {truth.shape}")
    return gs_loss(rendered, truth, lam)


def group_utility(group: GroupEntry, lam: float = GS_LAMBDA, normalize_by_count: bool = False,
                  jobs: int = 1) -> float:
    """Sum of per-pair losses (optionally averaged over the group's pair count)."""
    if not group.pairs:
        raise ImageDataError("group has no image pairs")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            losses = list(pool.map(lambda p: pair_loss(p, lam), group.pairs))
    else:
        losses = [pair_loss(p, lam) for p in group.pairs]
    total = float(np.sum(losses))
    return total / len(losses) if normalize_by_count else total


def score_manifest(manifest: GroupManifest, lam: float = GS_LAMBDA,
                   normalize_by_count: bool = False, jobs: int = 1) -> dict:
    """Utility/volume fragment for every group, joinable with a channel draw."""
    utilities = [[group_utility(g, lam, normalize_by_count, jobs) for g in drone]
                 for drone in manifest.drones]
    return {
        "schema_version": MANIFEST_SCHEMA,
        "kind": "utility_fragment",
        "groups_per_drone": manifest.groups_per_drone,
        "utilities": utilities,
        "volumes_bits": [[g.volume_bits for g in drone] for drone in manifest.drones],
    }


# --- viewpoint clustering -----------------------------------------------

def pose_features(poses) -> np.ndarray:
    """Positions scaled by the scene diagonal, view directions scaled to unit length."""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[1] != 6:
        raise ValueError(f"poses must be (n, 6), got {poses.shape}")
    pos, view = poses[:, :3], poses[:, 3:]
    diag = np.linalg.norm(pos.max(axis=0) - pos.min(axis=0))
    pos = (pos - pos.mean(axis=0)) / (diag if diag > 0 else 1.0)
    norms = np.linalg.norm(view, axis=1, keepdims=True)
    view = view / np.where(norms > 0, norms, 1.0)
    return np.hstack([pos, view])


def cluster_viewpoints(poses, num_groups: int, seed: int = 0) -> np.ndarray:
    """Partition camera poses into ``num_groups`` nonempty groups with k-means (k-means++ seeding).

    Labels are renumbered in order of first appearance.
    """
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    feats = pose_features(poses)
    n = feats.shape[0]
    if num_groups < 1 or n < num_groups:
        raise ValueError(f"cannot split {n} poses into {num_groups} groups")
    if num_groups == 1:
        return np.zeros(n, dtype=np.int64)
    with warnings.catch_warnings():
        # too few distinct poses is handled below
        warnings.simplefilter("ignore", ConvergenceWarning)
        labels = KMeans(n_clusters=num_groups, init="k-means++", n_init=1,
                        random_state=seed).fit_predict(feats)
    # duplicate poses can leave clusters empty; hand each empty label a point from the largest cluster
    for lab in range(num_groups):
        if not np.any(labels == lab):
            big = np.bincount(labels, minlength=num_groups).argmax()
            labels[np.flatnonzero(labels == big)[-1]] = lab
    _, first = np.unique(labels, return_index=True)
    remap = np.empty(num_groups, dtype=np.int64)
    remap[labels[np.sort(first)]] = np.arange(num_groups)
    return remap[labels]


# --- synthetic utilities --------------------------------------------------

@dataclass(frozen=True)
class SyntheticUtilityConfig:
    """Stand-in distribution for group utilities and volumes when no renders exist."""

    utility_median: float = 1.0
    utility_sigma_log: float = 0.75
    images_per_group_min: int = 40
    images_per_group_max: int = 110
    bits_per_image: float = 4e6

    def sample(self, rng: np.random.Generator, num_groups: int) -> tuple[np.ndarray, np.ndarray]:
        pi = self.utility_median * np.exp(self.utility_sigma_log * rng.standard_normal(num_groups))
        images = rng.integers(self.images_per_group_min, self.images_per_group_max + 1, size=num_groups)
        return pi, images * self.bits_per_image
