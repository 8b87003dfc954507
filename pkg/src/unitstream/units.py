"""Discrete-unit extraction: k-means over feature frames plus duplicate merging."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fmat import read_fmat, write_fmat


class ConfigError(ValueError):
    pass


# Full-scale systems quantize against 1000 learned clusters; desk-scale
# fixtures and tests default to 32.
FULL_SCALE_K = 1000
TOY_K = 32


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)
    seed: int = 0
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # Plain squared differences (no x^2-2xy expansion) so tie cases are
    # bit-identical to a loop re-implementation.
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans_fit(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding, deterministic under `seed`."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError(f"points must be (N, D), got {points.shape}")
    n = points.shape[0]
    if k < 1 or n < k:
        raise ConfigError(f"need at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    for i in range(1, k):
        d2 = _sq_dists(points, centroids[:i]).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=d2 / total)]

    prev_inertia = np.inf
    assign = None
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)
        inertia = d2[np.arange(n), new_assign].sum()
        assert inertia <= prev_inertia + 1e-9, "Lloyd inertia increased"
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        prev_inertia = inertia
        for j in range(k):
            members = points[assign == j]
            if len(members):  # empty clusters keep their old centroid
                centroids[j] = members.mean(axis=0)
    return Codebook(centroids=centroids, seed=seed, iterations=it)


def inertia(points: np.ndarray, cb: Codebook) -> float:
    d2 = _sq_dists(np.asarray(points, dtype=np.float64), cb.centroids)
    return float(d2.min(axis=1).sum())


def quantize(features: np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest-centroid index per frame; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != cb.dim:
        raise ValueError(f"features width {features.shape} != codebook dim {cb.dim}")
    return _sq_dists(features, cb.centroids).argmin(axis=1)


def merge_consecutive(raw) -> list[int]:
    """Run-length deduplication preserving order."""
    out: list[int] = []
    for u in raw:
        u = int(u)
        if not out or out[-1] != u:
            out.append(u)
    return out


def validate_unit_sequence(units, k: int) -> list[int]:
    units = [int(u) for u in units]
    for a, b in zip(units, units[1:]):
        if a == b:
            raise ValueError(f"unit sequence has adjacent duplicates ({a})")
    for u in units:
        if not 0 <= u < k:
            raise ValueError(f"unit {u} outside 0..{k - 1}")
    return units


def save_codebook(cb: Codebook, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_fmat(directory / "centroids.fmat", cb.centroids)
    manifest = {"k": cb.k, "dim": cb.dim, "seed": cb.seed, "iterations": cb.iterations}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_codebook(directory) -> Codebook:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    centroids = read_fmat(directory / "centroids.fmat")
    if centroids.shape != (manifest["k"], manifest["dim"]):
        raise ConfigError("codebook manifest disagrees with centroids matrix")
    return Codebook(
        centroids=centroids, seed=manifest["seed"], iterations=manifest["iterations"]
    )
