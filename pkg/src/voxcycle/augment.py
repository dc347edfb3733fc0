"""Random 3D rotation augmentation with trilinear resampling."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import thread_cap
from .volume import Volume, save


@dataclass(frozen=True)
class Rotation:
    angles: tuple[float, float, float]  # degrees about x, y, z

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(*self.angles)

    @property
    def is_identity(self) -> bool:
        return all(a == 0 for a in self.angles)


def rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles in degrees."""
    x, y, z = np.deg2rad([ax, ay, az])
    cx, sx, cy, sy, cz, sz = np.cos(x), np.sin(x), np.cos(y), np.sin(y), np.cos(z), np.sin(z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_rotation(rng: np.random.Generator, sigma_degrees: float = 10.0) -> Rotation:
    if sigma_degrees < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma_degrees}")
    if sigma_degrees == 0:
        return Rotation((0.0, 0.0, 0.0))
    return Rotation(tuple(float(a) for a in rng.normal(0.0, sigma_degrees, size=3)))


def trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample 3D ``data`` at fractional ``coords`` (shape ``[3, ...]``).

    Neighbours outside the grid contribute 0, so points beyond the border
    fade to the background value.
    """
    shape = np.array(data.shape)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for corner in np.ndindex(2, 2, 2):
        idx = base + np.array(corner).reshape(3, *([1] * (coords.ndim - 1)))
        inside = np.all((idx >= 0) & (idx < shape.reshape(3, *([1] * (coords.ndim - 1)))),
                        axis=0)
        w = np.ones(coords.shape[1:])
        for a, c in enumerate(corner):
            w = w * (frac[a] if c else 1.0 - frac[a])
        clipped = [np.clip(idx[a], 0, shape[a] - 1) for a in range(3)]
        out += np.where(inside, w * data[tuple(clipped)], 0.0)
    return out


def rotate_volume(volume: Volume, rotation: Rotation) -> Volume:
    """Rotate about the volume center by inverse mapping; shape is unchanged."""
    data = volume.data[0] if volume.data.ndim == 4 else volume.data
    if data.ndim != 3:
        raise ValueError(f"rotate_volume needs a 3D volume, got {volume.data.shape}")
    if rotation.is_identity:
        return replace(volume, data=volume.data.copy())
    center = (np.array(data.shape, dtype=np.float64) - 1) / 2
    grid = np.indices(data.shape, dtype=np.float64).reshape(3, -1)
    # output voxel p samples the input at R^-1 (p - c) + c, and R^-1 = R^T
    src = rotation.matrix.T @ (grid - center[:, None]) + center[:, None]
    out = trilinear(data.astype(np.float64), src).reshape(data.shape)
    return replace(volume, data=out.astype(volume.data.dtype)[None])


def _rotation_seed(seed: int, volume_index: int, copy_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, volume_index, copy_index]))


def rotation_for(seed: int, volume_index: int, copy_index: int,
                 sigma_degrees: float = 10.0) -> Rotation:
    """Rotation of copy ``copy_index`` (1-based) of volume ``volume_index``.

    Seeds depend only on these indices, so results do not depend on the
    order in which workers run.
    """
    return sample_rotation(_rotation_seed(seed, volume_index, copy_index), sigma_degrees)


class AugmentedDataset(Sequence):
    """Lazy view: item ``i * (n + 1)`` is original ``i``, the next ``n`` its rotations."""

    def __init__(self, volumes: Sequence[Volume], rotations_per_volume: int = 10,
                 seed: int = 0, sigma_degrees: float = 10.0):
        if len(volumes) == 0:
            raise ValueError("augment_dataset needs at least one volume")
        if rotations_per_volume < 0:
            raise ValueError("rotations_per_volume must be non-negative")
        self.volumes = volumes
        self.n = rotations_per_volume
        self.seed = seed
        self.sigma = sigma_degrees

    def __len__(self):
        return len(self.volumes) * (1 + self.n)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        vi, ci = divmod(i, 1 + self.n)
        vol = self.volumes[vi]
        if ci == 0:
            return vol
        return rotate_volume(vol, rotation_for(self.seed, vi, ci, self.sigma))


def _workers() -> int:
    return thread_cap() or min(8, os.cpu_count() or 1)


def augment_dataset(volumes: Sequence[Volume], rotations_per_volume: int = 10,
                    seed: int = 0, sigma_degrees: float = 10.0,
                    lazy: bool = False) -> Sequence[Volume]:
    """Each original followed by ``rotations_per_volume`` rotated copies.

    ``lazy=True`` returns an :class:`AugmentedDataset` that rotates on access;
    otherwise every copy is computed up front on a bounded thread pool.
    """
    ds = AugmentedDataset(volumes, rotations_per_volume, seed, sigma_degrees)
    if lazy:
        return ds
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        return list(pool.map(ds.__getitem__, range(len(ds))))


def materialize(paths: Sequence[str | Path], volumes: Sequence[Volume], out_dir: str | Path,
                rotations_per_volume: int = 10, seed: int = 0,
                sigma_degrees: float = 10.0) -> list[Path]:
    """Write originals and ``<stem>_rotNN`` copies as NIfTI files into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = AugmentedDataset(volumes, rotations_per_volume, seed, sigma_degrees)

    def job(i):
        vi, ci = divmod(i, 1 + ds.n)
        name = Path(paths[vi]).name
        suffix = ".nii.gz" if name.endswith(".nii.gz") else ".nii"
        stem = name[: -len(suffix)] if name.endswith(suffix) else Path(name).stem
        target = out_dir / (f"{stem}{suffix}" if ci == 0 else f"{stem}_rot{ci:02d}{suffix}")
        save(ds[i], target)
        return target

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        return list(pool.map(job, range(len(ds))))
