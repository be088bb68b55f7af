"""Separable resampling and blur expressed as per-axis matrices.

Every operator here is linear and separable, so a 3-D resample is three
matrix products along the spatial axes. The same matrices drive the
forward-model consistency loss, where they are applied inside the autodiff
graph.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .volume_io import VolumeGrid

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


def linear_matrix(n_in: int, n_out: int, step: float) -> np.ndarray:
    """Linear interpolation, centre-aligned; output voxel ``j`` sits at input index
    ``c_in + (j - c_out) * step`` (clamped to the input range)."""
    c_in = (n_in - 1) / 2.0
    c_out = (n_out - 1) / 2.0
    pos = np.clip(c_in + (np.arange(n_out) - c_out) * step, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - w)
    np.add.at(m, (rows, hi), w)
    return m


def gaussian_matrix(n: int, sigma_vox: float) -> np.ndarray:
    """Truncated (4 sigma) Gaussian smoothing with rows renormalised at the borders."""
    if sigma_vox <= 0:
        return np.eye(n)
    idx = np.arange(n)
    d = idx[:, None] - idx[None, :]
    k = np.exp(-0.5 * (d / sigma_vox) ** 2)
    k[np.abs(d) > 4.0 * sigma_vox + 0.5] = 0.0
    return k / k.sum(axis=1, keepdims=True)


def blur_fwhm(src_mm: float, target_mm: float) -> float:
    """Anti-aliasing FWHM ``target * sqrt(1 - (src/target)^2)``; 0 when not downsampling."""
    if target_mm <= src_mm:
        return 0.0
    return target_mm * np.sqrt(1.0 - (src_mm / target_mm) ** 2)


def resampled_grid(grid: VolumeGrid, voxel_mm: float) -> VolumeGrid:
    """Isotropic grid at ``voxel_mm`` over the same field of view, centre-aligned."""
    src = np.array(grid.voxel_size)
    dims = tuple(max(1, int(round(n * s / voxel_mm))) for n, s in zip(grid.dims, src))
    scale = voxel_mm / src
    aff = grid.affine.copy()
    aff[:3, :3] = grid.affine[:3, :3] * scale[None, :]
    c_in = (np.array(grid.dims) - 1) / 2.0
    c_out = (np.array(dims) - 1) / 2.0
    aff[:3, 3] = grid.affine[:3, :3] @ (c_in - c_out * scale) + grid.affine[:3, 3]
    return VolumeGrid(dims, (voxel_mm,) * 3, aff)


def grid_to_grid_matrices(src: VolumeGrid, dst: VolumeGrid) -> list[np.ndarray]:
    """Per-axis linear interpolation matrices from ``src`` onto ``dst`` (centre-aligned)."""
    return [linear_matrix(ni, no, vo / vi)
            for ni, no, vi, vo in zip(src.dims, dst.dims, src.voxel_size, dst.voxel_size)]


def apply_axes(data: np.ndarray, mats) -> np.ndarray:
    """Apply one matrix per spatial axis (axes 0, 1, 2) of ``data``."""
    out = data
    for ax, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [ax])), 0, ax)
    return out


class DegradeOperator:
    """Blur, resample to ``target_mm`` and linearly upsample back: three n x n matrices.

    ``down`` maps the source grid to the coarse grid (blur included); ``up``
    maps back; ``full`` is their product per axis.
    """

    def __init__(self, grid: VolumeGrid, target_mm: float):
        if target_mm <= 0:
            raise UsageError("target resolution must be positive")
        self.grid = grid
        self.target_mm = float(target_mm)
        self.coarse = resampled_grid(grid, target_mm)
        self.fwhm_mm = blur_fwhm(min(grid.voxel_size), target_mm)
        self.down = []
        self.up = []
        for n_in, n_out, vs in zip(grid.dims, self.coarse.dims, grid.voxel_size):
            blur = gaussian_matrix(n_in, self.fwhm_mm * FWHM_TO_SIGMA / vs)
            self.down.append(linear_matrix(n_in, n_out, target_mm / vs) @ blur)
            self.up.append(linear_matrix(n_out, n_in, vs / target_mm))
        self.full = [u @ d for u, d in zip(self.up, self.down)]

    def degrade(self, data: np.ndarray) -> np.ndarray:
        return apply_axes(data, self.full)

    def downsample(self, data: np.ndarray) -> np.ndarray:
        return apply_axes(data, self.down)

    def upsample(self, data: np.ndarray) -> np.ndarray:
        return apply_axes(data, self.up)
