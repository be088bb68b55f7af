"""Seven-channel SH samples: mean low-b, then the l=0 and five l=2 coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .sh import fibonacci_sphere, fit_sh, sh_evaluate
from .tensor import fit_tensor_loglinear
from .volume_io import DwiDataset, GradientTable, Volume, VolumeGrid, split_shells

CHANNELS = ("lowb", "c00", "c2m2", "c2m1", "c20", "c21", "c22")
N_CHANNELS = 7
LOWB = 0
SH = slice(1, 7)
L0 = 1
L2 = slice(2, 7)
DESCRIPTION = "ShSample channels: " + ",".join(CHANNELS)


@dataclass(frozen=True)
class ShSample:
    grid: VolumeGrid
    data: np.ndarray  # dims + (7,)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.shape != self.grid.dims + (N_CHANNELS,):
            raise UsageError(f"ShSample data {d.shape} does not match grid {self.grid.dims} x 7")
        if not np.all(np.isfinite(d)):
            raise UsageError("ShSample values must be finite")
        if np.any(d[..., LOWB] < 0):
            raise UsageError("low-b channel must be non-negative")
        object.__setattr__(self, "data", d)

    @property
    def lowb(self) -> np.ndarray:
        return self.data[..., LOWB]

    @property
    def coeffs(self) -> np.ndarray:
        return self.data[..., SH]

    def with_data(self, data) -> "ShSample":
        return ShSample(self.grid, data)

    def to_volume(self) -> Volume:
        return Volume(self.grid, self.data.astype(np.float32), DESCRIPTION)

    @classmethod
    def from_volume(cls, vol: Volume) -> "ShSample":
        if vol.channels != N_CHANNELS:
            raise UsageError(f"expected a 7-channel volume, got {vol.channels}")
        return cls(vol.grid, vol.data.astype(np.float64))


def dwi_to_sh_sample(dataset: DwiDataset, shell: float | None = None) -> ShSample:
    """Fit degree<=2 SH to one shell, normalised by the mean low-b signal.

    The SH channels are fitted to ``S_i / S0`` so that samples from different
    scanners share a scale; the low-b channel is scaled by its own brain mean.
    """
    g = dataset.gradients
    shells = split_shells(g)
    nonzero = sorted(k for k in shells if k > 0)
    if not nonzero:
        raise UsageError("dataset has no diffusion-weighted shell")
    if shell is None:
        shell = nonzero[0]
    key = min(nonzero, key=lambda k: abs(k - shell))
    idx = shells[key]
    s0 = dataset.mean_b0()
    positive = s0 > 0
    scale = float(s0[positive].mean()) if positive.any() else 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(positive[..., None], dataset.data[..., idx] / s0[..., None], 0.0)
    coeffs = fit_sh(ratio, g.bvecs[idx])
    data = np.concatenate([np.maximum(s0, 0.0)[..., None] / scale, coeffs], axis=-1)
    return ShSample(dataset.grid, data)


def sh_to_tensor(coeffs, bval: float, n_directions: int = 64) -> np.ndarray:
    """Tensor ``(..., 6)`` whose log-linear fit reproduces the SH signal ``S/S0`` at ``bval``.

    The SH function is sampled on a Fibonacci set, floored at 1e-3 and fitted
    with a unit b=0 row; V1 and FA of the result describe the SH profile.
    """
    if bval <= 0:
        raise UsageError("b-value must be positive")
    dirs = fibonacci_sphere(n_directions)
    e = np.maximum(sh_evaluate(coeffs, dirs), 1e-3)
    table = GradientTable(np.concatenate([[0.0], np.full(n_directions, float(bval))]),
                          np.vstack([[0.0, 0.0, 0.0], dirs]))
    signals = np.concatenate([np.ones(e.shape[:-1] + (1,)), e], axis=-1)
    tensor, _ = fit_tensor_loglinear(signals, table)
    return tensor
