"""Single-tensor diffusion model: forward signal, log-linear fit, scalar maps.

Tensors are stored as 6-vectors ``(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`` in mm^2/s
with any number of leading voxel axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, UsageError
from .volume_io import GradientTable, VolumeGrid

SIGNAL_FLOOR_FRACTION = 1e-6
# "ADC" throughout is mean diffusivity, (l1 + l2 + l3) / 3.
ADC_IS_MEAN_DIFFUSIVITY = True


@dataclass(frozen=True)
class TensorField:
    """Voxelwise tensors on a grid; ``tensors`` has shape ``dims + (6,)``."""

    grid: VolumeGrid
    tensors: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensors, dtype=np.float64)
        if t.shape != self.grid.dims + (6,):
            raise UsageError(f"tensor array {t.shape} does not match grid {self.grid.dims}")
        object.__setattr__(self, "tensors", t)

    def matrices(self) -> np.ndarray:
        return tensor_to_matrix(self.tensors)


@dataclass(frozen=True)
class TensorMetrics:
    fa: np.ndarray
    adc: np.ndarray
    v1: np.ndarray
    eigenvalues: np.ndarray


def tensor_to_matrix(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(t, -1, 0)
    return np.stack(
        [
            np.stack([xx, xy, xz], axis=-1),
            np.stack([xy, yy, yz], axis=-1),
            np.stack([xz, yz, zz], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_tensor(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.stack(
        [m[..., 0, 0], m[..., 1, 1], m[..., 2, 2], m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]],
        axis=-1,
    )


def quadratic_form(tensor: np.ndarray, bvec: np.ndarray) -> np.ndarray:
    """u^T D u for tensors ``(..., 6)`` and directions ``(n, 3)`` -> ``(..., n)``."""
    u = np.atleast_2d(np.asarray(bvec, dtype=np.float64))
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    q = np.stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z], axis=1)
    return np.asarray(tensor, dtype=np.float64) @ q.T


def st_forward(s0, tensor, bval, bvec):
    """S0 * exp(-b u^T D u). Broadcasts over voxels and over gradient entries."""
    bval = np.asarray(bval, dtype=np.float64)
    bvec = np.asarray(bvec, dtype=np.float64)
    scalar = bval.ndim == 0
    qf = quadratic_form(tensor, bvec.reshape(-1, 3))
    out = np.asarray(s0, dtype=np.float64)[..., None] * np.exp(-np.atleast_1d(bval) * qf)
    return out[..., 0] if scalar else out


def design_matrix(gradients: GradientTable) -> np.ndarray:
    """Rows ``(1, -b ux^2, -b uy^2, -b uz^2, -2b ux uy, -2b ux uz, -2b uy uz)``."""
    b = gradients.bvals
    u = gradients.bvecs
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.stack(
        [np.ones_like(b), -b * x * x, -b * y * y, -b * z * z,
         -2 * b * x * y, -2 * b * x * z, -2 * b * y * z],
        axis=1,
    )


def fit_pseudoinverse(gradients: GradientTable) -> np.ndarray:
    """7 x N matrix mapping log-signals to ``(log S0, tensor)``; raises on rank deficiency."""
    a = design_matrix(gradients)
    if np.linalg.matrix_rank(a, tol=1e-10 * max(1.0, np.abs(a).max())) < 7:
        raise DegenerateGeometryError(
            "gradient table does not determine a tensor (need one b=0 and six non-collinear "
            "diffusion-weighted directions)"
        )
    return np.linalg.pinv(a)


def floor_signals(signals: np.ndarray, gradients: GradientTable) -> np.ndarray:
    signals = np.asarray(signals, dtype=np.float64)
    b0 = gradients.b0_mask()
    ref = signals[..., b0].mean(axis=-1) if np.any(b0) else signals.mean(axis=-1)
    floor = SIGNAL_FLOOR_FRACTION * np.where(ref > 0, ref, 1.0)
    return np.maximum(signals, floor[..., None])


def fit_tensor_loglinear(signals, gradients: GradientTable, weighted: bool = False):
    """Least-squares fit of ``log S = A theta``.

    Returns ``(tensor, log_s0)`` with tensor shape ``(..., 6)``. Ordinary LS by
    default; ``weighted=True`` runs one WLS pass with squared OLS-predicted
    signals as weights.
    """
    pinv = fit_pseudoinverse(gradients)
    logs = np.log(floor_signals(signals, gradients))
    theta = logs @ pinv.T
    if weighted:
        a = design_matrix(gradients)
        w = np.exp(2.0 * (theta @ a.T))
        aw = a[None, :, :] * w.reshape(-1, len(gradients))[:, :, None]
        flat_logs = logs.reshape(-1, len(gradients))
        lhs = np.einsum("vni,nj->vij", aw, a)
        rhs = np.einsum("vni,vn->vi", aw, flat_logs)
        theta = np.linalg.solve(lhs, rhs[..., None])[..., 0].reshape(theta.shape)
    return theta[..., 1:], theta[..., 0]


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip vectors so their first non-negligible component is positive."""
    v = np.array(v, dtype=np.float64)
    nz = np.abs(v) > 1e-12
    first = np.argmax(nz, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)
    sign = np.where(lead < 0, -1.0, 1.0)
    return v * sign


def fractional_anisotropy(evals: np.ndarray) -> np.ndarray:
    l1, l2, l3 = np.moveaxis(np.asarray(evals, dtype=np.float64), -1, 0)
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(0.5 * num / den)
    return np.clip(np.where(den > 0, fa, 0.0), 0.0, 1.0)


def tensor_metrics(tensor) -> TensorMetrics:
    """FA, ADC, principal eigenvector and sorted eigenvalues.

    Eigenvalues are clamped at zero before FA and ADC; v1 is sign-canonical.
    """
    mats = tensor_to_matrix(tensor)
    w, v = np.linalg.eigh(mats)
    w = w[..., ::-1]
    v = v[..., :, ::-1]
    w = np.maximum(w, 0.0)
    v1 = _canonical_sign(v[..., :, 0])
    return TensorMetrics(
        fa=fractional_anisotropy(w),
        adc=w.mean(axis=-1),
        v1=v1,
        eigenvalues=w,
    )


def v1_coherence(directions) -> float:
    """Squared norm of the sign-aligned mean principal direction.

    The reference axis starts at the principal axis of the scatter matrix,
    then is replaced once by the normalised mean of the vectors sign-aligned
    to it.
    """
    v = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise UsageError("v1_coherence needs at least one direction")
    scatter = v.T @ v
    _, vecs = np.linalg.eigh(scatter)
    ref = vecs[:, -1]
    aligned = v * np.where(v @ ref < 0, -1.0, 1.0)[:, None]
    mean = aligned.mean(axis=0)
    if np.linalg.norm(mean) > 0:
        ref = mean / np.linalg.norm(mean)
    contrib = np.sign(v @ ref)[:, None] * v
    return float(np.sum(contrib.mean(axis=0) ** 2))
