"""Composite training loss: channel-split L2/L1, soft-argmax angular term, forward-model consistency."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import UsageError
from ..sh import L2_SLICE, eval_real_sh_basis, fibonacci_sphere

DEFAULT_TEMPERATURE = 0.05
DEFAULT_FIBONACCI = 256
POWER_EPS = 1e-12


@dataclass
class LossWeights:
    w_lowb_l2: float = 5.0
    w_l2order_l1: float = 10.0
    w_angular: float = 1.0
    w_consistency: float = 2.5
    fibonacci_count: int = DEFAULT_FIBONACCI
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if min(self.w_lowb_l2, self.w_l2order_l1, self.w_angular, self.w_consistency) < 0:
            raise UsageError("loss weights must be non-negative")
        if self.fibonacci_count < 64 or self.temperature <= 0:
            raise UsageError("soft-argmax needs >= 64 directions and a positive temperature")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class SoftArgmax:
    """Differentiable principal diffusion axis from l=2 SH coefficients.

    The l=2 part of the signal is sampled on a Fibonacci set, negated (the
    signal dips along the fast-diffusion axis) and normalised by the l=2
    power so the temperature is scale-free. Softmax weights then average the
    axial outer products ``u u^T``; the top eigenvector of that matrix is the
    direction.
    """

    def __init__(self, count: int = DEFAULT_FIBONACCI, temperature: float = DEFAULT_TEMPERATURE,
                 dtype=np.float64):
        if count < 64 or temperature <= 0:
            raise UsageError("soft-argmax needs >= 64 directions and a positive temperature")
        self.directions = fibonacci_sphere(count)
        self.temperature = float(temperature)
        self.basis_l2 = eval_real_sh_basis(self.directions)[:, L2_SLICE].T.astype(dtype)  # (5, n)
        outer = self.directions[:, :, None] * self.directions[:, None, :]
        self.outer = outer.reshape(count, 9).astype(dtype)

    def __call__(self, l2):
        """``l2``: ``(..., 5)`` tensor -> unit vectors ``(..., 3)`` (sign-canonicalised)."""
        l2 = ad.as_tensor(l2)
        lead = l2.shape[:-1]
        flat = l2.reshape(-1, 5)
        norm = ad.sqrt(ad.tsum(flat * flat, axis=-1, keepdims=True) + POWER_EPS)
        scores = ad.matmul(flat, ad.Tensor(self.basis_l2)) / norm
        w = ad.softmax(scores * (-1.0 / self.temperature), axis=-1)
        m = ad.matmul(w, ad.Tensor(self.outer)).reshape(-1, 3, 3)
        _, v = ad.eigh3(m)
        d = v[:, :, 2]
        sign = _canonical_sign(d.data)
        return (d * sign[:, None].astype(d.dtype)).reshape(lead + (3,))


def _canonical_sign(d: np.ndarray) -> np.ndarray:
    """+1/-1 per row so the first component with |x| > 1e-12 is positive."""
    nz = np.abs(d) > 1e-12
    first = np.argmax(nz, axis=-1)
    val = np.take_along_axis(d, first[:, None], axis=-1)[:, 0]
    return np.where(val < 0, -1.0, 1.0)


def soft_argmax_direction(coeffs, count: int = DEFAULT_FIBONACCI,
                          temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Numpy convenience: principal axis of ``(..., 6)`` SH coefficients."""
    c = np.asarray(coeffs, dtype=np.float64)
    return SoftArgmax(count, temperature)(c[..., L2_SLICE]).data


def _channels_last(t):
    return ad.transpose(t, (0, 2, 3, 4, 1)).reshape(-1, t.shape[1])


def composite_loss(pred, target: np.ndarray, lr_input: np.ndarray, degrade_full,
                   weights: LossWeights | None = None, soft_argmax: SoftArgmax | None = None):
    """Weighted sum of the four loss terms on ``(B, 7, X, Y, Z)`` fields.

    ``degrade_full`` holds the three per-axis blur-resample-upsample matrices
    of the current degradation (``DegradeOperator.full``), or ``None`` to
    skip the consistency term. Channel groups are summed per voxel and then
    averaged over voxels; the consistency term is a plain mean over all
    elements. Returns ``(loss_tensor, terms)`` with the unweighted terms.
    """
    weights = weights or LossWeights()
    pred = ad.as_tensor(pred)
    if pred.shape != target.shape or pred.shape != lr_input.shape:
        raise UsageError(f"shape mismatch: {pred.shape}, {target.shape}, {lr_input.shape}")
    dt = pred.dtype
    target = np.asarray(target, dtype=dt)
    nvox = pred.shape[0] * int(np.prod(pred.shape[2:]))

    diff = pred - target
    l2_term = ad.tsum(diff[:, 0:2] * diff[:, 0:2]) * (1.0 / nvox)
    l1_term = ad.tsum(ad.absolute(diff[:, 2:7])) * (1.0 / nvox)

    sa = soft_argmax or SoftArgmax(weights.fibonacci_count, weights.temperature, dt)
    tgt_l2 = target[:, 2:7].transpose(0, 2, 3, 4, 1).reshape(-1, 5)
    power = (tgt_l2 ** 2).sum(axis=-1)
    if weights.w_angular > 0 and power.sum() > POWER_EPS:
        d_pred = sa(_channels_last(pred[:, 2:7]))
        d_tgt = sa(tgt_l2).data
        cos = ad.tsum(d_pred * d_tgt, axis=-1)
        sin2 = ad.clip(1.0 - cos * cos, 0.0, None)  # roundoff can push cos past 1
        ang_term = ad.tsum(sin2 * power.astype(dt)) * (1.0 / float(power.sum()))
    else:
        ang_term = ad.Tensor(np.zeros((), dtype=dt))

    if degrade_full is not None and weights.w_consistency > 0:
        deg = pred
        for ax, mat in enumerate(degrade_full):
            deg = ad.axis_linear(deg, np.asarray(mat, dtype=dt), axis=2 + ax)
        r = deg - np.asarray(lr_input, dtype=dt)
        cons_term = ad.mean(r * r)
    else:
        cons_term = ad.Tensor(np.zeros((), dtype=dt))

    total = (l2_term * weights.w_lowb_l2 + l1_term * weights.w_l2order_l1
             + ang_term * weights.w_angular + cons_term * weights.w_consistency)
    terms = {
        "lowb_l0_l2": float(l2_term.data),
        "l2order_l1": float(l1_term.data),
        "angular": float(ang_term.data),
        "consistency": float(cons_term.data),
    }
    return total, terms
