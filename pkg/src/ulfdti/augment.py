"""Train-time augmentation of SH samples and the ULF degradation protocol."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, map_coordinates, zoom

from .errors import DegenerateFieldError, UsageError
from .phantom import rician
from .resample import DegradeOperator, apply_axes, grid_to_grid_matrices, resampled_grid
from .sample import L0, L2, LOWB, SH, ShSample
from .sh import (DEFAULT_RIDGE_LAMBDA, WignerRotation, build_icosphere, deproject_ridge,
                 low_rank_mix, project_to_icosphere, rotation_block_l2, wigner_rotate)
from .volume_io import DwiDataset, Volume

ULF_TARGET_MM = 3.5
ULF_N_DIRECTIONS = 9
ULF_RICIAN_SIGMA = 100.0


@dataclass
class AugmentConfig:
    crop_size: tuple[int, int, int] = (64, 64, 64)
    gamma_std: float = 0.1
    bias_sigma: float = 0.2
    bias_grid_mm: float = 4.0
    noise_sigma_max: float = 0.06
    resample_range_mm: tuple[float, float] = (1.5, 4.0)
    drift_gain_range: tuple[float, float] = (0.95, 1.05)
    mix_range: tuple[float, float] = (-0.025, 0.025)
    icosphere_noise_sigma: float = 0.02
    subsample_rows: tuple[int, int] = (4, 9)
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
    taper_length_voxels: int = 8
    deform_patch_fraction: float = 0.5
    deform_max_voxels: float = 2.0
    deform_control_points: int = 4
    fold_tolerance: float = 0.005
    max_rejections: int = 10
    seed: int = 0
    shuffle: bool = False

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        for name in ("resample_range_mm", "drift_gain_range", "mix_range", "subsample_rows"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise UsageError(f"{name} must be ordered (lo <= hi)")
            setattr(self, name, (lo, hi))
        if min(self.crop_size) < 1 or self.taper_length_voxels < 1:
            raise UsageError("crop size and taper length must be positive")
        if self.subsample_rows[0] < 1 or self.subsample_rows[1] > 42:
            raise UsageError("subsample rows must lie in [1, 42]")
        if min(self.gamma_std, self.bias_sigma, self.noise_sigma_max, self.icosphere_noise_sigma) < 0:
            raise UsageError("noise and field scales must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "AugmentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def worker_rng(seed: int, worker: int) -> np.random.Generator:
    """Independent stream per (seed, worker) pair."""
    return np.random.default_rng([int(seed), int(worker)])


def smooth_field(dims, spacing_vox: float, rng: np.random.Generator) -> np.ndarray:
    """Cubic upsampling of i.i.d. N(0, 1) values on a coarse control grid."""
    coarse = tuple(max(2, int(np.ceil(n / max(spacing_vox, 1.0))) + 1) for n in dims)
    vals = rng.normal(size=coarse)
    return zoom(vals, [n / c for n, c in zip(dims, coarse)], order=3, mode="nearest",
                grid_mode=True)[: dims[0], : dims[1], : dims[2]]


# ---------------------------------------------------------------- geometric chain

@dataclass
class DegradeParams:
    """The draws of one geometric_degrade call; reused by the consistency loss."""

    crop_start: tuple[int, int, int]
    target_mm: float
    noise_sigma: float
    apply_gamma: bool = True
    apply_bias: bool = True


def draw_degrade_params(sample: ShSample, config: AugmentConfig, rng) -> DegradeParams:
    dims = sample.grid.dims
    crop = config.crop_size
    if any(c > d for c, d in zip(crop, dims)):
        raise UsageError(f"crop {crop} larger than volume {dims}")
    start = tuple(int(rng.integers(0, d - c + 1)) for c, d in zip(crop, dims))
    lo, hi = config.resample_range_mm
    target = float(rng.uniform(lo, hi))
    sigma = float(rng.uniform(0.0, config.noise_sigma_max))
    return DegradeParams(start, target, sigma)


def geometric_degrade(sample: ShSample, config: AugmentConfig, rng: np.random.Generator,
                      params: DegradeParams | None = None) -> ShSample:
    return geometric_degrade_pair(sample, config, rng, params)[1]


def geometric_degrade_pair(sample: ShSample, config: AugmentConfig, rng: np.random.Generator,
                           params: DegradeParams | None = None):
    """Crop, gamma, bias, noise, blur, resample and trilinear upsample.

    Returns ``(hr_crop, lr, params, operator)`` where ``lr`` is on the crop
    grid and ``operator`` is the blur-resample-upsample map that was applied.
    """
    params = params or draw_degrade_params(sample, config, rng)
    crop = config.crop_size
    s = params.crop_start
    region = tuple(slice(a, a + c) for a, c in zip(s, crop))
    hr = sample.data[region]
    grid = sample.grid
    aff = grid.affine.copy()
    aff[:3, 3] = grid.affine[:3, :3] @ np.array(s, dtype=float) + grid.affine[:3, 3]
    crop_grid = type(grid)(crop, grid.voxel_size, aff)
    x = np.array(hr, dtype=np.float64)
    vox = min(grid.voxel_size)
    if params.apply_gamma and config.gamma_std > 0:
        g = smooth_field(crop, config.bias_grid_mm / vox, rng)
        g = 1.0 + config.gamma_std * (g - g.mean()) / max(g.std(), 1e-12)
        g = np.maximum(g, 0.05)
        for ch in (LOWB, L0):
            ref = np.percentile(np.abs(x[..., ch]), 99) or 1.0
            x[..., ch] = np.sign(x[..., ch]) * ref * (np.abs(x[..., ch]) / ref) ** g
    if params.apply_bias and config.bias_sigma > 0:
        spacing = config.bias_grid_mm / vox
        field_ = np.exp(config.bias_sigma * smooth_field(crop, spacing, rng))
        x[..., LOWB] *= field_
        x[..., L0] *= field_
    if params.noise_sigma > 0:
        x = x + rng.normal(0.0, params.noise_sigma, x.shape)
    op = DegradeOperator(crop_grid, params.target_mm)
    lr = op.degrade(x)
    lr[..., LOWB] = np.maximum(lr[..., LOWB], 0.0)
    return ShSample(crop_grid, hr), ShSample(crop_grid, lr), params, op


# ---------------------------------------------------------------- patch deformation

def taper_weights(shape, taper: int) -> np.ndarray:
    """``0.5 (1 - cos(pi eta / b))`` for eta < b, else 1; eta = Chebyshev distance to the boundary."""
    axes = [np.minimum(np.arange(n), n - 1 - np.arange(n)) for n in shape]
    eta = np.minimum(np.minimum(axes[0][:, None, None], axes[1][None, :, None]),
                     axes[2][None, None, :]).astype(np.float64)
    return np.where(eta < taper, 0.5 * (1.0 - np.cos(np.pi * eta / taper)), 1.0)


def polar_rotation(f: np.ndarray) -> np.ndarray:
    """Rotation factor R = F U^-1 of the right polar decomposition (via SVD)."""
    w, _, vt = np.linalg.svd(f)
    return w @ vt


def _jacobian(u: np.ndarray) -> np.ndarray:
    """F = I + grad u for a displacement field ``(..., 3)`` in voxel units."""
    f = np.empty(u.shape[:3] + (3, 3))
    for i in range(3):
        grads = np.gradient(u[..., i], axis=(0, 1, 2))
        for j in range(3):
            f[..., i, j] = grads[j]
    return f + np.eye(3)


@dataclass
class PatchDeformation:
    region: tuple[slice, slice, slice]
    displacement: np.ndarray  # tapered u_eta, patch shape + (3,)
    rotation: np.ndarray       # patch shape + (3, 3)
    det: np.ndarray
    rejections: int = 0


def draw_patch_deformation(dims, config: AugmentConfig, rng, displacement=None) -> PatchDeformation:
    """Random (or given) displacement on a patch with rejection of folded fields."""
    psize = tuple(max(3, int(round(config.deform_patch_fraction * d))) for d in dims)
    psize = tuple(min(p, d) for p, d in zip(psize, dims))
    start = tuple(int(rng.integers(0, d - p + 1)) for p, d in zip(psize, dims))
    region = tuple(slice(a, a + p) for a, p in zip(start, psize))
    taper = taper_weights(psize, config.taper_length_voxels)
    rejections = 0
    while True:
        if displacement is not None:
            u = np.asarray(displacement(np.indices(psize).transpose(1, 2, 3, 0).astype(float))
                           if callable(displacement) else displacement, dtype=np.float64)
        else:
            mag = rng.uniform(0.0, config.deform_max_voxels)
            n = config.deform_control_points
            ctrl = rng.normal(0.0, 1.0, (n, n, n, 3)) * mag
            u = np.stack([zoom(ctrl[..., i], [p / n for p in psize], order=3, mode="nearest",
                               grid_mode=True) for i in range(3)], axis=-1)
        u = u * taper[..., None]
        f = _jacobian(u)
        det = np.linalg.det(f)
        if np.mean(det > 0) >= 1.0 - config.fold_tolerance:
            break
        rejections += 1
        if displacement is not None or rejections >= config.max_rejections:
            raise DegenerateFieldError(
                f"displacement field folded after {rejections} consecutive rejections")
    rot = polar_rotation(f)
    bad = det <= 0
    if bad.any():
        # folded voxels borrow the rotation of the nearest unfolded voxel
        _, near = distance_transform_edt(bad, return_indices=True)
        rot = rot[near[0], near[1], near[2]]
    return PatchDeformation(region, u, rot, det, rejections)


def deform_patch(sample: ShSample, config: AugmentConfig, rng: np.random.Generator,
                 displacement=None) -> ShSample:
    """Warp a patch by x + u_eta(x) and rotate its l=2 coefficients by D2(R(x)).

    The warp is applied by pulling back (sampling the input at x - u(x)),
    the usual first-order inverse for small displacements.
    """
    deform = draw_patch_deformation(sample.grid.dims, config, rng, displacement)
    return apply_patch_deformation(sample, deform)


def apply_patch_deformation(sample: ShSample, deform: PatchDeformation) -> ShSample:
    data = np.array(sample.data, dtype=np.float64)
    region = deform.region
    psize = deform.displacement.shape[:3]
    origin = np.array([r.start for r in region], dtype=float)
    pts = np.indices(psize).transpose(1, 2, 3, 0).astype(float) + origin - deform.displacement
    coords = np.moveaxis(pts, -1, 0)
    warped = np.stack([map_coordinates(sample.data[..., ch], coords, order=1, mode="nearest")
                       for ch in range(data.shape[-1])], axis=-1)
    block = rotation_block_l2(deform.rotation)
    warped[..., L2] = np.einsum("...ij,...j->...i", block, warped[..., L2])
    data[region] = warped
    data[..., LOWB] = np.maximum(data[..., LOWB], 0.0)
    return sample.with_data(data)


# ---------------------------------------------------------------- angular augmentation

PAIRS = {"m1": (2, 4), "m2": (1, 5)}  # positions within the 6 SH coefficients


def sh_drift(sample: ShSample, config: AugmentConfig, rng: np.random.Generator,
             gain: float | None = None, pair: str | None = None,
             rotation: WignerRotation | None = None, region=None) -> ShSample:
    """Rotate, scale one antipodal m-pair by a gain, rotate back."""
    if gain is None:
        gain = float(rng.uniform(*config.drift_gain_range))
    if pair is None:
        pair = ("m1", "m2")[int(rng.integers(0, 2))]
    if rotation is None:
        rotation = WignerRotation.random(rng)
    scale = np.ones(6)
    scale[list(PAIRS[pair])] = gain
    op = rotation.inverse().block @ np.diag(scale) @ rotation.block
    data = np.array(sample.data, dtype=np.float64)
    region = region if region is not None else (slice(None),) * 3
    c = data[region][..., SH]
    out = c @ op.T
    out[..., 0] = c[..., 0]  # l=0 is untouched by construction; keep it bit-identical
    sub = data[region]
    sub[..., SH] = out
    data[region] = sub
    return sample.with_data(data)


def sh_mix(sample: ShSample, config: AugmentConfig, rng: np.random.Generator) -> ShSample:
    """Per-voxel random rank-2 mixing ``(I + V Q) c`` with uniform entries."""
    lo, hi = config.mix_range
    dims = sample.grid.dims
    v = rng.uniform(lo, hi, dims + (6, 2))
    q = rng.uniform(lo, hi, dims + (2, 6))
    data = np.array(sample.data, dtype=np.float64)
    data[..., SH] = low_rank_mix(data[..., SH], v, q)
    return sample.with_data(data)


def angular_subsample(sample: ShSample, config: AugmentConfig, rng: np.random.Generator,
                      selection=None, noise_sigma: float | None = None,
                      lam: float | None = None) -> ShSample:
    """Project to the icosphere, keep 4-9 vertices, add noise, ridge-recover."""
    sphere = build_icosphere()
    if selection is None:
        lo, hi = config.subsample_rows
        k = int(rng.integers(lo, hi + 1))
        selection = np.sort(rng.choice(sphere.n_vertices, size=k, replace=False))
    selection = np.asarray(selection, dtype=int)
    sigma = config.icosphere_noise_sigma if noise_sigma is None else noise_sigma
    lam = config.ridge_lambda if lam is None else lam
    data = np.array(sample.data, dtype=np.float64)
    h = project_to_icosphere(data[..., SH], sphere)[..., selection]
    if sigma > 0:
        h = h + rng.normal(0.0, sigma, h.shape)
    data[..., SH] = deproject_ridge(h, selection, sphere, lam)
    return sample.with_data(data)


def augment_chain(sample: ShSample, config: AugmentConfig, rng: np.random.Generator,
                  params: DegradeParams | None = None, angular: bool = True):
    """The full train-time chain.

    HR-side angular-aware steps (rotation, patch deformation with drift, SH
    mixing) modify the target; the geometric chain and angular subsampling
    then produce the LR input. Returns ``(hr, lr, params, operator)``.
    """
    hr = sample
    if angular:
        rot = WignerRotation.random(rng)
        d = np.array(hr.data)
        d[..., SH] = wigner_rotate(d[..., SH], rot)
        hr = hr.with_data(d)
        deform = draw_patch_deformation(hr.grid.dims, config, rng)
        hr = apply_patch_deformation(hr, deform)
        hr = sh_drift(hr, config, rng, region=deform.region)
        hr = sh_mix(hr, config, rng)
    hr_crop, lr, params, op = geometric_degrade_pair(hr, config, rng, params)
    if angular:
        lr = angular_subsample(lr, config, rng)
    return hr_crop, lr, params, op


# ---------------------------------------------------------------- direction subsets and protocol

def axial_angle(a, b) -> np.ndarray:
    """Angle between axes in radians, in [0, pi/2]."""
    dot = np.abs(np.asarray(a) @ np.asarray(b).T)
    return np.arccos(np.clip(dot, 0.0, 1.0))


def electrostatic_subset(directions, target_count: int, start: int = 0) -> np.ndarray:
    """Greedy furthest-point selection under the axial angle, starting at ``start``.

    Ties go to the lowest index. Returns indices in selection order.
    """
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    n = len(d)
    if target_count <= 0:
        raise UsageError("target count must be positive")
    if target_count > n:
        raise UsageError(f"cannot pick {target_count} of {n} directions")
    ang = axial_angle(d, d)
    chosen = [int(start)]
    mind = ang[start].copy()
    mind[start] = -1.0
    while len(chosen) < target_count:
        nxt = int(np.argmax(np.round(mind, 12)))
        chosen.append(nxt)
        mind = np.minimum(mind, ang[nxt])
        mind[chosen] = -1.0
    return np.array(chosen)


def ulf_degrade_protocol(dataset: DwiDataset, rng: np.random.Generator,
                         sigma: float = ULF_RICIAN_SIGMA, target_mm: float = ULF_TARGET_MM,
                         n_directions: int = ULF_N_DIRECTIONS) -> DwiDataset:
    """Trilinear resample to ``target_mm``, keep 9 spread directions, add Rician noise."""
    g = dataset.gradients
    b0 = g.b0_mask()
    dw = np.flatnonzero(~b0)
    if len(dw) < n_directions:
        raise UsageError(f"protocol needs at least {n_directions} diffusion-weighted directions")
    pick = dw[electrostatic_subset(g.bvecs[dw], n_directions)]
    keep = np.sort(np.concatenate([np.flatnonzero(b0), pick]))
    grid = dataset.grid
    if np.allclose(grid.voxel_size, target_mm):
        new_grid, data = grid, np.array(dataset.data[..., keep], dtype=np.float64)
    else:
        new_grid = resampled_grid(grid, target_mm)
        data = apply_axes(np.asarray(dataset.data[..., keep], dtype=np.float64),
                          grid_to_grid_matrices(grid, new_grid))
    data = rician(data, sigma, rng)
    return DwiDataset(Volume(new_grid, data, "ULF protocol degraded"), g.subset(keep))
