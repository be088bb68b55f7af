"""Synthetic tensor phantoms, DWI synthesis with injected bias, and atlas priors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bias import CSF, GM, WM, AtlasPriors, DctBiasBasis, build_atlas_from_tensors
from .errors import UsageError
from .sample import ShSample, dwi_to_sh_sample
from .sh import electrostatic_directions, euler_zyz_matrix
from .tensor import TensorField, matrix_to_tensor, quadratic_form
from .volume_io import DwiDataset, GradientTable, Volume, VolumeGrid

SCENES = ("isotropic_sphere", "single_bundle", "crossing_bundles", "curved_bundle")
ULF_DIMS = (56, 64, 52)
ULF_VOXEL_MM = 3.5
ULF_BVAL = 700.0
ULF_DIRECTIONS = 9
GAMMA_RANGE = (0.7, 1.3)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = ULF_DIMS
    voxel_mm: float = ULF_VOXEL_MM
    scene: str = "curved_bundle"
    wm_axial: float = 1.7e-3
    wm_radial: float = 3.0e-4
    gm_diffusivity: float = 8.0e-4
    csf_diffusivity: float = 3.0e-3
    s0: float = 1000.0
    s0_ratio: dict = field(default_factory=lambda: {"WM": 0.8, "GM": 1.0, "CSF": 1.4})
    brain_fraction: float = 0.42   # semi-axes of the brain ellipsoid, fraction of dims
    bundle_radius: float = 0.14    # fraction of the smallest in-plane dimension
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # ZYZ Euler angles of the bundles (rad)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.orientation = tuple(float(a) for a in self.orientation)
        if len(self.orientation) != 3:
            raise UsageError("orientation needs three Euler angles")
        if self.scene not in SCENES:
            raise UsageError(f"unknown scene {self.scene!r}; choose from {SCENES}")
        if min(self.wm_axial, self.wm_radial, self.gm_diffusivity, self.csf_diffusivity) <= 0:
            raise UsageError("diffusivities must be positive")
        if self.wm_axial < self.wm_radial:
            raise UsageError("bundle axial diffusivity must be at least the radial one")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise UsageError("phantom grid needs at least 4 voxels per axis")

    @property
    def grid(self) -> VolumeGrid:
        return VolumeGrid.isotropic(self.dims, self.voxel_mm)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        d = json.loads(text)
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class Phantom:
    spec: PhantomSpec
    tensors: TensorField
    labels: np.ndarray
    s0: np.ndarray
    tangent: np.ndarray  # analytic fibre direction (zero outside bundles)

    @property
    def grid(self) -> VolumeGrid:
        return self.tensors.grid

    @property
    def wm_mask(self) -> np.ndarray:
        return self.labels == WM


def _stick_tensor(direction: np.ndarray, axial: float, radial: float) -> np.ndarray:
    d = direction / np.linalg.norm(direction, axis=-1, keepdims=True)
    m = radial * np.eye(3) + (axial - radial) * d[..., :, None] * d[..., None, :]
    return matrix_to_tensor(m)


def make_tensor_field(spec: PhantomSpec) -> Phantom:
    """Tensors, labels (1 WM, 2 GM, 3 CSF) and a tissue-dependent S0 map."""
    dims = spec.dims
    grid = spec.grid
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), -1)
    centre = (np.array(dims) - 1) / 2.0
    rel = idx - centre
    rot = euler_zyz_matrix(*spec.orientation)
    srel = rel @ rot              # bundle-frame coordinates R^T x
    semi = spec.brain_fraction * np.array(dims)
    brain = np.sum((rel / semi) ** 2, axis=-1) <= 1.0
    labels = np.where(brain, GM, CSF).astype(np.int16)
    iso = lambda d: np.broadcast_to(np.array([d, d, d, 0, 0, 0]), dims + (6,))
    tensors = np.where(brain[..., None], iso(spec.gm_diffusivity), iso(spec.csf_diffusivity)).copy()
    tangent = np.zeros(dims + (3,))
    radius = spec.bundle_radius * min(dims[0], dims[1])

    def put(mask, direction):
        nonlocal tensors
        direction = direction @ rot.T
        mask = mask & brain
        labels[mask] = WM
        tangent[mask] = np.broadcast_to(direction, dims + (3,))[mask]
        tensors[mask] = _stick_tensor(np.broadcast_to(direction, dims + (3,))[mask],
                                      spec.wm_axial, spec.wm_radial)

    if spec.scene == "isotropic_sphere":
        pass
    elif spec.scene == "single_bundle":
        put(np.hypot(srel[..., 1], srel[..., 2]) <= radius, np.array([1.0, 0, 0]))
    elif spec.scene == "crossing_bundles":
        in_x = (np.hypot(srel[..., 1], srel[..., 2]) <= radius) & brain
        in_y = (np.hypot(srel[..., 0], srel[..., 2]) <= radius) & brain
        ex, ey = rot[:, 0], rot[:, 1]
        tx = _stick_tensor(ex, spec.wm_axial, spec.wm_radial)
        ty = _stick_tensor(ey, spec.wm_axial, spec.wm_radial)
        labels[in_x | in_y] = WM
        tensors[in_x & ~in_y] = tx
        tensors[in_y & ~in_x] = ty
        # single-tensor model cannot hold a crossing: overlap is the two-tensor mean
        tensors[in_x & in_y] = 0.5 * (tx + ty)
        tangent[in_x & ~in_y] = ex
        tangent[in_y & ~in_x] = ey
    else:  # curved_bundle: a torus in the (rotated) axial plane
        major = 0.26 * min(dims[0], dims[1])
        rho = np.hypot(srel[..., 0], srel[..., 1])
        tube = np.hypot(rho - major, srel[..., 2]) <= radius
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.stack([-srel[..., 1], srel[..., 0], np.zeros(dims)], -1) / rho[..., None]
        put(tube & (rho > 0), np.nan_to_num(t))

    ratio = {WM: spec.s0_ratio["WM"], GM: spec.s0_ratio["GM"], CSF: spec.s0_ratio["CSF"]}
    s0 = np.zeros(dims)
    for k, r in ratio.items():
        s0[labels == k] = spec.s0 * r
    return Phantom(spec, TensorField(grid, tensors), labels, s0, tangent)


def ulf_gradient_table(bval: float = ULF_BVAL, seed: int = 0) -> GradientTable:
    """Nine electrostatic directions at b=700 with low-b volumes after directions 2, 5 and 8."""
    dirs = electrostatic_directions(ULF_DIRECTIONS, seed=seed)
    bvals, bvecs = [], []
    for i, d in enumerate(dirs):
        bvals.append(bval)
        bvecs.append(d)
        if i in (1, 4, 7):
            bvals.append(0.0)
            bvecs.append(np.zeros(3))
    return GradientTable(np.array(bvals), np.array(bvecs))


@dataclass(frozen=True)
class InjectedBias:
    """Ground-truth bias per gradient entry.

    ``gamma`` and ``upsilon`` have shape ``dims + (n_entries,)`` and are 1 on
    low-b entries. ``lowb`` multiplies every volume (direction-independent).
    """

    gamma: np.ndarray
    upsilon: np.ndarray
    lowb: np.ndarray | None = None

    def true_log_bias(self, tensors: TensorField, gradients: GradientTable) -> np.ndarray:
        """Collapsed log-bias of each diffusion-weighted entry, shape ``dims + (n_dw,)``.

        ``log Gamma_i - (Upsilon_i - 1) b_i u_i^T D u_i``: the excess over the
        unbiased model.
        """
        dw = np.flatnonzero(~gradients.b0_mask())
        qf = quadratic_form(tensors.tensors, gradients.bvecs[dw])
        return (np.log(self.gamma[..., dw])
                - (self.upsilon[..., dw] - 1.0) * gradients.bvals[dw] * qf)


def _dct_field(basis: DctBiasBasis, coeffs: np.ndarray) -> np.ndarray:
    return basis.values @ coeffs


def make_injected_bias(grid: VolumeGrid, gradients: GradientTable, rng: np.random.Generator,
                       gamma_range=GAMMA_RANGE, upsilon_amplitude: float = 0.05,
                       lowb_amplitude: float = 0.0) -> InjectedBias:
    """Smooth per-direction fields spanned by the six DCT modes.

    Each Gamma_i is an affine image of a random DCT expansion scaled to fill
    ``gamma_range``; Upsilon_i = 1 + a DCT field of peak ``upsilon_amplitude``.
    """
    lo, hi = gamma_range
    if not 0 < lo <= 1 <= hi:
        raise UsageError("gamma range must bracket 1 and stay positive")
    basis = DctBiasBasis(grid.dims)
    n = len(gradients)
    dw = ~gradients.b0_mask()
    gamma = np.ones(grid.dims + (n,))
    upsilon = np.ones(grid.dims + (n,))
    for i in np.flatnonzero(dw):
        c = rng.normal(size=basis.n_functions)
        c[0] = 0.0
        f = _dct_field(basis, c)
        f = f / max(np.abs(f).max(), 1e-12)
        gamma[..., i] = np.where(f >= 0, 1.0 + (hi - 1.0) * f, 1.0 + (1.0 - lo) * f)
        if upsilon_amplitude > 0:
            cu = rng.normal(size=basis.n_functions)
            cu[0] = 0.0
            fu = _dct_field(basis, cu)
            upsilon[..., i] = 1.0 + upsilon_amplitude * fu / max(np.abs(fu).max(), 1e-12)
    lowb = None
    if lowb_amplitude > 0:
        cl = rng.normal(size=basis.n_functions)
        cl[0] = 0.0
        fl = _dct_field(basis, cl)
        lowb = np.exp(lowb_amplitude * fl / max(np.abs(fl).max(), 1e-12))
    return InjectedBias(gamma, upsilon, lowb)


def rician(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise: sqrt((S + n1)^2 + n2^2)."""
    if sigma <= 0:
        return np.asarray(signal, dtype=np.float64).copy()
    n1 = rng.normal(0.0, sigma, np.shape(signal))
    n2 = rng.normal(0.0, sigma, np.shape(signal))
    return np.hypot(signal + n1, n2)


def synthesize_dwi(tensors: TensorField, gradients: GradientTable, s0,
                   bias: InjectedBias | None = None, rician_sigma: float = 0.0,
                   rng: np.random.Generator | None = None) -> DwiDataset:
    """``S_i = Gamma_i S0 exp(-Upsilon_i b_i u_i^T D u_i)``, optionally Rician-corrupted."""
    s0 = np.broadcast_to(np.asarray(s0, dtype=np.float64), tensors.grid.dims)
    qf = quadratic_form(tensors.tensors, gradients.bvecs)
    b = gradients.bvals
    if bias is None:
        sig = s0[..., None] * np.exp(-b * qf)
    else:
        sig = bias.gamma * s0[..., None] * np.exp(-bias.upsilon * b * qf)
        if bias.lowb is not None:
            sig = sig * bias.lowb[..., None]
    if rician_sigma > 0:
        if rng is None:
            raise UsageError("Rician noise needs a seeded generator")
        sig = rician(sig, rician_sigma, rng)
    return DwiDataset(Volume(tensors.grid, sig, "synthetic DWI"), gradients)


def make_synthetic_atlas(tensors: TensorField, labels) -> AtlasPriors:
    return build_atlas_from_tensors(tensors, labels)


def hardi_gradient_table(n_directions: int = 30, bval: float = 1000.0, n_b0: int = 1,
                         seed: int = 0) -> GradientTable:
    """``n_b0`` leading b=0 entries then ``n_directions`` electrostatic directions."""
    dirs = electrostatic_directions(n_directions, seed=seed)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_directions, float(bval))])
    bvecs = np.vstack([np.zeros((n_b0, 3)), dirs])
    return GradientTable(bvals, bvecs)


def phantom_sh_sample(phantom: Phantom, gradients: GradientTable, rician_sigma: float = 0.0,
                      rng: np.random.Generator | None = None) -> ShSample:
    """Synthesize DWI for ``phantom`` and fit the seven-channel SH sample."""
    dwi = synthesize_dwi(phantom.tensors, gradients, phantom.s0, rician_sigma=rician_sigma, rng=rng)
    return dwi_to_sh_sample(dwi)
