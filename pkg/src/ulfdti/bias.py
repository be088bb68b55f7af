"""Direction-dependent Bayesian bias-field correction (Beta-DSW).

Each diffusion-weighted volume ``i`` carries a smooth log-bias
``zeta_i(x) = sum_n c[i, n] Phi_n(x)`` over six low-frequency DCT functions.
Coefficients are found by minimising the negative log-posterior of the FA and
principal-direction maps recomputed from the corrected signals, under a
voxelwise Beta prior on FA and a Dimroth-Scheidegger-Watson prior on v1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import autodiff as ad
from .errors import DegenerateFieldError, NumericalError, UsageError
from .optim import adam_minimize, lbfgs_minimize
from .tensor import TensorField, design_matrix, fit_pseudoinverse, floor_signals, tensor_metrics
from .volume_io import DwiDataset, GradientTable, Volume, VolumeGrid, read_nifti, write_nifti

log = logging.getLogger(__name__)

WM, GM, CSF = 1, 2, 3
TISSUES = (WM, GM, CSF)
TISSUE_NAMES = {WM: "WM", GM: "GM", CSF: "CSF"}

# constant, three first-order cosines, then the two lowest mixed terms
DCT_ORDERS = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 1), (1, 0, 1))
FA_EPS = 1e-6
KAPPA_LAMBDA_MAX = 0.999
MOM_WINDOW = 5
MOM_CAP = 100.0
MOM_FLOOR = 1.0
FA_RADICAND_EPS = 1e-12


# ---------------------------------------------------------------- basis and coefficients

@dataclass(frozen=True)
class DctBiasBasis:
    """Six DCT-II products ``prod_d cos(pi k_d (x_d + 1/2) / N_d)`` on a voxel grid."""

    dims: tuple[int, int, int]
    orders: tuple = DCT_ORDERS

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise UsageError(f"invalid grid dims {self.dims}")

    @property
    def n_functions(self) -> int:
        return len(self.orders)

    @cached_property
    def values(self) -> np.ndarray:
        """Basis evaluated on the grid, shape ``dims + (6,)``."""
        axes = [
            [np.cos(np.pi * k * (np.arange(n) + 0.5) / n) for k in range(2)]
            for n in self.dims
        ]
        out = np.empty(self.dims + (self.n_functions,))
        for j, (kx, ky, kz) in enumerate(self.orders):
            out[..., j] = (axes[0][kx][:, None, None] * axes[1][ky][None, :, None]
                           * axes[2][kz][None, None, :])
        out.setflags(write=False)
        return out

    def flat(self, mask: np.ndarray | None = None) -> np.ndarray:
        v = self.values.reshape(-1, self.n_functions)
        return v if mask is None else v[np.asarray(mask).reshape(-1)]


@dataclass(frozen=True)
class BiasCoefficients:
    """Rows are diffusion-weighted directions (in gradient-table order), columns DCT functions."""

    values: np.ndarray
    dw_indices: tuple[int, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        idx = tuple(int(i) for i in self.dw_indices)
        if v.ndim != 2 or v.shape[0] != len(idx):
            raise UsageError(f"coefficient matrix {v.shape} does not match {len(idx)} directions")
        if not np.all(np.isfinite(v)):
            raise NumericalError("bias coefficients must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dw_indices", idx)

    @classmethod
    def zeros(cls, gradients: GradientTable, n_functions: int = len(DCT_ORDERS)):
        idx = tuple(np.flatnonzero(~gradients.b0_mask()))
        return cls(np.zeros((len(idx), n_functions)), idx)


def eval_bias_field(coeffs: BiasCoefficients, basis: DctBiasBasis, direction_index: int) -> np.ndarray:
    """Log-bias ``zeta_i`` over the grid; the multiplicative field is ``exp`` of this."""
    if not 0 <= direction_index < coeffs.values.shape[0]:
        raise UsageError(f"direction index {direction_index} out of range")
    return basis.values @ coeffs.values[direction_index]


# ---------------------------------------------------------------- priors

def kappa_from_eigenvalues(eigenvalues) -> np.ndarray:
    """DSW concentration from the normalised principal eigenvalue.

    ``l = l1 / (l1 + l2 + l3)`` is clamped to ``[1/3, 0.999]`` so the pole at
    ``l = 1`` is never reached.
    """
    ev = np.asarray(eigenvalues, dtype=np.float64)
    ev = np.maximum(ev, 0.0)
    total = ev.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        lt = np.where(total > 0, ev.max(axis=-1) / total, 1.0 / 3.0)
    lt = np.clip(lt, 1.0 / 3.0, KAPPA_LAMBDA_MAX)
    return (3.0 * lt - 1.0) / (1.0 - lt)


def _kappa_scalar_from_normalised(lt):
    lt = np.clip(np.asarray(lt, dtype=np.float64), 1.0 / 3.0, KAPPA_LAMBDA_MAX)
    return (3.0 * lt - 1.0) / (1.0 - lt)


def _beta_nll_t(fa, alpha, beta, eps=FA_EPS):
    f = ad.clip(fa, eps, 1.0 - eps)
    return -((alpha - 1.0) * ad.log(f) + (beta - 1.0) * ad.log(1.0 - f))


def beta_nll(fa, alpha, beta, eps: float = FA_EPS):
    """Unnormalised Beta negative log-likelihood, FA clipped to ``[eps, 1 - eps]``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise UsageError("Beta parameters must be positive")
    return _beta_nll_t(ad.Tensor(np.asarray(fa, dtype=np.float64)), alpha, beta, eps).data


def dsw_nll(v1, fa, v1_mu, kappa):
    """``-kappa * FA * (v1_mu . v1)^2``; sign-invariant in both directions."""
    dot = np.sum(np.asarray(v1, dtype=np.float64) * np.asarray(v1_mu, dtype=np.float64), axis=-1)
    return -np.asarray(kappa) * np.asarray(fa) * dot * dot


@dataclass(frozen=True)
class AtlasPriors:
    """Voxelwise prior parameters on a grid.

    ``alpha`` and ``beta`` have shape ``dims + (3,)`` with columns WM, GM, CSF;
    ``labels`` uses 0 for background and 1/2/3 for WM/GM/CSF.
    """

    grid: VolumeGrid
    alpha: np.ndarray
    beta: np.ndarray
    labels: np.ndarray
    v1_mu: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        dims = self.grid.dims
        for name, shape in (("alpha", dims + (3,)), ("beta", dims + (3,)), ("labels", dims),
                            ("v1_mu", dims + (3,)), ("kappa", dims)):
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise UsageError(f"atlas {name} has shape {arr.shape}, expected {shape}")
        labels = np.asarray(self.labels).astype(np.int16)
        if not np.all(np.isin(labels, (0,) + TISSUES)):
            raise UsageError("atlas labels must be in {0, 1, 2, 3}")
        kappa = np.asarray(self.kappa, dtype=np.float64)
        if np.any(kappa < 0):
            raise UsageError("kappa must be non-negative")
        a = np.asarray(self.alpha, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if np.any(a <= 0) or np.any(b <= 0):
            raise UsageError("Beta parameters must be positive")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "v1_mu", np.asarray(self.v1_mu, dtype=np.float64))

    def voxel_beta_params(self) -> tuple[np.ndarray, np.ndarray]:
        """alpha_L(x), beta_L(x) for each voxel's own label (1, 1 on background)."""
        lab = self.labels
        a = np.ones(lab.shape)
        b = np.ones(lab.shape)
        for j, t in enumerate(TISSUES):
            m = lab == t
            a[m] = self.alpha[..., j][m]
            b[m] = self.beta[..., j][m]
        return a, b

    def reoriented(self, rotation) -> "AtlasPriors":
        """Rotate every v1_mu by a 3x3 rotation matrix (rigid reorientation)."""
        r = np.asarray(rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise UsageError("reorientation needs a 3x3 rotation matrix")
        return AtlasPriors(self.grid, self.alpha, self.beta, self.labels,
                           self.v1_mu @ r.T, self.kappa)

    # -- persistence: one multi-channel NIfTI plus a JSON manifest
    CHANNELS = ("alpha_WM", "alpha_GM", "alpha_CSF", "beta_WM", "beta_GM", "beta_CSF",
                "labels", "v1_mu_x", "v1_mu_y", "v1_mu_z", "kappa")

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        data = np.concatenate(
            [self.alpha, self.beta, self.labels[..., None].astype(np.float64),
             self.v1_mu, self.kappa[..., None]], axis=-1)
        write_nifti(Volume(self.grid, data, "atlas priors"), d / "atlas.nii")
        manifest = {"volume": "atlas.nii", "channels": list(self.CHANNELS),
                    "label_codes": {str(k): v for k, v in TISSUE_NAMES.items()}}
        (d / "atlas.json").write_text(json.dumps(manifest, indent=2))
        return d / "atlas.json"

    @classmethod
    def load(cls, path) -> "AtlasPriors":
        p = Path(path)
        manifest_path = p / "atlas.json" if p.is_dir() else p
        manifest = json.loads(manifest_path.read_text())
        if list(manifest.get("channels", [])) != list(cls.CHANNELS):
            raise UsageError("atlas manifest channel list is not the expected layout")
        vol = read_nifti(manifest_path.parent / manifest["volume"])
        x = vol.data.astype(np.float64)
        return cls(vol.grid, x[..., 0:3], x[..., 3:6], np.rint(x[..., 6]).astype(np.int16),
                   x[..., 7:10], x[..., 10])


def _moments_to_beta(mean: np.ndarray, var: np.ndarray):
    mean = np.clip(mean, FA_EPS, 1.0 - FA_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        conc = np.where(var > 1e-14, mean * (1.0 - mean) / var - 1.0, np.inf)
    conc = np.where(np.isfinite(conc) & (conc > 0), conc, np.inf)
    peak = np.maximum(mean, 1.0 - mean)
    conc = np.minimum(conc, MOM_CAP / peak)
    alpha = np.clip(mean * conc, MOM_FLOOR, MOM_CAP)
    beta = np.clip((1.0 - mean) * conc, MOM_FLOOR, MOM_CAP)
    return alpha, beta


def build_atlas_from_tensors(tensor_field: TensorField, labels, window: int = MOM_WINDOW) -> AtlasPriors:
    """Method-of-moments Beta priors over ``window^3`` same-label neighbourhoods.

    Concentrations are scaled down so that neither parameter exceeds 100 (the
    mean is kept); both are floored at 1. Zero variance hits the cap.
    """
    lab = np.asarray(labels.data[..., 0] if isinstance(labels, Volume) else labels)
    lab = np.rint(lab).astype(np.int16)
    if lab.shape != tensor_field.grid.dims:
        raise UsageError("label map does not cover the tensor field")
    m = tensor_metrics(tensor_field.tensors)
    fa = m.fa
    dims = lab.shape
    alpha = np.ones(dims + (3,))
    beta = np.ones(dims + (3,))
    for j, t in enumerate(TISSUES):
        ind = (lab == t).astype(np.float64)
        if not ind.any():
            continue
        n = uniform_filter(ind, window, mode="constant")
        s1 = uniform_filter(ind * fa, window, mode="constant")
        s2 = uniform_filter(ind * fa * fa, window, mode="constant")
        has = n > 0.5 / window ** 3
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = np.where(has, s1 / n, 0.5)
            var = np.where(has, np.maximum(s2 / n - mean * mean, 0.0), 0.0)
        a, b = _moments_to_beta(mean, var)
        alpha[..., j] = np.where(has, a, 1.0)
        beta[..., j] = np.where(has, b, 1.0)
    kappa = np.where(lab > 0, kappa_from_eigenvalues(m.eigenvalues), 0.0)
    return AtlasPriors(tensor_field.grid, alpha, beta, lab, m.v1, kappa)


# ---------------------------------------------------------------- MAP objective

@dataclass
class CorrectionConfig:
    lambda_c: float = 1e-2
    lambda_gm: float = 1.0
    adam_steps: int = 200
    adam_lr: float = 1e-2
    lbfgs_iterations: int = 100
    lbfgs_history: int = 10
    gtol: float = 1e-6
    lowb_correction: bool = True

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_gm < 0:
            raise UsageError("regularisation weights must be non-negative")
        if self.adam_steps < 0 or self.lbfgs_iterations < 0 or self.lbfgs_history < 1:
            raise UsageError("optimizer step counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class MapObjective:
    """Negative log-posterior of the DCT bias coefficients with its exact gradient.

    Signals are divided by ``s0_hat`` (all volumes), logged, corrected by
    ``-zeta_i`` on diffusion-weighted rows and refitted with the full
    log-linear design, so FA and v1 depend only on the corrected signals.
    """

    def __init__(self, dataset: DwiDataset, atlas: AtlasPriors, config: CorrectionConfig,
                 s0_hat: np.ndarray | None = None, basis: DctBiasBasis | None = None):
        if not atlas.grid.same_as(dataset.grid) or atlas.labels.shape != dataset.grid.dims:
            raise UsageError("atlas grid does not match the dataset grid")
        self.config = config
        self.gradients = dataset.gradients
        self.basis = basis or DctBiasBasis(dataset.grid.dims)
        self.mask = atlas.labels > 0
        self.coords = np.argwhere(self.mask)
        g = dataset.gradients
        self.dw = np.flatnonzero(~g.b0_mask())
        sig = dataset.data[self.mask].astype(np.float64)
        s0 = dataset.mean_b0()[self.mask] if s0_hat is None else np.asarray(s0_hat)[self.mask]
        bad = ~(np.isfinite(s0) & (s0 > 0))
        if np.any(bad):
            raise NumericalError(
                f"non-positive reference low-b signal at voxel {tuple(int(i) for i in self.coords[np.argmax(bad)])}")
        ratio = sig / s0[:, None]
        if np.any(np.all(sig <= 0, axis=1)):
            k = int(np.argmax(np.all(sig <= 0, axis=1)))
            raise NumericalError(f"all-zero signals at voxel {tuple(int(i) for i in self.coords[k])}")
        logs = np.log(floor_signals(ratio, g))
        pinv = fit_pseudoinverse(g)
        self.theta0 = logs @ pinv.T
        self.pinv_dw = pinv[:, self.dw]
        self.phi = self.basis.flat(self.mask)
        a, b = atlas.voxel_beta_params()
        self.alpha = a[self.mask]
        self.beta = b[self.mask]
        self.kappa = atlas.kappa[self.mask]
        self.v1_mu = atlas.v1_mu[self.mask]
        self.gm = (atlas.labels[self.mask] == GM).astype(np.float64)
        self.n_dw = len(self.dw)
        self.shape = (self.n_dw, self.basis.n_functions)

    def _graph(self, c: ad.Tensor):
        zeta = ad.matmul(ad.Tensor(self.phi), c.T)            # (V, n_dw)
        theta = ad.Tensor(self.theta0) - ad.matmul(zeta, ad.Tensor(self.pinv_dw.T))
        w, v = ad.eigh3(ad.sym3_from6(theta[:, 1:]))
        lam = ad.clip(w, 0.0, None)
        l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
        num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
        den = l1 * l1 + l2 * l2 + l3 * l3 + 1e-300
        fa = ad.sqrt(0.5 * num / den + FA_RADICAND_EPS)
        v1 = v[:, :, 2]
        dot = ad.tsum(v1 * ad.Tensor(self.v1_mu), axis=1)
        per_voxel = (_beta_nll_t(fa, self.alpha, self.beta)
                     - ad.Tensor(self.kappa) * fa * dot * dot
                     + self.config.lambda_gm * ad.Tensor(self.gm) * fa * fa)
        return per_voxel, fa

    def per_voxel(self, coeffs) -> np.ndarray:
        c = ad.Tensor(np.asarray(coeffs, dtype=np.float64).reshape(self.shape))
        return self._graph(c)[0].data

    def __call__(self, flat_coeffs) -> tuple[float, np.ndarray]:
        c = ad.Tensor(np.asarray(flat_coeffs, dtype=np.float64).reshape(self.shape), True)
        per_voxel, _ = self._graph(c)
        if not np.all(np.isfinite(per_voxel.data)):
            k = int(np.argmax(~np.isfinite(per_voxel.data)))
            raise NumericalError(f"non-finite objective at voxel {tuple(int(i) for i in self.coords[k])}")
        total = ad.tsum(per_voxel) + self.config.lambda_c * ad.tsum(c * c)
        total.backward()
        return float(total.data), c.grad.reshape(-1).copy()


def map_objective(dataset: DwiDataset, coeffs: BiasCoefficients, atlas: AtlasPriors,
                  config: CorrectionConfig, s0_hat=None) -> tuple[float, np.ndarray]:
    """Objective value and gradient (same shape as ``coeffs.values``)."""
    obj = MapObjective(dataset, atlas, config, s0_hat)
    if coeffs.values.shape != obj.shape:
        raise UsageError(f"coefficients {coeffs.values.shape} do not match {obj.shape}")
    f, g = obj(coeffs.values.reshape(-1))
    return f, g.reshape(obj.shape)


# ---------------------------------------------------------------- low-b EM

@dataclass
class LowbEmResult:
    corrected: Volume
    field: Volume  # multiplicative, geometric mean 1
    coefficients: np.ndarray
    log_likelihood: list[float]
    dropped_classes: list[int] = field(default_factory=list)


def correct_lowb_em(lowb: Volume, tissue_probs: Volume, basis: DctBiasBasis | None = None,
                    tol: float = 1e-6, max_iter: int = 200, sigma_floor: float = 1e-4) -> LowbEmResult:
    """Tissue-conditioned EM on log-intensity with a DCT log-bias.

    Classes are Gaussians in log-intensity with ``tissue_probs`` as voxelwise
    mixing priors. The constant DCT term is left out (class means absorb it),
    so the returned log field is spatially centred.
    """
    if lowb.grid.dims != tissue_probs.grid.dims or tissue_probs.channels != 3:
        raise UsageError("tissue probabilities must be a 3-channel volume on the low-b grid")
    basis = basis or DctBiasBasis(lowb.grid.dims)
    probs = tissue_probs.data.astype(np.float64)
    psum = probs.sum(axis=-1)
    if np.any(np.abs(psum - 1.0) > 1e-3):
        raise UsageError("tissue probabilities must sum to 1 per voxel (within 1e-3)")
    img = lowb.data[..., 0].astype(np.float64)
    mask = img > 0
    if mask.sum() < basis.n_functions:
        raise DegenerateFieldError("too few positive low-b voxels for bias estimation")
    y = np.log(img[mask])
    pri = probs[mask]
    phi = basis.flat(mask)[:, 1:]
    k = pri.shape[1]
    active = list(range(k))
    dropped: list[int] = []
    bias = np.zeros_like(y)
    # initial class parameters from the priors
    mu = np.zeros(k)
    sig = np.ones(k)
    resp = pri.copy()
    c = np.zeros(phi.shape[1])
    ll_hist: list[float] = []
    for it in range(max_iter):
        # M-step for class statistics
        r = y - bias
        for j in list(active):
            wsum = resp[:, j].sum()
            if wsum <= 0:
                active.remove(j)
                dropped.append(j)
                log.warning("tissue class %d has zero total responsibility; dropped", j)
                continue
            mu[j] = resp[:, j] @ r / wsum
            sig[j] = max(np.sqrt(resp[:, j] @ (r - mu[j]) ** 2 / wsum), sigma_floor)
        if not active:
            raise DegenerateFieldError("all tissue classes dropped")
        # M-step for bias: weighted LS
        inv = resp[:, active] / sig[active] ** 2
        wts = inv.sum(axis=1)
        target = (inv * (y[:, None] - mu[active])).sum(axis=1) / np.maximum(wts, 1e-300)
        lhs = phi.T @ (phi * wts[:, None])
        rhs = phi.T @ (wts * target)
        c = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        bias = phi @ c
        # E-step
        r = y - bias
        logp = np.full(resp.shape, -np.inf)
        for j in active:
            with np.errstate(divide="ignore"):
                logp[:, j] = (np.log(pri[:, j]) - 0.5 * ((r - mu[j]) / sig[j]) ** 2
                              - np.log(sig[j]) - 0.5 * np.log(2 * np.pi))
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        resp = np.exp(logp - lse[:, None])
        ll = float(lse.mean())
        ll_hist.append(ll)
        if it > 0 and abs(ll - ll_hist[-2]) < tol:
            break
    log_field = basis.values[..., 1:] @ c
    log_field = log_field - log_field.mean()
    fld = np.exp(log_field)
    corrected = img / fld
    return LowbEmResult(
        corrected=Volume(lowb.grid, corrected, "low-b bias corrected"),
        field=Volume(lowb.grid, fld, "low-b bias field"),
        coefficients=c,
        log_likelihood=ll_hist,
        dropped_classes=dropped,
    )


def labels_to_probs(labels: np.ndarray, grid: VolumeGrid) -> Volume:
    """One-hot tissue probabilities; background voxels are spread evenly."""
    lab = np.asarray(labels)
    p = np.zeros(lab.shape + (3,))
    for j, t in enumerate(TISSUES):
        p[..., j] = lab == t
    p[lab == 0] = 1.0 / 3.0
    return Volume(grid, p, "tissue probabilities")


# ---------------------------------------------------------------- driver

@dataclass
class BiasCorrectionResult:
    coefficients: BiasCoefficients
    corrected: DwiDataset
    status: str
    adam_history: list[float]
    lbfgs_history: list[float]
    s0_hat: np.ndarray
    lowb_field: np.ndarray | None = None

    @property
    def objective(self) -> float:
        return self.lbfgs_history[-1] if self.lbfgs_history else self.adam_history[-1]


def apply_correction(dataset: DwiDataset, coeffs: BiasCoefficients,
                     basis: DctBiasBasis | None = None) -> DwiDataset:
    """Divide each diffusion-weighted volume by ``exp(zeta_i)``; low-b volumes untouched."""
    basis = basis or DctBiasBasis(dataset.grid.dims)
    data = np.array(dataset.data, dtype=np.float64)
    fields = np.exp(basis.values @ coeffs.values.T)
    data[..., list(coeffs.dw_indices)] /= fields
    vol = Volume(dataset.grid, data, dataset.volume.description)
    return DwiDataset(vol, dataset.gradients)


def optimize_bias(dataset: DwiDataset, atlas: AtlasPriors,
                  config: CorrectionConfig | None = None) -> BiasCorrectionResult:
    """Adam burn-in followed by monotone L-BFGS on the MAP objective."""
    config = config or CorrectionConfig()
    basis = DctBiasBasis(dataset.grid.dims)
    s0 = dataset.mean_b0()
    lowb_field = None
    if config.lowb_correction:
        em = correct_lowb_em(Volume(dataset.grid, s0), labels_to_probs(atlas.labels, atlas.grid),
                             basis)
        s0 = em.corrected.data[..., 0]
        lowb_field = em.field.data[..., 0]
    obj = MapObjective(dataset, atlas, config, s0, basis)
    x0 = np.zeros(obj.shape[0] * obj.shape[1])
    adam_hist: list[float] = []
    if config.adam_steps > 0:
        x0, _, adam_hist = adam_minimize(obj, x0, config.adam_steps, config.adam_lr)
    res = lbfgs_minimize(obj, x0, max_iter=config.lbfgs_iterations,
                         history=config.lbfgs_history, gtol=config.gtol)
    coeffs = BiasCoefficients(res.x.reshape(obj.shape), tuple(obj.dw))
    return BiasCorrectionResult(
        coefficients=coeffs,
        corrected=apply_correction(dataset, coeffs, basis),
        status=res.status,
        adam_history=adam_hist,
        lbfgs_history=res.history,
        s0_hat=s0,
        lowb_field=lowb_field,
    )
