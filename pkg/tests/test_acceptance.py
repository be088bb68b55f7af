"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``CRITERION n: PASS/FAIL`` line (collected again in the
terminal summary) before asserting, so a failing criterion still reports its
measured numbers.
"""
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import (
    ICC_4x2, ICC_6x3, directional_gradcheck, enumerated_ranksum_p, gradcheck, hand_icc, random_spd,
    report,
)
from ulfdti import autodiff as ad
from ulfdti.augment import electrostatic_subset, ulf_degrade_protocol
from ulfdti.bias import CorrectionConfig, DctBiasBasis, MapObjective, eval_bias_field, optimize_bias
from ulfdti.net.loss import LossWeights, SoftArgmax, composite_loss
from ulfdti.net.model import (
    GraphConvSpec, IcoConstants, MiniUNetConfig, as_leaves, graph_conv_forward, graph_conv_params,
    ico_block_forward, ico_block_params, mini_unet_forward, unet_params,
)
from ulfdti.net.train import TrainConfig, superresolve, train
from ulfdti.phantom import (
    PhantomSpec, hardi_gradient_table, make_injected_bias, make_synthetic_atlas, make_tensor_field,
    phantom_sh_sample, rician, synthesize_dwi, ulf_gradient_table,
)
from ulfdti.resample import DegradeOperator
from ulfdti.sample import ShSample, dwi_to_sh_sample, sh_to_tensor
from ulfdti.sh import WignerRotation, build_icosphere, deproject_ridge, project_to_icosphere, sh_power
from ulfdti.stats import bh_fdr, fisher_lda_auc, icc_2way_absolute, paired_bootstrap_auc_diff, wilcoxon_ranksum
from ulfdti.tensor import fit_pseudoinverse, fit_tensor_loglinear, st_forward, tensor_metrics
from ulfdti.volume_io import (
    DwiDataset, GradientTable, Volume, VolumeGrid, parse_gradient_table, read_nifti,
    write_gradient_table, write_nifti,
)

pytestmark = pytest.mark.acceptance


def _axial_deg(a, b):
    cos = np.abs(np.sum(a * b, axis=-1)) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))


# ---------------------------------------------------------------- 1. tensor roundtrip

def test_criterion_1_tensor_roundtrip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    g = ulf_gradient_table()
    tensors = random_spd(rng, 1000)
    signals = st_forward(np.full(1000, 1000.0), tensors, g.bvals, g.bvecs)
    fit, _ = fit_tensor_loglinear(signals, g)
    truth, est = tensor_metrics(tensors), tensor_metrics(fit)
    elapsed = time.perf_counter() - t0
    fa_err = float(np.abs(est.fa - truth.fa).max())
    v1_err = float(_axial_deg(est.v1, truth.v1).max())
    ok = fa_err < 1e-6 and v1_err < 0.01 and elapsed < 5.0
    assert report(1, ok, f"max |dFA|={fa_err:.2e} max v1={v1_err:.2e} deg time={elapsed:.2f}s")


# ---------------------------------------------------------------- 2. SH identities

def test_criterion_2_sh_identities():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    power_err = inverse_err = 0.0
    for _ in range(10_000):
        c = rng.normal(size=6)
        rot = WignerRotation.random(rng)
        r = c @ rot.block.T
        back = r @ rot.inverse().block.T
        power_err = max(power_err, float(np.abs(sh_power(r) - sh_power(c)).max()))
        inverse_err = max(inverse_err, float(np.abs(back - c).max()))
    sphere = build_icosphere()
    coeffs = rng.normal(size=(1000, 6))
    rt = deproject_ridge(project_to_icosphere(coeffs, sphere), np.arange(42), sphere, lam=1e-12)
    ico_err = float(np.abs(rt - coeffs).max())
    elapsed = time.perf_counter() - t0
    ok = power_err < 1e-12 and inverse_err < 1e-12 and ico_err < 1e-8 and elapsed < 10.0
    assert report(2, ok, f"power={power_err:.1e} inverse={inverse_err:.1e} ico={ico_err:.1e} "
                         f"time={elapsed:.2f}s")


# ---------------------------------------------------------------- 3 and 4. bias correction

@pytest.fixture(scope="module")
def ulf_phantom():
    return make_tensor_field(PhantomSpec())


def _fa(dataset):
    return tensor_metrics(fit_tensor_loglinear(dataset.data, dataset.gradients)[0]).fa


@pytest.mark.slow
def test_criterion_3_bias_recovery(ulf_phantom):
    ph, g = ulf_phantom, ulf_gradient_table()
    bias = make_injected_bias(ph.grid, g, np.random.default_rng(1))
    ds = synthesize_dwi(ph.tensors, g, ph.s0, bias)
    atlas = make_synthetic_atlas(ph.tensors, ph.labels)
    t0 = time.perf_counter()
    res = optimize_bias(ds, atlas)
    elapsed = time.perf_counter() - t0

    mask = ph.labels > 0
    truth = bias.true_log_bias(ph.tensors, g)[mask]
    basis = DctBiasBasis(ph.grid.dims)
    est = np.stack([eval_bias_field(res.coefficients, basis, i)[mask] for i in range(truth.shape[1])], 1)
    corr = np.array([np.corrcoef(est[:, i], truth[:, i])[0, 1] for i in range(truth.shape[1])])

    fa_true = tensor_metrics(ph.tensors.tensors).fa[mask]
    before = np.sqrt(np.mean((_fa(ds)[mask] - fa_true) ** 2))
    after = np.sqrt(np.mean((_fa(res.corrected)[mask] - fa_true) ** 2))
    reduction = 1.0 - after / before

    # the part of each log-bias the tensor fit can see: row space of the DW columns of the fit
    pinv_dw = fit_pseudoinverse(g)[1:, ~g.b0_mask()]
    q, _ = np.linalg.qr(pinv_dw.T)
    proj = q @ q.T
    visible = [np.corrcoef((est @ proj)[:, i], (truth @ proj)[:, i])[0, 1] for i in range(truth.shape[1])]
    print(f"diagnostic: correlation within the observable subspace min={min(visible):.3f} "
          f"ceiling corr(truth, observable truth) min="
          f"{min(np.corrcoef(truth[:, i], (truth @ proj)[:, i])[0, 1] for i in range(truth.shape[1])):.3f}")

    ok = bool(np.all(corr > 0.95)) and reduction >= 0.5 and elapsed < 600
    assert report(3, ok, f"per-direction corr min={corr.min():.3f} max={corr.max():.3f} "
                         f"FA RMSE {before:.4f}->{after:.4f} ({100 * reduction:.0f}% lower) "
                         f"time={elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_4_null_bias(ulf_phantom):
    ph, g = ulf_phantom, ulf_gradient_table()
    ds = synthesize_dwi(ph.tensors, g, ph.s0)
    res = optimize_bias(ds, make_synthetic_atlas(ph.tensors, ph.labels))
    mask = ph.labels > 0
    change = float(np.sqrt(np.mean((_fa(res.corrected)[mask] - _fa(ds)[mask]) ** 2)))
    assert report(4, change < 0.02, f"FA RMS change={change:.2e}")


# ---------------------------------------------------------------- 5. gradients

POINTS = 20
ICO = IcoConstants()


def _leaves(names, body):
    return lambda *ts: body(dict(zip(names, ts)))


def _eigh_outputs(t6):
    # eigh reads one triangle only, so perturb the six unique entries instead of the full matrix
    w, v = ad.eigh3(ad.sym3_from6(t6))
    parts = [w]
    for k in range(3):
        vk = v[:, :, k]
        outer = ad.reshape(vk, (-1, 3, 1)) * ad.reshape(vk, (-1, 1, 3))
        parts.append(ad.reshape(outer, (-1, 9)))
    return ad.concat(parts, axis=1)


def _random_sym(rng, n):
    q, _ = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    ev = np.sort(rng.uniform(-1, 1, size=(n, 3)), axis=1) + np.array([0.0, 0.3, 0.6])
    m = np.einsum("nij,nj,nkj->nik", q, ev, q)
    return np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2], m[:, 0, 1], m[:, 0, 2], m[:, 1, 2]], axis=1)


def _elementwise_cases(rng):
    pos = lambda: rng.uniform(0.2, 3.0, size=8)
    away = lambda: rng.choice([-1.0, 1.0], size=8) * rng.uniform(0.1, 2.0, size=8)
    return {
        "exp": (ad.exp, away),
        "log": (ad.log, pos),
        "sqrt": (ad.sqrt, pos),
        "abs": (ad.absolute, away),
        "gelu": (ad.gelu, away),
        "power": (lambda x: ad.power(x, 1.5), pos),
        "clip": (lambda x: ad.clip(x, -1.0, 1.0), away),
        "div": (lambda x: 1.0 / x, away),
    }


def _map_objective():
    ph = make_tensor_field(PhantomSpec(dims=(8, 8, 6), scene="crossing_bundles", bundle_radius=0.25))
    g = ulf_gradient_table()
    bias = make_injected_bias(ph.grid, g, np.random.default_rng(5))
    ds = synthesize_dwi(ph.tensors, g, ph.s0, bias)
    return MapObjective(ds, make_synthetic_atlas(ph.tensors, ph.labels), CorrectionConfig())


def _objective_check(obj, x, d, h=1e-6):
    _, grad = obj(x)
    analytic = float(grad @ d)
    numeric = (obj(x + h * d)[0] - obj(x - h * d)[0]) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def test_criterion_5_gradients():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_elem, worst = {}, {}

    for name, (op, draw) in _elementwise_cases(rng).items():
        worst_elem[name] = max(gradcheck(op, [draw()], h=1e-6, probe_seed=k) for k in range(POINTS))

    pinv = fit_pseudoinverse(ulf_gradient_table())
    fit = lambda s: ad.matmul(ad.log(s), ad.Tensor(pinv.T))
    worst["tensor_fit"] = max(gradcheck(fit, [rng.uniform(100, 1000, size=(2, 12))], probe_seed=k)
                              for k in range(POINTS))
    worst["eigh3"] = max(gradcheck(_eigh_outputs, [_random_sym(rng, 2)], h=1e-6, probe_seed=k)
                         for k in range(POINTS))

    spec = GraphConvSpec(3, 4)
    errs = []
    for k in range(POINTS):
        p = {n: v + 0.3 * rng.normal(size=v.shape) for n, v in graph_conv_params("g", spec, rng).items()}
        fn = _leaves(list(p) + ["h"], lambda d: graph_conv_forward(d, "g", spec, d["h"], ICO.adjacency))
        errs.append(directional_gradcheck(fn, list(p.values()) + [rng.normal(size=(42, 3))], seed=k))
    worst["graph_conv"] = max(errs)

    errs = []
    for k in range(POINTS):
        p = {n: v + 0.3 * rng.normal(size=v.shape) for n, v in ico_block_params("b", 4, rng).items()}
        fn = _leaves(list(p) + ["c"], lambda d: ico_block_forward(d, "b", 4, d["c"], ICO))
        errs.append(directional_gradcheck(fn, list(p.values()) + [rng.normal(size=(1, 6, 2, 1, 1))], seed=k))
    worst["ico_block"] = max(errs)

    cfg = MiniUNetConfig(levels=2, base_features=4)
    errs = []
    for k in range(POINTS):
        p = {n: v + 0.1 * rng.normal(size=v.shape) for n, v in unet_params(cfg, rng).items()}
        fn = _leaves(list(p) + ["x"], lambda d: mini_unet_forward(d, cfg, d["x"]))
        errs.append(directional_gradcheck(fn, list(p.values()) + [rng.normal(size=(1, 7, 8, 8, 8))],
                                          n_dirs=1, seed=k))
    worst["mini_unet"] = max(errs)

    op = DegradeOperator(VolumeGrid((4, 4, 4), (1.0, 1.0, 1.0), np.eye(4)), 2.0)
    sa = SoftArgmax()
    only = {
        "loss_lowb_l2": LossWeights(w_l2order_l1=0, w_angular=0, w_consistency=0),
        "loss_l2order_l1": LossWeights(w_lowb_l2=0, w_angular=0, w_consistency=0),
        "loss_angular": LossWeights(w_lowb_l2=0, w_l2order_l1=0, w_consistency=0),
        "loss_consistency": LossWeights(w_lowb_l2=0, w_l2order_l1=0, w_angular=0),
    }
    for name, weights in only.items():
        errs = []
        for k in range(POINTS):
            target = rng.normal(size=(1, 7, 4, 4, 4))
            target[:, 0] = np.abs(target[:, 0])
            lr = np.moveaxis(op.degrade(np.moveaxis(target[0], 0, -1)), -1, 0)[None]
            # keep |pred - target| away from the kink of the L1 term
            pred = target + rng.choice([-1.0, 1.0], size=target.shape) * rng.uniform(0.05, 0.3, target.shape)
            fn = lambda p, t=target, l=lr, w=weights: composite_loss(p, t, l, op.full, w, sa)[0]
            errs.append(directional_gradcheck(fn, [pred], n_dirs=2, h=1e-6, seed=k))
        worst[name] = max(errs)

    obj = _map_objective()
    errs = []
    for k in range(POINTS):
        x = 0.05 * rng.normal(size=obj.shape[0] * obj.shape[1])
        d = rng.normal(size=x.size)
        errs.append(_objective_check(obj, x, d / np.linalg.norm(d)))
    worst["map_objective"] = max(errs)

    elapsed = time.perf_counter() - t0
    for name, err in {**worst_elem, **worst}.items():
        print(f"  {name}: worst relative error {err:.2e}")
    ok = (max(worst_elem.values()) < 1e-4 and max(worst.values()) < 1e-3 and elapsed < 120)
    worst_name = max(worst, key=worst.get)
    assert report(5, ok, f"elementwise max={max(worst_elem.values()):.1e} "
                         f"operators max={worst[worst_name]:.1e} ({worst_name}) "
                         f"points={POINTS} time={elapsed:.0f}s")


# ---------------------------------------------------------------- 6 and 7. superresolution

SR_DIMS = (32, 32, 32)
SR_VOXEL = 1.5
SR_BVAL = 1000.0
SR_SIGMA = 20.0
SR_SCENES = ("single_bundle", "crossing_bundles", "curved_bundle", "single_bundle",
             "crossing_bundles", "curved_bundle", "curved_bundle", "single_bundle")


def _hardi_and_subset():
    table = hardi_gradient_table(30, SR_BVAL)
    keep = np.concatenate([[0], 1 + np.sort(electrostatic_subset(table.bvecs[1:], 15))])
    return table, keep


def _half_angular(phantom, table, keep, rng):
    """Noisy acquisition keeping half of the directions, fitted to SH on the native grid."""
    dwi = synthesize_dwi(phantom.tensors, table, phantom.s0, rician_sigma=SR_SIGMA, rng=rng)
    sub = DwiDataset(Volume(dwi.grid, dwi.data[..., keep]), table.subset(keep))
    return dwi_to_sh_sample(sub)


def _coarse_input(phantom, rng):
    """Held-out input: half the directions, then 2x coarser resolution, resampled back to the grid."""
    table, keep = _hardi_and_subset()
    native = _half_angular(phantom, table, keep, rng)
    data = DegradeOperator(native.grid, 2 * SR_VOXEL).degrade(native.data)
    data[..., 0] = np.maximum(data[..., 0], 0.0)
    return ShSample(native.grid, data)


@pytest.fixture(scope="module")
def sr_model():
    rng = np.random.default_rng(0)
    table, keep = _hardi_and_subset()
    hr, lr = [], []
    for i, scene in enumerate(SR_SCENES):
        spec = PhantomSpec(dims=SR_DIMS, voxel_mm=SR_VOXEL, scene=scene,
                           orientation=tuple(rng.uniform(0, np.pi, 3)),
                           bundle_radius=float(rng.uniform(0.1, 0.2)), seed=i)
        ph = make_tensor_field(spec)
        hr.append(phantom_sh_sample(ph, table))
        lr.append(_half_angular(ph, table, keep, rng))
    from ulfdti.augment import AugmentConfig
    aug = AugmentConfig(resample_range_mm=(2.5, 3.5), noise_sigma_max=0.02, gamma_std=0.0, bias_sigma=0.0)
    cfg = TrainConfig(epochs=100, iterations_per_epoch=20, lr=1e-3, warmup_epochs=2, patch_size=16)
    t0 = time.perf_counter()
    model = train(hr, MiniUNetConfig(levels=2, base_features=16, convs_per_level=2), aug, cfg,
                  lr_sources=lr)
    return model, time.perf_counter() - t0


def _sr_errors(phantom, reference, pred):
    wm = phantom.wm_mask
    mae = float(np.abs(pred.data[..., 1:] - reference.data[..., 1:])[wm].mean())
    v = tensor_metrics(sh_to_tensor(pred.coeffs[wm], SR_BVAL)).v1
    v0 = tensor_metrics(sh_to_tensor(reference.coeffs[wm], SR_BVAL)).v1
    return mae, float(_axial_deg(v, v0).mean())


@pytest.mark.slow
def test_criterion_6_superresolution_beats_trilinear(sr_model):
    model, train_time = sr_model
    spec = PhantomSpec(dims=SR_DIMS, voxel_mm=SR_VOXEL, scene="curved_bundle", orientation=(0.5, 0.9, 0.3),
                       bundle_radius=0.16, seed=100)
    ph = make_tensor_field(spec)
    table, _ = _hardi_and_subset()
    reference = phantom_sh_sample(ph, table)
    coarse = _coarse_input(ph, np.random.default_rng(100))
    t0 = time.perf_counter()
    sr = superresolve(model, coarse)
    elapsed = train_time + time.perf_counter() - t0
    mae_tri, ang_tri = _sr_errors(ph, reference, coarse)
    mae_sr, ang_sr = _sr_errors(ph, reference, sr)
    iterations = len(model.history)
    ok = (mae_sr < mae_tri and ang_sr <= 0.9 * ang_tri and iterations <= 2000 and elapsed < 1800)
    assert report(6, ok, f"MAE {mae_sr:.4f} vs trilinear {mae_tri:.4f}; V1 {ang_sr:.3f} vs {ang_tri:.3f} deg "
                         f"({100 * (1 - ang_sr / ang_tri):.1f}% lower); iterations={iterations} "
                         f"time={elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_no_hallucinated_anisotropy(sr_model):
    model, _ = sr_model
    ph = make_tensor_field(PhantomSpec(dims=SR_DIMS, voxel_mm=SR_VOXEL, scene="isotropic_sphere", seed=7))
    coarse = _coarse_input(ph, np.random.default_rng(7))
    sr = superresolve(model, coarse)
    brain = ph.labels > 0
    p_in = float(sh_power(coarse.coeffs[brain])[:, 1].mean())
    p_out = float(sh_power(sr.coeffs[brain])[:, 1].mean())
    assert report(7, p_out <= 1.1 * p_in, f"mean l=2 power {p_out:.3e} vs input {p_in:.3e} "
                                          f"(ratio {p_out / p_in:.3f})")


# ---------------------------------------------------------------- 8. statistics oracles

def test_criterion_8_statistics_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    wilcoxon_ok, partitions = True, 0
    for total in range(2, 13):
        for n in range(1, total):
            for tied in (False, True):
                x = rng.integers(0, 4, n).astype(float) if tied else rng.normal(size=n)
                y = rng.integers(0, 4, total - n).astype(float) if tied else rng.normal(size=total - n)
                res = wilcoxon_ranksum(x, y)
                wilcoxon_ok &= res.method == "exact" and abs(res.pvalue - enumerated_ranksum_p(x, y)) < 1e-12
                partitions += 1

    bh_ok = bool(np.all(bh_fdr([0.01, 0.02, 0.03, 0.04]) == 0.04))

    icc_ok = all(abs(Fraction(icc_2way_absolute(np.array(m, float))) - hand_icc(m))
                 <= abs(hand_icc(m)) * Fraction(1, 10**14) for m in (ICC_4x2, ICC_6x3))

    labels = np.repeat([0, 1], 40)
    pts = rng.normal(size=(80, 3)) + 0.7 * labels[:, None]
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    lda_gap = abs(fisher_lda_auc(pts, labels).auc - fisher_lda_auc(pts @ a.T + rng.normal(size=3), labels).auc)

    scores = rng.normal(size=80) + labels
    boot_p = paired_bootstrap_auc_diff(scores, scores.copy(), labels, 2000, np.random.default_rng(0)).pvalue
    elapsed = time.perf_counter() - t0
    ok = wilcoxon_ok and bh_ok and icc_ok and lda_gap < 1e-12 and boot_p == 1.0 and elapsed < 30
    assert report(8, ok, f"wilcoxon {partitions} partitions {'ok' if wilcoxon_ok else 'MISMATCH'}; "
                         f"BH {'ok' if bh_ok else 'wrong'}; ICC {'exact' if icc_ok else 'wrong'}; "
                         f"LDA affine gap={lda_gap:.1e}; bootstrap p={boot_p}; time={elapsed:.1f}s")


# ---------------------------------------------------------------- 9. degradation protocol

def test_criterion_9_degradation_protocol():
    shape_ok = repro_ok = True
    for k, (dims, vox, n_dirs) in enumerate((((16, 16, 12), 1.75, 30), ((12, 14, 10), 2.0, 20),
                                             ((10, 10, 10), 3.5, 12))):
        ph = make_tensor_field(PhantomSpec(dims=dims, voxel_mm=vox, scene="crossing_bundles", seed=k))
        ds = synthesize_dwi(ph.tensors, hardi_gradient_table(n_dirs, 1000.0, n_b0=2), ph.s0)
        a = ulf_degrade_protocol(ds, np.random.default_rng(11))
        b = ulf_degrade_protocol(ds, np.random.default_rng(11))
        c = ulf_degrade_protocol(ds, np.random.default_rng(12))
        shape_ok &= int((~a.gradients.b0_mask()).sum()) == 9
        shape_ok &= np.allclose(a.grid.voxel_size, 3.5)
        repro_ok &= a.data.tobytes() == b.data.tobytes() and not np.array_equal(a.data, c.data)
    sigma = 25.0
    mean = float(rician(np.zeros(1_000_000), sigma, np.random.default_rng(9)).mean())
    expected = sigma * np.sqrt(np.pi / 2)
    rel = abs(mean - expected) / expected
    ok = shape_ok and repro_ok and rel < 0.01
    assert report(9, ok, f"9 DW at 3.5 mm {'ok' if shape_ok else 'wrong'}; bit-reproducible "
                         f"{'yes' if repro_ok else 'no'}; Rician zero mean rel err={rel:.1e}")


# ---------------------------------------------------------------- 10. format roundtrips

def _random_grid(rng):
    dims = tuple(int(d) for d in rng.integers(1, 9, 3))
    vox = rng.uniform(0.5, 4.0, 3).astype(np.float32).astype(np.float64)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    aff = np.eye(4)
    aff[:3, :3] = q * vox
    aff[:3, 3] = rng.uniform(-100, 100, 3)
    aff = aff.astype(np.float32).astype(np.float64)
    return VolumeGrid(dims, tuple(vox), aff)


def test_criterion_10_format_roundtrips(tmp_path):
    rng = np.random.default_rng(10)
    vol_ok = table_ok = 0
    for k in range(60):
        grid = _random_grid(rng)
        dtype = (np.float32, np.float64, np.int16)[k % 3]
        raw = rng.normal(size=grid.dims + (int(rng.integers(1, 6)),)) * 1000
        vol = Volume(grid, raw.astype(dtype), f"volume {k}")
        write_nifti(vol, tmp_path / f"v{k}.nii")
        back = read_nifti(tmp_path / f"v{k}.nii")
        vol_ok += (back.data.dtype == vol.data.dtype and np.array_equal(back.data, vol.data)
                   and np.array_equal(back.grid.affine, grid.affine)
                   and back.grid.voxel_size == grid.voxel_size and back.grid.dims == grid.dims)

        n = int(rng.integers(1, 70))
        bvals = rng.choice([0.0, 5.0, 700.0, 1000.0, 2000.0], size=n)
        bvals[bvals > 0] += rng.uniform(0, 1, int((bvals > 0).sum())).round(3)
        vecs = rng.normal(size=(n, 3))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs[bvals == 0] = 0.0
        table = GradientTable(bvals, vecs)
        write_gradient_table(table, tmp_path / f"g{k}.bval", tmp_path / f"g{k}.bvec")
        got = parse_gradient_table(tmp_path / f"g{k}.bval", tmp_path / f"g{k}.bvec")
        table_ok += np.array_equal(got.bvals, table.bvals) and np.array_equal(got.bvecs, table.bvecs)
    ok = vol_ok == 60 and table_ok == 60
    assert report(10, ok, f"NIfTI {vol_ok}/60 lossless; gradient tables {table_ok}/60 lossless")
