import numpy as np
import pytest
import scipy.fft
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from ulfdti.bias import (
    DCT_ORDERS, AtlasPriors, BiasCoefficients, CorrectionConfig, DctBiasBasis, MapObjective,
    apply_correction, beta_nll, build_atlas_from_tensors, correct_lowb_em, dsw_nll,
    eval_bias_field, kappa_from_eigenvalues, labels_to_probs, map_objective, optimize_bias,
)
from ulfdti.errors import NumericalError, UsageError
from ulfdti.phantom import (
    PhantomSpec, make_injected_bias, make_synthetic_atlas, make_tensor_field, synthesize_dwi,
    ulf_gradient_table,
)
from ulfdti.tensor import TensorField, fit_tensor_loglinear, matrix_to_tensor, tensor_metrics
from ulfdti.volume_io import Volume, VolumeGrid


@pytest.fixture(scope="module")
def small_phantom():
    return make_tensor_field(PhantomSpec(dims=(10, 10, 8), voxel_mm=3.5, scene="crossing_bundles",
                                         bundle_radius=0.25))


def test_basis_orthogonal_and_constant():
    b = DctBiasBasis((7, 9, 5))
    assert b.values.shape == (7, 9, 5, 6)
    assert np.allclose(b.values[..., 0], 1.0)
    f = b.flat()
    gram = f.T @ f
    assert np.abs(gram - np.diag(np.diag(gram))).max() < 1e-9
    assert DCT_ORDERS[:4] == ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1))


def test_eval_bias_field_examples():
    basis = DctBiasBasis((6, 5, 4))
    zero = BiasCoefficients(np.zeros((2, 6)), (0, 1))
    assert np.all(np.exp(eval_bias_field(zero, basis, 1)) == 1.0)
    c = np.zeros((1, 6))
    c[0, 0] = np.log(2.0)
    assert np.allclose(np.exp(eval_bias_field(BiasCoefficients(c, (3,)), basis, 0)), 2.0, atol=1e-15)
    for j, order in enumerate(DCT_ORDERS[1:], start=1):
        c = np.zeros((1, 6))
        c[0, j] = 0.7
        spec = scipy.fft.dctn(eval_bias_field(BiasCoefficients(c, (0,)), basis, 0), type=2)
        nz = np.argwhere(np.abs(spec) > 1e-9 * np.abs(spec).max())
        assert [tuple(n) for n in nz] == [order]
    with pytest.raises(UsageError):
        eval_bias_field(zero, basis, 2)


def test_kappa_examples():
    assert kappa_from_eigenvalues([1.0, 1.0, 1.0]) == pytest.approx(0.0)
    assert kappa_from_eigenvalues([0.5, 0.25, 0.25]) == pytest.approx(1.0)
    assert kappa_from_eigenvalues([0.99, 0.005, 0.005]) == pytest.approx(197.0)
    assert np.isfinite(kappa_from_eigenvalues([1.0, 0.0, 0.0]))
    assert kappa_from_eigenvalues([0.0, 0.0, 0.0]) == 0.0


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3))
def test_kappa_nonnegative(ev):
    assert kappa_from_eigenvalues(sorted(ev, reverse=True)) >= 0


def test_beta_nll_examples():
    fa = np.linspace(0.01, 0.99, 13)
    assert np.allclose(beta_nll(fa, 1.0, 1.0), 0.0)
    assert beta_nll(np.exp(-1.0), 2.0, 1.0) == pytest.approx(1.0)
    with pytest.raises(UsageError):
        beta_nll(0.5, 0.0, 1.0)
    with pytest.raises(UsageError):
        beta_nll(0.5, 1.0, -2.0)
    assert np.isfinite(beta_nll(0.0, 3.0, 3.0)) and np.isfinite(beta_nll(1.0, 3.0, 3.0))


@given(a=st.floats(1.05, 50), b=st.floats(1.05, 50))
def test_beta_nll_minimised_at_mode(a, b):
    grid = np.linspace(1e-4, 1 - 1e-4, 20001)
    best = grid[np.argmin(beta_nll(grid, a, b))]
    assert best == pytest.approx((a - 1) / (a + b - 2), abs=2e-4)


def test_dsw_nll_examples(rng):
    u = np.array([0.0, 0.6, 0.8])
    assert dsw_nll(u, 0.7, np.array([1.0, 0, 0]), 0.0) == 0.0
    assert dsw_nll(np.array([1.0, 0, 0]), 0.7, u, 3.0) == 0.0
    assert dsw_nll(u, 0.5, u, 2.0) == pytest.approx(-1.0)
    v = rng.normal(size=(20, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    m = rng.normal(size=(20, 3))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    base = dsw_nll(v, 0.6, m, 4.0)
    assert np.allclose(dsw_nll(-v, 0.6, m, 4.0), base)
    assert np.allclose(dsw_nll(v, 0.6, -m, 4.0), base)
    assert np.all(dsw_nll(m, 0.6, m, 4.0) <= base + 1e-15)


def test_atlas_from_uniform_fa(rng):
    grid = VolumeGrid.isotropic((8, 8, 8), 2.0)
    # FA 0.5 stick-like tensors with tiny radial jitter
    l1, l2 = 1.0, None
    # solve FA = 0.5 for prolate (l1, l2, l2): l2/l1 = r
    rs = np.linspace(0.01, 0.99, 100000)
    fa = np.abs(1 - rs) / np.sqrt(1 + 2 * rs**2)
    r = rs[np.argmin(np.abs(fa - 0.5))]
    l2 = r * (1 + 1e-3 * rng.normal(size=grid.dims))
    m = np.zeros(grid.dims + (3, 3))
    m[..., 0, 0], m[..., 1, 1], m[..., 2, 2] = l1 * 1e-3, l2 * 1e-3, l2 * 1e-3
    labels = np.ones(grid.dims, dtype=int)
    atlas = build_atlas_from_tensors(TensorField(grid, matrix_to_tensor(m)), labels)
    a, b = atlas.voxel_beta_params()
    assert np.abs(a / (a + b) - 0.5).max() < 0.01
    assert np.all(a <= 100) and np.all(b <= 100)
    assert np.allclose(np.abs(atlas.v1_mu[..., 0]), 1.0)


def test_atlas_isotropic_kappa_and_v1(rng):
    grid = VolumeGrid.isotropic((6, 6, 6), 2.0)
    iso = np.tile(matrix_to_tensor(np.eye(3) * 1e-3), grid.dims + (1,))
    atlas = build_atlas_from_tensors(TensorField(grid, iso), np.full(grid.dims, 2))
    assert np.allclose(atlas.kappa, 0.0)
    t = random_spd(rng, 216).reshape(grid.dims + (6,))
    atlas = build_atlas_from_tensors(TensorField(grid, t), np.full(grid.dims, 1))
    v1 = tensor_metrics(t).v1
    assert np.allclose(np.abs(np.sum(atlas.v1_mu * v1, axis=-1)), 1.0)


def test_atlas_save_load_and_reorient(tmp_path, small_phantom):
    atlas = make_synthetic_atlas(small_phantom.tensors, small_phantom.labels)
    atlas.save(tmp_path / "atlas")
    back = AtlasPriors.load(tmp_path / "atlas")
    assert np.array_equal(back.labels, atlas.labels)
    assert np.allclose(back.alpha, atlas.alpha, rtol=1e-6)
    rot = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    assert np.allclose(atlas.reoriented(rot).v1_mu, atlas.v1_mu @ rot.T)
    with pytest.raises(UsageError):
        atlas.reoriented(np.eye(3) * 2)


def _dataset(phantom, bias=None):
    return synthesize_dwi(phantom.tensors, ulf_gradient_table(), phantom.s0, bias=bias)


def test_map_objective_regulariser_zero_at_origin(small_phantom):
    ds = _dataset(small_phantom)
    atlas = make_synthetic_atlas(small_phantom.tensors, small_phantom.labels)
    c = BiasCoefficients.zeros(ds.gradients)
    f0, _ = map_objective(ds, c, atlas, CorrectionConfig(lambda_c=0.0))
    f1, _ = map_objective(ds, c, atlas, CorrectionConfig(lambda_c=7.0))
    assert f0 == f1


def test_map_objective_lower_at_true_bias(small_phantom):
    g = ulf_gradient_table()
    bias = make_injected_bias(small_phantom.grid, g, np.random.default_rng(4), upsilon_amplitude=0.0)
    ds = _dataset(small_phantom, bias)
    atlas = make_synthetic_atlas(small_phantom.tensors, small_phantom.labels)
    basis = DctBiasBasis(small_phantom.grid.dims)
    zeta = bias.true_log_bias(small_phantom.tensors, g).reshape(-1, 9)
    cstar = np.linalg.lstsq(basis.flat(), zeta, rcond=None)[0].T
    cfg = CorrectionConfig(lambda_c=0.0)
    f_true, _ = map_objective(ds, BiasCoefficients(cstar, BiasCoefficients.zeros(g).dw_indices), atlas, cfg)
    f_zero, _ = map_objective(ds, BiasCoefficients.zeros(g), atlas, cfg)
    assert f_true < f_zero


def test_map_objective_gradient_matches_central_differences(small_phantom):
    g = ulf_gradient_table()
    bias = make_injected_bias(small_phantom.grid, g, np.random.default_rng(2))
    ds = _dataset(small_phantom, bias)
    atlas = make_synthetic_atlas(small_phantom.tensors, small_phantom.labels)
    obj = MapObjective(ds, atlas, CorrectionConfig())
    rng = np.random.default_rng(0)
    h = 1e-4
    worst = 0.0
    for _ in range(20):
        x = rng.normal(scale=0.1, size=obj.shape[0] * obj.shape[1])
        _, grad = obj(x)
        num = np.empty_like(x)
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h
            num[j] = (obj.per_voxel(x + e).sum() + 1e-2 * np.sum((x + e) ** 2)
                      - obj.per_voxel(x - e).sum() - 1e-2 * np.sum((x - e) ** 2)) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - num) / np.linalg.norm(num))
    assert worst < 1e-4


def test_map_objective_rejects_zero_signals(small_phantom):
    ds = _dataset(small_phantom)
    data = ds.data.copy()
    data[5, 5, 4] = 0.0
    from ulfdti.volume_io import DwiDataset
    bad = DwiDataset(Volume(ds.grid, data), ds.gradients)
    atlas = make_synthetic_atlas(small_phantom.tensors, small_phantom.labels)
    with pytest.raises(NumericalError, match=r"\(5, 5, 4\)"):
        map_objective(bad, BiasCoefficients.zeros(ds.gradients), atlas, CorrectionConfig())


def test_gauge_shift_is_isotropic(small_phantom, rng):
    # a common log-shift of all diffusion-weighted volumes is absorbed exactly
    # as D + (delta / b) I: v1 and eigenvalue gaps are unchanged, FA is not
    ds = _dataset(small_phantom)
    c = rng.normal(scale=0.05, size=(9, 6))
    delta = 0.3
    shifted = c.copy()
    shifted[:, 0] += delta
    idx = BiasCoefficients.zeros(ds.gradients).dw_indices
    fits = [fit_tensor_loglinear(apply_correction(ds, BiasCoefficients(x, idx)).data, ds.gradients)
            for x in (c, shifted)]
    iso = matrix_to_tensor(np.eye(3) * delta / 700.0)
    assert np.allclose(fits[1][0] - fits[0][0], iso, atol=1e-12)
    assert np.allclose(fits[1][1], fits[0][1], atol=1e-9)
    m0, m1 = tensor_metrics(fits[0][0]), tensor_metrics(fits[1][0])
    mask = (small_phantom.labels > 0) & (m0.fa > 0.05)
    assert np.allclose(np.abs(np.sum(m0.v1 * m1.v1, axis=-1))[mask], 1.0, atol=1e-9)


def test_optimize_null_bias_and_monotone(small_phantom):
    ds = _dataset(small_phantom)
    atlas = make_synthetic_atlas(small_phantom.tensors, small_phantom.labels)
    res = optimize_bias(ds, atlas, CorrectionConfig(adam_steps=30, lbfgs_iterations=40))
    hist = np.array(res.lbfgs_history)
    assert np.all(np.diff(hist) <= 0.0)
    assert hist[0] == pytest.approx(min(res.adam_history)) and hist[-1] <= hist[0]
    mask = small_phantom.labels > 0
    fa0 = tensor_metrics(fit_tensor_loglinear(ds.data, ds.gradients)[0]).fa
    fa1 = tensor_metrics(fit_tensor_loglinear(res.corrected.data, ds.gradients)[0]).fa
    assert np.sqrt(np.mean((fa0 - fa1)[mask] ** 2)) < 0.02
    assert np.all((fa1 >= 0) & (fa1 <= 1))


def _lowb(phantom, field=None):
    img = phantom.s0.copy()
    if field is not None:
        img = img * field
    return Volume(phantom.grid, img)


def test_lowb_em_flat_image(small_phantom):
    probs = labels_to_probs(small_phantom.labels, small_phantom.grid)
    res = correct_lowb_em(_lowb(small_phantom), probs)
    assert np.abs(res.field.data - 1.0).max() < 1e-3
    assert abs(np.log(res.field.data).mean()) < 1e-9


def test_lowb_em_recovers_injected_field(small_phantom):
    basis = DctBiasBasis(small_phantom.grid.dims)
    c = np.array([0.0, 0.15, -0.1, 0.08, 0.05, -0.04])
    log_true = basis.values @ c
    probs = labels_to_probs(small_phantom.labels, small_phantom.grid)
    res = correct_lowb_em(_lowb(small_phantom, np.exp(log_true)), probs, basis)
    est = np.log(res.field.data[..., 0])
    assert np.corrcoef(est.ravel(), log_true.ravel())[0, 1] > 0.99
    assert abs(est.mean()) < 1e-9
    ll = np.array(res.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-9)


def test_lowb_em_rejects_bad_probabilities(small_phantom):
    probs = labels_to_probs(small_phantom.labels, small_phantom.grid)
    bad = Volume(probs.grid, probs.data * 1.1)
    with pytest.raises(UsageError):
        correct_lowb_em(_lowb(small_phantom), bad)


def test_config_validation():
    with pytest.raises(UsageError):
        CorrectionConfig(lambda_c=-1)
    cfg = CorrectionConfig.from_dict({"lambda_gm": 2.0, "unknown": 1})
    assert cfg.lambda_gm == 2.0
