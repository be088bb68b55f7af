import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings
from hypothesis import strategies as st

from ulfdti.bias import WM, DctBiasBasis
from ulfdti.errors import UsageError
from ulfdti.phantom import (
    InjectedBias, PhantomSpec, hardi_gradient_table, make_injected_bias, make_synthetic_atlas,
    make_tensor_field, phantom_sh_sample, rician, synthesize_dwi, ulf_gradient_table,
)
from ulfdti.tensor import fit_tensor_loglinear, quadratic_form, st_forward, tensor_metrics
from ulfdti.volume_io import GradientTable


def _spec(scene, **kw):
    return PhantomSpec(dims=kw.pop("dims", (20, 20, 16)), voxel_mm=2.0, scene=scene, **kw)


def test_isotropic_sphere_fa_zero():
    ph = make_tensor_field(_spec("isotropic_sphere"))
    fa = tensor_metrics(ph.tensors.tensors).fa
    assert np.abs(fa[ph.labels > 0]).max() < 1e-12


def test_single_bundle_along_x():
    ph = make_tensor_field(_spec("single_bundle"))
    m = tensor_metrics(ph.tensors.tensors)
    wm = ph.labels == WM
    assert wm.sum() > 20
    assert np.allclose(m.v1[wm], [1.0, 0.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("orientation", [(0.0, 0.0, 0.0), (0.5, 0.9, 0.3)])
def test_curved_bundle_follows_tangent(orientation):
    ph = make_tensor_field(_spec("curved_bundle", dims=(32, 32, 24), orientation=orientation))
    m = tensor_metrics(ph.tensors.tensors)
    wm = ph.labels == WM
    t = ph.tangent[wm] / np.linalg.norm(ph.tangent[wm], axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.abs(np.sum(m.v1[wm] * t, axis=1)), 0, 1)))
    assert ang.max() < 1.0


def test_crossing_scene_and_spec_validation(tmp_path):
    ph = make_tensor_field(_spec("crossing_bundles"))
    w = np.linalg.eigvalsh(ph.tensors.matrices())
    assert np.all(w > 0)
    assert set(np.unique(ph.labels)) <= {0, 1, 2, 3}
    with pytest.raises(UsageError):
        PhantomSpec(scene="spiral")
    with pytest.raises(UsageError):
        PhantomSpec(wm_axial=1e-4, wm_radial=3e-4)
    with pytest.raises(UsageError):
        PhantomSpec(gm_diffusivity=0.0)
    spec = _spec("single_bundle", orientation=(0.1, 0.2, 0.3))
    p = tmp_path / "spec.json"
    p.write_text(spec.to_json())
    assert PhantomSpec.load(p) == spec


def test_default_geometry_matches_ulf_protocol():
    spec = PhantomSpec()
    assert spec.dims == (56, 64, 52) and spec.voxel_mm == 3.5
    g = ulf_gradient_table()
    assert np.sum(g.bvals == 700) == 9 and np.sum(g.bvals == 0) == 3


def test_synthesis_matches_forward_model():
    ph = make_tensor_field(_spec("crossing_bundles", dims=(8, 8, 8)))
    g = ulf_gradient_table()
    ds = synthesize_dwi(ph.tensors, g, ph.s0)
    ref = np.stack([st_forward(ph.s0, ph.tensors.tensors, b, u) for b, u in zip(g.bvals, g.bvecs)], -1)
    assert np.allclose(ds.data, ref, rtol=1e-14, atol=0)
    n = len(g)
    doubled = InjectedBias(np.full(ph.grid.dims + (n,), 2.0), np.ones(ph.grid.dims + (n,)))
    assert np.allclose(synthesize_dwi(ph.tensors, g, ph.s0, bias=doubled).data, 2 * ds.data, rtol=1e-15)


def test_injected_bias_is_smooth_and_direction_specific():
    ph = make_tensor_field(_spec("isotropic_sphere", dims=(12, 12, 12)))
    g = ulf_gradient_table()
    bias = make_injected_bias(ph.grid, g, np.random.default_rng(0))
    dw = np.flatnonzero(~g.b0_mask())
    assert np.all(bias.gamma > 0) and np.all(bias.upsilon > 0)
    assert bias.gamma[..., dw].min() >= 0.7 - 1e-12 and bias.gamma[..., dw].max() <= 1.3 + 1e-12
    assert np.all(bias.gamma[..., g.b0_mask()] == 1.0)
    spectra = []
    for i in dw:
        lowf = np.zeros(ph.grid.dims, dtype=bool)
        for k in DctBiasBasis(ph.grid.dims).orders:
            lowf[k] = True
        for fld in (bias.gamma[..., i], bias.upsilon[..., i]):
            spec = scipy.fft.dctn(fld, type=2)
            assert np.abs(spec[~lowf]).max() < 1e-9 * np.abs(spec).max()
        ds = synthesize_dwi(ph.tensors, g, ph.s0, bias=bias)
        spectra.append(scipy.fft.dctn(ds.data[..., i] / ph.s0, type=2)[lowf])
    # each direction carries its own intensity pattern
    spectra = np.array(spectra)
    for a in range(len(dw)):
        for b in range(a + 1, len(dw)):
            assert not np.allclose(spectra[a], spectra[b], rtol=1e-3)


def test_true_log_bias_matches_definition(rng):
    ph = make_tensor_field(_spec("single_bundle", dims=(8, 8, 8)))
    g = ulf_gradient_table()
    bias = make_injected_bias(ph.grid, g, rng)
    ds = synthesize_dwi(ph.tensors, g, ph.s0, bias=bias)
    clean = synthesize_dwi(ph.tensors, g, ph.s0)
    dw = np.flatnonzero(~g.b0_mask())
    zeta = bias.true_log_bias(ph.tensors, g)
    assert np.allclose(np.log(ds.data[..., dw] / clean.data[..., dw]), zeta, atol=1e-12)


def test_atlas_examples():
    ph = make_tensor_field(_spec("single_bundle", dims=(24, 24, 16), bundle_radius=0.25))
    atlas = make_synthetic_atlas(ph.tensors, ph.labels)
    iso = ph.labels >= 2
    assert np.allclose(atlas.kappa[iso], 0.0)
    wm = ph.labels == WM
    assert np.allclose(np.abs(atlas.v1_mu[wm][:, 0]), 1.0)
    a, b = atlas.voxel_beta_params()
    fa = tensor_metrics(ph.tensors.tensors).fa
    assert np.abs((a / (a + b))[wm] - fa[wm]).max() < 0.02


@settings(max_examples=15)
@given(seed=st.integers(0, 2**31), n=st.integers(6, 30))
def test_zero_bias_roundtrip_any_geometry(seed, n):
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    g = GradientTable(np.r_[0.0, np.full(n, 1000.0)], np.vstack([np.zeros(3), dirs]))
    from ulfdti.tensor import design_matrix
    if np.linalg.cond(design_matrix(g)) > 1e4:
        return
    ph = make_tensor_field(_spec("crossing_bundles", dims=(8, 8, 8)))
    fit, _ = fit_tensor_loglinear(synthesize_dwi(ph.tensors, g, ph.s0).data, g)
    t = ph.tensors.tensors
    rel = np.linalg.norm(fit - t, axis=-1) / np.linalg.norm(t, axis=-1)
    assert rel.max() < 1e-9


def test_rician_properties():
    rng = np.random.default_rng(0)
    out = rician(np.zeros(200000), 100.0, rng)
    assert np.all(out >= 0)
    assert out.mean() == pytest.approx(100 * np.sqrt(np.pi / 2), rel=5e-3)
    assert np.array_equal(rician(np.ones(3), 0.0, rng), np.ones(3))
    with pytest.raises(UsageError):
        synthesize_dwi(make_tensor_field(_spec("isotropic_sphere", dims=(4, 4, 4))).tensors,
                       ulf_gradient_table(), 1.0, rician_sigma=5.0)


def test_deterministic_given_seed():
    spec = _spec("curved_bundle", dims=(12, 12, 12))
    a, b = make_tensor_field(spec), make_tensor_field(spec)
    assert np.array_equal(a.tensors.tensors, b.tensors.tensors)
    g = ulf_gradient_table()
    ba = make_injected_bias(a.grid, g, np.random.default_rng(3))
    bb = make_injected_bias(a.grid, g, np.random.default_rng(3))
    assert np.array_equal(ba.gamma, bb.gamma) and np.array_equal(ba.upsilon, bb.upsilon)


def test_phantom_sh_sample_channels():
    ph = make_tensor_field(_spec("single_bundle", dims=(8, 8, 8)))
    s = phantom_sh_sample(ph, hardi_gradient_table(30, 1000.0))
    assert s.data.shape == (8, 8, 8, 7)
    assert np.all(s.lowb >= 0)
    assert s.lowb.mean() == pytest.approx(1.0, rel=1e-12)
