import numpy as np
import pytest

from helpers import fd_jacobian, perturb
from lrsflow import autodiff as ad
from lrsflow import spline as sp
from lrsflow.errors import ShapeMismatch
from lrsflow.flow import (AffineCouplingLayer, FlowModel, LULinear, MadeSplineLayer,
                          SplineCouplingLayer, StandardNormal, UniformUnitCube, build_model,
                          make_rng)

SETTINGS = sp.SplineSettings(num_bins=4, tail_bound=3.0)


def _np(layer_fn, x):
    out, ld = layer_fn(x)
    return out.data, ld.data


def _coupling(dim=2, parity=0, seed=0, scale=0.3, **kw):
    layer = SplineCouplingLayer(dim, SETTINGS, parity, hidden_features=8, num_blocks=1,
                                rng=make_rng(seed), **kw)
    r = make_rng(seed + 100)
    for p in layer.parameters():
        p.data += scale * r.standard_normal(p.data.shape)
    return layer


# ---------------------------------------------------------------------------
# spline coupling
# ---------------------------------------------------------------------------

def test_zero_init_coupling_is_identity(rng):
    layer = SplineCouplingLayer(3, SETTINGS, rng=rng)
    z = rng.standard_normal((20, 3))
    x, ld = _np(layer.forward, z)
    assert np.max(np.abs(x - z)) < 1e-12 and np.max(np.abs(ld)) < 1e-12
    back, ld_inv = _np(layer.inverse, z)
    assert np.max(np.abs(back - z)) < 1e-12 and np.max(np.abs(ld_inv)) < 1e-12


def test_coupling_logdet_matches_fd_jacobian(rng):
    layer = _coupling(2)
    for z in rng.uniform(-2.5, 2.5, (10, 2)):
        x, ld = _np(layer.forward, z[None])
        J = fd_jacobian(lambda v: layer.forward(v[None])[0].data[0], z)
        ref = np.log(abs(np.linalg.det(J)))
        assert abs(ld[0] - ref) < 1e-5 * max(1.0, abs(ref))


def test_parity_flips_the_split(rng):
    a = _coupling(2, parity=0)
    b = SplineCouplingLayer(2, SETTINGS, parity=1, hidden_features=8, num_blocks=1)
    for k, t in a.params.items():
        b.params[k].data[...] = t.data
    z = rng.standard_normal((6, 2))
    rev = np.array([1, 0])
    xa, lda = _np(a.forward, z[:, rev])
    xb, ldb = _np(b.forward, z)
    np.testing.assert_allclose(xa[:, rev], xb, atol=1e-14)
    np.testing.assert_allclose(lda, ldb, atol=1e-14)


def test_coupling_roundtrip_many_batches(rng):
    layer = _coupling(3, seed=2)
    worst, ld_worst = 0.0, 0.0
    for _ in range(1000):
        z = rng.uniform(-3.5, 3.5, (4, 3))
        x, ld = _np(layer.forward, z)
        back, ld_inv = _np(layer.inverse, x)
        worst = max(worst, np.max(np.abs(back - z)))
        ld_worst = max(ld_worst, np.max(np.abs(ld + ld_inv)))
    assert worst < 1e-8
    assert ld_worst < 1e-9


def test_coupling_without_first_transform(rng):
    layer = _coupling(2, transform_first=False)
    assert "phi" not in layer.params
    z = rng.standard_normal((5, 2))
    x, _ = _np(layer.forward, z)
    np.testing.assert_array_equal(x[:, 0], z[:, 0])


def test_coupling_rejects_wrong_width():
    with pytest.raises(ShapeMismatch):
        _coupling(2).forward(np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        SplineCouplingLayer(1, SETTINGS)


# ---------------------------------------------------------------------------
# LU mixing
# ---------------------------------------------------------------------------

def test_lu_starts_as_permutation(rng):
    layer = LULinear(4, rng)
    u = rng.standard_normal((5, 4))
    v, ld = _np(layer.forward, u)
    np.testing.assert_array_equal(v, u @ layer.P.T)
    assert np.all(ld == 0)


def test_lu_roundtrip_and_determinant(rng):
    layer = LULinear(3, rng)
    for p in layer.parameters():
        p.data += 0.5 * rng.standard_normal(p.data.shape)
    u = rng.standard_normal((10, 3))
    v, ld = _np(layer.forward, u)
    back, ld_inv = _np(layer.inverse, v)
    assert np.max(np.abs(back - u)) < 1e-10
    ref = np.log(abs(np.linalg.det(layer.weight_matrix())))
    assert np.all(np.abs(ld - ref) < 1e-10)
    assert np.all(np.abs(ld_inv + ref) < 1e-10)
    np.testing.assert_allclose(v, u @ layer.weight_matrix().T, atol=1e-12)


# ---------------------------------------------------------------------------
# masked autoregressive splines
# ---------------------------------------------------------------------------

def _made_layer(D, seed=0):
    layer = MadeSplineLayer(D, SETTINGS, (16, 16), rng=make_rng(seed))
    r = make_rng(seed + 7)
    for p in layer.parameters():
        p.data += 0.3 * r.standard_normal(p.data.shape)
    return layer


def test_made_inverse_recovers_input(rng):
    layer = _made_layer(4)
    u = rng.uniform(-3, 3, (50, 4))
    v, ld = _np(layer.forward, u)
    back, ld_inv = _np(layer.inverse, v)
    assert np.max(np.abs(back - u)) < 1e-8
    assert np.max(np.abs(ld + ld_inv)) < 1e-9


def test_made_first_dimension_ignores_the_rest(rng):
    layer = _made_layer(3)
    a = rng.standard_normal((8, 3))
    b = a.copy()
    b[:, 1:] = rng.standard_normal((8, 2))
    va, _ = _np(layer.forward, a)
    vb, _ = _np(layer.forward, b)
    assert va[:, 0].tobytes() == vb[:, 0].tobytes()


def test_made_jacobian_is_lower_triangular(rng):
    layer = _made_layer(3)
    for u in rng.uniform(-2.5, 2.5, (5, 3)):
        J = fd_jacobian(lambda x: layer.forward(x[None])[0].data[0], u)
        assert np.all(np.abs(np.triu(J, 1)) < 1e-8)
        _, ld = _np(layer.forward, u[None])
        assert ld[0] == pytest.approx(np.log(np.prod(np.diag(J))), rel=1e-5)


# ---------------------------------------------------------------------------
# affine baseline
# ---------------------------------------------------------------------------

def test_affine_zero_init_identity(rng):
    layer = AffineCouplingLayer(3, rng=rng)
    z = rng.standard_normal((5, 3))
    x, ld = _np(layer.forward, z)
    np.testing.assert_array_equal(x, z)
    assert np.all(ld == 0)


def test_affine_roundtrip_and_logdet(rng):
    layer = AffineCouplingLayer(4, parity=1, hidden_features=8, rng=rng)
    for p in layer.parameters():
        p.data += 0.3 * rng.standard_normal(p.data.shape)
    z = rng.standard_normal((20, 4))
    x, ld = _np(layer.forward, z)
    back, ld_inv = _np(layer.inverse, x)
    assert np.max(np.abs(back - z)) < 1e-10
    s, _ = layer._scale_shift(ad.take(ad.Tensor(z), layer.idx1), None)
    assert np.array_equal(ld, s.data.sum(axis=-1))
    assert np.max(np.abs(ld + ld_inv)) < 1e-12


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

def test_identity_model_log_prob_at_origin():
    model = build_model(2, num_bins=4, hidden_features=8)
    assert model.log_prob(np.zeros((1, 2)))[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_uniform_base_identity_model():
    model = build_model(2, num_bins=4, hidden_features=8, base="uniform")
    lp = model.log_prob(np.array([[0.2, 0.7], [0.9, 0.1]]))
    np.testing.assert_array_equal(lp, 0.0)
    assert np.isneginf(model.log_prob(np.array([[1.5, 0.5]]))[0])


def test_density_integrates_to_one():
    model = perturb(build_model(2, num_bins=8, tail_bound=3.0, hidden_features=16, seed=1),
                    0.2, 9)
    h = 0.02
    c = np.arange(-6 + h / 2, 6, h)
    gx, gy = np.meshgrid(c, c)
    dens = np.exp(model.log_prob(np.stack([gx.ravel(), gy.ravel()], axis=1)))
    assert abs(dens.sum() * h * h - 1.0) < 1e-2


def test_sample_is_seed_repeatable_and_scorable():
    model = perturb(build_model(2, num_bins=4, hidden_features=8, seed=3), 0.2, 4)
    a = model.sample(10000, seed=11)
    assert a.tobytes() == model.sample(10000, seed=11).tobytes()
    assert np.all(np.isfinite(model.log_prob(a)))


def test_identity_model_sample_moments():
    n = 20000
    x = build_model(3, num_bins=4, hidden_features=8).sample(n, seed=2)
    assert np.all(np.abs(x.mean(axis=0)) < 4 / np.sqrt(n))
    assert np.all(np.abs(np.cov(x.T) - np.eye(3)) < 10 / np.sqrt(n))


@pytest.mark.parametrize("mode, layers", [("coupling", 4), ("autoregressive", 4)])
def test_model_roundtrip(mode, layers, rng):
    # coupling mode interleaves LU layers, so 4 coupling layers make an 8-layer stack
    model = perturb(build_model(3, mode=mode, num_layers=layers, num_bins=5, hidden_features=8,
                                seed=5), 0.2, 6)
    assert len(model.layers) >= 7
    x = rng.standard_normal((100, 3))
    z, ld = model.normalize(x)
    back, ld_gen = model.generate(z.data)
    assert np.max(np.abs(back - x)) < 1e-7
    assert np.max(np.abs(ld.data + ld_gen)) < 1e-7
    z2, _ = model.normalize(model.generate(x)[0])
    assert np.max(np.abs(z2.data - x)) < 1e-7


@pytest.mark.parametrize("D", [2, 3, 4])
def test_model_logdet_matches_fd_jacobian(D, rng):
    model = perturb(build_model(D, num_layers=2, num_bins=4, hidden_features=8, seed=D),
                    0.3, D + 10)
    for x in rng.standard_normal((3, D)):
        J = fd_jacobian(lambda v: model.normalize(v[None])[0].data[0], x)
        ref = np.log(abs(np.linalg.det(J)))
        _, ld = model.normalize(x[None])
        assert abs(ld.data[0] - ref) / max(1.0, abs(ref)) < 1e-4


def test_topology_records_orientation():
    model = build_model(3, num_layers=2, num_bins=4, hidden_features=8)
    topo = model.topology()
    assert topo["storage_order"] == "generation"
    kinds = [(l["kind"], l["orientation"]) for l in topo["layers"]]
    assert kinds == [("lu_linear", "normalizing"), ("spline_coupling", "generative")] * 2


def test_model_rejects_mismatched_dims():
    with pytest.raises(ShapeMismatch):
        FlowModel([LULinear(3)], StandardNormal(2))
    with pytest.raises(ShapeMismatch):
        build_model(2, num_bins=4).log_prob(np.zeros((2, 3)))


def test_build_model_validates_choices():
    with pytest.raises(ValueError):
        build_model(2, mode="autoregressive", transform="affine")
    with pytest.raises(ValueError):
        build_model(2, base="laplace")
    assert UniformUnitCube(2).sample(3, make_rng(0)).shape == (3, 2)
