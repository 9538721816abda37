import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_legendre
from scipy.spatial.transform import Rotation

from dens import numcore as nc
from dens import so3
from dens.numcore import Tape, Tensor, backward

LMAX = 4


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def axis_angle(axis, theta):
    return Rotation.from_rotvec(unit(axis) * theta).as_matrix()


@pytest.mark.parametrize("L", range(LMAX + 1))
def test_wigner_character_matches_closed_form(L, rng):
    # the trace of D_L depends only on the rotation angle
    for _ in range(5):
        theta = rng.uniform(0.1, np.pi - 0.1)
        R = axis_angle(rng.normal(size=3), theta)
        expect = np.sin((2 * L + 1) * theta / 2) / np.sin(theta / 2)
        assert abs(np.trace(so3.wigner_d(L, R)) - expect) < 1e-10


def test_wigner_degree_one_is_rotation(rng):
    R = so3.random_rotation(rng)
    np.testing.assert_array_equal(so3.wigner_d(1, R), R)


@pytest.mark.parametrize("L", range(LMAX + 1))
def test_wigner_homomorphism_and_orthogonality(L, rng):
    R1, R2 = so3.random_rotation(rng), so3.random_rotation(rng)
    D1, D2 = so3.wigner_d(L, R1), so3.wigner_d(L, R2)
    np.testing.assert_allclose(so3.wigner_d(L, R1 @ R2), D1 @ D2, atol=1e-10)
    np.testing.assert_allclose(D1.T @ D1, np.eye(2 * L + 1), atol=1e-10)
    np.testing.assert_allclose(so3.wigner_d(L, np.eye(3)), np.eye(2 * L + 1), atol=1e-12)


def test_wigner_rejects_improper_matrix():
    with pytest.raises(ValueError):
        so3.wigner_d(2, np.diag([1.0, 1.0, -1.0]))


@pytest.mark.parametrize("L", range(LMAX + 1))
def test_addition_theorem(L, rng):
    u, v = unit(rng.normal(size=3)), unit(rng.normal(size=3))
    lhs = so3.real_sph_harm(L, u) @ so3.real_sph_harm(L, v)
    assert abs(lhs - eval_legendre(L, u @ v)) < 1e-12


def test_degree_one_harmonic_is_the_vector(rng):
    u = unit(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(so3.real_sph_harm(1, u), u)


def test_harmonics_need_unit_vectors():
    with pytest.raises(ValueError):
        so3.real_sph_harm(2, np.array([1.0, 1.0, 0.0]))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=6, max_size=6))
def test_harmonic_equivariance_property(xs):
    u = np.array(xs[:3])
    w = np.array(xs[3:])
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(w) < 1e-3:
        return
    u = unit(u)
    R = axis_angle(w, np.linalg.norm(w) * 2.0)
    for L in range(LMAX + 1):
        np.testing.assert_allclose(so3.real_sph_harm(L, R @ u), so3.wigner_d(L, R) @ so3.real_sph_harm(L, u),
                                   atol=1e-10)
        assert abs(np.linalg.norm(so3.real_sph_harm(L, u)) - 1.0) < 1e-12


def test_cg_oracles():
    np.testing.assert_allclose(so3.cg_coefficients(1, 1, 0)[:, :, 0], np.eye(3) / np.sqrt(3), atol=1e-14)
    eps = np.zeros((3, 3, 3))
    eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
    eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
    k = so3.cg_coefficients(1, 1, 1)
    sign = np.sign(k[0, 1, 2])
    np.testing.assert_allclose(k, sign * eps / np.sqrt(6), atol=1e-14)


def test_cg_forbidden_is_zero():
    assert not so3.cg_coefficients(0, 1, 2).any()


@pytest.mark.parametrize("l1,l2,l3", [(1, 1, 2), (2, 1, 1), (2, 2, 2), (2, 2, 4), (3, 1, 2)])
def test_cg_equivariance(l1, l2, l3, rng):
    k = so3.cg_coefficients(l1, l2, l3)
    R = so3.random_rotation(rng)
    rot = np.einsum("abc,ai,bj,ck->ijk", k, so3.wigner_d(l1, R), so3.wigner_d(l2, R), so3.wigner_d(l3, R))
    np.testing.assert_allclose(rot, k, atol=1e-10)
    assert abs(np.linalg.norm(k) - 1.0) < 1e-12


def test_flat_roundtrip(rng):
    layout = so3.IrrepsLayout(2, 3)
    flat = rng.normal(size=(4, layout.total_length))
    x = so3.IrrepsFeature.from_flat(layout, flat)
    np.testing.assert_array_equal(x.flat(), flat)


def test_feature_layout_mismatch():
    with pytest.raises(nc.ShapeError):
        so3.IrrepsFeature(so3.IrrepsLayout(2, 3), Tensor(np.zeros((4, 3, 4))))


def _random_feature(rng, lmax=2, C=3, n=5):
    layout = so3.IrrepsLayout(lmax, C)
    return so3.IrrepsFeature(layout, Tensor(rng.normal(size=(n, C, so3.num_components(lmax)))))


def test_so3_linear_equivariant(rng):
    x = _random_feature(rng)
    w = Tensor(rng.normal(size=(3, 4, 3)))
    b = Tensor(rng.normal(size=4))
    R = so3.random_rotation(rng)
    a = so3.rotate_feature(so3.so3_linear(w, x, b), R).data.value
    c = so3.so3_linear(w, so3.rotate_feature(x, R), b).data.value
    np.testing.assert_allclose(a, c, atol=1e-12)


def test_gate_and_norm_equivariant(rng):
    x = _random_feature(rng)
    gates = Tensor(rng.normal(size=(5, 3, 2)))
    R = so3.random_rotation(rng)
    a = so3.rotate_feature(so3.equivariant_rms_norm(so3.gate_activation(x, gates)), R).data.value
    c = so3.equivariant_rms_norm(so3.gate_activation(so3.rotate_feature(x, R), gates)).data.value
    np.testing.assert_allclose(a, c, atol=1e-12)


def test_rms_norm_unit_mean_square(rng):
    x = _random_feature(rng)
    y = so3.equivariant_rms_norm(x, eps=1e-12)
    for L in range(3):
        ms = (y.block(L) ** 2).sum(axis=(1, 2)) / (3 * (2 * L + 1))
        np.testing.assert_allclose(ms, 1.0, atol=1e-9)


def test_tensor_product_equivariant_and_differentiable(rng):
    plan = so3.TensorProductPlan(2)
    x = _random_feature(rng)
    y = so3.sph_harm_all(2, unit(rng.normal(size=(5, 3))))
    w = rng.normal(size=(3, plan.num_paths))
    s = rng.normal(size=(5, 3))
    R = so3.random_rotation(rng)
    out = so3.depthwise_tensor_product(x, y, w, plan, s)
    rot = so3.depthwise_tensor_product(so3.rotate_feature(x, R), so3.rotate_packed(y, 2, R), w, plan, s)
    np.testing.assert_allclose(so3.rotate_feature(out, R).data.value, rot.data.value, atol=1e-12)

    leaves = [Tensor(v, requires_grad=True) for v in (x.data.value, y, w, s)]
    probe = rng.normal(size=out.data.shape)
    with Tape():
        o = so3.depthwise_tensor_product(so3.IrrepsFeature(x.layout, leaves[0]), leaves[1], leaves[2], plan,
                                         leaves[3])
        loss = nc.sum(o.data * probe)
    g = backward(loss)
    h = 1e-6
    for leaf in leaves:
        idx = (0,) * leaf.ndim
        base = leaf.value[idx]
        vals = []
        for d in (h, -h):
            leaf.value[idx] = base + d
            vals.append(float((so3.depthwise_tensor_product(
                so3.IrrepsFeature(x.layout, Tensor(leaves[0].value)), leaves[1].value, leaves[2].value, plan,
                leaves[3].value).data.value * probe).sum()))
        leaf.value[idx] = base
        assert abs(g[leaf][idx] - (vals[0] - vals[1]) / (2 * h)) < 1e-7


def test_illegal_path_rejected():
    with pytest.raises(ValueError):
        so3.TensorProductPlan(2, paths=[(0, 1, 2)])


def test_sph_harm_tensor_matches_numpy(rng):
    u = unit(rng.normal(size=(6, 3)))
    np.testing.assert_allclose(so3.sph_harm_tensor(3, Tensor(u)).value, so3.sph_harm_all(3, u), atol=1e-14)
