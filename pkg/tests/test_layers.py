import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irim.layers import (
    AffineCouplingLayer,
    CouplingLayer,
    DegenerateReflectionError,
    ResidualBlock,
    build_orthogonal,
    glu,
    glu_vjp,
    householder_vjp,
    layer_vjp,
    orth_conv,
    orth_conv_inverse,
    weight_norm,
    weight_norm_vjp,
)
from irim.meter import MemoryMeter
from irim.numerics import seeded_rng


def orth_error(U):
    return np.linalg.norm(U @ U.T - np.eye(len(U)))


# -- Householder embedding ---------------------------------------------------


def test_single_axis_reflection():
    U = build_orthogonal(np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_array_equal(U, np.diag([-1.0, 1.0, 1.0]))


def test_empty_stack_is_identity():
    np.testing.assert_array_equal(build_orthogonal(np.zeros((0, 5))), np.eye(5))


def test_three_reflections_orthogonal_with_negative_determinant():
    U = build_orthogonal(np.random.default_rng(0).standard_normal((3, 8)))
    assert orth_error(U) <= 1e-12
    assert abs(np.linalg.det(U) + 1.0) <= 1e-9


def test_degenerate_vector_names_index():
    v = np.random.default_rng(1).standard_normal((3, 4))
    v[2] = 0.0
    with pytest.raises(DegenerateReflectionError, match="vector 2"):
        build_orthogonal(v)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    C=st.integers(2, 24),
    D=st.integers(1, 6),
    scale=st.floats(1e-6, 1e6),
)
def test_orthogonal_for_any_parameters(seed, C, D, scale):
    v = scale * np.random.default_rng(seed).standard_normal((D, C))
    assert orth_error(build_orthogonal(v)) <= 1e-6


def test_householder_vjp_matches_finite_differences():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((3, 5))
    W = rng.standard_normal((5, 5))
    g = householder_vjp(v, W)
    h = 1e-6
    fd = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        e = np.zeros_like(v)
        e[idx] = h
        fd[idx] = (np.sum(build_orthogonal(v + e) * W) - np.sum(build_orthogonal(v - e) * W)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_orth_conv_identity_and_norm():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 5, 5))
    np.testing.assert_array_equal(orth_conv(np.eye(6), x), x)
    U = build_orthogonal(rng.standard_normal((3, 6)))
    assert abs(np.linalg.norm(orth_conv(U, x)) - np.linalg.norm(x)) <= 1e-12 * np.linalg.norm(x)


def test_orth_conv_round_trip_64_channels():
    rng = np.random.default_rng(4)
    U = build_orthogonal(rng.standard_normal((3, 64)))
    x = rng.standard_normal((1, 64, 8, 8))
    assert np.max(np.abs(orth_conv_inverse(U, orth_conv(U, x)) - x)) <= 1e-12


def test_orth_conv_pixelwise():
    rng = np.random.default_rng(5)
    U = build_orthogonal(rng.standard_normal((3, 4)))
    x = rng.standard_normal((1, 4, 3, 3))
    y = orth_conv(U, x)
    np.testing.assert_allclose(y[0, :, 1, 2], U @ x[0, :, 1, 2], atol=1e-14)


def test_orth_conv_adjoint_is_transpose():
    rng = np.random.default_rng(6)
    U = build_orthogonal(rng.standard_normal((3, 6)))
    x, g = rng.standard_normal((2, 2, 6, 4, 4))
    assert abs(np.sum(orth_conv(U, x) * g) - np.sum(x * orth_conv_inverse(U, g))) <= 1e-11


# -- weight norm and GLU -----------------------------------------------------


def test_weight_norm_unit_direction_passthrough():
    v = np.random.default_rng(7).standard_normal((3, 2, 2, 2))
    v /= np.linalg.norm(v.reshape(3, -1), axis=1)[:, None, None, None]
    np.testing.assert_allclose(weight_norm(v, np.ones(3)), v, atol=1e-15)


def test_weight_norm_scale_invariance_and_norms():
    rng = np.random.default_rng(8)
    v = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal(4)
    k = weight_norm(v, g)
    np.testing.assert_allclose(weight_norm(10 * v, g), k, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(k.reshape(4, -1), axis=1), np.abs(g), atol=1e-12)
    k1 = weight_norm(v, rng.standard_normal(3), axis=1)
    assert k1.shape == v.shape


@pytest.mark.parametrize("axis", [0, 1])
def test_weight_norm_vjp(axis):
    rng = np.random.default_rng(9 + axis)
    v = rng.standard_normal((3, 4, 2, 2))
    g = rng.standard_normal(v.shape[axis])
    W = rng.standard_normal(v.shape)
    dv, dg = weight_norm_vjp(v, g, W, axis)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (2, 3, 1, 0), (1, 2, 0, 1)]:
        e = np.zeros_like(v)
        e[idx] = h
        fd = (np.sum(weight_norm(v + e, g, axis) * W) - np.sum(weight_norm(v - e, g, axis) * W)) / (2 * h)
        assert abs(fd - dv[idx]) <= 1e-7
    for j in range(len(g)):
        e = np.zeros_like(g)
        e[j] = h
        fd = (np.sum(weight_norm(v, g + e, axis) * W) - np.sum(weight_norm(v, g - e, axis) * W)) / (2 * h)
        assert abs(fd - dg[j]) <= 1e-7


def test_glu_cases():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(glu(np.concatenate([a, np.zeros_like(a)], 1)), a / 2, atol=1e-15)
    np.testing.assert_allclose(glu(np.concatenate([a, np.full_like(a, 50.0)], 1)), a, atol=1e-15)
    b = rng.standard_normal(a.shape)
    np.testing.assert_allclose(glu(np.concatenate([a, b], 1)), a / (1 + np.exp(-b)), atol=1e-15)
    with pytest.raises(ValueError, match="even"):
        glu(np.zeros((1, 3, 2, 2)))


def test_glu_vjp_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 4, 3, 3))
    g = rng.standard_normal((1, 2, 3, 3))
    d = rng.standard_normal(x.shape)
    h = 1e-6
    fd = (np.sum(glu(x + h * d) * g) - np.sum(glu(x - h * d) * g)) / (2 * h)
    assert abs(fd - np.sum(glu_vjp(x, g) * d)) <= 1e-8


# -- residual block -----------------------------------------------------------


def conv_same_oracle(x, k):
    """Stride-1 correlation with zero padding (k x k odd), by explicit shifts."""
    n, c, H, W = x.shape
    r = k.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((n, k.shape[0], H, W))
    for a in range(k.shape[2]):
        for b in range(k.shape[3]):
            out += np.einsum("oc,nchw->nohw", k[:, :, a, b], xp[:, :, a : a + H, b : b + W])
    return out


def test_block_factor_one_matches_composed_oracle():
    rng = np.random.default_rng(12)
    blk = ResidualBlock(3, 5, 4, 1, rng)
    for name in ("b1", "b2", "w1_g", "w2_g", "w3_g"):
        blk.params[name] = rng.standard_normal(blk.params[name].shape)
    x = rng.standard_normal((2, 3, 6, 6))
    k1, k2, k3 = blk.kernels()
    def silu(z):
        return z / (1 + np.exp(-z))

    h1 = silu(np.einsum("oc,nchw->nohw", k1[:, :, 0, 0], x) + blk.params["b1"][:, None, None])
    h2 = silu(conv_same_oracle(h1, k2) + blk.params["b2"][:, None, None])
    h3 = np.einsum("co,nchw->nohw", k3[:, :, 0, 0], h2)  # transposed 1x1 conv
    expected = h3[:, :5] / (1 + np.exp(-h3[:, 5:]))
    np.testing.assert_allclose(blk(x), expected, atol=1e-12)


def test_block_zero_parameters_give_zero():
    blk = ResidualBlock(4, 4, 8, 2, seeded_rng(0))
    for p in blk.params.values():
        p[...] = 0.0
    assert not blk(np.random.default_rng(0).standard_normal((1, 4, 8, 8))).any()


@pytest.mark.parametrize("d", [1, 2, 4])
def test_block_shape_contract(d):
    blk = ResidualBlock(8, 8, 6, d, seeded_rng(d))
    assert blk(np.ones((2, 8, 16, 16))).shape == (2, 8, 16, 16)


def test_block_rejects_indivisible_extent():
    with pytest.raises(ValueError, match="divisible"):
        ResidualBlock(2, 2, 4, 4, seeded_rng(0))(np.zeros((1, 2, 10, 8)))


def test_block_last_conv_has_no_bias():
    assert set(ResidualBlock(2, 2, 4, 2).params) == {"w1_v", "w1_g", "b1", "w2_v", "w2_g", "b2", "w3_v", "w3_g"}


def test_block_vjp_finite_differences():
    rng = np.random.default_rng(13)
    blk = ResidualBlock(3, 2, 4, 2, rng)
    blk.params["b1"][:] = rng.standard_normal(4) * 0.1
    blk.params["w3_g"][:] = 1.0
    x = rng.standard_normal((2, 3, 8, 8))
    u = rng.standard_normal((2, 2, 8, 8))
    dx, grads = blk.vjp(x, u)
    h = 1e-6
    delta = rng.standard_normal(x.shape)
    fd = (np.sum(blk(x + h * delta) * u) - np.sum(blk(x - h * delta) * u)) / (2 * h)
    assert abs(fd - np.sum(dx * delta)) <= 1e-6 * abs(fd)
    for name, p in blk.params.items():
        d = rng.standard_normal(p.shape)
        old = p.copy()
        p[...] = old + h * d
        fp = np.sum(blk(x) * u)
        p[...] = old - h * d
        fm = np.sum(blk(x) * u)
        p[...] = old
        fd = (fp - fm) / (2 * h)
        assert abs(fd - np.sum(grads[name] * d)) <= 1e-6 * max(abs(fd), 1e-8), name


# -- coupling layers ----------------------------------------------------------


def make_layer(C=8, seed=0, factor=2, scale=1.0, **kw):
    layer = CouplingLayer(C, 6, factor, rng=seeded_rng(seed), **kw)
    layer.block.params["w3_g"][:] = scale
    return layer


def test_zero_block_layer_is_identity():
    layer = make_layer()
    layer.block.zero_()
    x = np.random.default_rng(14).standard_normal((2, 8, 8, 8))
    np.testing.assert_allclose(layer.forward(x), x, atol=1e-13)


def test_identity_embedding_reduces_to_plain_additive_coupling():
    layer = CouplingLayer(6, 4, 1, n_reflections=0, rng=seeded_rng(1))
    x = np.random.default_rng(15).standard_normal((1, 6, 4, 4))
    y = layer.forward(x)
    np.testing.assert_array_equal(y[:, :3], x[:, :3])
    np.testing.assert_allclose(y[:, 3:], x[:, 3:] + layer.block(x[:, :3]), atol=1e-15)


def test_round_trip_64_channels():
    layer = make_layer(C=64, seed=2)
    x = np.random.default_rng(16).standard_normal((1, 64, 16, 16))
    assert np.max(np.abs(layer.inverse(layer.forward(x)) - x)) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), C=st.integers(2, 10), factor=st.sampled_from([1, 2, 4]), scale=st.floats(0.01, 3.0))
def test_round_trip_property(seed, C, factor, scale):
    layer = make_layer(C=C, seed=seed, factor=factor, scale=scale)
    x = np.random.default_rng(seed).standard_normal((1, C, 8, 8))
    assert np.max(np.abs(layer.inverse(layer.forward(x)) - x)) <= 1e-8


def test_split_validation():
    with pytest.raises(ValueError, match="split"):
        CouplingLayer(4, split=4)
    with pytest.raises(ValueError):
        make_layer().forward(np.zeros((1, 6, 8, 8)))


def test_volume_preserving():
    layer = CouplingLayer(4, 3, 1, rng=seeded_rng(3))
    layer.block.params["w3_g"][:] = 1.0
    x = np.random.default_rng(17).standard_normal((1, 4, 2, 2))
    n = x.size
    J = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        gx, _ = layer.vjp(x, e.reshape(x.shape))
        J[i] = gx.ravel()  # rows of J^T
    sign, logdet = np.linalg.slogdet(J)
    assert abs(logdet) <= 1e-8


def test_zero_block_vjp_is_identity():
    layer = make_layer()
    layer.block.zero_()
    rng = np.random.default_rng(18)
    x, u = rng.standard_normal((2, 1, 8, 8, 8))
    gx, _ = layer_vjp(layer, x, u)
    np.testing.assert_allclose(gx, u, atol=1e-13)


def test_orth_conv_only_cotangent():
    # with G = 0 the input cotangent of x -> U x is U^T u
    layer = make_layer()
    layer.block.zero_()
    U = layer.orthogonal()
    u = np.random.default_rng(19).standard_normal((1, 8, 4, 4))
    np.testing.assert_allclose(orth_conv_inverse(U, u), np.einsum("oc,nohw->nchw", U, u), atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_directional_derivative_consistency(seed):
    rng = np.random.default_rng(seed)
    layer = make_layer(seed=seed % 1000, scale=0.5)
    x, u, delta = rng.standard_normal((3, 1, 8, 8, 8))
    gx, _ = layer.vjp(x, u)
    h = 1e-6
    fd = np.sum(u * (layer.forward(x + h * delta) - layer.forward(x - h * delta))) / (2 * h)
    assert abs(np.sum(gx * delta) - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(20)
    layer = make_layer(scale=0.7)
    x, u = rng.standard_normal((2, 2, 8, 8, 8))
    _, grads = layer.vjp(x, u)
    params = layer.parameters()
    names = list(params)
    h = 1e-6
    analytic, fd = [], []
    for _ in range(20):
        name = names[rng.integers(len(names))]
        flat = params[name].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        fp = np.sum(layer.forward(x) * u)
        flat[i] = old - h
        fm = np.sum(layer.forward(x) * u)
        flat[i] = old
        fd.append((fp - fm) / (2 * h))
        analytic.append(grads[name].reshape(-1)[i])
    fd, analytic = np.array(fd), np.array(analytic)
    assert np.max(np.abs(fd - analytic)) <= 1e-5 * np.max(np.abs(fd))


def test_reverse_vjp_matches_vjp_on_true_input():
    rng = np.random.default_rng(21)
    layer = make_layer(scale=0.5)
    x, u = rng.standard_normal((2, 1, 8, 8, 8))
    y = layer.forward(x)
    gx, grads = layer.vjp(x, u)
    xr, gxr, grads_r = layer.reverse_vjp(y, u)
    assert np.max(np.abs(xr - x)) <= 1e-12
    np.testing.assert_allclose(gxr, gx, atol=1e-11)
    for k in grads:
        np.testing.assert_allclose(grads_r[k], grads[k], atol=1e-10)


def test_meter_sees_block_transients():
    meter = MemoryMeter()
    layer = make_layer()
    layer.forward(np.zeros((1, 8, 8, 8)), meter)
    # h1: 6x4x4, h2: 6x4x4, h3: 8x8x8 for factor 2 on 8x8
    assert meter.peak == 6 * 16 * 2 + 8 * 64
    assert meter.layer_evals == 1


def test_debug_corruption_scales_parameter_gradients():
    rng = np.random.default_rng(22)
    layer = make_layer()
    x, u = rng.standard_normal((2, 1, 8, 8, 8))
    gx, grads = layer.vjp(x, u)
    layer.debug_corrupt = True
    gx2, grads2 = layer.vjp(x, u)
    np.testing.assert_array_equal(gx, gx2)
    np.testing.assert_allclose(grads2["householder"], 1.01 * grads["householder"])


def test_affine_with_zero_scale_net_equals_additive():
    aff = AffineCouplingLayer(8, 6, 2, rng=seeded_rng(4))
    aff.scale_net.zero_()
    add = CouplingLayer(8, 6, 2, rng=seeded_rng(5))
    add.householder = aff.householder
    add.block = aff.shift_net
    x = np.random.default_rng(23).standard_normal((1, 8, 8, 8))
    np.testing.assert_allclose(aff.forward(x), add.forward(x), atol=1e-14)


def test_affine_constant_log2_gate():
    class Const:
        def __call__(self, x):
            return np.full((x.shape[0], 4, *x.shape[2:]), np.log(2.0))

    aff = AffineCouplingLayer(8, 6, 1, n_reflections=0, rng=seeded_rng(6), scale_net=Const())
    x = np.random.default_rng(24).standard_normal((1, 8, 4, 4))
    y = aff.forward(x)
    np.testing.assert_allclose(y[:, 4:], 2 * x[:, 4:] + aff.shift_net(x[:, :4]), atol=1e-14)
    np.testing.assert_allclose(aff.inverse(y), x, atol=1e-14)


def test_affine_gate_is_clamped():
    class Huge:
        def __call__(self, x):
            return np.full((x.shape[0], 4, *x.shape[2:]), 1e4)

    aff = AffineCouplingLayer(8, 6, 1, n_reflections=0, clamp=5.0, rng=seeded_rng(7), scale_net=Huge())
    x = np.random.default_rng(25).standard_normal((1, 8, 4, 4))
    y = aff.forward(x)
    np.testing.assert_allclose(y[:, 4:], np.exp(5.0) * x[:, 4:] + aff.shift_net(x[:, :4]), rtol=1e-12)
