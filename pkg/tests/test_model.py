import json

import numpy as np
import pytest

from irim.forward_model import FourierOperator, make_mask
from irim.layers import CouplingLayer
from irim.model import (
    IRIMModel,
    MachineState,
    StepNetwork,
    checkpoint_hash,
    fanned_schedule,
    gradient_injection,
    h_forward,
    h_inverse,
    inject,
    irim_forward_step,
    irim_reverse_step,
    irim_rollout,
    load_checkpoint,
    save_checkpoint,
)
from irim.numerics import idft2, seeded_rng


def identity_model(**kw):
    """Zero residual blocks and U = I (no reflections): every h_t is the identity."""
    model = IRIMModel(n_reflections=0, **kw)
    for _, _, layer in model.layers():
        layer.block.zero_()
    return model


def problem(n=16, batch=2, seed=0, acc=4):
    rng = np.random.default_rng(seed)
    A = FourierOperator(make_mask(n, n, acc, 0.125, seed))
    x = rng.standard_normal((batch, 2, n, n))
    return A, A.forward(x), x


def test_injection_cases():
    g = np.zeros((2, 2, 4, 4))
    assert not gradient_injection(g, 8).any()
    g[:, 0], g[:, 1] = 1.0, 2.0
    out = gradient_injection(g, 8)
    assert out.shape == (2, 6, 4, 4)
    assert np.all(out[:, 0] == 1.0) and np.all(out[:, 1] == 2.0)
    assert not out[:, 2:].any()
    with pytest.raises(ValueError):
        gradient_injection(g, 3)


def test_injection_padding_is_structural():
    g = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    assert np.sum(gradient_injection(g, 10)[:, 2:]) == 0.0


def test_fixed_point_with_identity_h():
    A, d, x = problem()
    model = identity_model(n_steps=1, n_layers=2, schedule=(1, 2))
    state = MachineState.zeros(2, 16, (16, 16))
    state.x[:, :2] = x  # A eta = d, so grad D = 0
    state.x[:, 2:] = np.random.default_rng(1).standard_normal((2, 14, 16, 16))
    out = irim_forward_step(state, d, A, model.steps[0])
    np.testing.assert_allclose(out.x, state.x, atol=1e-12)
    assert out.t == state.t + 1


def test_first_step_algebra_full_mask():
    model = identity_model(n_steps=1, n_layers=1, schedule=(1,))
    A = FourierOperator(np.ones((8, 8)))
    d = np.random.default_rng(2).standard_normal((1, 2, 8, 8))
    out = irim_forward_step(MachineState.zeros(1, 16, (8, 8)), d, A, model.steps[0])
    assert not out.eta.any()
    np.testing.assert_allclose(out.s[:, :2], -idft2(d), atol=1e-14)
    assert not out.s[:, 2:].any()


def test_memory_is_only_read_additively():
    A, d, _ = problem()
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 16, 16, 16))
    delta = np.zeros_like(x)
    delta[:, 2:] = rng.standard_normal((2, 14, 16, 16))
    np.testing.assert_allclose(inject(x + delta, d, A) - inject(x, d, A), delta, atol=1e-13)


def test_step_round_trip():
    A, d, _ = problem()
    model = IRIMModel(n_steps=1, seed=4)
    state = MachineState(np.random.default_rng(4).standard_normal((2, 16, 16, 16)), 3)
    back = irim_reverse_step(irim_forward_step(state, d, A, model.steps[0]), d, A, model.steps[0])
    assert np.max(np.abs(back.x - state.x)) <= 1e-8
    assert back.t == 3


def test_identity_reverse_step_is_exact_subtraction():
    A, d, _ = problem()
    model = identity_model(n_steps=1)
    state = MachineState(np.random.default_rng(5).standard_normal((2, 16, 16, 16)), 0)
    back = irim_reverse_step(irim_forward_step(state, d, A, model.steps[0]), d, A, model.steps[0])
    np.testing.assert_allclose(back.x, state.x, atol=1e-14)


def test_reverse_is_total():
    A, d, _ = problem()
    model = IRIMModel(n_steps=1, seed=6)
    out = irim_reverse_step(MachineState(np.ones((2, 16, 16, 16)), 1), d, A, model.steps[0])
    assert np.all(np.isfinite(out.x))


def test_full_trajectory_reversal_paper_depth():
    A, d, _ = problem(batch=1)
    model = IRIMModel(n_steps=8, n_layers=10, schedule=fanned_schedule(10), seed=7)
    _, traj = irim_rollout(model, d, A, keep_trajectory=True)
    state = traj[-1]
    for t in range(7, -1, -1):
        state = irim_reverse_step(state, d, A, model.steps[t])
        assert np.max(np.abs(state.x - traj[t].x)) <= 1e-6
    assert np.max(np.abs(state.x)) <= 1e-6


def test_h_composition():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 8, 8, 8))
    empty = StepNetwork([])
    np.testing.assert_array_equal(h_forward(empty, x), x)
    np.testing.assert_array_equal(h_inverse(empty, x), x)
    layer = CouplingLayer(8, 4, 2, rng=seeded_rng(8))
    one = StepNetwork([layer])
    np.testing.assert_array_equal(h_forward(one, x), layer.forward(x))
    np.testing.assert_array_equal(h_inverse(one, x), layer.inverse(x))
    deep = StepNetwork([CouplingLayer(8, 4, 2, rng=seeded_rng(8, l)) for l in range(20)])
    assert np.max(np.abs(h_inverse(deep, h_forward(deep, x)) - x)) <= 1e-8


def test_rollout_zero_steps_and_identity_model():
    A, d, _ = problem()
    model = IRIMModel(seed=9)
    eta, traj = irim_rollout(model, d, A, n_steps=0)
    assert eta.shape == (2, 2, 16, 16) and not eta.any() and traj is None
    eta, _ = irim_rollout(identity_model(), d, A)
    assert not eta.any()
    with pytest.raises(ValueError):
        irim_rollout(model, d, A, n_steps=5)


def test_rollout_is_deterministic():
    A, d, _ = problem()
    a = irim_rollout(IRIMModel(seed=10), d, A)[0]
    b = irim_rollout(IRIMModel(seed=10), d, A)[0]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, irim_rollout(IRIMModel(seed=11), d, A)[0])


def test_shape_checks():
    model = IRIMModel()
    A = FourierOperator(np.ones((10, 10)))
    with pytest.raises(ValueError, match="divisible"):
        irim_rollout(model, np.zeros((1, 2, 10, 10)), A)
    with pytest.raises(ValueError):
        IRIMModel(n_channels=3)
    with pytest.raises(ValueError):
        IRIMModel(n_layers=3, schedule=(1, 2))
    with pytest.raises(ValueError):
        IRIMModel(grad_mode="sideways")


def test_fanned_schedule():
    assert fanned_schedule(6) == (1, 2, 4, 4, 2, 1)
    assert fanned_schedule(5) == (1, 2, 4, 2, 1)
    assert fanned_schedule(10, 16) == (1, 2, 4, 8, 16, 16, 8, 4, 2, 1)
    assert fanned_schedule(0) == ()


def test_parameters_are_step_specific():
    model = IRIMModel(n_steps=2, n_layers=1, schedule=(1,))
    p = model.parameters()
    assert not np.array_equal(p["step0.layer0.G.w1_v"], p["step1.layer0.G.w1_v"])
    assert model.n_parameters() == sum(v.size for v in p.values())


def test_checkpoint_round_trip(tmp_path):
    model = IRIMModel(n_steps=2, n_layers=2, schedule=(1, 2), seed=12)
    digest = save_checkpoint(model, tmp_path / "ck")
    assert digest == checkpoint_hash(model)
    back = load_checkpoint(tmp_path / "ck")
    assert back.manifest() == model.manifest()
    assert checkpoint_hash(back) == digest
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(back.parameters()[k], v)
    doc = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert set(doc["model"]) >= {"C", "T", "L", "downsample_schedule", "split", "D_reflections",
                                 "precision", "grad_mode", "seed"}


def test_checkpoint_tamper_detected(tmp_path):
    save_checkpoint(IRIMModel(n_steps=1, n_layers=1, schedule=(1,)), tmp_path)
    raw = bytearray((tmp_path / "params.bin").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "params.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(tmp_path)


def test_single_precision_model():
    A, d, _ = problem()
    model = IRIMModel(seed=13, dtype="f32")
    eta, _ = irim_rollout(model, d, A)
    assert eta.dtype == np.float32
    ref = irim_rollout(IRIMModel(seed=13), d, A)[0]
    assert np.max(np.abs(eta - ref)) <= 1e-4
