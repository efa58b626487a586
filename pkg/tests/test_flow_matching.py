"""Tests for the interpolation path, velocity target, composite loss and guidance"""

import numpy as np
import pytest

from app.errors import ContractError, ShapeError
from app.flow_matching import (
    FaceMask,
    LossWeights,
    cfg_combine,
    composite_loss,
    interpolate,
    target_velocity,
    temporal_difference,
)
from app.inference import timestep_grid
from app.numerics import add_lastdim, check_gradients, matmul, mean_square, silu, sub, tensor, value_and_grad
from app.training import AdamState, TrainConfig, adam_update
from tests.conftest import philox

pytestmark = pytest.mark.unit


def test_interpolate_examples():
    """Test x0=0, x1=2 at t=0.25 gives 0.5 and the endpoints return x0 and x1"""
    x0, x1 = tensor([0.0]), tensor([2.0])
    assert interpolate(x0, x1, 0.25).item() == 0.5
    assert interpolate(x0, x1, 0.0).item() == 0.0
    assert interpolate(x0, x1, 1.0).item() == 2.0


def test_interpolate_endpoints_exact(rng):
    """Test t=0 and t=1 reproduce the inputs bit-for-bit on random tensors"""
    x0, x1 = tensor(rng.standard_normal((3, 4))), tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(interpolate(x0, x1, 0.0).data, x0.data)
    assert np.array_equal(interpolate(x0, x1, 1.0).data, x1.data)


def test_interpolate_rejects_time_and_shape():
    """Test t outside [0, 1] and mismatched shapes are refused"""
    with pytest.raises(ContractError):
        interpolate(tensor([0.0]), tensor([1.0]), 1.5)
    with pytest.raises(ShapeError):
        interpolate(tensor([0.0]), tensor([1.0, 2.0]), 0.5)


def test_target_velocity_example():
    """Test x0=1, x1=4 gives u=3 regardless of t"""
    assert target_velocity(tensor([1.0]), tensor([4.0])).item() == 3.0


def test_target_velocity_is_path_derivative(rng):
    """Test u matches the finite difference of the interpolation path"""
    x0, x1 = tensor(rng.standard_normal(6)), tensor(rng.standard_normal(6))
    h = 1e-2
    numeric = (interpolate(x0, x1, 0.5 + h).data.astype(np.float64) - interpolate(x0, x1, 0.5 - h).data) / (2 * h)
    assert np.allclose(numeric, target_velocity(x0, x1).data, atol=1e-4)


def test_composite_loss_worked_example():
    """Test the two-frame example: diffusion 9.75, face 6.5, temporal 6.5, total 22.75"""
    v = tensor(np.array([[1.0, 2.0], [3.0, 5.0]]).reshape(1, 2, 1, 2))
    u = tensor(np.zeros((1, 2, 1, 2)))
    m = FaceMask(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 1, 2))
    terms = composite_loss(v, u, m, LossWeights(face=1.0, temporal=1.0))
    assert terms.diffusion == pytest.approx(9.75)
    assert terms.face == pytest.approx(6.5)
    assert terms.temporal == pytest.approx(6.5)
    assert terms.value == pytest.approx(22.75)


def test_full_mask_doubles_diffusion(rng):
    """Test an all-ones mask with λ=1, μ=0 gives exactly twice the diffusion term"""
    v, u = tensor(rng.standard_normal((2, 3, 2, 2))), tensor(rng.standard_normal((2, 3, 2, 2)))
    terms = composite_loss(v, u, FaceMask.ones(v.shape), LossWeights(face=1.0, temporal=0.0))
    assert terms.value == pytest.approx(2 * terms.diffusion, rel=1e-6)


def test_constant_offset_has_no_temporal_loss(rng):
    """Test v - u constant along frames gives a zero temporal term"""
    u = rng.standard_normal((2, 4, 2, 2))
    v = u + 0.3
    terms = composite_loss(tensor(v), tensor(u), FaceMask.ones(v.shape), LossWeights())
    assert terms.temporal <= 1e-10


def test_per_channel_offset_has_no_temporal_loss(rng):
    """Test a different constant offset per channel still gives a zero temporal term"""
    u = rng.standard_normal((3, 5, 2, 2))
    v = u + rng.uniform(-1.0, 1.0, 3)[:, None, None, None]
    terms = composite_loss(tensor(v), tensor(u), FaceMask.ones(v.shape), LossWeights())
    assert terms.temporal <= 1e-10, f"Temporal term {terms.temporal:.2e} should vanish"
    assert terms.diffusion > 0.0


def test_single_frame_skips_temporal(rng):
    """Test F=1 reports a zero temporal term"""
    v = tensor(rng.standard_normal((2, 1, 2, 2)))
    terms = composite_loss(v, tensor(np.zeros(v.shape)), FaceMask.ones(v.shape), LossWeights())
    assert terms.temporal == 0.0
    assert terms.value == pytest.approx(2 * terms.diffusion, rel=1e-6)


def test_loss_is_nonnegative_and_zero_at_target(rng):
    """Test v = u gives a zero loss"""
    u = tensor(rng.standard_normal((2, 3, 2, 2)))
    assert composite_loss(u, u, FaceMask.ones(u.shape), LossWeights()).value == 0.0


def test_loss_gradients(rng):
    """Test the composite loss differentiates through v"""
    u = tensor(rng.standard_normal((2, 3, 1, 2)))
    m = FaceMask((rng.random((2, 3, 1, 2)) > 0.5).astype(np.float32))
    report = check_gradients(
        lambda p: composite_loss(p["v"], u, m, LossWeights(face=2.0, temporal=0.5)).total,
        {"v": tensor(rng.standard_normal((2, 3, 1, 2)))},
    )
    assert report.passed, f"Error {report.max_error:.2e}"


def test_loss_rejects_mismatched_mask():
    """Test a mask of a different shape is a shape error"""
    v = tensor(np.zeros((1, 2, 1, 2)))
    with pytest.raises(ShapeError):
        composite_loss(v, v, FaceMask.ones((1, 3, 1, 2)), LossWeights())


def test_face_mask_must_be_binary():
    """Test non-binary masks are refused"""
    with pytest.raises(ContractError):
        FaceMask(np.full((1, 1, 1, 1), 0.5))


def test_face_mask_from_pixels(tiny_codec):
    """Test a pixel mask lands on the latent grid with C channels"""
    mask = np.zeros((tiny_codec.frames, tiny_codec.res, tiny_codec.res), dtype=np.float32)
    mask[:, :2, :2] = 1.0
    m = FaceMask.from_pixels(mask, p=tiny_codec.patch, r_f=tiny_codec.r_f, channels=tiny_codec.channels)
    assert m.m.shape == (tiny_codec.channels, tiny_codec.latent_frames, tiny_codec.grid, tiny_codec.grid)
    assert m.m[:, :, 0, 0].all() and not m.m[:, :, 1, 1].any()
    assert m.window(1, 2).frames == 2


def test_negative_weight_rejected():
    """Test λ < 0 is a contract error"""
    with pytest.raises(ContractError):
        LossWeights(face=-1.0)


def test_temporal_difference():
    """Test Δx along frames"""
    x = tensor(np.array([1.0, 4.0, 9.0]).reshape(1, 3, 1, 1))
    assert np.array_equal(temporal_difference(x).data.reshape(-1), [3.0, 5.0])


def test_cfg_combine_examples():
    """Test v_c=2, v_u=1 at s=5 gives 6 and s=1, s=0 return the inputs exactly"""
    assert cfg_combine(np.array([2.0]), np.array([1.0]), 5.0)[0] == 6.0
    g = philox(3)
    vc, vu = g.standard_normal(5), g.standard_normal(5)
    assert cfg_combine(vc, vu, 1.0) is vc
    assert cfg_combine(vc, vu, 0.0) is vu


def test_cfg_combine_tensors():
    """Test guidance on tensors matches the closed form"""
    out = cfg_combine(tensor([3.0]), tensor([1.0]), 2.5)
    assert out.item() == pytest.approx(6.0)


def test_cfg_combine_shape_mismatch():
    """Test mismatched arrays are a shape error"""
    with pytest.raises(ShapeError):
        cfg_combine(np.zeros(2), np.zeros(3), 2.0)


@pytest.mark.parametrize("seed", range(10))
def test_cfg_combine_is_affine_in_scale(seed):
    """Test guidance is affine in s: v(s1) + v(s2) = v(s1 + s2) + v(0)"""
    g = philox(seed)
    vc, vu = g.standard_normal((4, 3)), g.standard_normal((4, 3))
    s1, s2 = g.uniform(0.5, 8.0, 2)
    lhs = cfg_combine(vc, vu, s1) + cfg_combine(vc, vu, s2)
    rhs = cfg_combine(vc, vu, s1 + s2) + cfg_combine(vc, vu, 0.0)
    assert np.allclose(lhs, rhs, rtol=0.0, atol=1e-9), f"Guidance not affine at s1={s1:.3f}, s2={s2:.3f}"
    assert np.allclose(cfg_combine(vc, vu, 2.0), 2.0 * vc - vu, atol=1e-12)


def _velocity_mlp(params, x_t: np.ndarray, t: np.ndarray):
    inputs = tensor(np.concatenate([x_t, t[:, None]], axis=1))
    hidden = silu(add_lastdim(matmul(inputs, params["w1"]), params["b1"]))
    hidden = silu(add_lastdim(matmul(hidden, params["w2"]), params["b2"]))
    return add_lastdim(matmul(hidden, params["w3"]), params["b3"])


@pytest.mark.slow
def test_flow_matching_transports_gaussian():
    """Test a small MLP trained on the velocity target carries N(0, I) onto N((1, 1), 0.25 I)"""
    g = philox(2024)
    widths = [(3, 64), (64, 64), (64, 2)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(widths, start=1):
        params[f"w{i}"] = tensor(g.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        params[f"b{i}"] = tensor(np.zeros(fan_out))

    cfg = TrainConfig(lr=2e-3)
    state = AdamState.zeros(params)
    for _ in range(2000):
        x0 = 1.0 + 0.5 * g.standard_normal((256, 2))
        x1 = g.standard_normal((256, 2))
        t = g.random(256)
        x_t = t[:, None] * x1 + (1.0 - t[:, None]) * x0
        u = tensor(x1 - x0)
        _, grads = value_and_grad(lambda p: mean_square(sub(_velocity_mlp(p, x_t, t), u)), params)
        params, state = adam_update(params, grads, state, cfg)

    steps = 50
    x = g.standard_normal((1000, 2))
    for t in timestep_grid(steps):
        v = _velocity_mlp(params, x, np.full(len(x), t)).data.astype(np.float64)
        x = x - v / steps

    mean, cov = x.mean(axis=0), np.cov(x, rowvar=False)
    assert np.all(np.abs(mean - 1.0) <= 0.1), f"Sample mean {mean} should be near (1, 1)"
    assert np.all(np.abs(np.diag(cov) - 0.25) <= 0.1), f"Sample variances {np.diag(cov)} should be near 0.25"
    assert abs(cov[0, 1]) < 0.1, f"Off-diagonal covariance {cov[0, 1]:.3f} should be near 0"
