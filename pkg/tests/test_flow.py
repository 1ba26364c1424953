import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from orsiflow import Tensor
from orsiflow.encoder import StageConfig
from orsiflow.errors import DegenerateTrajectory, NonFiniteState, OutOfRange, ShapeMismatch
from orsiflow.flow import FlowSchedule, VelocityNet, euler_sample, interpolate_state, rf_loss, straightness
from orsiflow.gradsuite import MODULE_CASES, run_case
from orsiflow.model import ORSIFlow
from orsiflow.vae import MaskVAE, VaeConfig

latents = arrays(np.float64, (2, 3), elements=st.floats(-10, 10))


def test_interpolate_endpoints_are_exact():
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 4, 8, 8))
    assert np.array_equal(interpolate_state(z0, eps, 0.0).z, z0)
    assert np.array_equal(interpolate_state(z0, eps, 1.0).z, eps)


def test_interpolate_midpoint():
    assert np.array_equal(interpolate_state([0.0, 2.0], [2.0, 0.0], 0.5).z, [1.0, 1.0])


def test_interpolate_per_sample_times():
    z0, eps = np.zeros((2, 3)), np.ones((2, 3))
    assert np.array_equal(interpolate_state(z0, eps, np.array([0.25, 1.0])).z, [[0.25] * 3, [1.0] * 3])


def test_interpolate_errors():
    with pytest.raises(OutOfRange):
        interpolate_state([0.0], [1.0], 1.2)
    with pytest.raises(ShapeMismatch):
        interpolate_state([0.0], [1.0, 2.0], 0.5)


@settings(max_examples=50, deadline=None)
@given(latents, latents, st.floats(0, 1))
def test_interpolate_fixed_point_and_affine(a, b, t):
    assert np.allclose(interpolate_state(a, a, t).z, a, atol=1e-12, rtol=0)
    lhs = interpolate_state(2 * a, 2 * b, t).z
    assert np.allclose(lhs, 2 * interpolate_state(a, b, t).z, atol=1e-9)


# -- loss -------------------------------------------------------------------------

def test_rf_loss_perfect_and_null_predictors():
    rng = np.random.default_rng(1)
    z0, eps = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 2, 4, 4))
    t = rng.random(3)
    assert rf_loss(lambda z, tt, c: Tensor(eps - z0), z0, eps, t).item() == 0.0
    null = rf_loss(lambda z, tt, c: Tensor(np.zeros_like(z0)), z0, eps, t).item()
    assert null == pytest.approx(np.mean((eps - z0) ** 2), rel=1e-14)


def test_rf_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    z0, eps, pred = (rng.standard_normal((2, 2, 3, 3)) for _ in range(3))
    t = np.array([0.2, 0.6])
    got = rf_loss(lambda z, tt, c: Tensor(pred), z0, eps, t).item()
    target = eps - z0
    ref = sum((p - q) ** 2 for p, q in zip(pred.ravel(), target.ravel())) / pred.size
    assert got == pytest.approx(ref, rel=1e-13)


def test_rf_loss_sees_interpolated_state():
    z0, eps = np.zeros((1, 2)), np.ones((1, 2))
    seen = {}

    def field(z, t, c):
        seen["z"] = z.data.copy()
        return Tensor(np.zeros((1, 2)))
    rf_loss(field, z0, eps, np.array([0.3]))
    assert np.allclose(seen["z"], 0.3)


# -- sampling ---------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3, 10])
def test_euler_recovers_data_under_oracle_field(k):
    rng = np.random.default_rng(k)
    z0, eps = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 4, 8, 8))
    z = euler_sample(eps, lambda z, t: eps - z0, k)
    assert np.abs(z - z0).max() < 1e-12


def test_euler_visits_uniform_grid():
    times = []
    euler_sample(np.zeros(1), lambda z, t: times.append(t) or np.zeros(1), 4)
    assert times == [1.0, 0.75, 0.5, 0.25]
    assert np.array_equal(FlowSchedule(4).times, [1.0, 0.75, 0.5, 0.25, 0.0])


def test_euler_raises_on_non_finite():
    with pytest.raises(NonFiniteState):
        euler_sample(np.zeros(2), lambda z, t: np.array([np.nan, 0.0]), 2)


def test_schedule_rejects_zero_steps():
    with pytest.raises(ValueError):
        FlowSchedule(0)


def test_trajectory_under_oracle_is_straight():
    rng = np.random.default_rng(3)
    z0, eps = rng.standard_normal(6), rng.standard_normal(6)
    _, traj = euler_sample(eps, lambda z, t: eps - z0, 5, return_trajectory=True)
    assert traj.shape == (6, 6)
    assert straightness(traj) < 1e-25


# -- straightness -----------------------------------------------------------------

def test_straightness_unit_chord_displaced_midpoint():
    for d in (0.1, 0.5, 2.0):
        traj = np.array([[0.0, 0.0], [0.5, d], [1.0, 0.0]])
        assert straightness(traj) == pytest.approx(d * d, rel=1e-14)


def test_straightness_scaled_by_chord_length():
    traj = np.array([[0.0, 0.0], [1.0, 0.3], [2.0, 0.0]])
    assert straightness(traj) == pytest.approx(0.09 / 4, rel=1e-14)


def test_straightness_degenerate():
    with pytest.raises(DegenerateTrajectory):
        straightness(np.array([[1.0, 1.0], [2.0, 0.0], [1.0, 1.0]]))


# -- velocity net and full model ----------------------------------------------------

def test_velocity_net_preserves_latent_shape():
    rng = np.random.default_rng(4)
    net = VelocityNet(rng, latent_channels=4, width=8, cond_channels=(4, 8), d_t=8, blocks=1)
    cond = [Tensor(rng.standard_normal((2, 4, 16, 16))), Tensor(rng.standard_normal((2, 8, 2, 2)))]
    assert net(rng.standard_normal((2, 4, 8, 8)), np.array([0.1, 0.5]), cond).shape == (2, 4, 8, 8)
    assert net(rng.standard_normal((4, 8, 8)), 0.5, [c.data[0] for c in cond]).shape == (4, 8, 8)


def test_velocity_net_passes_finite_differences():
    assert run_case("velocity_net", MODULE_CASES["velocity_net"]).ok


def _tiny(mode="per_step"):
    rng = np.random.default_rng(0)
    vae = MaskVAE(rng, VaeConfig(factor=8, latent_channels=2, hidden=(4, 4, 4)))
    vae.freeze()
    cfg = StageConfig(channels=(4, 4, 4, 4), heads=(1, 1, 1, 1), sr_ratios=(2, 1, 1, 1), d_t=4)
    return ORSIFlow(rng, vae, cfg, velocity_width=4, velocity_blocks=1, condition_mode=mode)


@pytest.mark.parametrize("mode", ["per_step", "once"])
def test_predict_shape_range_and_determinism(mode):
    model = _tiny(mode)
    images = np.random.default_rng(1).random((2, 3, 32, 32))
    a = model.predict(images, steps=3, seed=5)
    b = model.predict(images, steps=3, seed=5)
    assert a.shape == (2, 1, 32, 32)
    assert np.all(a > 0) and np.all(a < 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, model.predict(images, steps=3, seed=6))
    assert model.predict(images[0], steps=2, seed=5).shape == (1, 32, 32)


def test_model_rejects_unknown_condition_mode():
    with pytest.raises(ValueError):
        _tiny("sometimes")


def test_velocity_net_with_silent_output_returns_the_state():
    rng = np.random.default_rng(5)
    net = VelocityNet(rng, latent_channels=2, width=4, cond_channels=(4,), d_t=4, blocks=1)
    net.out.weight.data[:] = 0.0
    z = rng.standard_normal((2, 2, 4, 4))
    assert np.array_equal(net(z, 0.3, [rng.standard_normal((2, 4, 8, 8))]).data, z)
