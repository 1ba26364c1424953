import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orsiflow import Tensor, backward, ops
from orsiflow.encoder import PyramidEncoder, StageConfig, time_embed
from orsiflow.errors import OutOfRange, ShapeMismatch
from orsiflow.gradsuite import MODULE_CASES, run_case


@pytest.fixture(scope="module")
def enc():
    return PyramidEncoder(np.random.default_rng(0))


@pytest.fixture(scope="module")
def inputs():
    rng = np.random.default_rng(1)
    return rng.standard_normal((3, 64, 64)), rng.random((1, 64, 64))


def test_stage1_shape(enc, inputs):
    img, mask = inputs
    assert enc.stage_embed(1, image=img, mask=mask, t=0.5).shape == (16, 16, 16)


def test_stage2_shape(enc):
    prev = np.random.default_rng(2).standard_normal((16, 16, 16))
    assert enc.stage_embed(2, prev=prev, t=0.5).shape == (32, 8, 8)


def test_stage_argument_contract(enc, inputs):
    img, mask = inputs
    with pytest.raises(ValueError):
        enc.stage_embed(1, image=img)
    with pytest.raises(ValueError):
        enc.stage_embed(2, image=img, mask=mask)


def test_stage1_rejects_mismatched_sizes(enc, inputs):
    with pytest.raises(ShapeMismatch):
        enc.stage_embed(1, image=inputs[0], mask=np.zeros((1, 32, 32)))


def test_mask_path_is_live(enc, inputs):
    img, mask = inputs
    a = enc.stage_embed(1, image=img, mask=np.zeros_like(mask), t=0.5).data
    b = enc.stage_embed(1, image=img, mask=mask, t=0.5).data
    assert np.abs(a - b).max() > 1e-6


def test_forward_shapes(enc, inputs):
    feats = enc(*inputs, 0.3)
    assert [f.shape for f in feats] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]


def test_forward_batched_per_example_times(enc, inputs):
    img, mask = inputs
    batch = enc(np.stack([img, img]), np.stack([mask, mask]), np.array([0.1, 0.9]))
    assert batch[0].shape == (2, 16, 16, 16)
    single = enc(img, mask, 0.1)
    assert np.allclose(batch[3].data[0], single[3].data, atol=1e-12)
    assert np.abs(batch[3].data[0] - batch[3].data[1]).max() > 1e-6


def test_forward_rejects_size_not_divisible_by_32(enc):
    with pytest.raises(ShapeMismatch):
        enc(np.zeros((3, 48, 48)), np.zeros((1, 48, 48)), 0.5)


@pytest.mark.parametrize("size", [32, 96])
def test_resolution_contract_any_multiple_of_32(enc, size):
    feats = enc(np.zeros((3, size, size)), np.zeros((1, size, size)), 0.5)
    assert [f.shape[-1] for f in feats] == [size // 4, size // 8, size // 16, size // 32]


def test_time_changes_features(enc, inputs):
    a, b = enc(*inputs, 0.1), enc(*inputs, 0.9)
    for fa, fb in zip(a, b):
        assert np.abs(fa.data - fb.data).max() > 1e-6


def test_forward_is_deterministic(enc, inputs):
    a, b = enc(*inputs, 0.4), enc(*inputs, 0.4)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_time_perturbation_is_continuous(enc, inputs):
    base = enc(*inputs, 0.5)[3].data
    deltas = [np.abs(enc(*inputs, 0.5 + d)[3].data - base).max() for d in (1e-2, 1e-4, 1e-6)]
    assert deltas[0] > deltas[1] > deltas[2]
    assert deltas[2] < 1e-3


def test_gradients_reach_image_and_mask(enc, inputs):
    img = Tensor(inputs[0], requires_grad=True)
    mask = Tensor(inputs[1], requires_grad=True)
    backward(ops.sum(enc(img, mask, 0.5)[3]))
    assert np.abs(img.grad).max() > 0 and np.abs(mask.grad).max() > 0


@pytest.mark.parametrize("name", ["encoder_stage1", "encoder_stage2"])
def test_encoder_stages_pass_finite_differences(name):
    report = run_case(name, MODULE_CASES[name])
    assert report.ok, str(report)


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(channels=(8, 8, 8))
    with pytest.raises(ValueError):
        StageConfig(strides=(2, 2, 2, 2))
    with pytest.raises(ValueError):
        StageConfig(d_t=7)


# -- time embedding ---------------------------------------------------------------

def test_time_embed_at_zero():
    e = time_embed(0.0, 8)
    assert np.array_equal(e[0::2], np.zeros(4)) and np.array_equal(e[1::2], np.ones(4))


def test_time_embed_values():
    d = 6
    e = time_embed(0.25, d)
    for i in range(d // 2):
        w = 10000.0 ** (-2 * i / d)
        assert e[2 * i] == pytest.approx(np.sin(250.0 * w), abs=1e-12)
        assert e[2 * i + 1] == pytest.approx(np.cos(250.0 * w), abs=1e-12)


def test_time_embed_errors():
    with pytest.raises(OutOfRange):
        time_embed(1.5, 8)
    with pytest.raises(OutOfRange):
        time_embed(-0.1, 8)
    with pytest.raises(ValueError):
        time_embed(0.5, 7)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_time_embed_deterministic_and_separating(t1, t2):
    assert np.array_equal(time_embed(t1, 32), time_embed(t1, 32))
    if abs(t1 - t2) > 1e-9:
        assert np.linalg.norm(time_embed(t1, 32) - time_embed(t2, 32)) > 0
