import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradsuite import CASES, run_case
from tagpose.diffcore import NonFiniteError, Value, backward, nearest_rotation, no_grad, release_tape
from tagpose.diffcore.checkpoint import load_tensors, save_tensors
from tagpose.diffcore.gradcheck import gradcheck
from tagpose.diffcore.networks import Backbone3D, PixelSet, SceneImage, TagNetworks
from tagpose.diffcore.nn import MLP, Linear
from tagpose.diffcore.optim import Adam
from tagpose.errors import DimensionError, SchemaError


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_case(name):
    passed, failures = run_case(name, 3, seed=7)
    assert not failures, failures


def test_gradcheck_detects_a_wrong_gradient():
    def bad_square(x):
        out = Value(x.data ** 2, (x,), "bad")
        out._backward = lambda g: x._accum(g * 3.0 * x.data)
        return out.sum()
    assert not gradcheck(bad_square, [np.array([0.5, 1.5])]).ok


def test_gradient_accumulates_over_reuse():
    x = Value(np.array([2.0, -1.0]))
    backward((x * x + x * 3.0).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        backward(Value(np.ones(3)) * 2.0)


def test_backward_reports_non_finite_node():
    x = Value(np.array([-1.0]))
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        backward(x.log().sum())


def test_params_unreachable_get_zero_grad():
    a, b = Value(np.ones(2)), Value(np.ones(2))
    backward((a * 2.0).sum(), params=[a, b])
    np.testing.assert_array_equal(b.grad, 0.0)


def test_no_grad_builds_no_tape():
    x = Value(np.ones(3))
    with no_grad():
        y = (x * 2.0).exp().sum()
    assert not y.requires_grad
    assert y._parents == ()
    z = (x * 2.0).sum()
    assert z.requires_grad


def test_release_tape_frees_intermediates():
    x = Value(np.ones(3))
    mid = x * 2.0
    loss = (mid * mid).sum()
    backward(loss)
    release_tape(loss)
    assert mid._parents == () and loss._parents == ()
    np.testing.assert_allclose(x.grad, 8.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_nearest_rotation_is_special_orthogonal(seed):
    m = np.random.default_rng(seed).standard_normal((4, 3, 3))
    r = nearest_rotation(m).data
    np.testing.assert_allclose(r @ np.swapaxes(r, 1, 2), np.broadcast_to(np.eye(3), r.shape), atol=1e-10)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-10)


def test_nearest_rotation_fixes_rotations(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.linalg.det(q))
    np.testing.assert_allclose(nearest_rotation(q[None]).data[0], q, atol=1e-12)


def test_max_sends_gradient_to_first_argmax():
    x = Value(np.array([[1.0, 3.0, 3.0]]))
    backward(x.max(axis=1).sum())
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_adam_fits_linear_regression(rng):
    X = rng.standard_normal((64, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + 0.3
    layer = Linear(3, 1, rng)
    opt = Adam(layer.parameters(), lr=0.05)
    for _ in range(400):
        loss = ((layer(Value(X, requires_grad=False)).reshape(64) - y) ** 2).mean()
        backward(loss, params=layer.parameters())
        opt.step()
    np.testing.assert_allclose(layer.weight.data[:, 0], [1.0, -2.0, 0.5], atol=1e-2)
    np.testing.assert_allclose(layer.bias.data, [0.3], atol=1e-2)


def test_adam_without_momentum_steps_by_lr():
    p = Value(np.array([1.0, -1.0]))
    opt = Adam([p], lr=0.1, beta1=0.0)
    p.grad = np.array([4.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)


def test_zero_lr_is_a_no_op():
    p = Value(np.array([1.0]))
    opt = Adam([p], lr=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == 1.0 and opt.t == 0


def test_module_state_round_trip(tmp_path):
    a, b = TagNetworks(3, 4, seed=1), TagNetworks(3, 4, seed=2)
    path = tmp_path / "ck.bin"
    save_tensors(path, a.state_dict())
    b.load_state_dict(load_tensors(path))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_state_dict_mismatch_raises():
    a = MLP([2, 3, 1], np.random.default_rng(0))
    state = a.state_dict()
    state.pop("l0.bias")
    with pytest.raises(KeyError):
        a.load_state_dict(state)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"nope")
    with pytest.raises(SchemaError):
        load_tensors(path)
    save_tensors(path, {"a": np.ones(2)})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(SchemaError):
        load_tensors(path)


def test_parameter_order_is_deterministic():
    names = [n for n, _ in TagNetworks(3, 4, seed=0).named_parameters()]
    assert names == [n for n, _ in TagNetworks(3, 4, seed=5).named_parameters()]
    assert names[0].startswith("backbone_2d.")


def test_scene_image_validation():
    with pytest.raises(DimensionError):
        SceneImage(np.zeros((3, 4, 4)))
    img = np.zeros((4, 4, 4))
    img[2] = 2.0
    with pytest.raises(ValueError):
        SceneImage(img)


def test_backbone3d_output_has_unit_median(scenes):
    imgs = np.stack([s.image() for s in scenes])
    out = Backbone3D(np.random.default_rng(0))(imgs).data
    for o, s in zip(out, scenes):
        assert np.median(o[s.mask]) == pytest.approx(1.0)
        assert (o > 0).all()


def test_pixel_set_subsamples_and_pads():
    masks = np.zeros((2, 4, 4), dtype=bool)
    masks[0] = True
    masks[1, 0, :2] = True
    ps = PixelSet.from_masks(masks, max_points=5)
    assert ps.rows.shape == (2, 5)
    np.testing.assert_array_equal(ps.weight.sum(axis=1), [5, 2])
    np.testing.assert_array_equal(ps.count, [16, 2])
    assert PixelSet.from_masks(masks, max_points=None).rows.shape == (2, 16)
