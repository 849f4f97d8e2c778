import numpy as np
import pytest

from gradcheck import layer_errors, numeric_grad, rel_err
from oracles import roi_maxpool_crop
from sint import nnet
from sint.nnet import (CheckpointError, Conv2d, DegenerateRoiError, L2Norm, Linear, MaxPool2d, ReLU, RoiPool,
                       SgdConfig, ShapeError, glorot_init, load_checkpoint, project_roi, save_checkpoint,
                       sgd_step)

def check_layer(layer, x, rois=None, tol=1e-4, seed=0):
    errors = layer_errors(layer, x, rois, seed)
    assert max(errors.values()) < tol, errors


def randomized(layer, rng):
    glorot_init([layer], rng)
    for p in layer.params():
        if p.name == "bias":
            p.value[...] = rng.normal(0, 0.1, size=p.value.shape)
    return layer


@pytest.mark.parametrize("kernel,stride", [(3, 1), (3, 2), (1, 1), (5, 2)])
def test_conv_gradients(rng, kernel, stride):
    layer = randomized(Conv2d(2, 3, kernel, stride), rng)
    check_layer(layer, rng.normal(size=(2, 7, 8)))


def test_relu_gradients(rng):
    x = rng.normal(size=(2, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5
    check_layer(ReLU(), x)


def test_maxpool_gradients(rng):
    check_layer(MaxPool2d(2, 2), rng.normal(size=(3, 6, 7)))


def test_linear_gradients(rng):
    check_layer(randomized(Linear(12, 5), rng), rng.normal(size=(4, 3, 2, 2)))


def test_roipool_gradients(rng):
    rois = np.array([[4.0, 4.0, 6.0, 5.0], [3.0, 5.5, 4.0, 7.0], [6.5, 2.5, 5.0, 5.0]])
    check_layer(RoiPool(3, 1.0), rng.normal(size=(2, 9, 9)), rois)


def test_l2norm_gradients(rng):
    check_layer(L2Norm(), rng.normal(size=(3, 7)))


def test_l2norm_output_is_unit(rng):
    out, _ = L2Norm().forward(rng.normal(size=(5, 11)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_l2norm_zero_row_stays_finite():
    out, cache = L2Norm().forward(np.zeros((1, 4)))
    assert np.all(out == 0)
    assert np.all(np.isfinite(L2Norm().backward(np.ones((1, 4)), cache)))


def test_three_layer_end_to_end_gradient(rng):
    conv, relu, fc = Conv2d(2, 4, 3, 1), ReLU(), Linear(4 * 3 * 3, 5)
    glorot_init([conv, fc], rng)
    pool, norm = RoiPool(3, 1.0), L2Norm()
    x = rng.normal(size=(2, 10, 10))
    rois = np.array([[5.0, 5.0, 7.0, 6.0], [4.0, 6.0, 5.0, 5.0]])
    probe = rng.normal(size=(2, 5))

    def run():
        h, c1 = conv.forward(x)
        h, c2 = relu.forward(h)
        h, c3 = pool.forward(h, rois)
        h, c4 = fc.forward(h)
        h, c5 = norm.forward(h)
        return h, (c1, c2, c3, c4, c5)

    out, (c1, c2, c3, c4, c5) = run()
    for layer in (conv, fc):
        for p in layer.params():
            p.zero_grad()
    g = norm.backward(probe, c5)
    g = fc.backward(g, c4)
    g = pool.backward(g, c3)
    g = relu.backward(g, c2)
    dx = conv.backward(g, c1)

    def loss():
        return float(np.sum(run()[0] * probe))

    assert rel_err(dx, numeric_grad(loss, x)) < 1e-3
    for layer in (conv, fc):
        for p in layer.params():
            assert rel_err(p.grad, numeric_grad(loss, p.value)) < 1e-3


def test_conv_same_padding_keeps_size(rng):
    out, _ = Conv2d(3, 4, 3, 1).forward(rng.normal(size=(3, 9, 11)))
    assert out.shape == (4, 9, 11)


def test_conv_matches_direct_correlation(rng):
    layer = randomized(Conv2d(2, 3, 3, 1, padding=0), rng)
    x = rng.normal(size=(2, 6, 5))
    out, _ = layer.forward(x)
    w, b = layer.weight.value, layer.bias.value
    ref = np.zeros((3, 4, 3))
    for o in range(3):
        for i in range(4):
            for j in range(3):
                ref[o, i, j] = np.sum(w[o] * x[:, i:i + 3, j:j + 3]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        Conv2d(3, 4).forward(rng.normal(size=(2, 5, 5)))
    with pytest.raises(ShapeError):
        MaxPool2d(4, 4).forward(rng.normal(size=(1, 3, 3)))
    with pytest.raises(ShapeError):
        Linear(6, 2).forward(rng.normal(size=(2, 5)))


def test_backward_before_forward():
    with pytest.raises(RuntimeError, match="before forward"):
        ReLU().backward(np.ones(3), None)


def test_roi_projection_rounds_outward():
    assert project_roi((5.0, 5.0, 3.0, 3.0), 1.0, (20, 20)) == (3, 7, 3, 7)
    assert project_roi((5.0, 5.0, 4.0, 4.0), 0.5, (20, 20)) == (1, 4, 1, 4)
    with pytest.raises(DegenerateRoiError):
        project_roi((-10.0, 5.0, 2.0, 2.0), 1.0, (20, 20))


def test_roipool_matches_crop_oracle(rng):
    x = rng.normal(size=(3, 16, 16))
    rois = np.column_stack([rng.uniform(2, 14, size=(20, 2)), rng.uniform(1, 12, size=(20, 2))])
    out, _ = RoiPool(3, 0.5).forward(x, rois)
    for k, box in enumerate(rois):
        np.testing.assert_array_equal(out[k], roi_maxpool_crop(x, box, 0.5, 3))


def test_roipool_region_smaller_than_grid(rng):
    x = rng.normal(size=(1, 8, 8))
    out, _ = RoiPool(3, 1.0).forward(x, np.array([[3.5, 3.5, 1.0, 1.0]]))
    assert np.all(out == x[0, 3, 3])


def test_sgd_step_weight_decay_and_schedule():
    p = nnet.Param("w", np.array([1.0, -2.0]))
    p.grad[...] = [0.5, 0.5]
    cfg = SgdConfig(learning_rate=0.1, weight_decay=0.01, lr_decay_factor=10, lr_decay_every=2)
    sgd_step([p], cfg, epoch=0)
    np.testing.assert_allclose(p.value, [1.0 - 0.1 * (0.5 + 0.01), -2.0 - 0.1 * (0.5 - 0.02)])
    assert np.all(p.grad == 0)
    assert cfg.lr_at(1) == pytest.approx(0.1) and cfg.lr_at(2) == pytest.approx(0.01)


def test_sgd_rejects_non_finite_gradient():
    p = nnet.Param("w", np.ones(3))
    p.grad[1] = np.nan
    with pytest.raises(FloatingPointError):
        sgd_step([p], SgdConfig(), 0)
    assert np.all(p.value == 1.0)


def test_checkpoint_round_trip(tmp_path, rng):
    layers = [randomized(Conv2d(3, 4, 3, 2), rng), ReLU(), MaxPool2d(2, 2), randomized(Linear(8, 3), rng)]
    path = tmp_path / "net.sint"
    save_checkpoint(path, layers, b"hello")
    loaded, meta = load_checkpoint(path)
    assert meta == b"hello"
    assert [l.kind for l in loaded] == [l.kind for l in layers]
    for a, b in zip(layers, loaded):
        assert a.config_ints() == b.config_ints()
        for pa, pb in zip(a.params(), b.params()):
            np.testing.assert_array_equal(pa.value, pb.value)
    save_checkpoint(tmp_path / "again.sint", loaded, meta)
    assert (tmp_path / "again.sint").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path, rng):
    path = tmp_path / "net.sint"
    save_checkpoint(path, [randomized(Linear(4, 2), rng)])
    data = path.read_bytes()
    (tmp_path / "magic.sint").write_bytes(b"XXXXXXXX" + data[8:])
    (tmp_path / "short.sint").write_bytes(data[:-20])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.sint")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.sint")
