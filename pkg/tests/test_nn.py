import numpy as np
import pytest

from eden import nn
from eden.errors import ContractError, DimensionError
from eden.rng import stream


def rnd(seed, shape):
    return stream(seed, "t").normal(size=shape)


def test_identity_linear_passthrough():
    mlp = nn.Mlp([3, 3], stream(0, "i"), ["identity"])
    mlp.weights[0].data[:] = np.eye(3)
    x = rnd(1, (4, 3))
    assert np.allclose(mlp(nn.constant(x)).data, x)


def test_zero_weights_broadcast_bias():
    mlp = nn.Mlp([3, 2], stream(0, "z"), ["identity"])
    mlp.weights[0].data[:] = 0.0
    mlp.biases[0].data[:] = [[5.0, -1.0]]
    out = mlp(nn.constant(rnd(2, (6, 3))))
    assert np.allclose(out.data, np.tile([5.0, -1.0], (6, 1)))


def test_gradient_of_quadratic_matches_closed_form():
    w = nn.parameter(rnd(3, (3, 3)))
    x = nn.constant(rnd(4, (3, 1)))

    def loss():
        wx = nn.matmul(w, x)
        return nn.scale(nn.sum_all(nn.mul(wx, wx)), 0.5)

    out = loss()
    nn.backward(out)
    wx = w.data @ x.data
    assert np.allclose(w.grad, wx @ x.data.T)
    assert nn.grad_check(loss, [w], max_coords=9) < 1e-6


def test_grad_check_sigmoid_mlp_cross_entropy():
    mlp = nn.Mlp([4, 6, 3], stream(5, "g"), ["sigmoid", "identity"])
    x = nn.constant(rnd(6, (8, 4)))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    params = [p for _, p in mlp.parameters()]
    err = nn.grad_check(lambda: nn.cross_entropy(mlp(x), labels), params)
    assert err < 1e-4


def test_grad_check_constant_function():
    p = nn.parameter(rnd(7, (2, 2)))
    err = nn.grad_check(lambda: nn.constant([[3.0]]), [p])
    assert err == 0.0


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        nn.backward(nn.constant([[1.0, 2.0]]))


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        nn.matmul(nn.constant(np.ones((2, 3))), nn.constant(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        nn.add(nn.constant(np.ones((2, 3))), nn.constant(np.ones((3, 3))))


def test_softmax_rows_sum_to_one():
    out = nn.softmax(nn.constant(rnd(8, (5, 7)) * 10))
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12
    flat = nn.softmax(nn.constant([[0.0, 0.0]]))
    assert np.allclose(flat.data, [[0.5, 0.5]])


def test_sigmoid_at_zero():
    assert nn.sigmoid(nn.constant([[0.0]])).item() == 0.5


def test_cross_entropy_nonnegative_and_onehot_limit():
    logits = nn.constant([[100.0, 0.0], [0.0, 100.0]])
    assert nn.cross_entropy(logits, np.array([0, 1])).item() < 1e-12
    rnd_logits = nn.constant(rnd(9, (6, 4)))
    assert nn.cross_entropy(rnd_logits, np.array([0, 1, 2, 3, 0, 1])).item() >= 0


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        nn.cross_entropy(nn.constant(np.ones((2, 3))), np.array([0, 3]))


def test_frobenius_zero_and_value():
    a = nn.constant(rnd(10, (3, 4)))
    zero = nn.sub(a, a)
    assert nn.frobenius(zero).item() == 0.0
    assert nn.frobenius(a).item() == pytest.approx(float(np.linalg.norm(a.data)))


def test_entropy_scalar_zero_on_onehot():
    assert nn.entropy_scalar(nn.constant([[1.0, 0.0, 0.0]])).item() == 0.0
    p = nn.constant([[0.25, 0.25, 0.5]])
    expect = -(0.25 * np.log(0.25) * 2 + 0.5 * np.log(0.5))
    assert nn.entropy_scalar(p).item() == pytest.approx(expect)


def test_rows_gather_scatter_gradient():
    a = nn.parameter(rnd(11, (5, 3)))
    idx = np.array([0, 2, 2, 4])

    def loss():
        return nn.sum_all(nn.mul(nn.rows(a, idx), nn.rows(a, idx)))

    assert nn.grad_check(loss, [a], max_coords=15) < 1e-6


def test_maximum_routes_gradient_to_winner():
    a = nn.parameter(np.array([[1.0, 5.0]]))
    b = nn.parameter(np.array([[2.0, 3.0]]))
    out = nn.sum_all(nn.maximum(a, b))
    nn.backward(out)
    assert np.allclose(a.grad, [[0.0, 1.0]])
    assert np.allclose(b.grad, [[1.0, 0.0]])


def test_adam_zero_lr_is_bit_identical():
    p = nn.parameter(rnd(12, (4, 4)))
    before = p.data.copy()
    state = nn.AdamState(lr=0.0)
    nn.adam_step(state, [p], [np.ones_like(p.data)])
    assert np.array_equal(before, p.data)


def test_adam_descends_quadratic():
    p = nn.parameter(np.array([[5.0]]))
    opt = nn.Adam([p], lr=0.1)
    for _ in range(200):
        loss = nn.scale(nn.mul(p, p), 0.5)
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
    assert abs(p.data[0, 0]) < 0.05


def test_checkpoint_roundtrip(tmp_path):
    params = {"w": nn.parameter(rnd(13, (3, 2))), "b": nn.parameter(rnd(14, (1, 2)))}
    path = tmp_path / "model.ednw"
    nn.save_checkpoint(path, params)
    blobs = nn.load_checkpoint(path)
    fresh = {"w": nn.parameter(np.zeros((3, 2))), "b": nn.parameter(np.zeros((1, 2)))}
    nn.restore_checkpoint(fresh, blobs)
    assert np.array_equal(fresh["w"].data, params["w"].data)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"EDNW"


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "model.ednw"
    nn.save_checkpoint(path, {"w": nn.parameter(np.zeros((2, 2)))})
    blobs = nn.load_checkpoint(path)
    with pytest.raises(DimensionError):
        nn.restore_checkpoint({"w": nn.parameter(np.zeros((3, 2)))}, blobs)


def test_divide_by_scalar_gradient():
    a = nn.parameter(rnd(15, (2, 3)))
    s = nn.parameter(np.array([[2.0]]))

    def loss():
        return nn.sum_all(nn.mul(nn.divide_by_scalar(a, s),
                                 nn.divide_by_scalar(a, s)))

    assert nn.grad_check(loss, [a, s], max_coords=7) < 1e-6


def test_parameter_count():
    mlp = nn.Mlp([4, 8, 2], stream(1, "pc"))
    assert mlp.parameter_count() == 4 * 8 + 8 + 8 * 2 + 2
