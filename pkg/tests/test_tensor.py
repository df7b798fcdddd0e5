import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qexpand import tensor as T
from qexpand.errors import InvalidArgumentError, ShapeError
from qexpand.tensor import Adam, AdamState, Parameter, Tensor, adam_step

from oracles import layer_norm_ref, max_rel_error, mha_ref, numeric_grad, softmax_ref

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(T.softmax(np.array([1.0, 0.5]), 0.5).data, [0.73106, 0.26894], atol=1e-5)
    np.testing.assert_allclose(T.softmax(np.full(4, 5.0), 1000.0).data, [0.25] * 4, atol=1e-12)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(t):
    with pytest.raises(InvalidArgumentError):
        T.softmax(np.ones(2), t)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite,
       st.floats(0.05, 50))
def test_softmax_properties(x, shift, temp):
    y = T.softmax(x, temp).data
    assert abs(y.sum() - 1) < 1e-6 and np.all(y >= 0)
    np.testing.assert_allclose(T.softmax(x + shift, temp).data, y, atol=1e-6)
    np.testing.assert_allclose(y, softmax_ref(x / temp), atol=1e-12)


def test_softmax_mask_zeroes_entries():
    y = T.softmax(np.array([[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]]),
                  mask=np.array([[True, False, True], [False, False, False]])).data
    assert y[0, 1] == 0 and abs(y[0].sum() - 1) < 1e-12
    assert np.all(y[1] == 0)


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_allclose(T.layer_norm(np.ones(3), one, zero).data, [0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(T.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2)).data,
                               [-1, 1], atol=1e-5)
    np.testing.assert_allclose(T.layer_norm(np.array([-2.0, 0, 2]), zero, np.full(3, 7.0)).data,
                               [7, 7, 7])
    with pytest.raises(ShapeError):
        T.layer_norm(np.ones(3), np.ones(2), np.zeros(3))


@given(arrays(np.float64, st.integers(2, 10), elements=finite))
def test_layer_norm_matches_reference(x):
    d = len(x)
    gain, bias = np.linspace(0.5, 2, d), np.linspace(-1, 1, d)
    np.testing.assert_allclose(T.layer_norm(x, gain, bias).data, layer_norm_ref(x, gain, bias), atol=1e-9)


def _mha_params(rng, d):
    p = {}
    for name in ("q", "k", "v", "o"):
        p["w" + name] = rng.normal(0, 0.5, (d, d))
        p["b" + name] = rng.normal(0, 0.1, d)
    return p


def test_mha_single_row_is_value_then_output_projection():
    rng = np.random.default_rng(0)
    p = _mha_params(rng, 8)
    x = rng.normal(size=(1, 8))
    out = T.multi_head_attention(x, {k: Tensor(v) for k, v in p.items()}, 2).data
    np.testing.assert_allclose(out, (x @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"], atol=1e-12)


def test_mha_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(1)
    p = {k: Tensor(v) for k, v in _mha_params(rng, 8).items()}
    row = rng.normal(size=8)
    out = T.multi_head_attention(np.stack([row, row]), p, 4).data
    np.testing.assert_array_equal(out[0], out[1])


@pytest.mark.parametrize("seed", range(3))
def test_mha_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    p = _mha_params(rng, 16)
    x = rng.normal(size=(4, 16))
    out, w = T.multi_head_attention(x, {k: Tensor(v) for k, v in p.items()}, 4, return_weights=True)
    np.testing.assert_allclose(out.data, mha_ref(x, p, 4), atol=1e-6)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_mha_rejects_indivisible_heads():
    p = {k: Tensor(v) for k, v in _mha_params(np.random.default_rng(0), 6).items()}
    with pytest.raises(ShapeError):
        T.multi_head_attention(np.ones((2, 6)), p, 4)


def test_backward_linear_and_quadratic():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    T.sum(p).backward()
    np.testing.assert_array_equal(p.grad, np.ones(3))
    p.zero_grad()
    T.sum(T.mul(p, p)).backward()
    np.testing.assert_array_equal(p.grad, 2 * p.data)


def test_backward_accumulates_and_rejects_non_scalar():
    p = Parameter(np.array([1.0, 2.0]))
    T.sum(p).backward()
    T.sum(p).backward()
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        T.mul(p, 2.0).backward()


def test_zero_grad_gives_zeros():
    p = Parameter(np.ones((2, 3)))
    T.sum(T.mul(p, p)).backward()
    p.zero_grad()
    assert p.grad.shape == p.shape and not p.grad.any()


def _check_op(build, *shapes, seed=0):
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.normal(size=s)) for s in shapes]
    weights = None

    def loss_value():
        out = build(*params)
        nonlocal weights
        if weights is None:
            weights = rng.normal(size=out.shape)
        return T.sum(T.mul(out, weights))

    loss = loss_value()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(lambda: float(loss_value().data), [p.data for p in params])
    assert max_rel_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 1)]),
    ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)), [(3,), (3,)]),
    ("matmul", lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("linear", lambda x, w, b: T.linear(x, w, b), [(5, 3), (3, 2), (2,)]),
    ("relu", lambda a: T.relu(a), [(10,)]),
    ("exp", lambda a: T.exp(a), [(4,)]),
    ("softmax", lambda a, t: T.softmax(a, T.exp(t)), [(2, 5), (1,)]),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("norm", lambda a: T.norm(a, axis=-1), [(3, 4)]),
    ("dot", lambda a, b: T.dot(a, b), [(3, 4), (3, 4)]),
    ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("getitem", lambda a: T.getitem(a, (slice(None), [0, 0, 2])), [(2, 3)]),
    ("mean", lambda a: T.mean(a, axis=0), [(3, 2)]),
    ("bce", lambda a: T.bce_with_logits(a, np.array([0.0, 1.0, 1.0, 0.0])), [(4,)]),
])
def test_op_gradients(name, build, shapes):
    _check_op(build, *shapes)


def test_mha_gradient():
    rng = np.random.default_rng(3)
    names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    init = _mha_params(rng, 8)
    params = {k: Parameter(init[k]) for k in names}
    x = Parameter(rng.normal(size=(2, 4, 8)))
    mask = np.array([[True, True, True, False], [True, True, True, True]])
    _check = lambda: T.multi_head_attention(x, params, 2, mask)  # noqa: E731
    weights = rng.normal(size=(2, 4, 8))
    loss = T.sum(T.mul(_check(), weights))
    loss.backward()
    analytic = [x.grad] + [params[k].grad for k in names]
    numeric = numeric_grad(lambda: float(T.sum(T.mul(_check(), weights)).data),
                           [x.data] + [params[k].data for k in names])
    assert max_rel_error(analytic, numeric) < 1e-4


def test_adam_zero_gradient_keeps_parameter():
    p = Parameter(np.array([0.3, -0.7]))
    adam_step([p], [AdamState(np.zeros(2), np.zeros(2))], lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [0.3, -0.7])


@pytest.mark.parametrize("g", [0.5, -3.0])
def test_adam_first_step_is_lr_times_sign(g):
    p = Parameter(np.array([1.0]))
    p.grad = np.array([g])
    state = AdamState(np.zeros(1), np.zeros(1))
    adam_step([p], [state], lr=0.01)
    np.testing.assert_allclose(p.data, 1.0 - 0.01 * np.sign(g), atol=1e-6)
    assert state.step == 1


def test_adam_identical_parameters_stay_identical():
    a, b = Parameter(np.array([1.0, 2.0])), Parameter(np.array([1.0, 2.0]))
    opt = Adam([a, b], lr=0.05, weight_decay=1e-3)
    for i in range(3):
        a.grad = np.array([0.1 * i, -0.2])
        b.grad = a.grad.copy()
        opt.step()
    np.testing.assert_array_equal(a.data, b.data)
    assert [s.step for s in opt.states] == [3, 3]


def test_adam_empty_parameter_set_is_noop():
    Adam([], lr=0.1).step()


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with T.no_grad():
        out = T.mul(p, 2.0)
    assert not out.requires_grad


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    p = {k: Tensor(v.astype(np.float32)) for k, v in _mha_params(rng, 8).items()}
    x = rng.normal(size=(5, 8)).astype(np.float32)
    a = T.multi_head_attention(x, p, 2).data
    b = T.multi_head_attention(x, p, 2).data
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
