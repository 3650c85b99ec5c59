import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgflow.nnkernel import (
    Adam,
    MlpParams,
    Scaler,
    clip_grad_norm,
    global_norm,
    init_default,
    init_gaussian,
    load_params,
    mlp_forward,
    mlp_grad,
    n_params,
    save_params,
    scaler_fit,
    sigmoid,
)
from cgflow.nnkernel import tape


def numerical_grad(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_sigmoid_matches_logistic_and_saturates():
    a = np.linspace(-30, 30, 101)
    np.testing.assert_allclose(sigmoid(a.copy()), 1 / (1 + np.exp(-a)), rtol=1e-12, atol=1e-15)
    assert sigmoid(np.array([-800.0]))[0] == 0.0
    assert sigmoid(np.array([800.0]))[0] == 1.0


def test_param_views_share_the_flat_buffer():
    p = MlpParams.zeros((1, 4, 3, 1), batch_shape=(2,))
    assert p.flat.shape == (2, n_params((1, 4, 3, 1)))
    assert n_params((1, 4, 3, 1)) == 1 * 4 + 4 + 4 * 3 + 3 + 3 * 1 + 1
    for w in p.weights + p.biases:
        assert np.shares_memory(w, p.flat)
    p.weights[1][1, 2, 0] = 7.0
    assert p.flat[1].sum() == 7.0


def test_wrong_buffer_size_rejected():
    with pytest.raises(ValueError):
        MlpParams((1, 2, 1), np.zeros(3))


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = init_default((2, 5, 4, 3), rng)
    params.flat[...] += 0.1 * rng.standard_normal(params.flat.shape)
    x = rng.standard_normal((6, 2))
    up = rng.standard_normal((6, 3))

    def loss_p(flat):
        return float(np.sum(up * mlp_forward(MlpParams(params.dims, flat), x)))

    def loss_x(xx):
        return float(np.sum(up * mlp_forward(params, xx)))

    gp, gx = mlp_grad(params, x, up)
    assert rel_err(gp.flat, numerical_grad(loss_p, params.flat)) < 1e-6
    assert rel_err(gx, numerical_grad(loss_x, x)) < 1e-6


def test_stacked_networks_evaluate_independently():
    rng = np.random.default_rng(1)
    stacked = init_gaussian((1, 8, 1), np.array([0.5, 2.0, 1.0]), rng, batch_shape=(3,))
    x = rng.standard_normal((5, 1))
    out = mlp_forward(stacked, x[None])
    for m in range(3):
        single = MlpParams(stacked.dims, stacked.flat[m].copy())
        np.testing.assert_allclose(out[m], mlp_forward(single, x), rtol=1e-13)


def test_init_gaussian_uses_per_model_scale():
    rng = np.random.default_rng(2)
    p = init_gaussian((1, 64, 64, 1), np.array([0.1, 3.0]), rng, batch_shape=(2,))
    assert abs(p.flat[0].std() - 0.1) < 0.005
    assert abs(p.flat[1].std() - 3.0) < 0.1


def test_zero_last_layer_gives_zero_output():
    p = init_default((3, 16, 2), np.random.default_rng(3), zero_last=True)
    assert np.all(mlp_forward(p, np.ones((4, 3))) == 0.0)


def test_save_load_round_trip(tmp_path):
    p = init_default((2, 3, 1), np.random.default_rng(4))
    save_params(tmp_path / "p.npz", p)
    q = load_params(tmp_path / "p.npz")
    assert q.dims == p.dims
    np.testing.assert_array_equal(q.flat, p.flat)


def test_adam_first_step_moves_by_lr_times_sign():
    # after bias correction the first step is lr * g / (|g| + eps)
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    opt = Adam([p], lr=0.1)
    opt.step([g.copy()])
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-6)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(5)
    p = rng.standard_normal(4)
    ref = p.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = Adam([p], lr=0.01, betas=(0.8, 0.95), eps=1e-6)
    for t in range(1, 20):
        g = rng.standard_normal(4)
        opt.step([g])
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        ref -= 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-6)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adam_state_round_trip():
    p1, p2 = np.ones(3), np.ones(3)
    a, b = Adam([p1], lr=0.1), Adam([p2], lr=0.5)
    a.step([np.array([1.0, 2.0, 3.0])])
    b.load_state_dict(a.state_dict())
    p2[...] = p1
    g = np.array([0.5, -1.0, 2.0])
    a.step([g])
    b.step([g])
    np.testing.assert_array_equal(p1, p2)


def test_clip_grad_norm_examples():
    g = [np.array([3.0, 0.0]), np.array([4.0])]
    norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(g) == pytest.approx(1.0)
    np.testing.assert_allclose(g[0], [0.6, 0.0])
    small = [np.array([0.1, 0.2])]
    clip_grad_norm(small, 20.0)
    np.testing.assert_array_equal(small[0], [0.1, 0.2])
    with pytest.raises(ValueError):
        clip_grad_norm(small, 0.0)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.01, 50))
def test_clip_never_exceeds_max_norm(values, max_norm):
    g = [np.array(values)]
    clip_grad_norm(g, max_norm)
    assert global_norm(g) <= max_norm * (1 + 1e-12)


def test_scaler_fit_and_inverse():
    data = np.array([[1.0, 10.0], [3.0, 10.0], [5.0, 10.0]])
    sc = scaler_fit(data)
    np.testing.assert_allclose(sc.mean, [3.0, 10.0])
    np.testing.assert_allclose(sc.std[0], np.sqrt(8 / 3))
    assert sc.std[1] > 0
    np.testing.assert_allclose(sc.inverse(sc.apply(data)), data)
    assert Scaler.from_dict(sc.to_dict()).apply(data).tolist() == sc.apply(data).tolist()
    with pytest.raises(ValueError):
        scaler_fit(np.zeros((0, 2)))


# ---- tape: every primitive against finite differences


def _check_op(fn, *shapes, positive=False, seed=0):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    w = rng.standard_normal(np.shape(fn(*[tape.Var(x) for x in xs]).value))

    def scalar(*vals):
        return float(np.sum(w * fn(*[tape.Var(v) for v in vals]).value))

    vs = [tape.Var(x) for x in xs]
    out = fn(*vs)
    tape.backward(tape.sum_(tape.mul(tape.Var(w), out)))
    for k, v in enumerate(vs):
        def f(xk, k=k):
            args = list(xs)
            args[k] = xk
            return scalar(*args)

        assert rel_err(v.grad, numerical_grad(f, xs[k])) < 1e-6


@pytest.mark.parametrize(
    "fn,shapes,positive",
    [
        (tape.add, [(3, 4), (4,)], False),
        (tape.sub, [(3, 4), (3, 1)], False),
        (tape.mul, [(3, 4), (3, 4)], False),
        (tape.div, [(3, 4), (3, 4)], True),
        (tape.square, [(5,)], False),
        (tape.exp, [(2, 3)], False),
        (tape.log, [(2, 3)], True),
        (tape.sqrt, [(2, 3)], True),
        (tape.softplus, [(2, 3)], False),
        (tape.softmax, [(2, 5)], False),
        (tape.cumsum, [(2, 5)], False),
        (lambda a: tape.pad_last(a, 0.0, 1.0), [(2, 3)], False),
        (lambda a: tape.sum_(a, axis=0), [(4, 3)], False),
        (lambda a: tape.reshape(a, (6,)), [(2, 3)], False),
        (lambda a: tape.getitem(a, (slice(None), [0, 0, 2])), [(2, 3)], False),
        (lambda a: tape.gather(a, np.array([1, 0])), [(2, 3)], False),
        (lambda a, b: tape.concat([a, b], axis=-1), [(2, 3), (2, 2)], False),
        (lambda a, b: tape.where(np.array([True, False, True]), a, b), [(2, 3), (2, 3)], False),
    ],
)
def test_tape_primitive_gradients(fn, shapes, positive):
    _check_op(fn, *shapes, positive=positive)


def test_tape_mlp_node_and_reuse():
    rng = np.random.default_rng(7)
    params = init_default((2, 6, 1), rng)
    params.flat[...] += 0.1
    x = rng.standard_normal((4, 2))
    pv = tape.Var(params.flat)
    xv = tape.Var(x)
    out = tape.mlp(params, pv, xv)
    # the same node used twice must accumulate gradients
    loss = tape.sum_(tape.mul(out, out))
    tape.backward(loss)

    def f(flat):
        y = mlp_forward(MlpParams(params.dims, flat), x)
        return float(np.sum(y * y))

    assert rel_err(pv.grad, numerical_grad(f, params.flat)) < 1e-6
