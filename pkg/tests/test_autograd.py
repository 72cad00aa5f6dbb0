import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import udg.autograd as ag
from udg.autograd import GradientError, ShapeError, Tensor, UnknownPrimitiveError

LN2 = math.log(2.0)


def test_trivial_forward_examples():
    assert ag.softplus(Tensor(0.0)).item() == pytest.approx(LN2, abs=1e-12)
    assert np.array_equal(ag.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    xent = ag.softmax_xent(Tensor([[0.0, 0.0]]), Tensor([[0.5, 0.5]]))
    assert xent.item() == pytest.approx(LN2, abs=1e-12)


def test_backward_examples():
    w = ag.parameter([3.0])
    assert ag.backward(ag.sum_(w * w), [w])[0].data.tolist() == [6.0]
    w = ag.parameter([-1.0, 2.0])
    assert ag.backward(ag.mean(ag.relu(w)), [w])[0].data.tolist() == [0.0, 0.5]


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ag.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="matmul"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_rule_is_trailing_rank1_only():
    m = Tensor(np.ones((4, 3)))
    assert ag.add(m, Tensor([1.0, 2.0, 3.0])).shape == (4, 3)
    assert ag.mul(m, Tensor(2.0)).shape == (4, 3)
    with pytest.raises(ShapeError):
        ag.add(m, Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ag.add(m, Tensor(np.ones((1, 3))))


def test_unknown_primitive():
    with pytest.raises(UnknownPrimitiveError):
        ag.apply_primitive("conv2d", [Tensor(1.0)])


def test_backward_errors():
    w = ag.parameter([1.0, 2.0])
    with pytest.raises(GradientError, match="scalar"):
        ag.backward(w * w, [w])
    other = ag.parameter([5.0])
    with pytest.raises(GradientError, match="not reachable"):
        ag.backward(ag.sum_(w), [w, other])
    gw, go = ag.backward(ag.sum_(w), [w, other], allow_unused=True)
    assert go.data.tolist() == [0.0]


def test_tensors_are_immutable():
    t = ag.parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_no_grad_records_nothing():
    w = ag.parameter([1.0])
    with ag.no_grad():
        out = w * w
    assert out.node is None and not out.requires_grad


def test_tape_ids_are_topological_and_replay_is_exact():
    rng = np.random.default_rng(1)
    w = ag.parameter(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(5, 3)))
    loss = ag.mean(ag.softplus(ag.matmul(x, w)))
    tape = ag.Tape.of(loss)
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is not None:
                assert t.node.id < node.id
    values = tape.replay()
    for node in tape.nodes:
        assert np.array_equal(values[node.id], node.value)


def test_second_order():
    w = ag.parameter([1.5, -0.5])
    (g,) = ag.backward(ag.sum_(w * w * w), [w], create_graph=True)
    assert g.requires_grad
    (h,) = ag.backward(ag.sum_(g), [w])
    assert np.allclose(h.data, 6 * w.data)


def test_linearity_power_of_two_exact():
    rng = np.random.default_rng(2)
    w = ag.parameter(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))
    loss = ag.mean(ag.softplus(ag.matmul(x, w)))
    (g1,) = ag.backward(loss, [w])
    (g4,) = ag.backward(ag.mul(loss, 4.0), [w])
    assert np.array_equal(g4.data, 4.0 * g1.data)


def test_quadratic_form_finite_difference():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    q = Tensor(a @ a.T)

    def f(ps):
        v = ag.reshape(ps[0], (1, 4))
        return ag.sum_(ag.matmul(ag.matmul(v, q), ag.transpose(v)))

    assert ag.finite_diff_check(f, [Tensor(rng.normal(size=4))]) < 1e-9


def test_two_layer_net_17_params():
    # 2 inputs -> 3 hidden -> 2 outputs is 2*3 + 3 + 3*2 + 2 = 17 parameters.
    rng = np.random.default_rng(4)
    params = [Tensor(rng.normal(size=s)) for s in [(2, 3), (3,), (3, 2), (2,)]]
    assert sum(p.size for p in params) == 17
    x = Tensor(rng.normal(size=(6, 2)))
    y = Tensor(np.eye(2)[rng.integers(0, 2, 6)])

    def f(ps):
        h = ag.softplus(ag.add(ag.matmul(x, ps[0]), ps[1]))
        return ag.softmax_xent(ag.add(ag.matmul(h, ps[2]), ps[3]), y)

    assert ag.finite_diff_check(f, params) < 1e-6


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ag.finite_diff_check(lambda ps: ag.sum_(ps[0]), [Tensor([1.0])], step=0.0)


# One small scalar-valued probe per primitive; each is checked against
# central differences.
def _probes():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(3, 4))
    v = rng.normal(size=4)
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    soft = rng.dirichlet(np.ones(4), size=3)
    w = rng.normal(size=(4, 2))
    return {
        "add": ([m, v], lambda p: ag.sum_(ag.mul(ag.add(p[0], p[1]), ag.add(p[0], p[1])))),
        "sub": ([m, v], lambda p: ag.sum_(ag.mul(ag.sub(p[0], p[1]), p[0]))),
        "mul": ([m, v], lambda p: ag.sum_(ag.mul(p[0], p[1]))),
        "div": ([m, pos], lambda p: ag.sum_(ag.div(p[0], p[1]))),
        "neg": ([m], lambda p: ag.sum_(ag.mul(ag.neg(p[0]), p[0]))),
        "matmul": ([m, w], lambda p: ag.sum_(ag.softplus(ag.matmul(p[0], p[1])))),
        "transpose": ([m], lambda p: ag.sum_(ag.matmul(p[0], ag.transpose(p[0])))),
        "relu": ([m], lambda p: ag.sum_(ag.mul(ag.relu(p[0]), p[0]))),
        "softplus": ([m], lambda p: ag.sum_(ag.softplus(p[0]))),
        "sigmoid": ([m], lambda p: ag.sum_(ag.sigmoid(p[0]))),
        "exp": ([m], lambda p: ag.sum_(ag.exp(p[0]))),
        "log": ([pos], lambda p: ag.sum_(ag.log(p[0]))),
        "sqrt": ([pos], lambda p: ag.sum_(ag.sqrt(p[0]))),
        "sum": ([m], lambda p: ag.mul(ag.sum_(p[0], 0), ag.sum_(p[0], 0)).sum()),
        "mean": ([m], lambda p: ag.mul(ag.mean(p[0], 0), ag.mean(p[0])).sum()),
        "broadcast_to": ([v], lambda p: ag.sum_(ag.mul(ag.broadcast_to(p[0], (3, 4)), Tensor(m)))),
        "rowsum": ([m], lambda p: ag.sum_(ag.mul(ag.rowsum(p[0]), ag.rowsum(p[0])))),
        "scale_rows": ([m, v[:3]], lambda p: ag.sum_(ag.softplus(ag.scale_rows(p[0], p[1])))),
        "softmax": ([m], lambda p: ag.sum_(ag.mul(ag.softmax(p[0]), Tensor(pos)))),
        "log_softmax": ([m], lambda p: ag.sum_(ag.mul(ag.log_softmax(p[0]), Tensor(soft)))),
        "softmax_xent": ([m, soft], lambda p: ag.softmax_xent(p[0], p[1])),
        "concat": ([v, v[:2]], lambda p: ag.sum_(ag.softplus(ag.concat([p[0], p[1]])))),
        "reshape": ([m], lambda p: ag.sum_(ag.softplus(ag.reshape(p[0], (4, 3))))),
        "getitem": ([m], lambda p: ag.sum_(ag.softplus(ag.getitem(p[0], (slice(0, 2), slice(1, 3)))))),
        "scatter": ([v], lambda p: ag.sum_(ag.softplus(ag.scatter(p[0], 1, (3, 4))))),
    }


def test_every_primitive_has_a_probe():
    assert set(_probes()) == set(ag.primitive_names())


@pytest.mark.parametrize("name", sorted(_probes()))
def test_primitive_gradient(name):
    arrays, f = _probes()[name]
    assert ag.finite_diff_check(f, [Tensor(a) for a in arrays]) < 1e-6


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softplus_positive_and_finite(xs):
    out = ag.softplus(Tensor(xs)).data
    assert np.all(out > 0) and np.all(np.isfinite(out))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.integers(0, 5))
def test_xent_grad_rows_sum_to_zero(logits, k):
    z = ag.parameter([logits])
    t = np.zeros((1, len(logits)))
    t[0, k % len(logits)] = 1.0
    (g,) = ag.backward(ag.softmax_xent(z, Tensor(t)), [z])
    assert abs(g.data.sum()) < 1e-12
