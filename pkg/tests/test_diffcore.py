import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodysdf import diffcore as dc
from bodysdf.diffcore import Dual, DiffError, Tape


def scalar(t):
    return float(np.asarray(t.data).reshape(()))


class TestRecord:
    def test_scalar_product(self):
        tape = Tape()
        out = dc.record("mul", tape.constant(2.0), tape.constant(3.0))
        assert scalar(out) == 6.0

    def test_logsumexp_closed_form(self):
        tape = Tape()
        out = dc.record("logsumexp", tape.constant([0.0, 0.0]))
        assert scalar(out) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_softplus_beta10_at_zero(self):
        tape = Tape()
        out = dc.record("softplus", tape.constant(0.0), beta=10.0)
        assert scalar(out) == pytest.approx(np.log(2.0) / 10.0, abs=1e-12)

    def test_unsupported_primitive(self):
        tape = Tape()
        with pytest.raises(DiffError):
            dc.record("conv2d", tape.constant(0.0))

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DiffError):
            dc.record("matmul", tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))

    def test_nonfinite_raises(self):
        tape = Tape()
        with pytest.raises(DiffError):
            dc.log(tape.constant([-1.0]))


class TestBackward:
    def test_square(self):
        tape = Tape()
        x = tape.param(3.0, "x")
        grads = tape.backward(x * x)
        assert grads["x"] == pytest.approx(6.0)

    def test_sin_at_zero(self):
        tape = Tape()
        x = tape.param(0.0, "x")
        grads = tape.backward(x.sin())
        assert grads["x"] == pytest.approx(1.0)

    def test_second_order_linear_map(self):
        # d/dtheta of (directional derivative of theta . x) is the direction
        # component, independent of where x sits
        for xv in ([0.3, -1.2, 2.0], [5.0, 5.0, 5.0]):
            tape = Tape()
            theta = tape.param([1.5, -0.7, 0.2], "theta")

            def field(xd):
                w = theta.reshape((3, 1))
                return (xd @ w).reshape((1,))

            _, grad = dc.spatial_gradient(tape, field, np.array([xv]))
            grads = tape.backward(grad[0, 1])
            np.testing.assert_allclose(grads["theta"], [0.0, 1.0, 0.0], atol=1e-15)

    def test_offpath_param_zero_grad(self):
        tape = Tape()
        x = tape.param(2.0, "x")
        tape.param(5.0, "unused")
        grads = tape.backward(x * x)
        assert grads["unused"] == 0.0

    def test_loss_not_scalar(self):
        tape = Tape()
        x = tape.param([1.0, 2.0], "x")
        with pytest.raises(DiffError):
            tape.backward(x * x)

    def test_disconnected_loss(self):
        tape = Tape()
        tape.param(1.0, "x")
        c = tape.constant(2.0)
        with pytest.raises(DiffError):
            tape.backward(c * c)

    def test_backward_linearity(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal(5)

        def grad_of(a, b):
            tape = Tape()
            x = tape.param(v, "x")
            l1 = (x * x).sum()
            l2 = (x.sin() * x).sum()
            return tape.backward(l1 * a + l2 * b)["x"]

        g = grad_of(2.0, -3.0)
        ref = 2.0 * grad_of(1.0, 0.0) - 3.0 * grad_of(0.0, 1.0)
        np.testing.assert_allclose(g, ref, atol=1e-12)


class TestSpatialGradient:
    def test_norm_field(self):
        tape = Tape()

        def field(xd):
            sq = xd * xd
            s = Dual(sq.val.sum(axis=1), sq.tan.sum(axis=2))
            root = dc.sqrt(s.val)
            return Dual(root, s.tan * (0.5 / root))

        _, grad = dc.spatial_gradient(tape, field, np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(grad.data, [[1.0, 0.0, 0.0]], atol=1e-14)

    def test_affine_field_constant_gradient(self):
        tape = Tape()
        w = tape.constant([1.0, 2.0, 3.0])

        def field(xd):
            return (xd @ w.reshape((3, 1))).reshape((-1,))

        pts = np.random.default_rng(0).standard_normal((7, 3))
        _, grad = dc.spatial_gradient(tape, field, pts)
        np.testing.assert_allclose(grad.data, np.tile([1.0, 2.0, 3.0], (7, 1)), atol=0)

    def test_mlp_gradient_matches_fd(self):
        # small random MLP treated as a field; central differences oracle
        rng = np.random.default_rng(7)
        w1 = rng.standard_normal((3, 16)) * 0.5
        b1 = rng.standard_normal(16) * 0.1
        w2 = rng.standard_normal((16, 1)) * 0.5

        def np_field(p):
            return _softplus(p @ w1 + b1) @ w2

        def _softplus(z):
            return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)

        pts = rng.standard_normal((5, 3)) * 0.5
        tape = Tape()
        tw1, tb1, tw2 = tape.constant(w1), tape.constant(b1), tape.constant(w2)

        def field(xd):
            h = xd @ tw1 + tb1
            h = h.softplus(1.0)
            return (h @ tw2).reshape((-1,))

        _, grad = dc.spatial_gradient(tape, field, pts)
        eps = 1e-4
        for i in range(3):
            e = np.zeros(3)
            e[i] = eps
            fd = (np_field(pts + e) - np_field(pts - e)).ravel() / (2 * eps)
            rel = np.abs(grad.data[:, i] - fd) / np.maximum(1e-8, np.abs(fd))
            assert rel.max() < 1e-3


class TestCheckGradient:
    def test_quadratic(self):
        def loss_and_grads(values, want):
            tape = Tape()
            x = tape.param(values["x"], "x")
            loss = (x * x).sum()
            return scalar(loss), (tape.backward(loss) if want else None)

        err = dc.check_gradient(loss_and_grads, {"x": np.array([1.0, -2.0, 3.0])})
        assert err < 1e-6

    def test_eps_range_enforced(self):
        with pytest.raises(DiffError):
            dc.check_gradient(lambda v, w: (0.0, {}), {"x": np.zeros(1)}, eps=1e-2)


PRIMS = {
    "sin": (dc.sin, (-3, 3)),
    "cos": (dc.cos, (-3, 3)),
    "exp": (dc.exp, (-2, 2)),
    "log": (dc.log, (0.1, 4)),
    "sqrt": (dc.sqrt, (0.1, 4)),
    "abs": (dc.absval, (-2, 2)),
    "tanh": (dc.tanh, (-3, 3)),
    "sigmoid": (dc.sigmoid, (-4, 4)),
    "softplus": (lambda t: dc.softplus(t, 10.0), (-1, 1)),
    "clamp": (lambda t: dc.clamp(t, -0.5, 0.5), (-2, 2)),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_match_fd(name):
    fn, (lo, hi) = PRIMS[name]
    rng = np.random.default_rng(11)
    xs = rng.uniform(lo, hi, size=100)
    # keep away from kinks where the subgradient convention differs from FD
    if name == "abs":
        xs = xs[np.abs(xs) > 1e-3]
    if name == "clamp":
        xs = xs[np.abs(np.abs(xs) - 0.5) > 1e-3]

    weights = rng.standard_normal(xs.size)

    def loss_and_grads(values, want):
        tape = Tape()
        x = tape.param(values["x"], "x")
        loss = (fn(x) * tape.constant(weights)).sum()
        return scalar(loss), (tape.backward(loss) if want else None)

    err = dc.check_gradient(loss_and_grads, {"x": xs}, eps=1e-5)
    assert err < 1e-5


def test_reduction_and_shape_op_gradients():
    rng = np.random.default_rng(5)
    a0 = rng.standard_normal((4, 5))
    b0 = rng.standard_normal((5, 3))

    def loss_and_grads(values, want):
        tape = Tape()
        a = tape.param(values["a"], "a")
        b = tape.param(values["b"], "b")
        y = a @ b
        y = dc.concat([y, y * 2.0], axis=1)
        y = y.transpose((1, 0)).reshape((-1,))
        z = dc.logsumexp(y * 0.3) + y.l2norm(axis=0) + y.mean()
        return scalar(z), (tape.backward(z) if want else None)

    err = dc.check_gradient(loss_and_grads, {"a": a0, "b": b0}, eps=1e-5)
    assert err < 1e-6


def test_pick_and_where_gradients():
    rng = np.random.default_rng(9)
    a0 = rng.standard_normal((3, 6))
    rows = np.array([0, 2, 1, 0])
    cols = np.array([5, 0, 3, 3])
    mask = rng.standard_normal(4) > 0

    def loss_and_grads(values, want):
        tape = Tape()
        a = tape.param(values["a"], "a")
        p = dc.pick(a, rows, cols)
        z = dc.where(mask, p * 3.0, p * p).sum()
        return scalar(z), (tape.backward(z) if want else None)

    err = dc.check_gradient(loss_and_grads, {"a": a0}, eps=1e-5)
    assert err < 1e-6


def test_replay_bit_identical():
    rng = np.random.default_rng(1)
    tape = Tape()
    x = tape.param(rng.standard_normal((8, 4)), "x")
    w = tape.constant(rng.standard_normal((4, 4)))
    y = ((x @ w).softplus(7.0) * x.sin()).l2norm(axis=1).sum()
    before = y.data.copy()
    n = tape.replay()
    assert n == len(tape.nodes)
    assert y.data.tobytes() == before.tobytes()


def test_matmul_broadcast_batched():
    rng = np.random.default_rng(2)
    a0 = rng.standard_normal((3, 1, 4, 5))
    b0 = rng.standard_normal((2, 5, 6))

    def loss_and_grads(values, want):
        tape = Tape()
        a = tape.param(values["a"], "a")
        b = tape.param(values["b"], "b")
        z = (a @ b).sum()
        return scalar(z), (tape.backward(z) if want else None)

    err = dc.check_gradient(loss_and_grads, {"a": a0, "b": b0}, eps=1e-5, max_checks=40)
    assert err < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_backward_linearity_property(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(4)
    a, b = rng.uniform(-2, 2, size=2)

    def grad_of(ca, cb):
        tape = Tape()
        x = tape.param(v, "x")
        l1 = (x * x * x.cos()).sum()
        l2 = dc.softplus(x, 3.0).sum()
        return tape.backward(l1 * ca + l2 * cb)["x"]

    lhs = grad_of(a, b)
    rhs = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_dual_product_chain_rules_exact():
    tape = Tape()
    x = Dual.seed(tape, np.array([[0.5, -0.3, 0.8]]))
    f = x * x  # tangent must be exactly 2x on the diagonal
    np.testing.assert_allclose(f.tan.data[0, 0, 0], 1.0, atol=0)
    g = f * x  # x^3 -> 3x^2
    assert g.tan.data[1, 0, 1] == pytest.approx(3 * 0.09, abs=1e-15)
