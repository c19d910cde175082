"""Tape contracts: primitive gradients, composite equivalence, purity."""

import numpy as np
import pytest

from capsroute import autodiff, capsnet, routing
from capsroute.autodiff import (
    GradCheckReport,
    Tape,
    capsule_layer_op,
    dynamic_routing_op,
    finite_difference_check,
    fm_agreement_op,
)
from capsroute.capsnet import BatchNormParams, TransformWeights
from capsroute.routing import RoutingResult


def check_tape_gradients(build, params, h=1e-5, tolerance=1e-4):
    """FD-check a tape-built scalar loss over every entry of ``params``."""
    tape, loss = build(params)
    analytic = tape.backward(loss)

    def value(p):
        return float(build(p)[1].value)

    report = finite_difference_check(
        value, params, {k: analytic[k] for k in params}, h=h, tolerance=tolerance, op="test"
    )
    assert report.passed, f"max rel err {report.max_rel_error} at {report.failing_index}"
    return report


def weighted(tape, node, w):
    """Scalar contraction sum(w * node) recorded on the tape."""
    out = tape.mul(node, tape.constant(w))
    for _ in range(node.value.ndim):
        out = tape.sum(out, -1)
    return out


class TestGenericPrimitives:
    def test_add_mul_div_with_broadcasting(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 5, 4))

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            b = tape.parameter("b", p["b"])
            c = tape.parameter("c", p["c"])
            expr = tape.div(tape.add(tape.mul(a, b), c), tape.constant(np.full((3, 5, 4), 2.0)))
            return tape, weighted(tape, expr, w)

        params = {
            "a": rng.standard_normal((3, 1, 4)),
            "b": rng.standard_normal((3, 5, 4)),
            "c": rng.standard_normal((1, 5, 1)),
        }
        check_tape_gradients(build, params)

    def test_div_denominator_gradient(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((4,))

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            b = tape.parameter("b", p["b"])
            return tape, weighted(tape, tape.div(a, b), w)

        params = {"a": rng.standard_normal(4), "b": rng.uniform(0.5, 2.0, 4)}
        check_tape_gradients(build, params)

    def test_sum_and_reshape(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((6,))

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            flat = tape.reshape(tape.sum(a, 1), (6,))
            return tape, weighted(tape, flat, w)

        check_tape_gradients(build, {"a": rng.standard_normal((2, 5, 3))})

    def test_matmul(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 3))

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            b = tape.parameter("b", p["b"])
            return tape, weighted(tape, tape.matmul(a, b), w)

        check_tape_gradients(
            build, {"a": rng.standard_normal((4, 6)), "b": rng.standard_normal((6, 3))}
        )

    def test_softmax(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((5, 4))

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            return tape, weighted(tape, tape.softmax(a), w)

        check_tape_gradients(build, {"a": rng.standard_normal((5, 4))})


class TestCapsulePrimitives:
    def test_l2_normalize(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((4, 3, 6))

        def build(p):
            tape = Tape()
            u = tape.parameter("u", p["u"])
            return tape, weighted(tape, tape.l2_normalize(u), w)

        check_tape_gradients(build, {"u": rng.standard_normal((4, 3, 6))})

    def test_fm_pairwise_scaled_and_raw(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((3, 5))
        for scaled in (True, False):

            def build(p, scaled=scaled):
                tape = Tape()
                v = tape.parameter("v", p["v"])
                return tape, weighted(tape, tape.fm_pairwise(v, scaled=scaled), w)

            check_tape_gradients(build, {"v": rng.standard_normal((6, 3, 5))})

    def test_pose_normalize(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((3, 6))

        def build(p):
            tape = Tape()
            s = tape.parameter("s", p["s"])
            return tape, weighted(tape, tape.pose_normalize(s), w)

        check_tape_gradients(build, {"s": rng.standard_normal((3, 6)) + 0.1})

    def test_squash(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((4, 5))

        def build(p):
            tape = Tape()
            s = tape.parameter("s", p["s"])
            return tape, weighted(tape, tape.squash(s), w)

        check_tape_gradients(build, {"s": rng.standard_normal((4, 5)) + 0.05})

    def test_pair_matmul(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((2, 3, 4, 2, 2))

        def build(p):
            tape = Tape()
            mats = tape.parameter("mats", p["mats"])
            weights_node = tape.parameter("weights", p["weights"])
            return tape, weighted(tape, tape.pair_matmul(mats, weights_node), w)

        check_tape_gradients(
            build,
            {
                "mats": rng.standard_normal((2, 3, 2, 2)),
                "weights": rng.standard_normal((3, 4, 2, 2)),
            },
        )

    def test_batch_norm_training(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((6, 4))

        def build(p):
            tape = Tape()
            x = tape.parameter("x", p["x"])
            gamma = tape.parameter("gamma", p["gamma"])
            beta = tape.parameter("beta", p["beta"])
            state = BatchNormParams(
                gamma=p["gamma"].copy(), beta=p["beta"].copy(),
                running_mean=np.zeros(4), running_var=np.ones(4),
            )
            return tape, weighted(tape, tape.batch_norm(x, gamma, beta, state, training=True), w)

        check_tape_gradients(
            build,
            {
                "x": rng.standard_normal((6, 4)),
                "gamma": rng.uniform(0.5, 1.5, 4),
                "beta": rng.standard_normal(4),
            },
        )

    def test_batch_norm_inference(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((3, 4))
        running_mean = rng.standard_normal(4)
        running_var = rng.uniform(0.5, 2.0, 4)

        def build(p):
            tape = Tape()
            x = tape.parameter("x", p["x"])
            gamma = tape.parameter("gamma", p["gamma"])
            beta = tape.parameter("beta", p["beta"])
            state = BatchNormParams(
                gamma=p["gamma"].copy(), beta=p["beta"].copy(),
                running_mean=running_mean.copy(), running_var=running_var.copy(),
            )
            return tape, weighted(tape, tape.batch_norm(x, gamma, beta, state, training=False), w)

        check_tape_gradients(
            build,
            {
                "x": rng.standard_normal((3, 4)),
                "gamma": rng.uniform(0.5, 1.5, 4),
                "beta": rng.standard_normal(4),
            },
        )

    def test_margin_loss_batch(self):
        rng = np.random.default_rng(12)
        targets = np.zeros((3, 5))
        targets[np.arange(3), [0, 2, 4]] = 1.0
        acts = rng.uniform(-0.5, 1.5, (3, 5))
        # keep every activation at least 1e-3 away from the hinge points
        for hinge in (0.1, 0.9):
            near = np.abs(acts - hinge) < 1e-3
            acts[near] += 3e-3

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            return tape, tape.margin_loss(a, targets)

        check_tape_gradients(build, {"a": acts})

    def test_softmax_cross_entropy_batch(self):
        rng = np.random.default_rng(13)
        labels = np.array([1, 0, 3])

        def build(p):
            tape = Tape()
            a = tape.parameter("a", p["a"])
            return tape, tape.softmax_cross_entropy(a, labels)

        check_tape_gradients(build, {"a": rng.standard_normal((3, 4))})


class TestFmComposite:
    def test_forward_values_match_routing_module_bitwise(self):
        rng = np.random.default_rng(14)
        u = rng.standard_normal((7, 4, 9))
        tape = Tape()
        s_hat, pose, act = fm_agreement_op(tape, tape.constant(u))
        res = routing.fm_agreement(u)
        assert np.array_equal(s_hat.value, res.s_hat)
        assert np.array_equal(pose.value, res.pose)
        assert np.array_equal(act.value, res.activation)

    def test_activation_loss_gradient_matches_module_backward_exactly(self):
        rng = np.random.default_rng(15)
        u = rng.standard_normal((6, 3, 8))
        tape = Tape()
        u_node = tape.parameter("u", u)
        _, _, act = fm_agreement_op(tape, u_node)
        loss = tape.sum(act, 0)
        tape_grad = tape.backward(loss)["u"]
        module_grad = routing.fm_agreement_backward(
            u, RoutingResult(s_hat=None, pose=None, activation=np.ones(3))
        )
        assert np.array_equal(tape_grad, module_grad)

    def test_full_output_gradients_match_finite_differences(self):
        rng = np.random.default_rng(16)
        w_s = rng.standard_normal((3, 5))
        w_p = rng.standard_normal((3, 5))
        w_a = rng.standard_normal(3)

        def build(p):
            tape = Tape()
            u = tape.parameter("u", p["u"])
            s_hat, pose, act = fm_agreement_op(tape, u)
            total = tape.add(
                tape.add(weighted(tape, s_hat, w_s), weighted(tape, pose, w_p)),
                weighted(tape, act, w_a),
            )
            return tape, total

        check_tape_gradients(build, {"u": rng.standard_normal((5, 3, 5))})


class TestDynamicComposite:
    def test_forward_values_match_routing_module_bitwise(self):
        rng = np.random.default_rng(17)
        u = rng.standard_normal((5, 3, 6))
        tape = Tape()
        s_hat, pose, act = dynamic_routing_op(tape, tape.constant(u), iterations=3)
        res = routing.dynamic_routing(u)
        assert np.array_equal(s_hat.value, res.s_hat)
        assert np.array_equal(pose.value, res.pose)
        assert np.array_equal(act.value, res.activation)

    def test_unrolled_gradients_match_finite_differences(self):
        rng = np.random.default_rng(18)
        w = rng.standard_normal((3, 6))

        def build(p):
            tape = Tape()
            u = tape.parameter("u", p["u"])
            s_hat, _, act = dynamic_routing_op(tape, u, iterations=3)
            return tape, tape.add(weighted(tape, s_hat, w), tape.sum(act, 0))

        check_tape_gradients(build, {"u": rng.standard_normal((4, 3, 6))})


class TestCapsuleLayerComposite:
    @staticmethod
    def _build_layer(p, algo, training=True):
        tape = Tape()
        u = tape.parameter("u", p["u"])
        matrices = tape.parameter("matrices", p["matrices"])
        gamma = tape.parameter("gamma", p["gamma"])
        beta = tape.parameter("beta", p["beta"])
        state = BatchNormParams(
            gamma=p["gamma"].copy(), beta=p["beta"].copy(),
            running_mean=np.zeros(p["gamma"].shape[0]),
            running_var=np.ones(p["gamma"].shape[0]),
        )
        _, _, act = capsule_layer_op(
            tape, u, matrices, gamma, beta, state, algo=algo, training=training
        )
        loss = tape.sum(tape.sum(act, -1), 0)
        return tape, loss

    def test_fm_layer_end_to_end_gradients(self):
        rng = np.random.default_rng(19)
        params = {
            "u": rng.standard_normal((2, 3, 4)),
            "matrices": rng.standard_normal((3, 2, 2, 2)) * 0.5,
            "gamma": rng.uniform(0.8, 1.2, 8),
            "beta": rng.standard_normal(8) * 0.1,
        }
        check_tape_gradients(lambda p: self._build_layer(p, "fm"), params)

    def test_dynamic_layer_end_to_end_gradients(self):
        rng = np.random.default_rng(20)
        params = {
            "u": rng.standard_normal((2, 3, 4)),
            "matrices": rng.standard_normal((3, 2, 2, 2)) * 0.5,
            "gamma": rng.uniform(0.8, 1.2, 8),
            "beta": rng.standard_normal(8) * 0.1,
        }
        check_tape_gradients(lambda p: self._build_layer(p, "dynamic"), params)

    def test_forward_matches_capsnet_layer_bitwise(self):
        rng = np.random.default_rng(21)
        u = rng.standard_normal((3, 4, 9))
        w = TransformWeights.initialize(4, 2, 9, rng)
        tape = Tape()
        state = BatchNormParams(
            gamma=w.bn_gamma, beta=w.bn_beta,
            running_mean=w.bn_running_mean.copy(), running_var=w.bn_running_var.copy(),
        )
        s_hat, _, act = capsule_layer_op(
            tape,
            tape.constant(u),
            tape.constant(w.matrices),
            tape.constant(w.bn_gamma),
            tape.constant(w.bn_beta),
            state,
            algo="fm",
            training=True,
        )
        res = capsnet.capsule_layer_forward(u, w, algo="fm", training=True)
        assert np.array_equal(s_hat.value, res.s_hat)
        assert np.array_equal(act.value, res.activation)


class TestTapeMechanics:
    def test_backward_is_pure(self):
        rng = np.random.default_rng(22)
        tape = Tape()
        u = tape.parameter("u", rng.standard_normal((4, 2, 5)))
        _, _, act = fm_agreement_op(tape, u)
        loss = tape.sum(act, 0)
        g1 = tape.backward(loss)
        g2 = tape.backward(loss)
        assert np.array_equal(g1["u"], g2["u"])

    def test_disconnected_parameter_gets_zero_gradient(self):
        tape = Tape()
        a = tape.parameter("a", np.ones(3))
        b = tape.parameter("b", np.ones(3))
        loss = tape.sum(tape.mul(a, a), 0)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads["b"], np.zeros(3))
        np.testing.assert_array_equal(grads["a"], 2.0 * np.ones(3))

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        a = tape.parameter("a", np.ones((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(tape.mul(a, a))

    def test_duplicate_parameter_name_rejected(self):
        tape = Tape()
        tape.parameter("w", np.ones(2))
        with pytest.raises(ValueError, match="duplicate"):
            tape.parameter("w", np.ones(2))

    def test_reused_node_accumulates_both_paths(self):
        tape = Tape()
        a = tape.parameter("a", np.array([3.0]))
        loss = tape.sum(tape.add(tape.mul(a, a), a), 0)  # a^2 + a
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads["a"], [7.0])  # 2a + 1


class TestFiniteDifferenceReport:
    def test_detects_a_wrong_gradient(self):
        x = np.array([1.0, 2.0])

        def f(p):
            return float((p["x"] ** 2).sum())

        bad = {"x": np.array([2.0, 0.0])}  # true gradient is [2, 4]
        report = finite_difference_check(f, {"x": x}, bad, op="square")
        assert not report.passed
        assert report.failing_index == ("x", 1)
        assert report.max_rel_error > 0.1

    def test_accepts_a_correct_gradient(self):
        x = np.array([1.0, -2.0, 0.5])

        def f(p):
            return float((p["x"] ** 3).sum())

        report = finite_difference_check(f, {"x": x}, {"x": 3 * x**2}, op="cube")
        assert report.passed
        assert report.max_rel_error < 1e-4
        assert report.step == 1e-5

    def test_rejects_non_finite_loss(self):
        def f(p):
            return float("nan")

        with pytest.raises(ValueError, match="non-finite"):
            finite_difference_check(f, {"x": np.ones(1)}, {"x": np.ones(1)})
