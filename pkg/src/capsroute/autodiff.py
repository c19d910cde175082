"""Fixed-graph reverse-mode differentiation for the capsule pipeline.

A :class:`Tape` records every primitive application as a :class:`Node`
holding the forward value and a backward closure.  :meth:`Tape.backward`
seeds the (scalar) loss with 1 and walks the node list in exact reverse
recording order, accumulating cotangents; it returns a gradient for every
registered parameter (zeros when a parameter never reached the loss) and
leaves no state behind, so repeated calls give identical results.

Primitives either wrap the analytic kernels from :mod:`capsroute.routing`
and :mod:`capsroute.capsnet` (normalize, pairwise agreement, squash, batch
norm, losses) or are the generic array ops needed to unroll dynamic routing
on the tape (broadcast multiply/divide, axis sums, softmax).  The module
also ships the central-difference checker used to validate every primitive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import capsnet, routing
from .tensor import as_tensor, matmul_lastdims, reduce_sum

__all__ = [
    "Node",
    "Tape",
    "GradCheckReport",
    "finite_difference_check",
    "fm_agreement_op",
    "dynamic_routing_op",
    "capsule_layer_op",
]


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "op")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "input",
    ):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (ascending order)."""
    while grad.ndim > len(shape):
        grad = np.asarray(reduce_sum(grad, 0))
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = np.expand_dims(np.asarray(reduce_sum(grad, axis)), axis)
    return grad.reshape(shape)


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- graph construction ---------------------------------------------

    def _record(self, value, parents, backward_fn, op) -> Node:
        node = Node(np.asarray(value), parents, backward_fn, op)
        self.nodes.append(node)
        return node

    def parameter(self, name: str, value) -> Node:
        """Register a trainable leaf; its gradient is reported by name."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._record(as_tensor(value), (), None, f"parameter:{name}")
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        """A leaf that needs no gradient (inputs, labels, fixed masks)."""
        return self._record(as_tensor(value), (), None, "constant")

    # -- generic array primitives -----------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        value = a.value + b.value
        return self._record(
            value,
            (a, b),
            lambda d: (_unbroadcast(d, a.shape), _unbroadcast(d, b.shape)),
            "add",
        )

    def mul(self, a: Node, b: Node) -> Node:
        value = a.value * b.value
        return self._record(
            value,
            (a, b),
            lambda d: (_unbroadcast(d * b.value, a.shape), _unbroadcast(d * a.value, b.shape)),
            "mul",
        )

    def div(self, a: Node, b: Node) -> Node:
        value = a.value / b.value
        return self._record(
            value,
            (a, b),
            lambda d: (
                _unbroadcast(d / b.value, a.shape),
                _unbroadcast(-d * a.value / (b.value * b.value), b.shape),
            ),
            "div",
        )

    def scale(self, a: Node, factor: float) -> Node:
        return self._record(a.value * factor, (a,), lambda d: (d * factor,), "scale")

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        old = a.shape
        return self._record(a.value.reshape(shape), (a,), lambda d: (d.reshape(old),), "reshape")

    def expand_dims(self, a: Node, axis: int) -> Node:
        ax = axis % (a.value.ndim + 1)
        return self.reshape(a, a.shape[:ax] + (1,) + a.shape[ax:])

    def sum(self, a: Node, axis: int) -> Node:
        """Ascending-order sum over one axis (axis dropped in the output)."""
        ax = axis % a.value.ndim
        value = np.asarray(reduce_sum(a.value, ax))

        def backward(d):
            return (np.broadcast_to(np.expand_dims(d, ax), a.shape).copy(),)

        return self._record(value, (a,), backward, "sum")

    def matmul(self, a: Node, b: Node) -> Node:
        """Dense 2-D product (BLAS); used for the wide feature layer."""
        value = a.value @ b.value
        return self._record(
            value,
            (a, b),
            lambda d: (d @ b.value.T, a.value.T @ d),
            "matmul",
        )

    def softmax(self, a: Node) -> Node:
        """Softmax along the last axis, max-subtracted."""
        probs = routing._softmax_lastaxis(a.value)

        def backward(d):
            inner = np.asarray(reduce_sum(d * probs, -1))[..., np.newaxis]
            return (probs * (d - inner),)

        return self._record(probs, (a,), backward, "softmax")

    # -- capsule primitives (wrap the analytic kernels) ---------------------

    def l2_normalize(self, a: Node) -> Node:
        value = routing._l2_normalize(a.value)
        return self._record(
            value, (a,), lambda d: (routing._l2_normalize_backward(a.value, d),), "l2_normalize"
        )

    def fm_pairwise(self, votes: Node, scaled: bool = True) -> Node:
        """Pairwise-product sum over input capsules (votes must be unit)."""
        value = routing._fm_core(votes.value, scaled=scaled)
        return self._record(
            value,
            (votes,),
            lambda d: (routing._fm_core_backward(votes.value, d, scaled=scaled),),
            "fm_pairwise",
        )

    def pose_normalize(self, s: Node) -> Node:
        pose, _ = routing._normalize_pose(s.value)
        return self._record(
            pose, (s,), lambda d: (routing._normalize_pose_backward(s.value, d),), "pose_normalize"
        )

    def squash(self, s: Node) -> Node:
        value = routing.squash(s.value)
        return self._record(
            value, (s,), lambda d: (routing.squash_backward(s.value, d),), "squash"
        )

    def pair_matmul(self, mats: Node, weights: Node) -> Node:
        """(batch, n, √k, √k) x (n, m, √k, √k) -> (batch, n, m, √k, √k)."""
        value = matmul_lastdims(mats.value[:, :, np.newaxis], weights.value[np.newaxis])

        def backward(d):
            d_mats = np.einsum("bijst,ijct->bisc", d, weights.value)
            d_weights = np.einsum("bisc,bijst->ijct", mats.value, d)
            return (d_mats, d_weights)

        return self._record(value, (mats, weights), backward, "pair_matmul")

    def batch_norm(self, x: Node, gamma: Node, beta: Node, bn_state, training: bool = True) -> Node:
        """Batch normalization; ``bn_state`` supplies running stats/momentum/eps.

        Training mode (the differentiated one) updates the running statistics
        in place as a side effect of recording, exactly once.
        """
        bn = capsnet.BatchNormParams(
            gamma=gamma.value,
            beta=beta.value,
            running_mean=bn_state.running_mean,
            running_var=bn_state.running_var,
            momentum=bn_state.momentum,
            eps=bn_state.eps,
        )
        value = capsnet.batch_norm_forward(x.value, bn, training)
        if not training:
            inv = 1.0 / np.sqrt(bn.running_var + bn.eps)

            def backward_inference(d):
                x_hat = (x.value - bn.running_mean) * inv
                return (
                    d * gamma.value * inv,
                    np.asarray(reduce_sum(d * x_hat, 0)),
                    np.asarray(reduce_sum(d, 0)),
                )

            return self._record(value, (x, gamma, beta), backward_inference, "batch_norm")

        def backward(d):
            return capsnet.batch_norm_backward(x.value, bn, d)

        return self._record(value, (x, gamma, beta), backward, "batch_norm")

    def margin_loss(self, activations: Node, targets: np.ndarray, params=None) -> Node:
        """Mean margin loss over a batch: (batch, m) + binary targets -> scalar."""
        params = params or capsnet.MarginLossParams()
        a = activations.value
        t = as_tensor(targets)
        present = np.maximum(0.0, params.m_plus - a)
        absent = np.maximum(0.0, a - params.m_minus)
        per_class = t * present * present + params.lam * (1.0 - t) * absent * absent
        per_sample = np.asarray(reduce_sum(per_class, -1))
        value = np.asarray(reduce_sum(per_sample, 0)) / a.shape[0]

        def backward(d):
            d_a = (-2.0 * t * present + 2.0 * params.lam * (1.0 - t) * absent) * (d / a.shape[0])
            return (d_a,)

        return self._record(value, (activations,), backward, "margin_loss")

    def softmax_cross_entropy(self, activations: Node, labels: np.ndarray) -> Node:
        """Mean softmax cross entropy: (batch, m) + integer labels -> scalar."""
        a = activations.value
        labels = np.asarray(labels, dtype=np.int64)
        shifted = a - a.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        total = np.asarray(reduce_sum(exp, -1))
        probs = exp / total[..., np.newaxis]
        rows = np.arange(a.shape[0])
        losses = np.log(total) - shifted[rows, labels]
        value = np.asarray(reduce_sum(losses, 0)) / a.shape[0]

        def backward(d):
            d_a = probs.copy()
            d_a[rows, labels] -= 1.0
            return (d_a * (d / a.shape[0]),)

        return self._record(value, (activations,), backward, "softmax_cross_entropy")

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Cotangents of a scalar loss for every registered parameter.

        Pure: consecutive calls on the same tape return identical values.
        """
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        cotangents: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            d = cotangents.get(id(node))
            if d is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(d)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None:
                    continue
                key = id(parent)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + grad
                else:
                    cotangents[key] = grad
        return {
            name: cotangents.get(id(node), np.zeros_like(node.value))
            for name, node in self.params.items()
        }


# --- routing composites ---------------------------------------------------


def fm_agreement_op(tape: Tape, u: Node) -> tuple[Node, Node, Node]:
    """FM agreement on the tape: returns (s_hat, pose, activation) nodes."""
    votes = tape.l2_normalize(u)
    s_hat = tape.fm_pairwise(votes)
    pose = tape.pose_normalize(s_hat)
    activation = tape.sum(s_hat, axis=-1)
    return s_hat, pose, activation


def dynamic_routing_op(
    tape: Tape, u: Node, iterations: int = 3
) -> tuple[Node, Node, Node]:
    """Dynamic routing unrolled on the tape (differentiable baseline).

    Mirrors :func:`capsroute.routing.dynamic_routing` operation for
    operation: softmax coupling from logits, coupling-weighted mean of the
    votes, squash, inner-product logit update (including after the last
    iteration's output is formed).
    """
    logits = tape.constant(np.zeros(u.shape[:-1]))
    squashed = None
    for _ in range(iterations):
        coupling = tape.softmax(logits)
        coupling_col = tape.expand_dims(coupling, -1)
        weighted = tape.sum(tape.mul(coupling_col, u), axis=-3)
        weight_total = tape.sum(coupling, axis=-2)
        mean_vote = tape.div(weighted, tape.expand_dims(weight_total, -1))
        squashed = tape.squash(mean_vote)
        lifted = tape.reshape(
            squashed, squashed.shape[:-2] + (1,) + squashed.shape[-2:]
        )
        agreement = tape.sum(tape.mul(u, lifted), axis=-1)
        logits = tape.add(logits, agreement)
    pose = tape.pose_normalize(squashed)
    activation = tape.sum(tape.mul(squashed, squashed), axis=-1)
    # dynamic activation is the norm of the squashed vector
    sqrt_node = tape._record(
        np.sqrt(activation.value),
        (activation,),
        lambda d: (d * 0.5 / np.sqrt(np.maximum(activation.value, 1e-30)),),
        "sqrt",
    )
    return squashed, pose, sqrt_node


def capsule_layer_op(
    tape: Tape,
    u: Node,
    matrices: Node,
    bn_gamma: Node,
    bn_beta: Node,
    bn_state,
    algo: str = "fm",
    training: bool = True,
    iterations: int = 3,
) -> tuple[Node, Node, Node]:
    """Full capsule layer on the tape: transform, batch norm, route.

    ``bn_state`` is any object with running_mean / running_var / momentum /
    eps attributes (e.g. :class:`capsroute.capsnet.BatchNormParams`).
    Returns (s_hat, pose, activation) nodes, batch axis leading.
    """
    batch, n_in, k = u.shape
    n_out = matrices.shape[1]
    root_k = matrices.shape[2]
    mats = tape.reshape(u, (batch, n_in, root_k, root_k))
    pred = tape.pair_matmul(mats, matrices)
    flat = tape.reshape(pred, (batch * n_in, n_out * k))
    normed = tape.batch_norm(flat, bn_gamma, bn_beta, bn_state, training)
    pred_caps = tape.reshape(normed, (batch, n_in, n_out, k))
    if algo == "fm":
        return fm_agreement_op(tape, pred_caps)
    if algo == "dynamic":
        return dynamic_routing_op(tape, pred_caps, iterations)
    raise ValueError(f"unknown routing algorithm {algo!r} (expected 'fm' or 'dynamic')")


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one central-difference comparison."""

    op: str
    max_rel_error: float
    step: float
    failing_index: tuple[str, int] | None = None

    @property
    def passed(self) -> bool:
        return self.failing_index is None


def finite_difference_check(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    op: str = "",
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` maps the parameter dict to a scalar; it is re-evaluated with one
    coordinate nudged ±h at a time.  The per-coordinate relative error is
    |g - ĝ| / (1 + max(|g|, |ĝ|)); the report records the worst one and the
    first coordinate at or above ``tolerance`` (as (param name, flat index)).
    """
    worst = 0.0
    failing = None
    for name, arr in params.items():
        grad = np.asarray(analytic[name])
        if grad.shape != arr.shape:
            raise ValueError(f"analytic gradient for {name!r} has shape {grad.shape}, want {arr.shape}")
        flat = arr.reshape(-1)
        grad_flat = grad.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + h
            up = f(params)
            flat[idx] = original - h
            down = f(params)
            flat[idx] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError(f"non-finite loss while probing {name}[{idx}]")
            fd = (up - down) / (2.0 * h)
            g = float(grad_flat[idx])
            err = abs(g - fd) / (1.0 + max(abs(g), abs(fd)))
            if err > worst:
                worst = err
            if failing is None and err >= tolerance:
                failing = (name, idx)
    return GradCheckReport(op=op, max_rel_error=worst, step=h, failing_index=failing)
