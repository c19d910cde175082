"""Routing-by-agreement between capsule layers.

Given a prediction tensor u of shape (n, m, k) — n input capsules each
voting a k-feature vector for every one of m output capsules — FM agreement
scores each output by the sum of pairwise elementwise products of its
L2-normalized predictions:

    s_j = (1 / 2n) * ((sum_i v_ij) ⊙ (sum_i v_ij) - sum_i (v_ij ⊙ v_ij))

where v = u normalized per (i, j) slice.  The double sum over capsule pairs
collapses into the two single sums above, so the cost is linear in n instead
of quadratic; the 1/n factor keeps every activation-Jacobian entry at most 1
in magnitude regardless of fan-in.  The output capsule's pose is s_j scaled
to unit length and its activation is the plain feature sum of s_j, which for
unit votes equals the mean pairwise cosine times (n-1)/2 — bounded in
[-1/2, (n-1)/2] with the top reached exactly when all votes coincide.

:func:`fm_agreement_bruteforce` keeps the quadratic pair enumeration as an
independent oracle, and :func:`dynamic_routing` provides the iterative
coupling-coefficient baseline for comparison.  All reductions accumulate in
ascending index order (see :mod:`capsroute.tensor`); every function here is
pure — no hidden state, inputs never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import as_tensor, norm_lastaxis, reduce_sum

__all__ = [
    "RoutingResult",
    "DynamicRoutingConfig",
    "check_predictions",
    "l2_normalize_predictions",
    "fm_agreement",
    "fm_agreement_bruteforce",
    "fm_agreement_backward",
    "fm_activation_closed_form",
    "fm_activation_jacobian",
    "dynamic_routing",
    "squash",
    "POSE_EPS",
]

# Below this raw-vector norm the pose direction is numerically meaningless;
# such outputs get a zero pose and a flag instead of an exploding ratio.
POSE_EPS = 1e-12


@dataclass(frozen=True)
class RoutingResult:
    """Per-output routing products.

    ``s_hat``      (..., m, k)  raw routed vector: the pairwise-agreement sum
                                for FM, the squashed output for dynamic
                                routing.  This is what a following capsule
                                layer consumes.
    ``pose``       (..., m, k)  s_hat scaled to unit length; all-zero (and
                                flagged) where ``s_hat`` is numerically zero.
    ``activation`` (..., m)     scalar per output capsule.  For FM this is
                                the feature sum of s_hat; for dynamic routing
                                the norm of the squashed output.
    ``zero_pose``  (..., m)     True where the pose guard fired.

    When used as the upstream cotangent of :func:`fm_agreement_backward`,
    the three array fields hold the gradients with respect to the
    corresponding outputs (any of them may be None for "no gradient").
    """

    s_hat: np.ndarray
    pose: np.ndarray
    activation: np.ndarray
    zero_pose: np.ndarray | None = None


@dataclass(frozen=True)
class DynamicRoutingConfig:
    """Iteration budget for the dynamic-routing baseline."""

    iterations: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def check_predictions(u) -> np.ndarray:
    """Validate a (n, m, k) prediction tensor: rank 3, all values finite."""
    u = as_tensor(u)
    if u.ndim != 3:
        raise ValueError(f"prediction tensor must have shape (n, m, k), got rank {u.ndim}")
    if not np.isfinite(u).all():
        raise ValueError("prediction tensor contains non-finite values")
    return u


def l2_normalize_predictions(u) -> np.ndarray:
    """Scale every (input, output) prediction slice to unit length."""
    return _l2_normalize(check_predictions(u))


def _l2_normalize(u: np.ndarray) -> np.ndarray:
    """Unit-scale the last axis of (..., n, m, k); zero slices are an error."""
    norms = norm_lastaxis(u)
    if (norms == 0.0).any():
        where = tuple(int(v) for v in np.argwhere(norms == 0.0)[0])
        raise ValueError(
            f"cannot normalize an all-zero prediction vector at (input, output) index {where}"
        )
    return u / norms[..., np.newaxis]


def _l2_normalize_backward(u: np.ndarray, d_v: np.ndarray) -> np.ndarray:
    """Gradient of ``v = u / |u|`` (last axis): pull ``d_v`` back to ``u``."""
    norms = norm_lastaxis(u)[..., np.newaxis]
    v = u / norms
    along = reduce_sum(v * d_v, axis=-1)[..., np.newaxis]
    return (d_v - v * along) / norms


def _fm_core(v: np.ndarray, scaled: bool = True) -> np.ndarray:
    """Pairwise-product sum over input capsules, linear-time form.

    ``v`` is (..., n, m, k) of unit votes.  Returns (..., m, k).  With
    ``scaled`` the sum over distinct pairs carries the 1/n factor (divide by
    2n); without it only the pair double-count is removed (divide by 2).
    """
    n = v.shape[-3]
    moved = np.moveaxis(v, -3, 0)
    total = moved[0].copy()
    squares = moved[0] * moved[0]
    for i in range(1, n):
        vote = moved[i]
        total += vote
        squares += vote * vote
    return (total * total - squares) / ((2.0 * n) if scaled else 2.0)


def _fm_core_backward(v: np.ndarray, d_s: np.ndarray, scaled: bool = True) -> np.ndarray:
    """Pull a cotangent on the pairwise sum back to the unit votes."""
    n = v.shape[-3]
    total = reduce_sum(v, axis=-3)
    d_v = d_s[..., np.newaxis, :, :] * (total[..., np.newaxis, :, :] - v)
    return d_v / n if scaled else d_v


def _normalize_pose(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-scale (..., m, k) with a guard: |s| < POSE_EPS -> zero pose + flag."""
    norms = norm_lastaxis(s)
    zero = norms < POSE_EPS
    pose = s / (norms + POSE_EPS)[..., np.newaxis]
    pose = np.where(zero[..., np.newaxis], 0.0, pose)
    return pose, zero


def _normalize_pose_backward(s: np.ndarray, d_pose: np.ndarray) -> np.ndarray:
    """Gradient of the guarded pose normalization; zero where the guard fired."""
    norms = norm_lastaxis(s)
    zero = norms < POSE_EPS
    denom = norms + POSE_EPS
    along = reduce_sum(s * d_pose, axis=-1)
    scale = along / (np.maximum(norms, POSE_EPS) * denom * denom)
    d_s = d_pose / denom[..., np.newaxis] - s * scale[..., np.newaxis]
    return np.where(zero[..., np.newaxis], 0.0, d_s)


def _fm_forward(u: np.ndarray, scaled: bool = True) -> RoutingResult:
    """FM agreement on (..., n, m, k); shared by routing and capsule layers."""
    votes = _l2_normalize(u)
    s_hat = _fm_core(votes, scaled=scaled)
    pose, zero = _normalize_pose(s_hat)
    activation = reduce_sum(s_hat, axis=-1)
    return RoutingResult(s_hat=s_hat, pose=pose, activation=activation, zero_pose=zero)


def fm_agreement(u, scaled: bool = True) -> RoutingResult:
    """Route one prediction tensor (n, m, k) by pairwise-product agreement.

    Runs in O(n·m·k): normalize votes, take the two single sums over input
    capsules, combine.  ``activation[j]`` equals the ascending-order feature
    sum of ``s_hat[j]`` exactly.  n = 1 yields zero ``s_hat`` (no pairs),
    zero activation, and a flagged zero pose.

    ``scaled=False`` drops the 1/n factor (raw pair sum only halved); its
    activation gradient grows linearly with fan-in, which is the failure
    mode the default scaling exists to remove.
    """
    return _fm_forward(check_predictions(u), scaled=scaled)


def fm_agreement_bruteforce(u, scaled: bool = True) -> RoutingResult:
    """Reference FM agreement: enumerate all input-capsule pairs explicitly.

    O(n²·m·k).  ``scaled`` divides the pair sum by n to match
    :func:`fm_agreement`; ``scaled=False`` leaves the raw pair sum (the
    variant whose activation gradient grows linearly with fan-in).
    """
    u = check_predictions(u)
    votes = _l2_normalize(u)
    n = votes.shape[0]
    s_hat = np.zeros(votes.shape[1:])
    for first in range(n):
        for second in range(first + 1, n):
            s_hat += votes[first] * votes[second]
    if scaled:
        s_hat = s_hat / n
    pose, zero = _normalize_pose(s_hat)
    activation = reduce_sum(s_hat, axis=-1)
    return RoutingResult(s_hat=s_hat, pose=pose, activation=activation, zero_pose=zero)


def fm_agreement_backward(u, upstream: RoutingResult) -> np.ndarray:
    """Gradient of :func:`fm_agreement` with respect to the raw predictions.

    ``upstream`` carries cotangents for any subset of the outputs (``s_hat``,
    ``pose``, ``activation``; None fields contribute nothing).  Returns
    d_loss/d_u with u's shape.  The activation path uses the linear-time
    identity d_act/d_v[i] = (sum_i v - v[i]) / n applied through the vote
    normalization.
    """
    u = check_predictions(u)
    votes = _l2_normalize(u)
    s_hat = _fm_core(votes, scaled=True)
    d_s = np.zeros_like(s_hat)
    if upstream.activation is not None:
        d_s += np.asarray(upstream.activation)[..., np.newaxis]
    if upstream.pose is not None:
        d_s += _normalize_pose_backward(s_hat, np.asarray(upstream.pose))
    if upstream.s_hat is not None:
        d_s += np.asarray(upstream.s_hat)
    d_votes = _fm_core_backward(votes, d_s, scaled=True)
    return _l2_normalize_backward(u, d_votes)


def fm_activation_closed_form(u_normalized) -> np.ndarray:
    """Activations from unit votes without forming s_hat.

    For unit-length votes the feature sum of the pairwise-product sum
    telescopes to (|sum_i v_ij|² - n) / (2n) per output j.  Input slices must
    already be unit length (checked to 1e-8); use
    :func:`l2_normalize_predictions` first.
    """
    v = check_predictions(u_normalized)
    norms = norm_lastaxis(v)
    if np.abs(norms - 1.0).max() > 1e-8:
        raise ValueError("closed-form activation expects unit-normalized predictions")
    n = v.shape[0]
    total = reduce_sum(v, axis=0)
    sq = reduce_sum(total * total, axis=-1)
    return (sq - n) / (2.0 * n)


def fm_activation_jacobian(u_normalized, scaled: bool = True) -> np.ndarray:
    """d activation[j] / d vote[i, j, f], as an (n, m, k) array.

    Each entry is (sum_i v[i,j,f]) - v[i,j,f], divided by n when ``scaled``.
    With the 1/n scaling no entry can exceed 1 in magnitude for unit votes;
    without it the all-identical configuration reaches n - 1 exactly, which
    is the fan-in-dependent gradient growth the scaling removes.
    """
    v = check_predictions(u_normalized)
    norms = norm_lastaxis(v)
    if np.abs(norms - 1.0).max() > 1e-8:
        raise ValueError("activation Jacobian expects unit-normalized predictions")
    total = reduce_sum(v, axis=0)
    jac = total[np.newaxis] - v
    return jac / v.shape[0] if scaled else jac


def squash(s) -> np.ndarray:
    """Shrink vectors along the last axis to length |s|² / (1 + |s|²).

    v = s * r / (1 + r²) with r = |s|: short vectors shrink toward zero,
    long ones saturate just below unit length; the zero vector maps to the
    zero vector.  Norms use ascending-index accumulation.
    """
    s = as_tensor(s)
    if not np.isfinite(s).all():
        raise ValueError("squash input contains non-finite values")
    r_sq = reduce_sum(s * s, axis=-1)
    r = np.sqrt(r_sq)
    return s * (r / (1.0 + r_sq))[..., np.newaxis]


def squash_backward(s: np.ndarray, d_v: np.ndarray) -> np.ndarray:
    """Pull a cotangent through :func:`squash`.

    With phi(r) = r / (1 + r²):  d_s = phi·d_v + (phi'(r)/r)·(s·d_v)·s,
    phi'(r) = (1 - r²) / (1 + r²)².  The radial factor is finite in the
    r -> 0 limit and the s factor kills it exactly at the origin.
    """
    s = as_tensor(s)
    r_sq = reduce_sum(s * s, axis=-1)
    r = np.sqrt(r_sq)
    phi = r / (1.0 + r_sq)
    along = reduce_sum(s * d_v, axis=-1)
    radial = (1.0 - r_sq) / ((1.0 + r_sq) ** 2 * np.maximum(r, POSE_EPS))
    return phi[..., np.newaxis] * d_v + (radial * along)[..., np.newaxis] * s


def _softmax_lastaxis(logits: np.ndarray) -> np.ndarray:
    """Numerically safe softmax along the last axis (max subtracted first)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / reduce_sum(exp, axis=-1)[..., np.newaxis]


def _dynamic_forward(
    u: np.ndarray, iterations: int, return_history: bool = False
) -> RoutingResult | tuple[RoutingResult, list[np.ndarray]]:
    """Dynamic routing on (..., n, m, k)."""
    logits = np.zeros(u.shape[:-1])  # (..., n, m)
    history: list[np.ndarray] = []
    squashed = None
    n = u.shape[-3]
    for _ in range(iterations):
        coupling = _softmax_lastaxis(logits)
        if return_history:
            history.append(coupling.copy())
        products_by_input = np.moveaxis(coupling[..., np.newaxis] * u, -3, 0)
        coupling_by_input = np.moveaxis(coupling[..., np.newaxis], -3, 0)
        weighted = products_by_input[0].copy()  # (..., m, k)
        weight_total = coupling_by_input[0].copy()  # (..., m, 1)
        for i in range(1, n):
            weighted += products_by_input[i]
            weight_total += coupling_by_input[i]
        mean_vote = weighted / weight_total
        squashed = squash(mean_vote)
        agreement = reduce_sum(u * squashed[..., np.newaxis, :, :], axis=-1)
        logits = logits + agreement
    activation = norm_lastaxis(squashed)
    pose, zero = _normalize_pose(squashed)
    result = RoutingResult(s_hat=squashed, pose=pose, activation=activation, zero_pose=zero)
    return (result, history) if return_history else result


def dynamic_routing(
    u,
    config: DynamicRoutingConfig | None = None,
    return_history: bool = False,
):
    """Iterative routing baseline with softmax coupling coefficients.

    Starting from zero logits (uniform coupling 1/m), each iteration takes
    the coupling-weighted mean of the raw predictions per output capsule,
    squashes it, and reinforces the logits of inputs that agree with the
    squashed output (inner product over features).  The logit update also
    runs on the final iteration.  ``s_hat`` is the squashed output vector,
    ``activation`` its norm (< 1), ``pose`` its direction.

    With ``return_history`` the per-iteration coupling matrices (..., n, m)
    are returned alongside the result, in iteration order.
    """
    u = check_predictions(u)
    config = config or DynamicRoutingConfig()
    return _dynamic_forward(u, config.iterations, return_history)
