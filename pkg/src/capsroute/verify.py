"""Self-verification suites: oracles, invariances, gradients, semantics.

Each suite returns a :class:`SuiteResult` with the worst observed error, so
the same functions back the ``capsroute verify`` command, the gradient-check
command, and the test suite.  Suites are deterministic given their seed
(numpy ``default_rng``).  The JSON report produced by
:func:`report_json` validates against :data:`REPORT_SCHEMA`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff, capsnet, data, routing
from .autodiff import GradCheckReport, Tape, finite_difference_check
from .capsnet import BatchNormParams, MarginLossParams
from .tensor import reduce_sum

__all__ = [
    "SuiteResult",
    "REPORT_SCHEMA",
    "random_instances",
    "suite_oracle_equivalence",
    "suite_closed_form",
    "suite_invariance",
    "suite_activation_bounds",
    "suite_gradients",
    "suite_jacobian_scaling",
    "suite_agreement_semantics",
    "suite_margin_goldens",
    "gradient_reports",
    "jacobian_scaling_rows",
    "run_all",
    "report_json",
    "GRADCHECK_CASES",
]


@dataclass(frozen=True)
class SuiteResult:
    """Outcome of one property suite."""

    name: str
    passed: bool
    worst_error: float | None
    detail: str = ""


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["seed", "all_passed", "suites"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "all_passed": {"type": "boolean"},
        "suites": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "worst_error"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "worst_error": {"type": ["number", "null"]},
                    "detail": {"type": "string"},
                },
            },
        },
    },
}


def random_instances(count: int, seed: int) -> Iterator[np.ndarray]:
    """Random prediction tensors spanning n in [1, 64], m in [1, 10],
    k in {4, 9, 16}, with mixed per-slice scales."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(1, 65))
        m = int(rng.integers(1, 11))
        k = int(rng.choice([4, 9, 16]))
        yield rng.standard_normal((n, m, k)) * rng.uniform(0.05, 5.0)


def _scaled_max_deviation(got: np.ndarray, want: np.ndarray) -> float:
    return float((np.abs(got - want) / (1.0 + np.abs(want))).max())


def suite_oracle_equivalence(
    cases: int = 1000,
    seed: int = 0,
    tolerance: float = 1e-10,
    fm_impl: Callable[[np.ndarray], routing.RoutingResult] = routing.fm_agreement,
) -> SuiteResult:
    """Linear-time agreement vs the explicit pair enumeration, elementwise.

    ``fm_impl`` is injectable so a deliberately broken implementation can be
    shown to fail (mutation sanity check).
    """
    worst = 0.0
    for u in random_instances(cases, seed):
        fast = fm_impl(u)
        slow = routing.fm_agreement_bruteforce(u)
        worst = max(worst, _scaled_max_deviation(fast.s_hat, slow.s_hat))
        worst = max(worst, _scaled_max_deviation(fast.activation, slow.activation))
        if worst > tolerance * 1e6:  # hopeless; stop burning time
            break
    return SuiteResult(
        name="oracle-equivalence",
        passed=worst <= tolerance,
        worst_error=worst,
        detail=f"{cases} instances, tolerance {tolerance:g}",
    )


def suite_closed_form(cases: int = 1000, seed: int = 0, tolerance: float = 1e-10) -> SuiteResult:
    """Activations vs the closed form (|sum of unit votes|^2 - n) / (2n)."""
    worst = 0.0
    for u in random_instances(cases, seed):
        res = routing.fm_agreement(u)
        closed = routing.fm_activation_closed_form(routing.l2_normalize_predictions(u))
        worst = max(worst, _scaled_max_deviation(closed, res.activation))
    return SuiteResult(
        name="closed-form-activation",
        passed=worst <= tolerance,
        worst_error=worst,
        detail=f"{cases} instances, tolerance {tolerance:g}",
    )


def _result_deviation(a: routing.RoutingResult, b: routing.RoutingResult) -> float:
    return max(
        _scaled_max_deviation(b.s_hat, a.s_hat),
        _scaled_max_deviation(b.pose, a.pose),
        _scaled_max_deviation(b.activation, a.activation),
    )


def suite_invariance(cases: int = 200, seed: int = 0, tolerance: float = 1e-12) -> SuiteResult:
    """Permutation of inputs and positive rescaling of single votes are
    invisible to the routing result (poses, activations, raw vectors)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for u in random_instances(cases, seed + 1):
        n = u.shape[0]
        res = routing.fm_agreement(u)
        permuted = routing.fm_agreement(u[rng.permutation(n)])
        worst = max(worst, _result_deviation(res, permuted))
        scaled = u.copy()
        i = int(rng.integers(n))
        j = int(rng.integers(u.shape[1]))
        scaled[i, j] *= float(rng.uniform(0.01, 100.0))
        worst = max(worst, _result_deviation(res, routing.fm_agreement(scaled)))
    return SuiteResult(
        name="invariance",
        passed=worst <= tolerance,
        worst_error=worst,
        detail=f"permutation + positive-scale on {cases} instances, tolerance {tolerance:g}",
    )


def suite_activation_bounds(cases: int = 200, seed: int = 0) -> SuiteResult:
    """Unit-vote activations live in [-1/2, (n-1)/2]; the top is attained
    exactly by all-identical votes, the bottom by an antipodal pair."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for u in random_instances(cases, seed + 2):
        n = u.shape[0]
        act = routing.fm_agreement(u).activation
        worst = max(worst, float(max(-0.5 - act.min(), act.max() - (n - 1) / 2.0, 0.0)))
    # boundary: all votes identical -> activation exactly (n - 1) / 2
    for n in (2, 5, 16, 64):
        direction = rng.standard_normal(16)
        direction /= np.linalg.norm(direction)
        u = np.broadcast_to(direction, (n, 1, 16)).copy()
        act = routing.fm_agreement(u).activation[0]
        worst = max(worst, abs(act - (n - 1) / 2.0) / max(1.0, n))
    # boundary: antipodal pair -> activation exactly -1/2
    direction = rng.standard_normal(16)
    direction /= np.linalg.norm(direction)
    pair = np.stack([direction, -direction])[:, None, :]
    worst = max(worst, abs(routing.fm_agreement(pair).activation[0] + 0.5))
    return SuiteResult(
        name="activation-bounds",
        passed=worst <= 1e-12,
        worst_error=worst,
        detail=f"range + boundary equality over {cases} instances",
    )


# --- gradient suite ---------------------------------------------------------


def _case_mul(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 4, 5))

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        b = tape.parameter("b", p["b"])
        out = tape.mul(a, b)
        return tape, tape.sum(tape.sum(tape.sum(tape.mul(out, tape.constant(w)), -1), -1), 0)

    params = {"a": rng.standard_normal((3, 1, 5)), "b": rng.standard_normal((3, 4, 5))}
    return build, params


def _case_div(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 3))

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        b = tape.parameter("b", p["b"])
        out = tape.mul(tape.div(a, b), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    params = {
        "a": rng.standard_normal((4, 3)),
        "b": rng.uniform(0.5, 2.0, (4, 3)) * rng.choice([-1.0, 1.0], (4, 3)),
    }
    return build, params


def _case_reduce_sum(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 5))

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        out = tape.mul(tape.sum(a, 1), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    return build, {"a": rng.standard_normal((3, 4, 5))}


def _case_matmul(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 3))

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        b = tape.parameter("b", p["b"])
        out = tape.mul(tape.matmul(a, b), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    return build, {"a": rng.standard_normal((4, 6)), "b": rng.standard_normal((6, 3))}


def _case_softmax(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((5, 4))

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        out = tape.mul(tape.softmax(a), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    return build, {"a": rng.standard_normal((5, 4))}


def _case_l2_normalize(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 3, 5))

    def build(p):
        tape = Tape()
        u = tape.parameter("u", p["u"])
        out = tape.mul(tape.l2_normalize(u), tape.constant(w))
        return tape, tape.sum(tape.sum(tape.sum(out, -1), -1), 0)

    return build, {"u": rng.standard_normal((4, 3, 5))}


def _fm_case(scaled):
    def case(seed, h):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((3, 5))

        def build(p):
            tape = Tape()
            v = tape.parameter("v", p["v"])
            out = tape.mul(tape.fm_pairwise(v, scaled=scaled), tape.constant(w))
            return tape, tape.sum(tape.sum(out, -1), 0)

        return build, {"v": rng.standard_normal((6, 3, 5))}

    return case


def _case_pose_normalize(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 6))

    def build(p):
        tape = Tape()
        s = tape.parameter("s", p["s"])
        out = tape.mul(tape.pose_normalize(s), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    s = rng.standard_normal((3, 6))
    s += np.sign(s) * 0.05  # stay clear of the zero-norm guard
    return build, {"s": s}


def _case_squash(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 5))

    def build(p):
        tape = Tape()
        s = tape.parameter("s", p["s"])
        out = tape.mul(tape.squash(s), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    s = rng.standard_normal((4, 5))
    s += np.sign(s) * 0.05  # keep norms away from the origin kink
    return build, {"s": s}


def _case_pair_matmul(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 3, 2, 2, 2))

    def build(p):
        tape = Tape()
        mats = tape.parameter("mats", p["mats"])
        weights = tape.parameter("weights", p["weights"])
        out = tape.mul(tape.pair_matmul(mats, weights), tape.constant(w))
        loss = out
        for _ in range(5):
            loss = tape.sum(loss, -1)
        return tape, loss

    return build, {
        "mats": rng.standard_normal((2, 3, 2, 2)),
        "weights": rng.standard_normal((3, 2, 2, 2)),
    }


def _case_batch_norm(seed, h):
    rng = np.random.default_rng(seed)
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
        out = tape.mul(tape.batch_norm(x, gamma, beta, state, training=True), tape.constant(w))
        return tape, tape.sum(tape.sum(out, -1), 0)

    return build, {
        "x": rng.standard_normal((6, 4)),
        "gamma": rng.uniform(0.5, 1.5, 4),
        "beta": rng.standard_normal(4),
    }


def _case_margin_loss(seed, h):
    rng = np.random.default_rng(seed)
    targets = np.zeros((3, 5))
    targets[np.arange(3), rng.integers(0, 5, 3)] = 1.0
    acts = rng.uniform(-0.5, 1.5, (3, 5))
    for hinge in (MarginLossParams().m_minus, MarginLossParams().m_plus):
        near = np.abs(acts - hinge) < 1e-3
        acts[near] += 3e-3  # nudge off the hinge kinks, where FD is undefined

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        return tape, tape.margin_loss(a, targets)

    return build, {"a": acts}


def _case_softmax_cross_entropy(seed, h):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 3)

    def build(p):
        tape = Tape()
        a = tape.parameter("a", p["a"])
        return tape, tape.softmax_cross_entropy(a, labels)

    return build, {"a": rng.standard_normal((3, 4))}


def _case_fm_agreement(seed, h):
    """Pairwise agreement composed with BOTH normalizations (votes + pose)."""
    rng = np.random.default_rng(seed)
    w_pose = rng.standard_normal((3, 5))
    w_act = rng.standard_normal(3)

    def build(p):
        tape = Tape()
        u = tape.parameter("u", p["u"])
        _, pose, act = autodiff.fm_agreement_op(tape, u)
        pose_term = tape.mul(pose, tape.constant(w_pose))
        act_term = tape.mul(act, tape.constant(w_act))
        return tape, tape.add(
            tape.sum(tape.sum(pose_term, -1), 0), tape.sum(act_term, 0)
        )

    return build, {"u": rng.standard_normal((5, 3, 5))}


def _case_dynamic_routing(seed, h):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 6))

    def build(p):
        tape = Tape()
        u = tape.parameter("u", p["u"])
        s_hat, _, act = autodiff.dynamic_routing_op(tape, u, iterations=3)
        s_term = tape.mul(s_hat, tape.constant(w))
        return tape, tape.add(tape.sum(tape.sum(s_term, -1), 0), tape.sum(act, 0))

    return build, {"u": rng.standard_normal((4, 3, 6))}


def _case_fm_capsule_layer(seed, h):
    """Transform + batch norm + vote normalization + agreement + pose/sum."""
    rng = np.random.default_rng(seed)

    def build(p):
        tape = Tape()
        u = tape.parameter("u", p["u"])
        matrices = tape.parameter("matrices", p["matrices"])
        gamma = tape.parameter("gamma", p["gamma"])
        beta = tape.parameter("beta", p["beta"])
        state = BatchNormParams(
            gamma=p["gamma"].copy(), beta=p["beta"].copy(),
            running_mean=np.zeros(8), running_var=np.ones(8),
        )
        _, pose, act = autodiff.capsule_layer_op(
            tape, u, matrices, gamma, beta, state, algo="fm", training=True
        )
        pose_sum = tape.sum(tape.sum(tape.sum(pose, -1), -1), 0)
        act_sum = tape.sum(tape.sum(act, -1), 0)
        return tape, tape.add(pose_sum, act_sum)

    return build, {
        "u": rng.standard_normal((2, 3, 4)),
        "matrices": rng.standard_normal((3, 2, 2, 2)) * 0.5,
        "gamma": rng.uniform(0.8, 1.2, 8),
        "beta": rng.standard_normal(8) * 0.1,
    }


GRADCHECK_CASES: list[tuple[str, Callable]] = [
    ("elementwise_mul", _case_mul),
    ("div", _case_div),
    ("reduce_sum", _case_reduce_sum),
    ("matmul", _case_matmul),
    ("softmax", _case_softmax),
    ("l2_normalize", _case_l2_normalize),
    ("fm_pairwise", _fm_case(scaled=True)),
    ("fm_pairwise_unscaled", _fm_case(scaled=False)),
    ("pose_normalize", _case_pose_normalize),
    ("squash", _case_squash),
    ("pair_matmul", _case_pair_matmul),
    ("batch_norm", _case_batch_norm),
    ("margin_loss", _case_margin_loss),
    ("softmax_cross_entropy", _case_softmax_cross_entropy),
    ("fm_agreement(composite)", _case_fm_agreement),
    ("dynamic_routing(composite)", _case_dynamic_routing),
    ("fm_capsule_layer(composite)", _case_fm_capsule_layer),
]


def gradient_reports(seed: int = 0, h: float = 1e-5, tolerance: float = 1e-4) -> list[GradCheckReport]:
    """One finite-difference report per differentiable primitive/composite."""
    reports = []
    for name, case in GRADCHECK_CASES:
        build, params = case(seed, h)
        tape, loss = build(params)
        analytic = tape.backward(loss)

        def value(p, build=build):
            return float(build(p)[1].value)

        reports.append(
            finite_difference_check(
                value, params, {k: analytic[k] for k in params},
                h=h, tolerance=tolerance, op=name,
            )
        )
    return reports


def suite_gradients(seeds=range(10), h: float = 1e-5, tolerance: float = 1e-4) -> SuiteResult:
    """Every primitive's analytic backward vs central differences."""
    worst = 0.0
    worst_case = ""
    all_passed = True
    for seed in seeds:
        for report in gradient_reports(seed=seed, h=h, tolerance=tolerance):
            if report.max_rel_error > worst:
                worst = report.max_rel_error
                worst_case = f"{report.op} (seed {seed})"
            all_passed = all_passed and report.passed
    return SuiteResult(
        name="gradient-checks",
        passed=all_passed,
        worst_error=worst,
        detail=f"{len(GRADCHECK_CASES)} primitives x {len(list(seeds))} seeds, worst at {worst_case}",
    )


def jacobian_scaling_rows(sizes=(2, 8, 64)) -> list[dict]:
    """Activation-gradient magnitude with and without the 1/n scaling.

    For n identical unit votes the largest scaled entry is (n-1)/n <= 1
    while the unscaled entry reaches n-1: the fan-in-proportional growth
    the scaling removes.
    """
    rows = []
    for n in sizes:
        u = np.zeros((n, 2, 16))
        u[:, :, 0] = 1.0
        scaled = float(np.abs(routing.fm_activation_jacobian(u, scaled=True)).max())
        unscaled = float(np.abs(routing.fm_activation_jacobian(u, scaled=False)).max())
        rows.append(
            {
                "n": n,
                "scaled_max": scaled,
                "unscaled_max": unscaled,
                "scaled_ok": scaled <= 1.0,
                "unscaled_grows": unscaled >= n - 1 - 1e-6,
            }
        )
    return rows


def suite_jacobian_scaling() -> SuiteResult:
    rows = jacobian_scaling_rows()
    passed = all(r["scaled_ok"] and r["unscaled_grows"] for r in rows)
    worst = max(r["scaled_max"] for r in rows)
    return SuiteResult(
        name="jacobian-scaling",
        passed=passed,
        worst_error=worst,
        detail="max |d act / d vote| with 1/n scaling vs raw pair sum, n in {2, 8, 64}",
    )


def suite_agreement_semantics(
    trials: int = 100, n: int = 16, m: int = 5, k: int = 16, concentration: float = 10.0
) -> SuiteResult:
    """The clustered output out-activates every noise output (>= 99/100)."""
    wins = 0
    for seed in range(trials):
        inst = data.gen_agreement_instance(n, m, k, concentration, seed)
        act = routing.fm_agreement(inst.predictions).activation
        others = np.delete(act, inst.cluster_label)
        if act[inst.cluster_label] > others.max():
            wins += 1
    return SuiteResult(
        name="agreement-semantics",
        passed=wins >= trials - 1,
        worst_error=float(trials - wins),
        detail=f"{wins}/{trials} clustered outputs won (n={n}, k={k}, concentration {concentration:g})",
    )


def suite_margin_goldens() -> SuiteResult:
    """Hand-computable margin-loss values with the default thresholds."""
    params = MarginLossParams()
    goldens = [
        (([0.9], [1]), 0.0),
        (([0.0], [1]), 0.81),
        (([0.9], [0]), 0.32),
    ]
    worst = 0.0
    for (acts, targets), want in goldens:
        worst = max(worst, abs(capsnet.margin_loss(acts, targets, params) - want))
    return SuiteResult(
        name="margin-loss-goldens",
        passed=worst <= 1e-12,
        worst_error=worst,
        detail="(target, activation) goldens (1, 0.9)->0, (1, 0)->0.81, (0, 0.9)->0.32",
    )


def run_all(seed: int = 0) -> list[SuiteResult]:
    """Every property suite, in a stable order."""
    return [
        suite_oracle_equivalence(seed=seed),
        suite_closed_form(seed=seed),
        suite_invariance(seed=seed),
        suite_activation_bounds(seed=seed),
        suite_gradients(seeds=range(3), h=1e-5),
        suite_jacobian_scaling(),
        suite_agreement_semantics(),
        suite_margin_goldens(),
    ]


def report_json(results: list[SuiteResult], seed: int) -> dict:
    return {
        "seed": int(seed),
        "all_passed": bool(all(r.passed for r in results)),
        "suites": [
            {
                "name": r.name,
                "passed": bool(r.passed),
                "worst_error": None if r.worst_error is None else float(r.worst_error),
                "detail": r.detail,
            }
            for r in results
        ],
    }
