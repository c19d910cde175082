"""Self-verification suites: they pass, they fail on broken code, they report."""

import numpy as np
import pytest

jsonschema = pytest.importorskip("jsonschema")

from capsroute import routing, verify
from capsroute.verify import (
    GRADCHECK_CASES,
    REPORT_SCHEMA,
    SuiteResult,
    gradient_reports,
    jacobian_scaling_rows,
    random_instances,
    report_json,
    run_all,
)


class TestInstanceGenerator:
    def test_deterministic(self):
        a = list(random_instances(10, seed=5))
        b = list(random_instances(10, seed=5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_covers_documented_ranges(self):
        ns, ms, ks = set(), set(), set()
        for u in random_instances(300, seed=0):
            n, m, k = u.shape
            ns.add(n)
            ms.add(m)
            ks.add(k)
        assert min(ns) >= 1 and max(ns) <= 64
        assert min(ms) >= 1 and max(ms) <= 10
        assert ks == {4, 9, 16}
        # the edge sizes actually appear, including single-input instances
        assert 1 in ns and 1 in ms


class TestSuitesPass:
    def test_oracle_equivalence(self):
        res = verify.suite_oracle_equivalence(cases=150, seed=0)
        assert res.passed and res.worst_error < 1e-12

    def test_closed_form(self):
        res = verify.suite_closed_form(cases=150, seed=0)
        assert res.passed

    def test_invariance(self):
        res = verify.suite_invariance(cases=60, seed=0)
        assert res.passed and res.worst_error < 1e-12

    def test_activation_bounds(self):
        assert verify.suite_activation_bounds(cases=60, seed=0).passed

    def test_gradients(self):
        res = verify.suite_gradients(seeds=range(1))
        assert res.passed and res.worst_error < 1e-4

    def test_jacobian_scaling(self):
        res = verify.suite_jacobian_scaling()
        assert res.passed and res.worst_error <= 1.0

    def test_agreement_semantics(self):
        res = verify.suite_agreement_semantics(trials=30)
        assert res.passed

    def test_margin_goldens(self):
        res = verify.suite_margin_goldens()
        assert res.passed and res.worst_error <= 1e-12


class TestSuitesCatchBrokenCode:
    """The oracle comparison must fail loudly when the fast path is wrong."""

    def test_sign_flipped_implementation_fails(self):
        def flipped(u):
            res = routing.fm_agreement(u)
            return routing.RoutingResult(
                s_hat=-res.s_hat, pose=res.pose,
                activation=res.activation, zero_pose=res.zero_pose,
            )

        res = verify.suite_oracle_equivalence(cases=20, seed=0, fm_impl=flipped)
        assert not res.passed

    def test_missing_self_term_correction_fails(self):
        # forgetting to subtract the sum of squared votes is the classic slip
        def no_correction(u):
            v = routing.l2_normalize_predictions(u)
            n = v.shape[0]
            total = v.sum(axis=0)
            s = (total * total) / (2.0 * n)
            res = routing.fm_agreement(u)
            return routing.RoutingResult(
                s_hat=s, pose=res.pose, activation=s.sum(axis=-1), zero_pose=res.zero_pose
            )

        res = verify.suite_oracle_equivalence(cases=20, seed=1, fm_impl=no_correction)
        assert not res.passed

    def test_unscaled_passed_as_scaled_fails(self):
        res = verify.suite_oracle_equivalence(
            cases=20, seed=2, fm_impl=lambda u: routing.fm_agreement(u, scaled=False)
        )
        assert not res.passed


class TestGradientReports:
    def test_one_report_per_case(self):
        reports = gradient_reports(seed=0)
        assert [r.op for r in reports] == [name for name, _ in GRADCHECK_CASES]
        assert all(r.passed for r in reports)

    def test_step_recorded(self):
        reports = gradient_reports(seed=0, h=1e-6)
        assert all(r.step == 1e-6 for r in reports)

    def test_absurd_step_fails(self):
        # h = 1.0 destroys the central-difference estimate; the harness
        # must report that rather than paper over it
        reports = gradient_reports(seed=0, h=1.0)
        assert any(not r.passed for r in reports)


class TestJacobianRows:
    def test_rows_match_identical_vote_theory(self):
        rows = jacobian_scaling_rows()
        assert [r["n"] for r in rows] == [2, 8, 64]
        for row in rows:
            n = row["n"]
            assert row["scaled_max"] == pytest.approx((n - 1) / n, abs=1e-12)
            assert row["unscaled_max"] == pytest.approx(n - 1, abs=1e-9)
            assert row["scaled_ok"] and row["unscaled_grows"]


class TestReport:
    def test_report_validates_against_schema(self):
        results = [
            SuiteResult(name="a", passed=True, worst_error=1e-15, detail="d"),
            SuiteResult(name="b", passed=False, worst_error=None, detail=""),
        ]
        report = report_json(results, seed=7)
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["seed"] == 7
        assert report["all_passed"] is False

    def test_numpy_scalars_are_coerced(self):
        results = [SuiteResult(name="np", passed=np.True_, worst_error=np.float64(0.5))]
        report = report_json(results, seed=np.int64(3))
        jsonschema.validate(report, REPORT_SCHEMA)
        assert type(report["suites"][0]["passed"]) is bool
        assert type(report["suites"][0]["worst_error"]) is float

    def test_run_all_report_passes_schema(self):
        # trimmed run: the full-size suites are exercised by the acceptance gate
        results = [
            verify.suite_invariance(cases=10, seed=0),
            verify.suite_jacobian_scaling(),
            verify.suite_margin_goldens(),
        ]
        report = report_json(results, seed=0)
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["all_passed"]

    def test_run_all_covers_every_suite_family(self):
        names = {r.name for r in run_all(seed=0)}
        assert names == {
            "oracle-equivalence",
            "closed-form-activation",
            "invariance",
            "activation-bounds",
            "gradient-checks",
            "jacobian-scaling",
            "agreement-semantics",
            "margin-loss-goldens",
        }
