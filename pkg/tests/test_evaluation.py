from __future__ import annotations

import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehrseek.core import (
    Observation,
    ObsStatus,
    TaskGroup,
    TaskInstance,
    Termination,
    ToolCall,
    Trajectory,
    TrajectoryStep,
)
from ehrseek.evaluation import (
    CIEstimate,
    EvalRecord,
    aggregate,
    ci_estimate,
    delta_report,
    render_delta,
    render_report,
    render_usage,
    report_from_dict,
    report_to_dict,
    score_sample,
    score_trajectory,
    tool_usage,
    usage_from_counts,
)
from ehrseek.core import DomainError

from t975_reference import T975


def oracle_f1(predicted, gold) -> float:
    """Independent brute-force set-overlap oracle."""
    p = set(predicted)
    g = set(gold)
    inter = 0
    for x in p:
        if x in g:
            inter += 1
    if not p:
        return 0.0
    return 200.0 * inter / (len(p) + len(g))


class TestScoreSample:
    def test_identity(self):
        assert score_sample(["a"], ["a"]) == 100.0

    def test_empty_prediction(self):
        assert score_sample([], ["a"]) == 0.0

    def test_half_overlap(self):
        # oracle: 200 * 1 / (2 + 2) = 50
        assert score_sample(["a", "b"], ["b", "c"]) == 50.0

    def test_empty_gold(self):
        with pytest.raises(DomainError) as err:
            score_sample(["a"], [])
        assert err.value.code == "empty_gold"

    def test_normalization_applied(self):
        assert score_sample(["Piperacillin "], ["piperacillin."]) == 100.0

    def test_single_label_reduction(self):
        assert score_sample(["a"], ["g"]) == 0.0
        assert score_sample(["g"], ["g"]) == 100.0

    @given(
        st.lists(st.sampled_from([f"l{i}" for i in range(8)]), max_size=6),
        st.lists(st.sampled_from([f"l{i}" for i in range(8)]), min_size=1, max_size=6),
    )
    def test_matches_oracle(self, predicted, gold):
        assert score_sample(predicted, gold) == pytest.approx(
            oracle_f1(set(predicted), set(gold)), abs=1e-12
        )

    @given(
        st.lists(st.sampled_from([f"l{i}" for i in range(8)]), min_size=1, max_size=6),
        st.lists(st.sampled_from([f"l{i}" for i in range(8)]), min_size=1, max_size=6),
    )
    def test_order_and_duplication_invariant(self, predicted, gold):
        assert score_sample(predicted, gold) == score_sample(
            list(reversed(predicted)) + predicted, gold + gold
        )

    @given(st.sets(st.sampled_from([f"l{i}" for i in range(8)]), min_size=1, max_size=6))
    def test_hundred_iff_equal_sets(self, gold):
        gold = sorted(gold)
        assert score_sample(gold, gold) == 100.0
        assert score_sample(gold + ["extra"], gold) < 100.0

    def test_adding_correct_label_never_decreases(self):
        rng = random.Random(0)
        labels = [f"l{i}" for i in range(10)]
        for _ in range(200):
            gold = rng.sample(labels, rng.randint(1, 5))
            predicted = rng.sample(labels, rng.randint(0, 4))
            missing = [g for g in gold if g not in predicted]
            if not missing:
                continue
            before = score_sample(predicted, gold)
            after = score_sample(predicted + [missing[0]], gold)
            assert after >= before


class TestCI:
    def test_worked_example(self):
        est = ci_estimate([80.0, 60.0, 100.0, 40.0])
        assert est.mean == pytest.approx(70.0)
        assert round(est.radius, 2) == 41.09

    def test_zero_variance(self):
        est = ci_estimate([100.0] * 10)
        assert est.radius == 0.0

    def test_n1_radius_absent(self):
        est = ci_estimate([50.0])
        assert est.radius is None and est.n == 1

    def test_matches_pinned_table(self):
        rng = random.Random(42)
        for n in range(2, 51):
            for _ in range(10):
                scores = [rng.uniform(0, 100) for _ in range(n)]
                est = ci_estimate(scores)
                mean = sum(scores) / n
                sd = math.sqrt(sum((s - mean) ** 2 for s in scores) / (n - 1))
                expected = T975[n - 1] * sd / math.sqrt(n)
                assert est.radius == pytest.approx(expected, abs=1e-9)

    def test_radius_nonnegative(self):
        rng = random.Random(1)
        for _ in range(50):
            scores = [rng.uniform(0, 100) for _ in range(rng.randint(2, 20))]
            assert ci_estimate(scores).radius >= 0


def _record(task_id, group, f1):
    return EvalRecord(
        task_id=task_id, group=group, f1=f1, predicted=(), gold=("x",), termination="finished"
    )


class TestAggregate:
    def test_group_mean(self):
        records = [_record(f"t{i}", "g1", f1) for i, f1 in enumerate([100.0, 0.0, 50.0])]
        report = aggregate(records)
        assert report.groups["g1"].mean == pytest.approx(50.0)

    def test_pooled_overall_equals_weighted_group_mean(self):
        rng = random.Random(3)
        records = []
        for g, size in (("a", 7), ("b", 13), ("c", 29)):
            for i in range(size):
                records.append(_record(f"{g}{i}", g, rng.uniform(0, 100)))
        report = aggregate(records)
        weighted = sum(ci.mean * ci.n for ci in report.groups.values()) / sum(
            ci.n for ci in report.groups.values()
        )
        assert report.overall.mean == pytest.approx(weighted, abs=1e-12)

    def test_empty_input(self):
        with pytest.raises(DomainError) as err:
            aggregate([])
        assert err.value.code == "empty_input"

    def test_report_round_trip(self):
        report = aggregate([_record("t1", "g1", 80.0), _record("t2", "g2", 30.0)])
        assert report_from_dict(report_to_dict(report)) == report


class TestScoreTrajectory:
    def _traj(self, termination, answer):
        steps = (
            TrajectoryStep(
                call=ToolCall(step_index=1, name="ehr.finish", arguments={"answers": list(answer or ())}),
                observation=Observation(step_index=1, status=ObsStatus.ok, content="ok"),
            ),
        )
        return Trajectory(
            task=TaskInstance(
                patient_id="p", cutoff="2130-01-01 00:00:00", instruction="q",
                task_id="t", group=TaskGroup.phenotype,
            ),
            steps=steps if termination == Termination.finished else (),
            final_answer=answer if termination == Termination.finished else None,
            termination=termination,
            policy_id="x",
        )

    def test_finished_scored(self):
        record = score_trajectory(self._traj(Termination.finished, ("a",)), gold=("a",))
        assert record.f1 == 100.0

    def test_unfinished_scores_zero(self):
        record = score_trajectory(self._traj(Termination.round_budget_exhausted, None), gold=("a",))
        assert record.f1 == 0.0
        assert record.termination == "round_budget_exhausted"


class TestDeltaReport:
    def _report(self, means: dict[str, float]):
        records = []
        for group, mean in means.items():
            records += [_record(f"{group}-1", group, mean), _record(f"{group}-2", group, mean)]
        return aggregate(records)

    def test_overall_delta(self):
        agentic = self._report({"g": 63.2})
        curated = self._report({"g": 60.0})
        cells = delta_report(agentic, curated)
        overall = next(c for c in cells if c.group == "overall")
        assert overall.delta == pytest.approx(3.2)
        assert overall.sign == "positive"

    def test_equal_reports_zero(self):
        report = self._report({"g": 40.0, "h": 10.0})
        cells = delta_report(report, report)
        assert all(c.delta == 0.0 and c.sign == "zero" for c in cells)

    def test_group_mismatch(self):
        with pytest.raises(DomainError) as err:
            delta_report(self._report({"g": 1.0}), self._report({"h": 1.0}))
        assert err.value.code == "group_mismatch"


class TestToolUsage:
    def test_share_arithmetic_large_counts(self):
        report = usage_from_counts({"ehr.run_sql_query": 3932, "other": 27514})
        assert report.total == 31446
        assert f"{report.shares['ehr.run_sql_query'] * 100:.1f}" == "12.5"
        assert sum(report.shares.values()) == pytest.approx(1.0, abs=1e-9)

    def test_single_call(self):
        report = usage_from_counts({"ehr.finish": 1})
        assert report.total == 1 and report.shares["ehr.finish"] == 1.0

    def test_empty(self):
        report = usage_from_counts({})
        assert report.total == 0 and report.shares == {}

    def test_counts_from_trajectories(self):
        task = TaskInstance(
            patient_id="p", cutoff="2130-01-01 00:00:00", instruction="q",
            task_id="t", group=TaskGroup.external,
        )
        steps = tuple(
            TrajectoryStep(
                call=ToolCall(step_index=i, name=name),
                observation=Observation(step_index=i, status=ObsStatus.ok, content=""),
            )
            for i, name in enumerate(["ehr.load_ehr", "ehr.run_sql_query", "ehr.finish"], start=1)
        )
        traj = Trajectory(
            task=task, steps=steps, final_answer=("x",),
            termination=Termination.finished, policy_id="p",
        )
        report = tool_usage([traj, traj])
        assert report.counts == {"ehr.load_ehr": 2, "ehr.run_sql_query": 2, "ehr.finish": 2}
        assert report.total == 6


class TestRendering:
    def test_report_table_formats(self):
        report = aggregate(
            [_record("a", "g", 80.0), _record("b", "g", 60.0), _record("c", "g", 100.0),
             _record("d", "g", 40.0)]
        )
        text = render_report(report)
        assert "70.0 ± 41.09" in text
        assert "overall" in text

    def test_delta_table(self):
        cells = delta_report(
            aggregate([_record("a", "g", 63.2)] * 2), aggregate([_record("a", "g", 60.0)] * 2)
        )
        assert "+3.2" in render_delta(cells)

    def test_usage_table(self):
        text = render_usage(usage_from_counts({"ehr.run_sql_query": 3932, "other": 27514}))
        assert "12.5%" in text

    def test_ci_format(self):
        assert CIEstimate(n=3, mean=41.234, radius=2.345).format() == "41.2 ± 2.35"
        assert CIEstimate(n=1, mean=41.234, radius=None).format() == "41.2"
