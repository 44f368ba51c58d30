import itertools

import pytest
from hypothesis import given, settings, strategies as st

from _oracles import BASELINE_ERRORS, synthesize_log
from tcil.analysis import (
    ErrorType,
    PredictionLog,
    PredictionRecord,
    accuracy_metrics,
    classify_error,
    emit_report,
    error_breakdown,
    read_prediction_log,
    results_table,
    topk_correct,
    write_class_task_map,
    write_prediction_log,
)
from tcil.errors import InputError


def expected_type(true_task, pred_task, same_class, latest):
    """Definitions written out case by case."""
    if true_task == pred_task:
        return ErrorType.CORRECT if same_class else ErrorType.WTC
    if true_task == latest or pred_task == latest:
        return ErrorType.ONC
    return ErrorType.ITC


def two_classes_per_task(num_tasks):
    return {c: c // 2 + 1 for c in range(2 * num_tasks)}


class TestClassify:
    @pytest.mark.parametrize("latest", [1, 2, 3, 4, 5])
    def test_exhaustive_triples(self, latest):
        mapping = two_classes_per_task(latest)
        for true_task, pred_task in itertools.product(range(1, latest + 1), repeat=2):
            for offset in (0, 1):
                true_c = 2 * (true_task - 1)
                pred_c = 2 * (pred_task - 1) + offset
                same = true_c == pred_c
                got = classify_error(true_c, pred_c, mapping, latest)
                assert got == expected_type(true_task, pred_task, same, latest)

    def test_predicted_rule(self):
        mapping = two_classes_per_task(3)
        # true latest, predicted old: ONC under "either", ITC under "predicted"
        assert classify_error(4, 0, mapping, 3) == ErrorType.ONC
        assert classify_error(4, 0, mapping, 3, onc_rule="predicted") == ErrorType.ITC
        assert classify_error(0, 4, mapping, 3, onc_rule="predicted") == ErrorType.ONC

    def test_unknown_class(self):
        with pytest.raises(InputError, match="99"):
            classify_error(99, 0, {0: 1}, 1)

    def test_unknown_rule(self):
        with pytest.raises(InputError):
            classify_error(0, 1, {0: 1, 1: 2}, 2, onc_rule="sometimes")


@st.composite
def random_logs(draw):
    num_tasks = draw(st.integers(1, 5))
    mapping = two_classes_per_task(num_tasks)
    records = []
    sid = 0
    for step in range(1, num_tasks + 1):
        seen = [c for c, t in mapping.items() if t <= step]
        for _ in range(draw(st.integers(1, 15))):
            records.append(PredictionRecord(sid, draw(st.sampled_from(seen)), draw(st.sampled_from(seen)), step))
            sid += 1
    return PredictionLog(records, mapping)


class TestBreakdown:
    @settings(max_examples=200, deadline=None)
    @given(log=random_logs(), rule=st.sampled_from(["either", "predicted"]))
    def test_structural_zeros(self, log, rule):
        breakdown = error_breakdown(log, rule)
        first = breakdown.at(1)
        assert first.onc == 0 and first.itc == 0
        if 2 in log.steps() and rule == "either":
            assert breakdown.at(2).itc == 0
        for s in breakdown.steps:
            assert s.correct + s.wtc + s.onc + s.itc == s.total

    def test_baseline_counts(self):
        rows, mapping = synthesize_log()
        log = PredictionLog([PredictionRecord(*r) for r in rows], mapping)
        breakdown = error_breakdown(log)
        assert breakdown.column("wtc") == BASELINE_ERRORS["wtc"]
        assert breakdown.column("onc") == BASELINE_ERRORS["onc"]
        assert breakdown.column("itc") == BASELINE_ERRORS["itc"]
        assert breakdown.at(1).wtc == 75

    def test_empty(self):
        with pytest.raises(InputError):
            error_breakdown(PredictionLog([], {0: 1}))


class TestMetrics:
    def test_avg_last(self):
        m = accuracy_metrics([80.0, 60.0, 40.0])
        assert (m.avg, m.last) == (60.0, 40.0)

    def test_single_step(self):
        m = accuracy_metrics([72.5])
        assert m.avg == m.last == 72.5

    def test_from_log(self):
        recs = [PredictionRecord(0, 0, 0, 1), PredictionRecord(1, 1, 0, 1), PredictionRecord(2, 2, 2, 2)]
        m = accuracy_metrics(PredictionLog(recs, {0: 1, 1: 1, 2: 2}))
        assert m.per_step == (50.0, 100.0)

    def test_empty(self):
        with pytest.raises(InputError):
            accuracy_metrics([])

    def test_topk(self):
        logits = [[0.1, 0.5, 0.4], [0.9, 0.03, 0.07]]
        assert topk_correct(logits, [2, 2], 1).tolist() == [False, False]
        assert topk_correct(logits, [2, 2], 2).tolist() == [True, True]


class TestFiles:
    def _write(self, tmp_path, rows, mapping):
        log, cmap = tmp_path / "pred.csv", tmp_path / "map.csv"
        write_prediction_log([PredictionRecord(*r) for r in rows], log)
        write_class_task_map(mapping, cmap)
        return log, cmap

    def test_roundtrip(self, tmp_path):
        rows, mapping = synthesize_log({"wtc": [3, 4], "onc": [0, 5], "itc": [0, 0]}, 2, 10)
        log, cmap = self._write(tmp_path, rows, mapping)
        parsed = read_prediction_log(log, cmap)
        assert [(r.sample_id, r.true_class, r.pred_class, r.step) for r in parsed.records] == rows
        assert error_breakdown(parsed).column("onc") == [0, 5]

    def test_malformed_row_line_number(self, tmp_path):
        log, cmap = self._write(tmp_path, [(0, 0, 0, 1), (1, 1, 1, 1)], {0: 1, 1: 1})
        lines = log.read_text().splitlines()
        lines[2] = "1,1,oops,1"
        log.write_text("\n".join(lines) + "\n")
        with pytest.raises(InputError, match=r":3:"):
            read_prediction_log(log, cmap)

    def test_unknown_class_named(self, tmp_path):
        log, cmap = self._write(tmp_path, [(0, 0, 57, 1)], {0: 1})
        with pytest.raises(InputError, match="57"):
            read_prediction_log(log, cmap)

    def test_empty_log(self, tmp_path):
        log, cmap = self._write(tmp_path, [], {0: 1})
        with pytest.raises(InputError):
            read_prediction_log(log, cmap)


class TestReport:
    def test_deterministic_table(self, tmp_path):
        rows, mapping = synthesize_log({"wtc": [1, 2, 3], "onc": [0, 4, 5], "itc": [0, 0, 6]}, 2, 5)
        log = PredictionLog([PredictionRecord(*r) for r in rows], mapping)
        breakdown, metrics = error_breakdown(log), accuracy_metrics(log)
        a = emit_report(breakdown, metrics, tmp_path / "a")
        b = emit_report(breakdown, metrics, tmp_path / "b")
        assert a["table"].read_text() == b["table"].read_text() == results_table(breakdown, metrics)
        assert a["accuracy_plot"].stat().st_size > 0 and a["errors_plot"].stat().st_size > 0

    def test_empty_breakdown(self, tmp_path):
        from tcil.analysis import ErrorBreakdown

        with pytest.raises(InputError):
            emit_report(ErrorBreakdown(), None, tmp_path / "r")
        assert not (tmp_path / "r").exists()
