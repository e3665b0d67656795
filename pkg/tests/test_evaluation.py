from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from graphau_pain.data.manifest import DatasetManifest, make_record
from graphau_pain.errors import EmptyDataset, EmptyMatrix, IncompatibleCheckpoint, LengthMismatch
from graphau_pain.evaluation import (
    MetricsReport,
    au_report,
    confusion,
    evaluate_model,
    format_ablation_table,
    format_pain_table,
    log10_scaled,
    metrics_from_confusion,
    parse_confusion_text,
    render_confusion_log10,
    render_confusion_png,
    write_reports,
)
from graphau_pain.model import ForwardOutput, ModelConfig
from oracles import metrics_reference


def test_confusion_hand_tally():
    cm = confusion([0, 1, 1, 0], [0, 0, 1, 2], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]


def test_confusion_trivial_cases():
    assert np.array_equal(confusion([0, 1, 2, 2], [0, 1, 2, 2], 3), np.diag([1, 1, 2]))
    assert confusion([], [], 3).tolist() == [[0] * 3] * 3
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0], 3)


def test_two_class_golden_metrics():
    rep = metrics_from_confusion([[50, 10], [10, 30]])
    ref = metrics_reference([[50, 10], [10, 30]])
    for j in range(2):
        for ours, exact in zip((rep.precision[j], rep.recall[j], rep.f1[j]), ref[j]):
            assert abs(ours - float(exact)) < 1e-9
    assert [round(v, 2) for v in rep.precision] == [83.33, 75.0]
    assert [round(v, 2) for v in rep.f1] == [83.33, 75.0]
    assert abs(rep.macro_f1 - 79.17) <= 0.01
    assert abs(rep.macro_f1 - float(sum(r[2] for r in ref) / 2)) < 1e-9
    assert rep.accuracy == 80.0


def test_perfect_diagonal():
    rep = metrics_from_confusion(np.diag([4, 7, 1]))
    assert rep.precision == rep.recall == rep.f1 == [100.0] * 3
    assert rep.accuracy == rep.macro_f1 == 100.0 and not rep.zero_division


def test_zero_row_and_column_flagged():
    rep = metrics_from_confusion([[5, 0, 1], [0, 0, 0], [2, 0, 3]], ["a", "b", "c"])
    assert (rep.precision[1], rep.recall[1], rep.f1[1]) == (0.0, 0.0, 0.0)
    assert rep.zero_division == {"b": ["precision", "recall", "f1"]}


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        metrics_from_confusion(np.zeros((3, 3), dtype=int))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.integers(0, 40), min_size=3, max_size=3), min_size=3, max_size=3))
def test_metrics_against_fraction_oracle(cm):
    if sum(map(sum, cm)) == 0:
        return
    rep = metrics_from_confusion(cm)
    ref = metrics_reference(cm)
    for j in range(3):
        for ours, exact in zip((rep.precision[j], rep.recall[j], rep.f1[j]), ref[j]):
            assert abs(ours - float(exact)) < 1e-9
    assert abs(rep.macro_f1 - float(sum(r[2] for r in ref) / 3)) < 1e-9
    assert abs(rep.macro_precision - np.mean(rep.precision)) < 1e-9
    assert abs(rep.macro_recall - np.mean(rep.recall)) < 1e-9
    assert rep.accuracy == pytest.approx(float(Fraction(100 * sum(cm[i][i] for i in range(3)), sum(map(sum, cm)))))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_self_agreement_is_perfect_accuracy(xs):
    assert metrics_from_confusion(confusion(xs, xs, 4)).accuracy == 100.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60), st.permutations([0, 1, 2]))
def test_relabelling_permutes_metrics(pairs, perm):
    preds, labels = zip(*pairs)
    a = metrics_from_confusion(confusion(preds, labels, 3))
    b = metrics_from_confusion(confusion([perm[p] for p in preds], [perm[t] for t in labels], 3))
    for j in range(3):
        assert b.f1[perm[j]] == pytest.approx(a.f1[j])
        assert b.precision[perm[j]] == pytest.approx(a.precision[j])
        assert b.recall[perm[j]] == pytest.approx(a.recall[j])
    assert b.macro_f1 == pytest.approx(a.macro_f1) and b.accuracy == a.accuracy


def test_log10_examples():
    assert f"{log10_scaled(0):.2f}" == "0.00"
    assert f"{log10_scaled(9):.2f}" == "1.00"
    assert f"{log10_scaled(99):.2f}" == "2.00"
    text = render_confusion_log10([[0, 9], [99, 1]], ["x", "y"])
    assert "0.00" in text and "1.00" in text and "2.00" in text and "(99)" in text


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(
    lambda n: st.lists(st.lists(st.integers(0, 10**6), min_size=n, max_size=n), min_size=n, max_size=n)))
def test_rendering_round_trips(cm):
    cm = np.asarray(cm)
    assert np.array_equal(parse_confusion_text(render_confusion_log10(cm)), cm)


def test_report_serialisation_and_files(tmp_path):
    rep = metrics_from_confusion([[3, 1, 0], [0, 2, 0], [1, 0, 0]], ["NoPain", "Mild", "Obvious"])
    back = MetricsReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    write_reports(tmp_path, rep, None, png=True)
    for name in ("report.json", "report.txt", "confusion.txt", "confusion.png"):
        assert (tmp_path / name).stat().st_size > 0
    assert np.array_equal(parse_confusion_text((tmp_path / "confusion.txt").read_text()), rep.confusion)
    assert "Overall" in format_pain_table(rep)
    table = format_ablation_table({"full": rep, "backbone_only": rep})
    assert len(table.splitlines()) == 3 and "Only backbone" in table


def test_png_rendering(tmp_path):
    render_confusion_png(np.zeros((2, 2), dtype=int), tmp_path / "z.png")
    assert (tmp_path / "z.png").read_bytes()[:4] == b"\x89PNG"


def test_au_report_hand_values():
    pred = np.array([[1, 0], [1, 0], [0, 0], [1, 1]])
    true = np.array([[1, 0], [0, 0], [0, 0], [1, 0]])
    rep = au_report(pred, true, (4, 6))
    assert rep["per_au"]["AU4"]["f1"] == pytest.approx(80.0)
    assert rep["per_au"]["AU4"]["acc"] == 75.0
    assert rep["per_au"]["AU6"]["f1"] == 0.0 and not rep["per_au"]["AU6"]["zero_division"]
    zero = au_report(np.zeros((2, 1)), np.zeros((2, 1)), (4,))
    assert zero["per_au"]["AU4"]["zero_division"] and zero["per_au"]["AU4"]["acc"] == 100.0


# ---------------------------------------------------------------- evaluate_model

class ConstantModel(torch.nn.Module):
    """Every frame gets the same logits and AU probabilities."""

    def __init__(self, logits, prob, n_au=8):
        super().__init__()
        self.config = ModelConfig.desk(d_pain=len(logits))
        self.threshold = 0.5
        self.logits = torch.nn.Parameter(torch.tensor(logits, dtype=torch.float32))
        self.prob = prob
        self.n_au = n_au

    def forward(self, x, keep=False):
        b = x.shape[0]
        return ForwardOutput(self.logits.expand(b, -1).clone(), probs=torch.full((b, self.n_au), self.prob))


ZERO = {c: 0 for c in (1, 2, 4, 6, 7, 9, 10, 12, 25, 26, 43)}


def _four_frames():
    return DatasetManifest([
        make_record("f0", "s0", "none", ZERO),
        make_record("f1", "s0", "none", {**ZERO, 1: 2}),
        make_record("f2", "s1", "none", {**ZERO, 4: 3}),
        make_record("f3", "s1", "none", {**ZERO, 4: 3, 6: 2, 43: 1}),
    ])


def test_evaluate_scripted_model():
    manifest = _four_frames()
    assert [r.pspi for r in manifest.records] == [0, 0, 3, 6]
    images = np.zeros((4, 3, 8, 8), dtype=np.float32)
    rep, au = evaluate_model(ConstantModel([0.0, 1.0, 0.0], 0.9), manifest, images=images)
    # always Mild: one hit out of four; Mild precision 1/4, recall 1
    assert rep.confusion.tolist() == [[0, 2, 0], [0, 1, 0], [0, 1, 0]]
    assert rep.precision == [0.0, 25.0, 0.0]
    assert rep.recall == [0.0, 100.0, 0.0]
    assert rep.f1[1] == pytest.approx(40.0)
    assert rep.macro_f1 == pytest.approx(40.0 / 3)
    assert rep.accuracy == 25.0
    assert set(rep.zero_division) == {"NoPain", "Obvious"}
    # every AU predicted active: F1 = 2k / (k + 4) for k active frames
    assert au["per_au"]["AU1"]["f1"] == pytest.approx(40.0) and au["per_au"]["AU1"]["acc"] == 25.0
    assert au["per_au"]["AU4"]["f1"] == pytest.approx(200 / 3) and au["per_au"]["AU4"]["acc"] == 50.0
    assert au["per_au"]["AU12"]["f1"] == 0.0 and au["per_au"]["AU12"]["acc"] == 0.0


def test_evaluate_all_no_pain():
    manifest = DatasetManifest([make_record(f"f{i}", "s", "none", ZERO) for i in range(5)])
    rep, _ = evaluate_model(ConstantModel([2.0, 0.0, 0.0], 0.1), manifest, images=np.zeros((5, 3, 4, 4)))
    assert rep.accuracy == 100.0


def test_evaluate_errors_and_determinism():
    manifest = _four_frames()
    images = np.zeros((4, 3, 8, 8), dtype=np.float32)
    model = ConstantModel([0.3, 0.1, 0.2], 0.4)
    a, _ = evaluate_model(model, manifest, images=images)
    b, _ = evaluate_model(model, manifest, images=images)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(EmptyDataset):
        evaluate_model(model, DatasetManifest([]), images=images[:0])
    with pytest.raises(IncompatibleCheckpoint):
        evaluate_model(model, manifest, scheme="4cat", images=images)
