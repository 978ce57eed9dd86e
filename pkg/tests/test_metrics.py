import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from radious.errors import DegenerateEvaluationError, GeometryError, NamingError, ReportInputError
from radious.metrics import (
    ConfusionMatrix,
    MetricReport,
    accuracy_per_class,
    compare_reports,
    format_comparison,
    iou_per_class,
    macc,
    miou,
)


def naive_scores(preds, gts, num_classes):
    """Per-pixel recount with plain Python integers."""
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    gt_total = [0] * num_classes
    for pred, gt in zip(preds, gts):
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            gt_total[g] += 1
            if p == g:
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(num_classes) if tp[c] + fp[c] + fn[c]]
    accs = [tp[c] / gt_total[c] for c in range(num_classes) if gt_total[c]]
    return sum(ious) / len(ious), sum(accs) / len(accs)


def matrix_of(preds, gts, n):
    cm = ConfusionMatrix(n)
    for p, g in zip(preds, gts):
        cm = cm.accumulate(p, g)
    return cm


def test_perfect_single_class():
    m = np.ones((2, 2), dtype=int)
    cm = ConfusionMatrix(2).accumulate(m, m)
    assert cm.counts[1, 1] == 4 and cm.total == 4
    assert miou(cm) == 1.0 and macc(cm) == 1.0
    assert iou_per_class(cm) == {1: 1.0}


def test_empty_inputs_leave_matrix_unchanged():
    cm = ConfusionMatrix(3).accumulate(np.ones((2, 2), dtype=int), np.ones((2, 2), dtype=int))
    after = cm.accumulate(np.zeros((0, 0), dtype=int), np.zeros((0, 0), dtype=int))
    np.testing.assert_array_equal(after.counts, cm.counts)


def test_extent_mismatch():
    with pytest.raises(GeometryError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))


def test_hand_iou_case():
    gt = np.zeros((4, 4), dtype=int)
    gt[:2] = 1  # 8 pixels
    pred = np.zeros((4, 4), dtype=int)
    pred[0] = 1  # overlaps 4
    pred[2, :2] = 1  # 2 false positives
    assert iou_per_class(ConfusionMatrix(2).accumulate(pred, gt))[1] == pytest.approx(0.4, abs=0)


def test_disjoint_class_iou_zero_and_mean_half():
    gt = np.array([[1, 1], [0, 0]])
    pred = np.array([[0, 0], [1, 1]])
    ious = iou_per_class(ConfusionMatrix(2).accumulate(pred, gt))
    assert ious == {0: 0.0, 1: 0.0}
    cm = ConfusionMatrix(3, np.array([[4, 0, 0], [0, 0, 3], [0, 0, 0]]))
    # class 0 perfect, class 1 fully missed, class 2 only false positives
    assert iou_per_class(cm) == {0: 1.0, 1: 0.0, 2: 0.0}
    # foreground IoUs {1.0, 0.0}: class 2 is predicted as background
    half = ConfusionMatrix(3, np.array([[0, 0, 0], [0, 4, 0], [3, 0, 0]]))
    assert iou_per_class(half, include_background=False) == {1: 1.0, 2: 0.0}
    assert miou(half, include_background=False) == 0.5


def test_absent_class_omitted_and_background_flag():
    gt = np.array([[0, 1], [1, 1]])
    cm = ConfusionMatrix(4).accumulate(gt, gt)
    assert set(iou_per_class(cm)) == {0, 1}
    assert set(iou_per_class(cm, include_background=False)) == {1}
    assert accuracy_per_class(cm) == {0: 1.0, 1: 1.0}


def test_fully_mislabeled_class_contributes_zero_accuracy():
    gt = np.array([[1, 1, 2, 2]])
    pred = np.array([[2, 2, 2, 2]])
    cm = ConfusionMatrix(3).accumulate(pred, gt)
    assert accuracy_per_class(cm) == {1: 0.0, 2: 1.0}
    assert macc(cm) == 0.5


def test_degenerate_evaluation():
    with pytest.raises(DegenerateEvaluationError):
        miou(ConfusionMatrix(3))
    with pytest.raises(DegenerateEvaluationError):
        macc(ConfusionMatrix(3))


def test_random_3x3_matches_pixel_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, g = rng.integers(0, 3, (3, 3)), rng.integers(0, 3, (3, 3))
        cm = ConfusionMatrix(3).accumulate(p, g)
        expected = np.zeros((3, 3), dtype=int)
        for a, b in zip(g.ravel(), p.ravel()):
            expected[a, b] += 1
        np.testing.assert_array_equal(cm.counts, expected)


maps = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.tuples(arrays(np.int64, (3, 4), elements=st.integers(0, n - 1)),
                           arrays(np.int64, (3, 4), elements=st.integers(0, n - 1))), min_size=1, max_size=4),
    )
)


@settings(max_examples=60, deadline=None)
@given(maps)
def test_scores_equal_naive_recount(case):
    n, pairs = case
    preds, gts = zip(*pairs)
    cm = matrix_of(preds, gts, n)
    m_iou, m_acc = naive_scores(preds, gts, n)
    assert miou(cm) == pytest.approx(m_iou, rel=1e-15)
    assert macc(cm) == pytest.approx(m_acc, rel=1e-15)
    assert cm.total == sum(p.size for p in preds)
    for k, v in iou_per_class(cm).items():
        c = cm.counts
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (c[k, k] > 0 and c[:, k].sum() == c[k, k] and c[k].sum() == c[k, k])


@settings(max_examples=30, deadline=None)
@given(maps, st.randoms(use_true_random=False))
def test_accumulate_order_independent(case, rnd):
    n, pairs = case
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = matrix_of(*zip(*pairs), n)
    b = matrix_of(*zip(*shuffled), n)
    np.testing.assert_array_equal(a.counts, b.counts)
    halves = matrix_of(*zip(*pairs[:1]), n) + matrix_of(*zip(*pairs[1:]), n) if len(pairs) > 1 else a
    np.testing.assert_array_equal(halves.counts, a.counts)


# -- reports ---------------------------------------------------------------------------

def _report(name, m_iou, m_acc):
    return MetricReport(name, m_iou, m_acc)


def test_compare_table_values():
    rows = compare_reports([_report("Segformer", 0.32, 0.15), _report("Radious", 0.65, 0.90), _report("DeepLabv3+", 0.56, 0.70)])
    assert [r.model_name for r in rows] == ["Radious", "DeepLabv3+", "Segformer"]
    assert rows[1].delta_miou == pytest.approx(-0.09, abs=1e-12)
    assert rows[2].delta_miou == pytest.approx(-0.33, abs=1e-12)
    text = format_comparison(rows)
    assert text.splitlines()[1].startswith("Radious")


def test_compare_identical_reports_zero_delta():
    rows = compare_reports([_report("a", 0.5, 0.6), _report("b", 0.5, 0.6)])
    assert all(r.delta_miou == 0.0 and r.delta_macc == 0.0 for r in rows)


def test_compare_errors():
    with pytest.raises(NamingError):
        compare_reports([_report("a", 0.1, 0.1), _report("a", 0.2, 0.2)])
    with pytest.raises(ReportInputError):
        compare_reports([_report("a", 0.1, 0.1)])


def test_compare_hand_built_matrices():
    gt = np.array([[0, 1, 1, 2]])
    a = MetricReport.from_confusion(ConfusionMatrix(3).accumulate(gt, gt), "exact")
    b = MetricReport.from_confusion(ConfusionMatrix(3).accumulate(np.array([[0, 1, 2, 2]]), gt), "close")
    rows = compare_reports([b, a])
    assert [r.model_name for r in rows] == ["exact", "close"]
    assert rows[1].delta_miou == b.miou - a.miou
    assert rows[1].delta_macc == b.macc - a.macc


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=6))
def test_ranking_equals_sort_oracle(scores):
    reports = [_report(f"m{i}", a, b) for i, (a, b) in enumerate(scores)]
    rows = compare_reports(reports)
    oracle = sorted(reports, key=lambda r: (-r.miou, r.model_name))
    assert [r.model_name for r in rows] == [r.model_name for r in oracle]
    assert [r.rank for r in rows] == list(range(1, len(rows) + 1))
    assert all(r.delta_miou <= 0 for r in rows)


def test_report_round_trip(tmp_path):
    gt = np.array([[0, 1], [2, 2]])
    pred = np.array([[0, 1], [1, 2]])
    report = MetricReport.from_confusion(ConfusionMatrix(3).accumulate(pred, gt), "m", ["bg", "a", "b"])
    path = tmp_path / "r.json"
    report.save(path)
    back = MetricReport.load(path)
    assert back == report
    assert back.miou == np.mean([r.iou for r in back.per_class])


def test_report_rejects_inconsistent_mean(tmp_path):
    data = {"model_name": "m", "miou": 0.9, "macc": 0.5, "per_class": [{"id": 1, "name": "a", "iou": 0.2, "acc": 0.5}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ReportInputError):
        MetricReport.load(path)
    path.write_text("{not json")
    with pytest.raises(ReportInputError):
        MetricReport.load(path)
