import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hifinet import metrics as M
from hifinet.taxonomy import builtin


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    hits = 0.0
    for p in pos:
        for n in neg:
            hits += 1.0 if p > n else 0.5 if p == n else 0.0
    return hits / (len(pos) * len(neg))


def test_auc_examples():
    assert M.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert M.auc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert M.auc([0.9, 0.8, 0.3], [1, 0, 1]) == 0.5


def test_auc_errors():
    with pytest.raises(ValueError):
        M.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        M.auc([0.1, 0.2], [1])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2 ** 31 - 1), st.sampled_from([3, 10, 1000]))
def test_auc_equals_brute_force_exactly(n, seed, levels):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse score grids force many ties
    scores = rng.integers(0, levels, n) / levels
    assert M.auc(scores, labels) == brute_auc(scores.tolist(), labels.tolist())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, 50)
    labels[:2] = [0, 1]
    s = rng.standard_normal(50)
    assert M.auc(s, labels) == M.auc(np.exp(3 * s) + 1, labels)


def test_f1_examples():
    assert M.f1_binary([1, 0, 1], [1, 0, 1]) == 1.0
    assert M.f1_binary([0, 0], [0, 0]) == 0.0
    assert M.f1_binary([1, 1, 0], [1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        M.f1_binary([1], [1, 0])


def test_iou_pbca_examples():
    a = np.zeros((8, 8)); a[:, :4] = 1
    assert M.iou_pbca(a, a) == (1.0, 1.0)
    assert M.iou_pbca(a, 1 - a) == (0.0, 0.0)
    b = np.zeros((8, 8)); b[:, 2:6] = 1
    assert M.iou_pbca(a, b)[0] == pytest.approx(1 / 3, abs=1e-15)
    assert M.iou_pbca(np.zeros((2, 2)), np.zeros((2, 2))) == (1.0, 1.0)
    with pytest.raises(ValueError):
        M.iou_pbca(a, b[:4])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_iou_pbca_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)) < 0.4, rng.random((6, 6)) < 0.6
    assert M.iou_pbca(a, b) == M.iou_pbca(b, a)


# 10-prediction fixture on the mini tree; leaf order:
# real, synth_texture_a, synth_texture_b, retouch_blur, splice, copy_move, inpaint
GT = [0, 0, 1, 2, 3, 4, 4, 5, 6, 6]
PRED = [0, 4, 1, 1, 3, 5, 4, 5, 0, 6]


def test_attribute_fixture_hand_tally():
    rep = M.attribute_report(PRED, GT, builtin("mini"))
    assert rep.level_accuracy == [0.8, 0.7, 0.7, 0.6]
    expect = np.zeros((7, 7), dtype=int)
    for g, p in [(0, 0), (0, 4), (1, 1), (2, 1), (3, 3), (4, 5), (4, 4), (5, 5), (6, 0), (6, 6)]:
        expect[g, p] += 1
    assert np.array_equal(rep.confusion, expect)
    assert rep.macro_f1 == pytest.approx(4 / 7, abs=1e-15)
    assert rep.confusion.sum(axis=1).tolist() == [2, 1, 1, 1, 2, 1, 2]


def test_attribute_all_correct_and_sibling():
    tree = builtin("mini")
    rep = M.attribute_report(GT, GT, tree)
    assert rep.level_accuracy == [1.0] * 4 and rep.macro_f1 == 1.0
    assert np.array_equal(rep.confusion, np.diag(np.diag(rep.confusion)))
    sib = M.attribute_report([tree.leaf_index("copy_move")], [tree.leaf_index("splice")], tree)
    assert sib.level_accuracy == [1.0, 1.0, 1.0, 0.0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=60))
def test_level_accuracy_monotone(pairs):
    gt, pred = zip(*pairs)
    acc = M.attribute_report(pred, gt, builtin("mini")).level_accuracy
    assert all(acc[b] >= acc[b + 1] for b in range(3))


def test_attribute_errors():
    tree = builtin("mini")
    with pytest.raises(IndexError):
        M.attribute_report([7], [0], tree)
    with pytest.raises(ValueError):
        M.attribute_report([0, 1], [0], tree)


def test_localization_auc_pooling():
    scores = np.array([[[0.9, 0.1], [0.2, 0.3]], [[0.5, 0.5], [0.5, 0.5]], [[0.7, 0.6], [0.1, 0.2]]])
    gt = np.array([[[1, 0], [0, 0]], [[0, 0], [0, 0]], [[0, 1], [0, 0]]])
    # image 2 has no forged pixel and is skipped
    assert M.localization_auc(scores, gt) == pytest.approx((1.0 + 2 / 3) / 2, abs=1e-15)
    assert M.localization_auc(scores, gt, "global") == brute_auc(scores.ravel().tolist(), gt.ravel().tolist())
    with pytest.raises(ValueError):
        M.localization_auc(scores, gt, "median")


def test_build_report_and_serialisation():
    tree = builtin("mini")
    rng = np.random.default_rng(0)
    masks = np.zeros((10, 1, 4, 4))
    for i, g in enumerate(GT):
        if g:
            masks[i, 0, :2, :2] = 1.0
    rep = M.build_report(tree, GT, PRED, rng.random(10), rng.random((10, 1, 4, 4)), masks)
    d = json.loads(rep.to_json())
    assert d["counts"] == {"images": 10, "forged": 8, "real": 2}
    assert d["attributes"]["level_accuracy"] == [0.8, 0.7, 0.7, 0.6]
    assert d["detection"]["f1"] == M.f1_binary(np.array(PRED) != 0, np.array(GT) != 0)
    assert rep.confusion_csv().splitlines()[0].startswith("true\\pred,real,")
    assert "level-4 accuracy" in rep.table()
    again = M.build_report(tree, GT, PRED, *_inputs(), masks)
    first = M.build_report(tree, GT, PRED, *_inputs(), masks)
    assert again.to_json() == first.to_json()


def _inputs():
    rng = np.random.default_rng(0)
    return rng.random(10), rng.random((10, 1, 4, 4))


def test_report_rates_in_unit_interval():
    tree = builtin("mini")
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 7, 40)
    masks = (rng.random((40, 1, 4, 4)) < 0.3).astype(float)
    masks[gt == 0] = 0.0
    rep = M.build_report(tree, gt, rng.integers(0, 7, 40), rng.random(40), rng.random((40, 1, 4, 4)), masks)
    for v in [rep.detection["auc"], rep.detection["f1"], *[rep.localization[k] for k in ("auc", "f1", "iou", "pbca")],
              *rep.attributes["level_accuracy"], rep.attributes["macro_f1"]]:
        assert 0.0 <= v <= 1.0


def test_paired_comparison_rows():
    tree = builtin("mini")
    masks = np.zeros((10, 1, 4, 4))
    on = M.build_report(tree, GT, PRED, *_inputs(), masks)
    off = M.build_report(tree, GT, GT, *_inputs(), masks)
    rows = M.paired_comparison({"hierarchy_on": on, "hierarchy_off": off}, "hierarchy_on").splitlines()
    assert rows[0].split(",")[-1] == "delta_acc4"
    assert rows[1].split(",")[4:] == ["0.6", repr(4 / 7), "0.0"]
    assert float(rows[2].split(",")[-1]) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(KeyError):
        M.paired_comparison({"a": on}, "b")
