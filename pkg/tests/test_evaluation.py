import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annofuse.annotations import LabeledBox
from annofuse.evaluation import (
    REFERENCE_MAP,
    MatchResult,
    average_precision,
    map_at,
    match_image,
    match_predictions,
)
from annofuse.geometry import Box


def lb(x0, y0, x1, y1, cls=0, score=1.0):
    return LabeledBox(Box(x0, y0, x1, y1), cls, score)


def test_exact_hit_is_tp():
    _, tp, _ = match_image([lb(0, 0, 10, 10, score=0.7)], [lb(0, 0, 10, 10)], 0.4)
    assert tp == [True]


def test_low_overlap_is_fp():
    # IoU 0.3 against the only ground truth
    _, tp, _ = match_image([lb(0, 0, 10, 10)], [lb(7, 0, 17, 10)], 0.4)
    assert tp == [False]


def test_gt_consumed_by_higher_score():
    gt = [lb(0, 0, 10, 10)]
    preds = [lb(1, 0, 11, 10, score=0.9), lb(0, 0, 10, 16, score=0.8)]
    _, tp, which = match_image(preds, gt, 0.4)
    assert tp == [True, False] and which == [0, None]


@pytest.mark.parametrize(
    "tp, n_gt, expected",
    [([True], 1, 1.0), ([False, True], 1, 0.5), ([], 1, 0.0), ([True, True], 4, 0.5)],
)
def test_average_precision_examples(tp, n_gt, expected):
    m = MatchResult(scores=[1 - 0.1 * i for i in range(len(tp))], tp=tp, n_gt=n_gt)
    assert average_precision(m) == expected


def test_perfect_predictions_map_one():
    gts = {"a": [lb(0, 0, 10, 10), lb(20, 20, 30, 30, cls=1)], "b": [lb(5, 5, 9, 9)]}
    assert map_at(gts, gts, 2).mAP == 1.0


def test_one_perfect_class_one_missed():
    gts = {"a": [lb(0, 0, 10, 10, cls=0), lb(20, 20, 30, 30, cls=1)]}
    report = map_at({"a": [lb(0, 0, 10, 10, cls=0)]}, gts, 2)
    assert report.ap == [1.0, 0.0] and report.mAP == 0.5


def test_class_without_gt_excluded():
    gts = {"a": [lb(0, 0, 10, 10, cls=0)]}
    report = map_at({"a": [lb(0, 0, 10, 10, cls=0), lb(30, 30, 40, 40, cls=1)]}, gts, 2)
    assert report.n_gt == [1, 0] and report.mAP == 1.0


def test_class_out_of_range():
    with pytest.raises(ValueError):
        map_at({"a": [lb(0, 0, 1, 1, cls=3)]}, {}, 2)


def test_reference_values_recorded():
    assert REFERENCE_MAP == {
        "Baseline": 0.148,
        "Annotator #1": 0.121,
        "Annotator #2": 0.132,
        "Annotator #3": 0.124,
        "Ensemble": 0.154,
        "Ours": 0.158,
    }


def test_pooled_ranking_across_images():
    gts = {"a": [lb(0, 0, 10, 10)], "b": [lb(0, 0, 10, 10)]}
    preds = {"a": [lb(0, 0, 10, 10, score=0.5)], "b": [lb(40, 40, 50, 50, score=0.9)]}
    m = match_predictions(preds, gts, 0.4, 0)
    assert m.scores == [0.9, 0.5] and m.tp == [False, True] and m.n_gt == 2


# ---------------------------------------------------------------------------
# brute-force oracle


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _tp_count(kept, gts, thr):
    """TP count when only the ``kept`` predictions are submitted."""
    total = 0
    for image_id in {i for i, _ in kept}:
        used = set()
        for _, p in sorted((x for x in kept if x[0] == image_id), key=lambda x: -x[1][4]):
            best, best_j = -1.0, None
            for j, g in enumerate(gts.get(image_id, [])):
                if j not in used and _iou(p, g) > best:
                    best, best_j = _iou(p, g), j
            if best_j is not None and best >= thr:
                used.add(best_j)
                total += 1
    return total


def brute_force_map(preds, gts, k, thr):
    aps = []
    for c in range(k):
        g = {i: [b.box.as_tuple() for b in v if b.class_id == c] for i, v in gts.items()}
        n_gt = sum(len(v) for v in g.values())
        if n_gt == 0:
            continue
        pool = [(i, (*b.box.as_tuple(), b.score)) for i, v in preds.items() for b in v if b.class_id == c]
        pool.sort(key=lambda x: -x[1][4])
        points = []
        for cut in range(1, len(pool) + 1):
            tp = _tp_count(pool[:cut], g, thr)
            points.append((tp / n_gt, tp / cut))
        ap = 0.0
        prev = 0.0
        for r in sorted({r for r, _ in points}):
            if r > prev:
                ap += (r - prev) * max(p for rr, p in points if rr >= r)
                prev = r
        aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


@st.composite
def instances(draw):
    n_images = draw(st.integers(1, 5))
    # distinct scores so the ranking is unambiguous
    scores = iter(draw(st.lists(st.integers(1, 10_000), min_size=40, max_size=40, unique=True)))
    coord = st.integers(0, 20)
    size = st.integers(2, 10)

    def box(cls, score):
        x, y = draw(coord), draw(coord)
        return lb(x, y, x + draw(size), y + draw(size), cls, score)

    gts, preds = {}, {}
    for i in range(n_images):
        gts[f"im{i}"] = [box(c, 1.0) for c in (0, 1) for _ in range(draw(st.integers(0, 4)))]
        preds[f"im{i}"] = [box(c, next(scores) / 10_000) for c in (0, 1) for _ in range(draw(st.integers(0, 4)))]
    return preds, gts


@settings(max_examples=300)
@given(instances(), st.sampled_from([0.1, 0.4, 0.5]))
def test_map_equals_brute_force(inst, thr):
    preds, gts = inst
    assert map_at(preds, gts, 2, thr).mAP == pytest.approx(brute_force_map(preds, gts, 2, thr), abs=1e-12)


@settings(max_examples=100)
@given(instances(), st.randoms(use_true_random=False))
def test_input_order_irrelevant(inst, rnd):
    preds, gts = inst
    shuffled = {}
    for i in rnd.sample(list(preds), len(preds)):
        shuffled[i] = rnd.sample(preds[i], len(preds[i]))
    assert map_at(shuffled, gts, 2).mAP == map_at(preds, gts, 2).mAP


def test_trailing_false_positives_leave_ap_unchanged():
    m = MatchResult(scores=[0.9, 0.8, 0.7], tp=[True, False, True], n_gt=3)
    longer = MatchResult(m.scores + [0.1, 0.05], m.tp + [False, False], n_gt=3)
    assert average_precision(longer) == average_precision(m)
