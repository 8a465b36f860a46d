import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annofuse.annotations import ImageRecord, LabeledBox, MultiAnnotatorDataset
from annofuse.fusion import WbfConfig, fuse_dataset, fuse_image, pooled_labels, single_annotator_labels
from annofuse.geometry import Box, InvalidInputError


def lb(x0, y0, x1, y1, cls=0, score=1.0):
    return LabeledBox(Box(x0, y0, x1, y1), cls, score)


def test_single_box_rescaled_by_one_third():
    out = fuse_image({"a": [lb(3, 4, 9, 12)]}, 3, WbfConfig())
    assert len(out) == 1
    assert out[0].box.as_tuple() == (3, 4, 9, 12)
    assert out[0].confidence == pytest.approx(1 / 3, abs=1e-15)
    assert out[0].support == 1


def test_two_annotators_worked_example():
    # IoU = 80/120 > 0.55 -> one cluster; mean box (1,0,11,10); 1.0 * 2/3
    out = fuse_image({"a": [lb(0, 0, 10, 10)], "b": [lb(2, 0, 12, 10)]}, 3, WbfConfig(0.55, "avg", "min_over_t"))
    assert len(out) == 1
    assert out[0].box.as_tuple() == (1.0, 0.0, 11.0, 10.0)
    assert abs(out[0].confidence - 2 / 3) <= 1e-12
    assert out[0].support == 2
    assert out[0].contributors == ("a", "b")


def test_different_classes_never_merge():
    out = fuse_image({"a": [lb(0, 0, 10, 10, cls=0)], "b": [lb(0, 0, 10, 10, cls=1)]}, 2)
    assert [f.class_id for f in out] == [0, 1]
    assert all(f.support == 1 for f in out)


def test_match_against_fused_box_not_members():
    # third box overlaps the first member alone by > 0.55 but the running
    # fused box by less, so it opens a new cluster
    boxes = {"a": [lb(0, 0, 10, 10)], "b": [lb(2, 0, 12, 10)], "c": [lb(-2, 0, 8, 10)]}
    out = fuse_image(boxes, 3, WbfConfig(0.55))
    # c vs a: 80/120 = 0.667; c vs fused (1,0,11,10): 70/130 = 0.538
    assert sorted(f.support for f in out) == [1, 2]


def test_weighted_mean_uses_scores():
    out = fuse_image({"a": [lb(0, 0, 10, 10, score=0.75)], "b": [lb(2, 0, 12, 10, score=0.25)]}, 2)
    assert out[0].box.as_tuple() == pytest.approx((0.5, 0.0, 10.5, 10.0))
    assert out[0].confidence == pytest.approx(0.5)


def test_conf_mode_max_and_rescale_modes():
    boxes = {"a": [lb(0, 0, 10, 10, score=0.9)], "b": [lb(0, 0, 10, 10, score=0.5)]}
    assert fuse_image(boxes, 4, WbfConfig(conf_mode="max", rescale_mode="none"))[0].confidence == 0.9
    assert fuse_image(boxes, 4, WbfConfig(rescale_mode="min_over_t"))[0].confidence == pytest.approx(0.7 * 0.5)
    assert fuse_image(boxes, 1, WbfConfig(rescale_mode="n_over_t"))[0].confidence == 1.0


def test_invalid_config_and_t():
    with pytest.raises(InvalidInputError):
        WbfConfig(iou_threshold=1.0)
    with pytest.raises(InvalidInputError):
        WbfConfig(rescale_mode="bogus")
    with pytest.raises(InvalidInputError):
        fuse_image({"a": [lb(0, 0, 1, 1)]}, 0)


def test_config_dict_round_trip():
    cfg = WbfConfig(0.4, "max", "n_over_t", 5)
    assert WbfConfig.from_dict(cfg.to_dict()) == cfg


def _dataset(per_annotator, size=(64, 64)):
    images = [ImageRecord("im", *size)]
    anns = {("im", a): boxes for a, boxes in per_annotator.items()}
    return MultiAnnotatorDataset(["c0", "c1"], images, list(per_annotator), anns)


def test_unanimous_dataset():
    shared = [lb(5, 5, 20, 30), lb(30, 30, 50, 44, cls=1)]
    ds = _dataset({"r1": list(shared), "r2": list(shared), "r3": list(shared)})
    fd = fuse_dataset(ds)
    assert [f.box for f in fd.fused["im"]] == [b.box for b in shared]
    assert all(f.confidence == 1.0 and f.support == 3 for f in fd.fused["im"])


def test_empty_dataset():
    ds = MultiAnnotatorDataset(["c0"], [], ["r1"], {})
    fd = fuse_dataset(ds)
    assert fd.fused == {} and fd.images == []


def test_spurious_box_keeps_one_third():
    shared = [lb(5, 5, 20, 30)]
    ds = _dataset({"r1": shared + [lb(40, 40, 55, 52, score=0.9)], "r2": list(shared), "r3": list(shared)})
    fd = fuse_dataset(ds)
    spur = [f for f in fd.fused["im"] if f.support == 1]
    assert len(spur) == 1
    assert spur[0].confidence == pytest.approx(0.9 / 3, abs=1e-15)
    assert spur[0].contributors == ("r1",)


def test_fused_boxes_clipped():
    ds = _dataset({"r1": [lb(50, 50, 64, 64)], "r2": [lb(52, 52, 64, 64)]})
    fd = fuse_dataset(ds, WbfConfig(0.3))
    b = fd.fused["im"][0].box
    assert b.x_max <= 64 and b.y_max <= 64


def test_t_override():
    ds = _dataset({"r1": [lb(0, 0, 10, 10)]})
    assert fuse_dataset(ds, WbfConfig(t_override=4)).fused["im"][0].confidence == 0.25


def test_baseline_label_wrappers():
    ds = _dataset({"r1": [lb(0, 0, 10, 10)], "r2": [lb(1, 1, 11, 11), lb(30, 30, 40, 40)]})
    single = single_annotator_labels(ds, "r2").fused["im"]
    assert [f.confidence for f in single] == [1.0, 1.0]
    pooled = pooled_labels(ds).fused["im"]
    assert len(pooled) == 3 and all(f.confidence == 1.0 for f in pooled)


# ---------------------------------------------------------------------------
# properties

cfgs = st.builds(
    WbfConfig,
    st.sampled_from([0.3, 0.55, 0.7]),
    st.sampled_from(["avg", "max"]),
    st.sampled_from(["min_over_t", "n_over_t", "none"]),
)


@st.composite
def annotator_sets(draw, max_annotators=4):
    n_ann = draw(st.integers(1, max_annotators))
    out = {}
    for a in range(n_ann):
        boxes = []
        for _ in range(draw(st.integers(0, 5))):
            x = draw(st.integers(0, 40))
            y = draw(st.integers(0, 40))
            w = draw(st.integers(2, 20))
            h = draw(st.integers(2, 20))
            jx = draw(st.floats(-2, 2))
            boxes.append(
                LabeledBox(Box(x + jx, y, x + w + jx, y + h), draw(st.integers(0, 2)), draw(st.floats(0, 1)))
            )
        out[f"r{a}"] = boxes
    return out


@settings(max_examples=500)
@given(annotator_sets(), cfgs)
def test_hull_class_and_confidence(sets, cfg):
    t = len(sets)
    out = fuse_image(sets, t, cfg)
    all_boxes = [b for bs in sets.values() for b in bs]
    assert sum(f.support for f in out) == len(all_boxes)
    for f in out:
        # candidate members: same-class boxes of the contributing annotators
        members = [b for a in f.contributors for b in sets[a] if b.class_id == f.class_id]
        assert members
        assert 0.0 <= f.confidence <= 1.0
        # hull: coordinates inside the envelope of the candidates
        for k, v in enumerate(f.box.as_tuple()):
            assert min(m.box.as_tuple()[k] for m in members) <= v <= max(m.box.as_tuple()[k] for m in members)
        if cfg.conf_mode == "avg" and cfg.rescale_mode == "none":
            assert f.confidence <= max(m.score for m in members)
        assert set(f.contributors) <= {a for a, bs in sets.items() if any(b.class_id == f.class_id for b in bs)}


@settings(max_examples=500)
@given(annotator_sets(), cfgs, st.randoms(use_true_random=False))
def test_permutation_invariance(sets, cfg, rnd):
    t = len(sets)
    base = fuse_image(sets, t, cfg)
    keys = list(sets)
    rnd.shuffle(keys)
    shuffled = {}
    for k in keys:
        bs = list(sets[k])
        rnd.shuffle(bs)
        shuffled[k] = bs
    assert fuse_image(shuffled, t, cfg) == base


@settings(max_examples=500)
@given(
    st.integers(1, 6),
    st.floats(0, 40),
    st.floats(0, 40),
    st.floats(1, 20),
    st.floats(1, 20),
    st.floats(0, 1),
    st.integers(0, 3),
)
def test_unanimity_fixed_point(t, x, y, w, h, score, cls):
    b = LabeledBox(Box(x, y, x + w, y + h), cls, score)
    out = fuse_image({f"r{i}": [b] for i in range(t)}, t, WbfConfig(rescale_mode="min_over_t"))
    assert len(out) == 1
    assert out[0].box == b.box
    assert out[0].confidence == score
    assert out[0].support == t


@settings(max_examples=200)
@given(annotator_sets(max_annotators=3))
def test_duplicate_member_never_lowers_support(sets):
    cfg = WbfConfig()
    t = len(sets)
    base = fuse_image(sets, t, cfg)
    anns = [a for a, bs in sets.items() if bs]
    if not anns:
        return
    a = anns[0]
    dup = sets[a][0]
    bigger = dict(sets)
    bigger["zz_dup"] = [dup]
    after = fuse_image(bigger, t, cfg)
    # the cluster that absorbed the duplicate grows by one
    before = {f.box: f.support for f in base if a in f.contributors and f.class_id == dup.class_id}
    assert sum(f.support for f in after) == sum(f.support for f in base) + 1
    assert max(f.support for f in after if f.class_id == dup.class_id) >= min(before.values())


def test_duplicate_equal_scores_keeps_confidence():
    base = fuse_image({"a": [lb(0, 0, 10, 10)], "b": [lb(1, 0, 11, 10)]}, 3)
    more = fuse_image({"a": [lb(0, 0, 10, 10)], "b": [lb(1, 0, 11, 10)], "c": [lb(1, 0, 11, 10)]}, 3)
    assert more[0].support == base[0].support + 1
    assert more[0].confidence >= base[0].confidence


def test_deterministic_across_calls():
    rnd = random.Random(3)
    sets = {
        f"r{a}": [lb(x, x, x + 10, x + 12, rnd.randrange(2), rnd.random()) for x in rnd.sample(range(40), 4)]
        for a in range(3)
    }
    assert fuse_image(sets, 3) == fuse_image(sets, 3)
