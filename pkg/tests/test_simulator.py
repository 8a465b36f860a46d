import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annofuse.annotations import LabeledBox
from annofuse.fusion import WbfConfig, fuse_dataset
from annofuse.geometry import Box
from annofuse.rng import SplitMix64, derive_seed
from annofuse.simulator import (
    AnnotatorProfile,
    PlacementError,
    SceneConfig,
    assign_splits,
    build_corpus,
    corrupt_annotations,
    generate_scene,
    load_corpus,
    write_corpus,
)

ZERO = AnnotatorProfile()


def splitmix_reference(seed, n):
    """Straight transcription of the published SplitMix64 step."""
    out, x = [], seed
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) % 2**64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_known_vector():
    rng = SplitMix64(1234567)
    got = [rng.next_u64() for _ in range(5)]
    assert got == [
        6457827717110365317,
        3203168211198807973,
        9817491932198370423,
        4593380528125082431,
        16408922859458223821,
    ]


@settings(max_examples=100)
@given(st.integers(0, 2**64 - 1), st.integers(1, 50))
def test_vectorised_uniforms_match_scalar(seed, n):
    a, b = SplitMix64(seed), SplitMix64(seed)
    vec = a.uniforms(n)
    assert vec.tolist() == [b.uniform() for _ in range(n)]
    assert a.state == b.state
    assert [r >> 11 for r in splitmix_reference(seed, n)] == [int(v * 2**53) for v in vec]


def test_integer_covers_closed_range():
    rng = SplitMix64(9)
    seen = {rng.integer(3, 5) for _ in range(200)}
    assert seen == {3, 4, 5}
    with pytest.raises(ValueError):
        rng.integer(2, 1)


def test_derived_seeds_differ():
    assert len({derive_seed(0, i, j) for i in range(20) for j in range(4)}) == 80


# ---------------------------------------------------------------------------
# scenes


def test_scene_is_deterministic():
    p1, b1 = generate_scene(42)
    p2, b2 = generate_scene(42)
    assert np.array_equal(p1, p2) and b1 == b2
    assert not np.array_equal(p1, generate_scene(43)[0])


def test_single_object_inside_image():
    cfg = SceneConfig(objects_per_image=(1, 1))
    for s in range(20):
        pixels, boxes = generate_scene(s, cfg)
        assert pixels.shape == (64, 64) and pixels.dtype == np.uint8
        assert len(boxes) == 1
        b = boxes[0].box
        assert 0 <= b.x_min < b.x_max <= 64 and 0 <= b.y_min < b.y_max <= 64


def test_class0_contrast_monte_carlo():
    cfg = SceneConfig()
    contrast = cfg.intensity_per_class[0] - cfg.background_intensity
    inside, outside = [], []
    for s in range(100):
        pixels, boxes = generate_scene(s, cfg)
        mask = np.zeros(pixels.shape, dtype=bool)
        for lb in boxes:
            x0, y0, x1, y1 = (int(v) for v in lb.box.as_tuple())
            mask[y0:y1, x0:x1] = True
            if lb.class_id == 0:
                inside.append(pixels[y0:y1, x0:x1].mean())
        outside.append(pixels[~mask].mean())
    assert inside
    assert np.mean(inside) - np.mean(outside) >= 0.5 * contrast


def test_objects_do_not_touch():
    for s in range(30):
        _, boxes = generate_scene(s, SceneConfig(objects_per_image=(3, 3)))
        for i, a in enumerate(boxes):
            for b in boxes[i + 1 :]:
                ax, bx = a.box, b.box
                assert ax.x_max < bx.x_min or bx.x_max < ax.x_min or ax.y_max < bx.y_min or bx.y_max < ax.y_min


def test_placement_failure():
    cfg = SceneConfig(objects_per_image=(4, 4), object_size=(40, 40))
    with pytest.raises(PlacementError):
        generate_scene(0, cfg)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(object_size=(10, 80))
    with pytest.raises(ValueError):
        SceneConfig(num_classes=3)


# ---------------------------------------------------------------------------
# annotators

TRUTH = [LabeledBox(Box(20, 20, 40, 36), 0), LabeledBox(Box(5, 44, 17, 60), 1)]


def test_identity_profile():
    assert corrupt_annotations(TRUTH, ZERO, 64, 64, 3) == TRUTH


def test_miss_everything():
    assert corrupt_annotations(TRUTH, AnnotatorProfile(miss_rate=1.0), 64, 64, 3) == []


def test_jitter_matches_half_normal_mean():
    sigma = 2.0
    prof = AnnotatorProfile(jitter_sigma=sigma)
    truth = [LabeledBox(Box(20, 20, 40, 40), 0)]
    deltas = [abs(corrupt_annotations(truth, prof, 64, 64, s)[0].box.x_min - 20) for s in range(10_000)]
    # mean of |N(0, sigma^2)|
    assert np.mean(deltas) == pytest.approx(sigma * math.sqrt(2 / math.pi), abs=0.05)


def test_full_confusion_swaps_classes():
    out = corrupt_annotations(TRUTH, AnnotatorProfile(class_confusion=1.0), 64, 64, 1)
    assert [lb.class_id for lb in out] == [1, 0]


@settings(max_examples=200)
@given(st.integers(0, 2**32), st.floats(0, 20), st.floats(0, 1), st.floats(0, 3))
def test_corrupted_boxes_stay_valid(seed, jitter, miss, spurious):
    out = corrupt_annotations(TRUTH, AnnotatorProfile(jitter, miss, spurious, 0.5), 64, 64, seed)
    for lb in out:
        b = lb.box
        assert 0 <= b.x_min < b.x_max <= 64 and 0 <= b.y_min < b.y_max <= 64
        assert lb.class_id in (0, 1)


# ---------------------------------------------------------------------------
# corpora


def test_corpus_cardinality():
    c = build_corpus(10, rng_seed=1)
    assert len(c.dataset.images) == 10 and len(c.dataset.annotators) == 3 and len(c.truth) == 10
    assert len(c.ids("test")) == 2 and len(c.ids("train")) == 8


def test_split_is_exact_and_disjoint():
    ids = [f"img_{i:05d}" for i in range(250)]
    splits = assign_splits(ids, 0.2)
    test = {i for i, s in splits.items() if s == "test"}
    assert len(test) == 50
    assert assign_splits(list(reversed(ids)), 0.2) == splits


def test_truth_kept_out_of_dataset():
    c = build_corpus(6, rng_seed=2)
    assert "truth" not in c.dataset.annotators


def test_written_corpus_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        write_corpus(build_corpus(5, rng_seed=7), tmp_path / name)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 7
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_corpus_reloads(tmp_path):
    c = build_corpus(4, rng_seed=5)
    write_corpus(c, tmp_path)
    again = load_corpus(tmp_path)
    assert again.truth == c.truth
    assert again.dataset.annotations == c.dataset.annotations
    assert all(np.array_equal(again.pixels[i], c.pixels[i]) for i in c.pixels)


def test_noise_free_fusion_recovers_truth():
    c = build_corpus(20, profiles=(ZERO,) * 3, rng_seed=11)
    fd = fuse_dataset(c.dataset, WbfConfig())
    for image_id, truth in c.truth.items():
        fused = fd.fused[image_id]
        assert sorted(f.box.as_tuple() for f in fused) == sorted(t.box.as_tuple() for t in truth)
        assert all(f.confidence == 1.0 and f.support == 3 for f in fused)


def test_written_corpus_carries_its_config(tmp_path):
    c = build_corpus(3, rng_seed=4, test_fraction=0.34)
    write_corpus(c, tmp_path)
    again = load_corpus(tmp_path)
    assert (again.scene, again.profiles, again.seed, again.test_fraction) == (c.scene, c.profiles, 4, 0.34)
