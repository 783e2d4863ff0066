import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dagan.data import (AugmentParams, DatasetError, LabeledImageSet, apply_augment, apply_case_split,
                        decode_container, draw_augment_params, emnist_profile, encode_container, load_container,
                        make_glyph_dataset, omniglot_profile, pack_dataset, split_cases, split_domains,
                        standard_augment, vggface_profile)
from dagan.data.splits import SplitSpec


def _write_folders(root, classes=2, per_class=3, size=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    for c in range(classes):
        d = root / f"class{c}"
        d.mkdir(parents=True)
        for i in range(per_class):
            Image.fromarray(rng.integers(0, 256, size=size, dtype=np.uint8)).save(d / f"{i}.png")
    return root


def _synthetic(n_classes, per_class, size=4, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledImageSet([rng.random((per_class, size, size, 1)) for _ in range(n_classes)])


def test_pack_payload_size_and_round_trip(tmp_path):
    src = _write_folders(tmp_path / "src")
    ds = pack_dataset(src, tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:4] == b"DGAN"
    header = 24 + 2 * 12 + 4 + len("class0\nclass1")
    assert len(raw) - header == 2 * 3 * 64 * 4
    back = load_container(tmp_path / "d.bin")
    assert back.class_names == ["class0", "class1"]
    for a, b in zip(ds.images, back.images):
        np.testing.assert_array_equal(a, b)
    img = np.asarray(Image.open(src / "class1" / "2.png"), dtype=np.float32) / 255.0
    np.testing.assert_array_equal(back.images[1][2, :, :, 0], img)


def test_pack_is_deterministic_and_idempotent(tmp_path):
    src = _write_folders(tmp_path / "src")
    pack_dataset(src, tmp_path / "a.bin")
    pack_dataset(src, tmp_path / "b.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw == (tmp_path / "b.bin").read_bytes()
    assert encode_container(decode_container(raw)) == raw


def test_pack_errors_name_the_culprit(tmp_path):
    src = _write_folders(tmp_path / "src")
    (src / "empty").mkdir()
    with pytest.raises(DatasetError, match="empty"):
        pack_dataset(src, tmp_path / "x.bin")
    src2 = _write_folders(tmp_path / "src2")
    Image.fromarray(np.zeros((9, 8), dtype=np.uint8)).save(src2 / "class1" / "odd.png")
    with pytest.raises(DatasetError, match="odd.png"):
        pack_dataset(src2, tmp_path / "y.bin")


def test_pack_resizes_by_area_average(tmp_path):
    d = tmp_path / "src" / "a"
    d.mkdir(parents=True)
    img = np.zeros((4, 4), dtype=np.uint8)
    img[:2, :2] = 255
    Image.fromarray(img).save(d / "0.png")
    ds = pack_dataset(tmp_path / "src", tmp_path / "o.bin", size=(2, 2))
    np.testing.assert_allclose(ds.images[0][0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_dataset_rejects_out_of_range_pixels():
    with pytest.raises(DatasetError):
        LabeledImageSet([np.full((2, 2, 2, 1), 1.5)])


def test_omniglot_profile_sizes():
    ds = _synthetic(1623, 2, size=2)
    out = split_domains(ds, omniglot_profile(seed=3))
    assert [len(out.classes(d)) for d in ("source", "validation", "target")] == [1200, 212, 211]


def test_emnist_profile_sizes_and_cap():
    ds = _synthetic(48, 120, size=2)
    out = split_domains(ds, emnist_profile(seed=0, class_count=48))
    assert [len(out.classes(d)) for d in ("source", "validation", "target")] == [35, 7, 6]
    assert all(len(im) == 100 for im in out.images)


def test_vggface_profile_sizes():
    ds = _synthetic(2396, 2, size=1)
    out = split_domains(ds, vggface_profile())
    assert [len(out.classes(d)) for d in ("source", "target", "validation")] == [1802, 498, 96]


def test_split_is_seeded_disjoint_and_exhaustive():
    ds = LabeledImageSet([np.full((2, 1, 1, 1), c / 20) for c in range(20)],
                         class_names=[f"c{c}" for c in range(20)])
    spec = SplitSpec("toy", seed=5, boundaries=(10, 15))
    a, b = split_domains(ds, spec), split_domains(ds, spec)
    assert a.class_names == b.class_names and a.split_tags == b.split_tags
    assert sorted(a.class_names) == sorted(ds.class_names)
    assert a.class_names != ds.class_names


def test_split_boundary_errors():
    with pytest.raises(ValueError):
        SplitSpec("x", boundaries=(5, 5))
    with pytest.raises(DatasetError):
        split_domains(_synthetic(10, 2, size=1), SplitSpec("x", boundaries=(5, 10)))


@pytest.mark.parametrize("n,train,expected", [(20, 5, (5, 3, 2, 10)), (10, 5, (5, 3, 2, 0))])
def test_case_split_counts(n, train, expected):
    tags = split_cases(n, train, np.random.default_rng(0))
    assert tuple(int(np.sum(tags == t)) for t in ("train", "val", "test", "unused")) == expected


def test_case_split_insufficient_images():
    with pytest.raises(DatasetError):
        split_cases(19, 15, np.random.default_rng(0))


def test_case_split_is_randomised_per_run_and_seedable():
    a = split_cases(20, 5, np.random.default_rng(1))
    b = split_cases(20, 5, np.random.default_rng(2))
    c = split_cases(20, 5, np.random.default_rng(1))
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_apply_case_split_audit():
    ds = apply_case_split(_synthetic(3, 12), 5, np.random.default_rng(0))
    ds.audit()
    for c in range(3):
        assert len(ds.cases(c, "test")) == 2 and len(ds.cases(c, "val")) == 3


def test_identity_augmentation():
    img = np.random.default_rng(0).random((6, 6, 1)).astype(np.float32)
    out = apply_augment(img, AugmentParams(False, None, 0), np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


def test_half_turn_twice_is_identity():
    img = np.random.default_rng(0).random((5, 5, 1)).astype(np.float32)
    p = AugmentParams(False, None, 2)
    np.testing.assert_array_equal(apply_augment(apply_augment(img, p, None), p, None), img)


def test_shift_zero_fills():
    img = np.ones((4, 4, 1), dtype=np.float32)
    out = apply_augment(img, AugmentParams(False, (1, -2), 0), None)
    assert out[0].sum() == 0 and out[:, 2:].sum() == 0 and out[1:, :2].min() == 1


def test_augment_range_over_ten_thousand_trials():
    rng = np.random.default_rng(0)
    lo, hi = np.inf, -np.inf
    for _ in range(10_000):
        img = rng.random((4, 4, 1)).astype(np.float32)
        out = standard_augment(img, rng)
        lo, hi = min(lo, out.min()), max(hi, out.max())
    assert lo >= 0.0 and hi <= 1.0


def test_augment_probabilities():
    rng = np.random.default_rng(0)
    draws = [draw_augment_params(rng) for _ in range(4000)]
    assert abs(np.mean([d.noise for d in draws]) - 0.5) < 0.04
    assert abs(np.mean([d.shift is not None for d in draws]) - 0.5) < 0.04
    counts = np.bincount([d.rotation_k for d in draws], minlength=4)
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.03)
    assert all(max(abs(s) for s in d.shift) <= 2 for d in draws if d.shift)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 9))
def test_augment_preserves_shape_and_range(seed, size):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size, 2)).astype(np.float32)
    out = standard_augment(img, rng)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_pipeline_is_bitwise_reproducible(tmp_path):
    def run():
        ds = make_glyph_dataset(6, 8, size=16, seed=2)
        ds = split_domains(ds, SplitSpec("g", seed=1, boundaries=(3, 4)))
        rng = np.random.default_rng(9)
        return encode_container(ds), np.stack([standard_augment(im, rng) for im in ds.images[0]])

    (a1, b1), (a2, b2) = run(), run()
    assert a1 == a2
    np.testing.assert_array_equal(b1, b2)


def test_glyphs_are_class_deterministic():
    a = make_glyph_dataset(3, 4, size=16, seed=1)
    b = make_glyph_dataset(5, 4, size=16, seed=1)
    for c in range(3):
        np.testing.assert_array_equal(a.images[c], b.images[c])
    assert a.images[0].min() >= 0 and a.images[0].max() <= 1
