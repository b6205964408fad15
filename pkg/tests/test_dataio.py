"""Dataset construction, transforms, mismatch pairing, ingestion, persistence."""

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drailab import dataio
from drailab.dataio import (LabeledImageSet, MismatchSampler, SyntheticSpec, TRANSFORMS,
                            apply_transform, make_synthetic_dataset, mismatch_pair,
                            preprocess_ham, preprocess_lidc, sample_transform)
from drailab.errors import ConfigurationError, IngestionError

SMALL = dict(train_per_cell=2, test_per_cell=1, query_per_cell=1, seed=11)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def test_zero_count_rejected():
    with pytest.raises(ConfigurationError):
        make_synthetic_dataset(SyntheticSpec(train_per_cell=0))


def test_degenerate_ranges_rejected():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(center_jitter=0.0).validate()
    with pytest.raises(ConfigurationError):
        SyntheticSpec(gradient_amplitude=0.0).validate()
    with pytest.raises(ConfigurationError):
        SyntheticSpec(image_size=40).validate()
    with pytest.raises(ConfigurationError):
        SyntheticSpec(size_px=(5, 8, 40)).validate()


def test_disk_pixel_count_matches_brute_force_oracle():
    spec = SyntheticSpec(noise_max=0.0)
    rng = np.random.default_rng(0)
    cy, cx, r = 31.3, 33.7, float(spec.size_px[1])  # medium disk, radius 8
    img = dataio.render_synthetic_item(spec, 0, 1, cy, cx, 0, 0.3, 0.0, rng)
    rendered = int((img[:, :, 0] > 0).sum())
    yy, xx = np.mgrid[0:64, 0:64]
    oracle = int(((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).sum())
    assert rendered == oracle
    assert abs(rendered - np.pi * r * r) <= 4


def test_disk_pixel_count_lattice_fluctuation_bounded():
    # over random centers the count equals the oracle exactly and stays within
    # the lattice fluctuation band around the ideal area
    spec = SyntheticSpec(noise_max=0.0)
    rng = np.random.default_rng(1)
    yy, xx = np.mgrid[0:64, 0:64]
    for _ in range(20):
        cy, cx = 20 + 24 * rng.random(), 20 + 24 * rng.random()
        img = dataio.render_synthetic_item(spec, 0, 1, cy, cx, 0, 0.0, 0.0, rng)
        rendered = int((img[:, :, 0] > 0).sum())
        oracle = int(((yy - cy) ** 2 + (xx - cx) ** 2 <= 64.0).sum())
        assert rendered == oracle
        assert abs(rendered - np.pi * 64) <= 8


def test_synthetic_determinism_bit_identical():
    a = make_synthetic_dataset(SyntheticSpec(**SMALL))
    b = make_synthetic_dataset(SyntheticSpec(**SMALL))
    for split in a.splits:
        assert np.array_equal(a.splits[split].images, b.splits[split].images)
        assert np.array_equal(a.splits[split].conditions, b.splits[split].conditions)
        assert np.array_equal(a.splits[split].attributions, b.splits[split].attributions)


def test_synthetic_invariants():
    ds = make_synthetic_dataset(SyntheticSpec(**SMALL))
    train = ds.splits["train"]
    assert train.images.shape == (18, 64, 64, 1)
    assert train.images.min() >= -1.0 and train.images.max() <= 1.0
    # one-hot groups each sum to exactly 1
    assert np.array_equal(train.conditions[:, :3].sum(axis=1), np.ones(18))
    assert np.array_equal(train.conditions[:, 3:].sum(axis=1), np.ones(18))
    # attribution records class and size consistently with the conditioning
    assert np.array_equal(train.attributions[:, 0], train.conditions[:, :3].argmax(axis=1))
    assert np.array_equal(train.attributions[:, 1], train.conditions[:, 3:].argmax(axis=1))


def test_shape_classes_render_distinctly():
    spec = SyntheticSpec(noise_max=0.0)
    rng = np.random.default_rng(0)
    imgs = [dataio.render_synthetic_item(spec, k, 2, 31.5, 31.5, 0, 0.0, 0.0, rng)
            for k in range(3)]
    masks = [im[:, :, 0] > 0 for im in imgs]
    assert not np.array_equal(masks[0], masks[1])
    assert not np.array_equal(masks[1], masks[2])


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def test_identity_transform_bit_identical():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(8, 8, 1)).astype(np.float32)
    assert np.array_equal(apply_transform(x, "identity"), x)


def test_rot90_small_oracle():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    out = apply_transform(x, "rot90")
    assert np.array_equal(out[:, :, 0], np.array([[2.0, 4.0], [1.0, 3.0]]))


def test_unknown_transform_rejected():
    with pytest.raises(ConfigurationError):
        apply_transform(np.zeros((2, 2, 1)), "rot45")


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["hflip", "vflip", "rot180"]), st.integers(0, 10 ** 6))
def test_flips_are_involutions(tid, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(6, 6, 2)).astype(np.float32)
    assert np.array_equal(apply_transform(apply_transform(x, tid), tid), x)


def test_rot90_composition_identity():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(5, 5, 1)).astype(np.float32)
    out = x
    for _ in range(4):
        out = apply_transform(out, "rot90")
    assert np.array_equal(out, x)


def test_sample_transform_uniform_never_identity():
    rng = np.random.default_rng(7)
    draws = [sample_transform(rng) for _ in range(100_000)]
    assert "identity" not in draws
    for tid in TRANSFORMS[1:]:
        freq = draws.count(tid) / len(draws)
        assert abs(freq - 0.2) < 0.01
    rng2 = np.random.default_rng(7)
    assert draws[:100] == [sample_transform(rng2) for _ in range(100)]


def test_transform_leaves_conditioning_unchanged():
    ds = make_synthetic_dataset(SyntheticSpec(**SMALL))
    train = ds.splits["train"]
    cond_before = train.conditions.copy()
    for i in range(len(train)):
        apply_transform(train.images[i], TRANSFORMS[1 + i % 5])
    assert np.array_equal(train.conditions, cond_before)


# ---------------------------------------------------------------------------
# mismatch pairing
# ---------------------------------------------------------------------------

def _label_batch(labels):
    conds = np.asarray(labels, dtype=np.float32)[:, None]
    images = np.arange(len(labels), dtype=np.float32)[:, None, None, None] * np.ones((1, 2, 2, 1), np.float32)
    return images, conds


def test_mismatch_batch_of_two_swaps():
    images, conds = _label_batch([0.0, 1.0])
    mis, valid = mismatch_pair(images, conds)
    assert valid.all()
    assert mis[0, 0, 0, 0] == 1.0 and mis[1, 0, 0, 0] == 0.0


def test_mismatch_batch_of_one_rejected():
    images, conds = _label_batch([0.0])
    with pytest.raises(ConfigurationError):
        mismatch_pair(images, conds)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=17), st.integers(0, 10 ** 6))
def test_mismatch_partner_labels_differ(labels, seed):
    images, conds = _label_batch([float(v) for v in labels])
    mis, valid = mismatch_pair(images, conds, np.random.default_rng(seed))
    for i in np.nonzero(valid)[0]:
        partner = int(mis[i, 0, 0, 0])
        assert labels[partner] != labels[i]


def test_mismatch_homogeneous_uses_reservoir(caplog):
    sampler = MismatchSampler(np.random.default_rng(0))
    images, conds = _label_batch([0.0, 0.0, 1.0, 1.0])
    sampler(images, conds)  # seeds the reservoir with both labels
    homog_images, homog_conds = _label_batch([2.0, 2.0])
    with caplog.at_level(logging.WARNING):
        mis, valid = sampler(homog_images, homog_conds)
    assert "label-homogeneous" in caplog.text
    assert valid.all()
    assert all(int(v) in (0, 1, 2, 3) for v in mis[:, 0, 0, 0])


def test_mismatch_homogeneous_empty_reservoir_skips(caplog):
    sampler = MismatchSampler(np.random.default_rng(0))
    images, conds = _label_batch([5.0, 5.0])
    with caplog.at_level(logging.WARNING):
        _, valid = sampler(images, conds)
    assert not valid.any()


# ---------------------------------------------------------------------------
# CT nodule ingestion
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lidc_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("lidc_src")
    (root / "vols").mkdir()
    (root / "segs").mkdir()
    rng = np.random.default_rng(0)

    def seg(radius_px):
        mask = np.zeros((24, 24), dtype=np.uint8)
        yy, xx = np.mgrid[0:24, 0:24]
        mask[(yy - 12) ** 2 + (xx - 12) ** 2 <= radius_px ** 2] = 1
        return mask

    cases = []
    nodule_specs = [
        # (case, malignancy ratings, size radius px) -> radius r gives diameter ~2r
        (100, [4, 5, 4], 3.5),       # train, malignant, size 7
        (898, [1, 2, 1], 2.0),       # train, benign
        (899, [5, 4, 5, 4], 4.0),    # test
        (950, [3, 3, 3], 3.0),       # query (median 3)
        (40, [2, 2], 2.0),           # dropped: only 2 radiologists
    ]
    for i, (case, mal, rad) in enumerate(nodule_specs):
        vol = (rng.normal(-600, 150, size=(20, 24, 24))).astype(np.float32)
        vol[8:12, 8:16, 8:16] = rng.normal(50, 30, size=(4, 8, 8))
        vol_path = f"vols/case{i}.npy"
        np.save(root / vol_path, vol)
        seg_path = f"segs/seg{i}.npy"
        np.save(root / seg_path, seg(rad))
        readers = len(mal)
        ratings = {"malignancy": mal,
                   "calcification": [3] * readers, "margin": [2 + i % 2] * readers,
                   "sphericity": [3] * readers, "subtlety": [2] * readers,
                   "texture": [4] * readers,
                   "lobulation": [1] * readers, "spiculation": [1] * readers}
        cases.append({"case_index": case, "volume": vol_path,
                      "nodules": [{"id": f"n{i}", "center": [10, 12, 12],
                                   "ratings": ratings, "segmentation": seg_path}]})
    manifest = {"profile": "lidc", "spacing_mm": 1.0, "cases": cases}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


@pytest.fixture(scope="module")
def lidc_bundle(lidc_dir):
    return preprocess_lidc(lidc_dir, resample_to=64)


def test_lidc_conditioning_is_17_dim(lidc_bundle):
    train = lidc_bundle.splits["train"]
    assert train.conditions.shape[1] == 17
    assert lidc_bundle.splits["train"].attributions.shape[1] == 18
    # six characteristic pairs each one-hot, plus one size bin
    for row in train.conditions:
        for k in range(6):
            assert row[2 * k] + row[2 * k + 1] == 1.0
        assert row[12:].sum() == 1.0


def test_lidc_median3_goes_to_query(lidc_bundle):
    assert len(lidc_bundle.splits["query"]) == 1
    assert len(lidc_bundle.splits["train"]) == 2
    assert len(lidc_bundle.splits["test"]) == 1


def test_lidc_case_boundary(lidc_bundle):
    # case 898 -> train, 899 -> test: verified via the split sizes above plus
    # the malignancy one-hots (train holds one benign and one malignant item)
    train = lidc_bundle.splits["train"]
    assert set(train.conditions[:, :2].argmax(axis=1)) == {0, 1}


def test_lidc_size_bin_for_7mm():
    onehot = dataio._size_onehot(7.0)
    assert np.array_equal(onehot, [0, 0, 1, 0, 0])
    assert np.array_equal(dataio._size_onehot(1.0), [1, 0, 0, 0, 0])
    assert np.array_equal(dataio._size_onehot(12.0), [0, 0, 0, 0, 1])
    assert np.array_equal(dataio._size_onehot(55.0), [0, 0, 0, 0, 1])


def test_lidc_splits_are_disjoint_and_complete(lidc_bundle):
    total = sum(len(s) for s in lidc_bundle.splits.values())
    assert total == 4  # 5 nodules minus the 2-radiologist one


def test_lidc_missing_ratings_skipped(tmp_path, caplog):
    vol = np.zeros((8, 8, 8), dtype=np.float32)
    np.save(tmp_path / "v.npy", vol)
    np.save(tmp_path / "s.npy", np.ones((4, 4), np.uint8))
    ok_ratings = {ch: [3, 3, 3] for ch in dataio.LIDC_CHARACTERISTICS}
    ok_ratings["malignancy"] = [4, 4, 4]
    manifest = {"cases": [{"case_index": 1, "volume": "v.npy", "nodules": [
        {"id": "a", "center": [4, 4, 4], "ratings": {}, "segmentation": "s.npy"},
        {"id": "b", "center": [4, 4, 4], "ratings": ok_ratings, "segmentation": "s.npy"},
    ]}]}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    with caplog.at_level(logging.WARNING):
        bundle = preprocess_lidc(tmp_path / "m.json", resample_to=64)
    assert "missing ratings" in caplog.text
    assert len(bundle.splits["train"]) == 1


def test_lidc_unreadable_volume_raises(tmp_path):
    manifest = {"cases": [{"case_index": 1, "volume": "missing.npy", "nodules": []}]}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    with pytest.raises(IngestionError):
        preprocess_lidc(tmp_path / "m.json", resample_to=64)


# ---------------------------------------------------------------------------
# dermatoscopy ingestion
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ham_dir(tmp_path_factory):
    from PIL import Image as PILImage

    root = tmp_path_factory.mktemp("ham_src")
    rng = np.random.default_rng(0)
    items = []
    specs = [("nv", "train"), ("nv", "test"), ("mel", "train"), ("bkl", "train"),
             ("bkl", "test"), ("df", "train")]
    for i, (lesion, split) in enumerate(specs):
        arr = rng.integers(0, 255, size=(80, 80, 3), dtype=np.uint8)
        path = f"img{i}.png"
        PILImage.fromarray(arr).save(root / path)
        items.append({"path": path, "lesion_type": lesion, "center": [40, 40],
                      "split": split})
    (root / "manifest.json").write_text(json.dumps({"items": items}))
    return root / "manifest.json"


def test_ham_excludes_unlisted_classes(ham_dir, caplog):
    with caplog.at_level(logging.WARNING):
        bundle = preprocess_ham(ham_dir)
    assert "df" in caplog.text
    # train: nv(1) + mel(1+3) + bkl(1+3) = 9; test: nv + bkl = 2, never augmented
    assert len(bundle.splits["train"]) == 9
    assert len(bundle.splits["test"]) == 2
    assert bundle.splits["train"].conditions.shape[1] == 3


def test_ham_augmented_copies_are_flips(ham_dir):
    bundle = preprocess_ham(ham_dir)
    train = bundle.splits["train"]
    mel_rows = np.nonzero(train.conditions[:, 1] == 1)[0]
    assert len(mel_rows) == 4
    base = train.images[mel_rows[0]]
    copies = [train.images[i] for i in mel_rows[1:]]
    expected = {t: apply_transform(base, t) for t in ("hflip", "vflip", "rot180")}
    for copy in copies:
        assert any(np.array_equal(copy, e) for e in expected.values())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    ds = make_synthetic_dataset(SyntheticSpec(**SMALL))
    out = dataio.save_dataset(ds, tmp_path / "ds")
    loaded = dataio.load_dataset(out)
    assert loaded.profile == "synthetic"
    assert set(loaded.splits) == set(ds.splits)
    for split in ds.splits:
        a, b = ds.splits[split], loaded.splits[split]
        assert np.array_equal(a.conditions, b.conditions)
        assert np.array_equal(a.attributions, b.attributions)
        # images pass through 16-bit quantization
        assert np.abs(a.images - b.images).max() < 1e-4


def test_rebuild_writes_identical_index(tmp_path):
    ds1 = make_synthetic_dataset(SyntheticSpec(**SMALL))
    ds2 = make_synthetic_dataset(SyntheticSpec(**SMALL))
    dataio.save_dataset(ds1, tmp_path / "a")
    dataio.save_dataset(ds2, tmp_path / "b")
    assert (tmp_path / "a/index.csv").read_bytes() == (tmp_path / "b/index.csv").read_bytes()
    img = "images/item_000000.png"
    assert (tmp_path / "a" / img).read_bytes() == (tmp_path / "b" / img).read_bytes()


def test_labeled_image_set_validation():
    with pytest.raises(ConfigurationError):
        LabeledImageSet(np.zeros((2, 4, 4, 1)), np.zeros((3, 2)), np.zeros((2, 2)), "train")
    with pytest.raises(ConfigurationError):
        LabeledImageSet(np.full((1, 4, 4, 1), 2.0), np.zeros((1, 2)), np.zeros((1, 2)), "train")
