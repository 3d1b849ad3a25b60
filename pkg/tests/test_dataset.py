"""Manifest ingestion, resizing, augmentation, synthetic scenes and crops."""

import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fedseg import dataset as D
from fedseg.errors import ConfigError, ManifestError
from fedseg.rng import make_rng


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_lines(path, objs):
    path.write_text("".join((o if isinstance(o, str) else json.dumps(o)) + "\n" for o in objs))
    return path


def rec(i, split="train"):
    return {"image_path": f"images/{i}.png", "mask_path": f"masks/{i}.png", "split": split}


# --------------------------------------------------------------------------- manifest


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert len(D.load_manifest(tmp_path / "m.jsonl")) == 0


def test_manifest_preserves_order(tmp_path):
    m = D.load_manifest(write_lines(tmp_path / "m.jsonl", [rec(2), rec(0, "test"), rec(1)]))
    assert [r.id for r in m.records] == ["2", "0", "1"]
    assert [r.id for r in m.split("test")] == ["0"]
    assert m.records[0].image_path == tmp_path / "images/2.png"


@pytest.mark.parametrize("lines, line_no, pattern", [
    ([rec(0), {**rec(1), "split": "val"}], 2, "unknown split"),
    ([rec(0), "{not json"], 2, "invalid JSON"),
    ([{"image_path": "a.png", "split": "train"}], 1, "mask_path"),
    ([rec(0), rec(0)], 2, "duplicate"),
    ([{**rec(0), "id": "x"}, {**rec(1), "id": "x"}], 2, "duplicate id"),
    (["[1, 2]"], 1, "object"),
])
def test_manifest_errors_name_the_line(tmp_path, lines, line_no, pattern):
    with pytest.raises(ManifestError, match=pattern) as info:
        D.load_manifest(write_lines(tmp_path / "m.jsonl", lines))
    assert info.value.line == line_no
    assert f"line {line_no}" in str(info.value)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_manifest(tmp_path / "nope.jsonl")


def test_check_files_reports_undecodable(tmp_path):
    write_png(tmp_path / "images/0.png", np.zeros((4, 4, 3), np.uint8))
    (tmp_path / "masks").mkdir()
    (tmp_path / "masks/0.png").write_bytes(b"not a png")
    m = D.load_manifest(write_lines(tmp_path / "m.jsonl", [rec(0)]))
    problems = m.check_files()
    assert len(problems) == 1 and "masks/0.png" in problems[0]


# --------------------------------------------------------------------------- loading


def test_mask_at_target_size_becomes_binary(tmp_path):
    mask = np.zeros((8, 8), np.uint8)
    mask[2:5, 1:7] = 255
    write_png(tmp_path / "images/0.png", np.full((8, 8, 3), 128, np.uint8))
    write_png(tmp_path / "masks/0.png", mask)
    s = D.load_sample(D.load_manifest(write_lines(tmp_path / "m.jsonl", [rec(0)])).records[0], 8, 8)
    np.testing.assert_array_equal(s.mask[..., 0], mask / 255)
    assert s.mask.shape == (8, 8, 3)
    assert s.image.max() <= 1 and s.image.dtype == np.float32


def test_downscale_keeps_mask_binary(tmp_path):
    rng = np.random.default_rng(0)
    mask = (rng.random((384, 384)) < 0.3).astype(np.uint8) * 255
    write_png(tmp_path / "images/0.png", rng.integers(0, 255, (384, 384, 3), dtype=np.uint8))
    write_png(tmp_path / "masks/0.png", mask)
    s = D.load_sample(D.load_manifest(write_lines(tmp_path / "m.jsonl", [rec(0)])).records[0], 192, 192)
    assert set(np.unique(s.mask)) <= {0.0, 1.0}
    assert s.image.shape == (192, 192, 3)


def test_nearest_resize_matches_index_oracle():
    board = np.indices((8, 8)).sum(axis=0) % 2
    out = D.resize_nearest(board, 4, 4)
    expected = np.array([[board[int((i + 0.5) * 2), int((j + 0.5) * 2)] for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(out, expected)


def test_undecodable_image_raises(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images/0.png").write_bytes(b"garbage")
    write_png(tmp_path / "masks/0.png", np.zeros((4, 4), np.uint8))
    r = D.load_manifest(write_lines(tmp_path / "m.jsonl", [rec(0)])).records[0]
    with pytest.raises(OSError):
        D.load_sample(r, 4, 4)


# --------------------------------------------------------------------------- augmentation


def const_sample(v, h=6, w=6):
    return D.ImageSample(np.full((h, w, 3), v, np.float32), np.zeros((h, w, 3), np.float32), f"c{v}")


def test_identity_augment():
    cfg = D.AugmentConfig(width_shift_range=0, height_shift_range=0,
                          featurewise_center=False, featurewise_std_normalization=False)
    s = const_sample(0.3)
    out = D.augment(s, cfg, make_rng(0))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_centering_two_constant_images():
    samples = [const_sample(0.2), const_sample(0.8)]
    stats = D.compute_stats(samples)
    cfg = D.AugmentConfig(featurewise_std_normalization=False)
    centered = [D.standardize(s, cfg, stats) for s in samples]
    assert np.abs(np.mean([c.image for c in centered], axis=(0, 1, 2))).max() < 1e-6


def test_standardized_training_set_moments():
    rng = make_rng(2)
    samples = D.generate_synthetic(12, 32, 32, rng)
    stats = D.compute_stats(samples)
    out = np.stack([D.standardize(s, D.AugmentConfig(), stats).image for s in samples])
    assert np.abs(out.mean(axis=(0, 1, 2))).max() < 1e-5
    assert np.abs(out.std(axis=(0, 1, 2)) - 1).max() < 1e-3


def test_standardize_needs_stats():
    with pytest.raises(ConfigError):
        D.standardize(const_sample(0.5), D.AugmentConfig(), None)


def test_shift_moves_image_and_mask_together():
    s = D.generate_synthetic(1, 32, 32, make_rng(4))[0]
    cfg = D.AugmentConfig(featurewise_center=False, featurewise_std_normalization=False)
    out = D.augment(s, cfg, make_rng(0), offset=(3, 0))
    np.testing.assert_array_equal(out.mask[3:], s.mask[:-3])
    np.testing.assert_array_equal(out.image[3:], s.image[:-3])
    assert not out.mask[:3].any() and not out.image[:3].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_shift_is_paired_and_binary(seed):
    s = D.generate_synthetic(1, 16, 16, make_rng(seed))[0]
    marker = D.ImageSample(s.mask.copy(), s.mask, s.id)  # image equal to mask exposes any mismatch
    cfg = D.AugmentConfig(width_shift_range=0.5, height_shift_range=0.5,
                          featurewise_center=False, featurewise_std_normalization=False)
    out = D.augment(marker, cfg, make_rng(seed, 1))
    np.testing.assert_array_equal(out.image, out.mask)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        D.AugmentConfig(width_shift_range=0.6).validate()
    with pytest.raises(ConfigError):
        D.AugmentConfig(copies=-1).validate()


def test_prepare_training_set_size_and_determinism():
    samples = D.generate_synthetic(5, 16, 16, make_rng(0))
    stats = D.compute_stats(samples)
    a = D.prepare_training_set(samples, D.AugmentConfig(copies=2), stats, make_rng(1))
    b = D.prepare_training_set(samples, D.AugmentConfig(copies=2), stats, make_rng(1))
    assert len(a) == 15
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))


def test_stats_json_round_trip(tmp_path):
    stats = D.compute_stats(D.generate_synthetic(3, 16, 16, make_rng(0)))
    stats.save(tmp_path / "s.json")
    assert D.DatasetStats.load(tmp_path / "s.json") == stats


# --------------------------------------------------------------------------- synthetic


def test_axis_aligned_plate_mask_sum():
    s = D.render_plate(32, 48, 6, 20, 0.0, (16.0, 24.0), make_rng(0))
    assert s.mask.sum() == 6 * 20 * 3
    ys, xs = np.nonzero(s.mask[..., 0])
    assert ys.max() - ys.min() + 1 == 6 and xs.max() - xs.min() + 1 == 20


def test_plate_too_large_rejected():
    with pytest.raises(ValueError):
        D.render_plate(16, 16, 10, 20, 0.0, (8.0, 8.0), make_rng(0))


def test_generator_contract():
    samples = D.generate_synthetic(40, 64, 64, make_rng(7))
    for s in samples:
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        area = s.mask[..., 0].mean()
        assert 0.02 <= area <= 0.30
        assert 0 <= s.image.min() and s.image.max() <= 1
    assert len({s.id for s in samples}) == 40


def test_generator_rotates_plates():
    samples = D.generate_synthetic(20, 64, 64, make_rng(8))
    # a rotated rectangle fills less than its bounding box
    fills = []
    for s in samples:
        ys, xs = np.nonzero(s.mask[..., 0])
        fills.append(len(ys) / ((np.ptp(ys) + 1) * (np.ptp(xs) + 1)))
    assert min(fills) < 0.9


def test_generator_determinism_and_errors():
    a = D.generate_synthetic(3, 32, 32, make_rng(5))
    b = D.generate_synthetic(3, 32, 32, make_rng(5))
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
               for x, y in zip(a, b))
    with pytest.raises(ValueError):
        D.generate_synthetic(0, 32, 32, make_rng(0))


def test_write_synthetic_round_trip(tmp_path):
    samples = D.generate_synthetic(3, 32, 32, make_rng(1))
    manifest = D.write_synthetic(tmp_path, samples, ["train", "train", "test"])
    m = D.load_manifest(manifest)
    assert [r.split for r in m.records] == ["train", "train", "test"]
    loaded = D.load_split(m, "train", 32, 32)
    np.testing.assert_array_equal(loaded[0].mask, samples[0].mask)
    assert np.abs(loaded[0].image - samples[0].image).max() <= 0.5 / 255 + 1e-6


# --------------------------------------------------------------------------- crops


def flood_fill_components(mask):
    """Breadth-first 4-connected labelling; list of (size, bbox) in scan order."""
    seen = np.zeros(mask.shape, bool)
    comps = []
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        queue, cells = deque([(y0, x0)]), []
        seen[y0, x0] = True
        while queue:
            y, x = queue.popleft()
            cells.append((y, x))
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        ys, xs = zip(*cells)
        comps.append((len(cells), (min(ys), min(xs), max(ys), max(xs))))
    return comps


def flood_fill_largest(mask):
    comps = flood_fill_components(mask)
    top = max(size for size, _ in comps)
    return next(box for size, box in comps if size == top)


def test_crop_of_two_components(tmp_path):
    s = D.generate_synthetic(1, 32, 32, make_rng(0))[0]
    mask = np.zeros((32, 32), np.float32)
    mask[2:6, 3:13] = 1  # 40 pixels
    mask[20:22, 20:25] = 1  # 10 pixels
    assert D.largest_component_bbox(mask) == flood_fill_largest(mask) == (2, 3, 5, 12)
    out = D.export_crops([s], [mask], tmp_path)
    crop = np.asarray(Image.open(out.files[0]))
    np.testing.assert_array_equal(crop, D.to_uint8(s.image[2:6, 3:13]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_component_bbox_matches_flood_fill(seed):
    mask = np.random.default_rng(seed).random((12, 12)) < 0.35
    if not mask.any():
        return
    comps = flood_fill_components(mask)
    top = max(size for size, _ in comps)
    assert D.largest_component_bbox(mask.astype(float)) in {box for size, box in comps if size == top}


def test_full_mask_crop_is_whole_image(tmp_path):
    s = D.generate_synthetic(1, 16, 16, make_rng(0))[0]
    out = D.export_crops([s], [np.ones((16, 16, 3))], tmp_path)
    np.testing.assert_array_equal(np.asarray(Image.open(out.files[0])), D.to_uint8(s.image))


def test_empty_mask_writes_no_crop(tmp_path):
    s = D.generate_synthetic(1, 16, 16, make_rng(0))[0]
    out = D.export_crops([s], [np.zeros((16, 16, 3))], tmp_path)
    assert out.files == [] and len(out.report) == 1
    assert (tmp_path / "crops_report.txt").read_text().count("\n") == 1
