import json
import time

import numpy as np
import pytest

from posenas.data import (
    KeypointSample,
    decode_keypoints,
    heatmap_targets,
    load_annotations,
    make_arrays,
    pck,
    save_dataset,
    synth_dataset,
)
from posenas.fileio import FormatError, read_image, write_pgm, write_ppm


def test_synth_deterministic_byte_identical():
    a = synth_dataset(5, 64, 8, seed=42)
    b = synth_dataset(5, 64, 8, seed=42)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes()
        np.testing.assert_array_equal(s.keypoints, t.keypoints)
        assert s.bbox == t.bbox


def test_synth_different_seeds_differ():
    a = synth_dataset(1, 64, 8, seed=0)[0]
    b = synth_dataset(1, 64, 8, seed=1)[0]
    assert a.image.tobytes() != b.image.tobytes()


def test_synth_keypoints_in_bounds():
    for s in synth_dataset(30, 48, 6, seed=3):
        s.validate()
        for x, y, v in s.keypoints:
            assert v == 1.0
            assert 0 <= x < 48 and 0 <= y < 48


def test_synth_rejects_too_small_images():
    with pytest.raises(ValueError, match="too small"):
        synth_dataset(1, 12, 8, seed=0)
    with pytest.raises(ValueError):
        synth_dataset(0, 64, 8, seed=0)
    with pytest.raises(ValueError):
        synth_dataset(1, 64, 1, seed=0)


def test_synth_generation_speed():
    t0 = time.perf_counter()
    synth_dataset(200, 64, 8, seed=7)
    assert time.perf_counter() - t0 < 10.0


def test_dataset_round_trip(tmp_path):
    samples = synth_dataset(4, 32, 4, seed=9)
    path = save_dataset(samples, tmp_path / "ds")
    loaded = load_annotations(path)
    assert len(loaded) == len(samples)
    for s, t in zip(samples, loaded):
        assert s.ident == t.ident
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.keypoints, t.keypoints)
        assert s.bbox == pytest.approx(t.bbox)


def _write_record(tmp_path, mutate=None):
    samples = synth_dataset(1, 32, 4, seed=1)
    path = save_dataset(samples, tmp_path / "ds")
    if mutate is not None:
        lines = open(path).read().splitlines()
        rec = json.loads(lines[0])
        rec = mutate(rec)
        with open(path, "w") as fh:
            fh.write(rec if isinstance(rec, str) else json.dumps(rec))
            fh.write("\n")
    return path


def test_load_rejects_out_of_bounds_keypoint(tmp_path):
    def mutate(rec):
        rec["keypoints"][0] = [99.0, 5.0, 1]
        return rec

    with pytest.raises(FormatError, match="outside"):
        load_annotations(_write_record(tmp_path, mutate))


def test_load_accepts_invisible_out_of_bounds(tmp_path):
    def mutate(rec):
        rec["keypoints"][0] = [99.0, 5.0, 0]
        return rec

    loaded = load_annotations(_write_record(tmp_path, mutate))
    assert loaded[0].keypoints[0, 2] == 0.0


def test_load_rejects_bad_bbox(tmp_path):
    def mutate(rec):
        rec["bbox"] = [-1.0, 0.0, 10.0, 10.0]
        return rec

    with pytest.raises(FormatError, match="bbox"):
        load_annotations(_write_record(tmp_path, mutate))


def test_load_rejects_bad_visibility(tmp_path):
    def mutate(rec):
        rec["keypoints"][0][2] = 2
        return rec

    with pytest.raises(FormatError, match="visibility"):
        load_annotations(_write_record(tmp_path, mutate))


def test_load_rejects_missing_image(tmp_path):
    def mutate(rec):
        rec["image"] = "nope.pgm"
        return rec

    with pytest.raises(FormatError, match="not found"):
        load_annotations(_write_record(tmp_path, mutate))


def test_load_rejects_malformed_json_with_line(tmp_path):
    path = _write_record(tmp_path)
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(FormatError) as exc:
        load_annotations(path)
    assert ":2:" in str(exc.value) or ":2" in str(exc.value)


def test_load_rejects_missing_keys(tmp_path):
    def mutate(rec):
        del rec["bbox"]
        return rec

    with pytest.raises(FormatError, match="bbox"):
        load_annotations(_write_record(tmp_path, mutate))


def test_load_empty_file_errors(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(FormatError, match="no samples"):
        load_annotations(path)


from hypothesis import given, settings
from hypothesis import strategies as st


@settings(max_examples=40, deadline=None)
@given(
    kp_index=st.integers(0, 3),
    dx=st.floats(-80, 120),
    dy=st.floats(-80, 120),
    visible=st.booleans(),
)
def test_loader_rejects_exactly_invariant_violations(tmp_path_factory, kp_index, dx, dy, visible):
    # a record is rejected iff it violates the sample invariants:
    # a *visible* keypoint outside the 32x32 image bounds
    tmp_path = tmp_path_factory.mktemp("prop")
    samples = synth_dataset(1, 32, 4, seed=7)
    path = save_dataset(samples, tmp_path / "ds")
    lines = open(path).read().splitlines()
    rec = json.loads(lines[0])
    rec["keypoints"][kp_index] = [dx, dy, 1 if visible else 0]
    with open(path, "w") as fh:
        fh.write(json.dumps(rec) + "\n")
    in_bounds = 0 <= dx < 32 and 0 <= dy < 32
    violates = visible and not in_bounds
    if violates:
        with pytest.raises(FormatError):
            load_annotations(path)
    else:
        loaded = load_annotations(path)
        assert loaded[0].keypoints[kp_index, 2] == (1.0 if visible else 0.0)


# ---------------------------------------------------------------------------
# heatmaps


def _sample_with_kp(x, y, v=1.0, size=64, k=2):
    kps = np.array([[x, y, v], [size / 2, size / 2, 1.0]][:k])
    return KeypointSample(
        ident="t",
        image=np.zeros((size, size), dtype=np.uint8),
        keypoints=kps,
        bbox=(0.0, 0.0, size - 1.0, size - 1.0),
    )


def test_heatmap_peak_is_one_at_center_cell():
    s = _sample_with_kp(32.0, 32.0)
    maps = heatmap_targets(s, 16, sigma=2.0)
    assert maps[0, 8, 8] == pytest.approx(1.0, abs=1e-6)
    assert maps[0].max() == pytest.approx(1.0, abs=1e-6)


def test_heatmap_invisible_channel_zero():
    s = _sample_with_kp(10.0, 10.0, v=0.0)
    maps = heatmap_targets(s, 16, sigma=2.0)
    assert np.all(maps[0] == 0.0)
    assert maps[1].max() == pytest.approx(1.0, abs=1e-6)


def test_heatmap_value_at_sigma_distance():
    s = _sample_with_kp(32.0, 32.0)
    maps = heatmap_targets(s, 16, sigma=2.0)
    assert maps[0, 8, 10] == pytest.approx(np.exp(-0.5), rel=1e-6)


def test_heatmap_truncated_beyond_three_sigma():
    s = _sample_with_kp(32.0, 32.0)
    maps = heatmap_targets(s, 16, sigma=1.0)
    assert maps[0, 8, 12] == 0.0  # distance 4 > 3 sigma
    assert np.count_nonzero(maps[0]) > 0


def test_heatmap_sigma_validation():
    with pytest.raises(ValueError):
        heatmap_targets(_sample_with_kp(1, 1), 16, sigma=0.0)


def test_heatmap_decode_round_trip_within_4px():
    for s in synth_dataset(20, 64, 8, seed=5):
        maps = heatmap_targets(s, 16, sigma=2.0)
        decoded = decode_keypoints(maps, scale=4.0)
        for (px, py, conf), (gx, gy, v) in zip(decoded, s.keypoints):
            if v == 1.0:
                assert abs(px - gx) <= 4.0 and abs(py - gy) <= 4.0
                assert conf == pytest.approx(1.0, abs=1e-6)


def test_decode_tie_lowest_row_major():
    maps = np.zeros((1, 4, 4), dtype=np.float32)
    maps[0, 1, 2] = 1.0
    maps[0, 3, 0] = 1.0
    out = decode_keypoints(maps, scale=4.0)
    assert (out[0, 0], out[0, 1]) == (8.0, 4.0)


def test_decode_zero_channel_confidence_zero():
    out = decode_keypoints(np.zeros((1, 4, 4), dtype=np.float32))
    assert out[0, 2] == 0.0


# ---------------------------------------------------------------------------
# PCK


def test_pck_perfect_predictions():
    samples = synth_dataset(5, 64, 8, seed=6)
    preds = [s.keypoints.copy() for s in samples]
    assert pck(preds, samples) == 1.0


def test_pck_all_missed():
    samples = synth_dataset(3, 64, 8, seed=7)
    preds = [s.keypoints + np.array([500.0, 500.0, 0.0]) for s in samples]
    assert pck(preds, samples, alpha=0.2) == 0.0


def test_pck_half_hits():
    sample = KeypointSample(
        ident="h",
        image=np.zeros((64, 64), dtype=np.uint8),
        keypoints=np.array([[10.0, 10.0, 1.0], [50.0, 50.0, 1.0]]),
        bbox=(0.0, 0.0, 50.0, 50.0),
    )
    preds = [np.array([[10.0, 10.0, 1.0], [500.0, 500.0, 1.0]])]
    assert pck(preds, [sample], alpha=0.2) == 0.5


def test_pck_monotone_in_alpha():
    samples = synth_dataset(10, 64, 8, seed=8)
    rng = np.random.default_rng(0)
    preds = [s.keypoints + np.concatenate([rng.normal(0, 4, (8, 2)), np.zeros((8, 1))], axis=1) for s in samples]
    values = [pck(preds, samples, a) for a in (0.05, 0.1, 0.2, 0.4, 1.0)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_pck_requires_visible_keypoints():
    sample = KeypointSample(
        ident="v",
        image=np.zeros((32, 32), dtype=np.uint8),
        keypoints=np.array([[5.0, 5.0, 0.0]]),
        bbox=(0.0, 0.0, 10.0, 10.0),
    )
    with pytest.raises(ValueError, match="visible"):
        pck([np.zeros((1, 3))], [sample], 0.2)
    with pytest.raises(ValueError):
        pck([], [], alpha=0.0)


def test_make_arrays_shapes_and_scaling():
    samples = synth_dataset(3, 64, 8, seed=10)
    x, y = make_arrays(samples, 16, sigma=2.0)
    assert x.shape == (3, 1, 64, 64) and y.shape == (3, 8, 16, 16)
    assert x.min() >= -0.5 and x.max() <= 0.5
    assert x.dtype == np.float32 and y.dtype == np.float32


# ---------------------------------------------------------------------------
# image files


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(7, 9), dtype=np.uint8)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    np.testing.assert_array_equal(read_image(path), img)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    np.testing.assert_array_equal(read_image(path), img)


def test_read_image_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"JUNKDATA")
    with pytest.raises(FormatError, match="magic"):
        read_image(path)


def test_read_image_rejects_truncated(tmp_path):
    img = np.zeros((8, 8), dtype=np.uint8)
    path = tmp_path / "t.pgm"
    write_pgm(path, img)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_image(path)
