import numpy as np
import pytest

from quadfit.cues import (CueSet, ObjectMask, fallback_fill, load_scene,
                          read_mask_file, rle_decode, rle_encode,
                          sample_part_points, write_mask_file, read_features,
                          write_features, read_depth_maps, write_depth_maps)
from quadfit.errors import InputError


def random_mask(rng, w=17, h=13):
    return ObjectMask(rng.random((h, w)) < 0.4)


def test_rle_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = random_mask(rng)
        back = rle_decode(rle_encode(m.grid))
        assert (back.grid == m.grid).all()


def test_rle_edge_cases():
    empty = np.zeros((4, 6), dtype=bool)
    full = np.ones((4, 6), dtype=bool)
    assert (rle_decode(rle_encode(empty)).grid == empty).all()
    assert (rle_decode(rle_encode(full)).grid == full).all()


def test_rle_corruption_is_hard_error():
    with pytest.raises(InputError, match="decodes to"):
        rle_decode("4 4 3,2")
    with pytest.raises(InputError):
        rle_decode("not a mask")


def test_mask_file_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    masks = [random_mask(rng) for _ in range(5)]
    path = tmp_path / "m.rle"
    write_mask_file(path, masks)
    back = read_mask_file(path, 5)
    for a, b in zip(masks, back):
        assert (a.grid == b.grid).all()
    with pytest.raises(InputError, match="manifest says"):
        read_mask_file(path, 7)


def test_load_clean_scene_zero_filtered(clean_scene):
    scene = load_scene(clean_scene, seed=0)
    rep = scene.cues.load_report
    assert rep["pixel_conf_filtered"] == 0
    assert rep["pixel_outside_mask_filtered"] == 0
    assert rep["tracks_outside_mask_dropped"] == 0


def test_low_confidence_pixel_corr_filtered(clean_scene, tmp_path):
    import shutil
    d = tmp_path / "scene"
    shutil.copytree(clean_scene, d)
    with open(d / "pixel_corrs.csv") as fh:
        lines = fh.read().splitlines()
    # rewrite one row with confidence 0.4
    parts = lines[1].split(",")
    parts[-1] = "0.4"
    lines[1] = ",".join(parts)
    (d / "pixel_corrs.csv").write_text("\n".join(lines) + "\n")
    scene = load_scene(d, seed=0)
    assert scene.cues.load_report["pixel_conf_filtered"] == 1


def test_track_leaving_mask_dropped_whole(clean_scene, tmp_path):
    import shutil
    d = tmp_path / "scene"
    shutil.copytree(clean_scene, d)
    with open(d / "tracks.csv") as fh:
        lines = fh.read().splitlines()
    # push one valid track position to a far corner outside the mask
    parts = lines[1].split(",")
    tid = parts[0]
    parts[3], parts[4], parts[5] = "1.5", "1.5", "1"
    lines[1] = ",".join(parts)
    (d / "tracks.csv").write_text("\n".join(lines) + "\n")
    before = load_scene(clean_scene, seed=0).cues.tracks.n_tracks
    scene = load_scene(d, seed=0)
    assert scene.cues.tracks.n_tracks == before - 1
    assert scene.cues.load_report["tracks_outside_mask_dropped"] == 1


def test_vertex_id_out_of_range_hard_error(clean_scene, tmp_path):
    import shutil
    d = tmp_path / "scene"
    shutil.copytree(clean_scene, d)
    with open(d / "pixel_corrs.csv") as fh:
        lines = fh.read().splitlines()
    parts = lines[1].split(",")
    parts[3] = "999999"
    lines[1] = ",".join(parts)
    (d / "pixel_corrs.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(InputError, match="vertex_id"):
        load_scene(d, seed=0)


def test_frame_count_mismatch_hard_error(clean_scene, tmp_path):
    import json
    import shutil
    d = tmp_path / "scene"
    shutil.copytree(clean_scene, d)
    man = json.loads((d / "manifest.json").read_text())
    man["frames"] = man["frames"] + 1
    (d / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(InputError):
        load_scene(d, seed=0)


# ---------------------------------------------------------------------------
# fallback


def _tiny_cues(frames, empty_parts=(), empty_pix=()):
    rng = np.random.default_rng(0)
    masks = [ObjectMask(np.ones((8, 8), dtype=bool)) for _ in range(frames)]
    parts, pix = [], []
    for f in range(frames):
        if f in empty_parts:
            parts.append((np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0)))
        else:
            parts.append((rng.random((5, 2)) * 8, rng.integers(0, 4, 5), np.ones(5)))
        if f in empty_pix:
            pix.append((np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0)))
        else:
            pix.append((rng.random((4, 2)) * 8, rng.integers(0, 10, 4), np.ones(4)))
    from quadfit.cues import TrackSet
    tracks = TrackSet(np.zeros(0, dtype=np.int64), np.zeros((0, frames, 2)),
                      np.zeros((0, frames), dtype=bool))
    return CueSet(n_frames=frames, image_size=(8, 8), masks=masks,
                  part_samples=parts, pixel_corrs=pix, tracks=tracks)


def test_fallback_fills_empty_frame():
    cues = _tiny_cues(3, empty_parts={1}, empty_pix={1})
    filled = fallback_fill(cues)
    assert np.array_equal(filled.part_samples[1][0], filled.part_samples[0][0])
    assert np.array_equal(filled.pixel_corrs[1][0], filled.pixel_corrs[0][0])
    assert filled.inherited_parts.tolist() == [False, True, False]
    assert filled.inherited_pixels.tolist() == [False, True, False]


def test_fallback_chains_over_consecutive_gaps():
    cues = _tiny_cues(4, empty_parts={1, 2})
    filled = fallback_fill(cues)
    assert np.array_equal(filled.part_samples[2][0], filled.part_samples[0][0])


def test_fallback_noop_when_full():
    cues = _tiny_cues(3)
    filled = fallback_fill(cues)
    for f in range(3):
        assert np.array_equal(filled.part_samples[f][0], cues.part_samples[f][0])
    assert not filled.inherited_parts.any()


def test_fallback_empty_frame0_hard_error():
    cues = _tiny_cues(3, empty_parts={0})
    with pytest.raises(InputError, match="frame 0"):
        fallback_fill(cues)


def test_fallback_applied_after_dropout(noisy_scene):
    scene = load_scene(noisy_scene, seed=0)
    filled = fallback_fill(scene.cues)
    assert filled.inherited_parts.any()
    for f in range(filled.n_frames):
        assert len(filled.part_samples[f][0]) > 0
        assert len(filled.pixel_corrs[f][0]) > 0


# ---------------------------------------------------------------------------
# part sampling


def test_sample_part_points_proportional():
    m = np.zeros((20, 20), dtype=bool)
    m2 = np.zeros((20, 20), dtype=bool)
    m[:15, :10] = True   # area 150
    m2[:5, :10] = True   # area 50
    pix, labels, conf = sample_part_points(
        {"head": ObjectMask(m), "body": ObjectMask(m2)}, 200, seed=0)
    assert (labels == 0).sum() == 150
    assert (labels == 1).sum() == 50
    assert len(pix) == 200


def test_sample_part_points_inside_mask():
    rng = np.random.default_rng(3)
    grid = rng.random((16, 16)) < 0.3
    grid[0, 0] = True
    mask = ObjectMask(grid)
    pix, labels, _ = sample_part_points({"tail": mask}, 50, seed=1)
    assert (labels == 3).all()
    assert mask.contains(pix).all()


def test_sample_part_points_deterministic():
    rng = np.random.default_rng(4)
    mask = ObjectMask(rng.random((16, 16)) < 0.5)
    a = sample_part_points({"body": mask}, 64, seed=9)
    b = sample_part_points({"body": mask}, 64, seed=9)
    assert np.array_equal(a[0], b[0])


def test_sample_part_points_budget_floor():
    with pytest.raises(InputError):
        sample_part_points({"body": ObjectMask(np.ones((4, 4), dtype=bool))}, 3, seed=0)


def test_sample_part_points_empty_masks():
    pix, labels, conf = sample_part_points(
        {"body": ObjectMask(np.zeros((4, 4), dtype=bool))}, 10, seed=0)
    assert len(pix) == 0


# ---------------------------------------------------------------------------
# binary sidecars


def test_features_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(6, 19)).astype(np.float32)
    write_features(tmp_path / "f.f32", feats)
    back = read_features(tmp_path / "f.f32")
    assert back.shape == (6, 19)
    assert np.allclose(back, feats, atol=1e-7)


def test_depth_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    d = rng.random((4, 10, 12)).astype(np.float32)
    write_depth_maps(tmp_path / "d.f32", d)
    back = read_depth_maps(tmp_path / "d.f32", 4)
    assert back.shape == (4, 10, 12)
    assert np.allclose(back, d, atol=1e-7)


def test_part_confidence_sidecar_filters_feet_tail(clean_scene, tmp_path):
    import json
    import shutil
    d = tmp_path / "scene"
    shutil.copytree(clean_scene, d)
    (d / "part_conf.csv").write_text(
        "frame,part,confidence\n0,feet,0.2\n0,tail,0.25\n0,head,0.1\n1,feet,0.9\n")
    man = json.loads((d / "manifest.json").read_text())
    man["part_confidences"] = "part_conf.csv"
    (d / "manifest.json").write_text(json.dumps(man))
    scene = load_scene(d, seed=0)
    pix, labels, _ = scene.cues.part_samples[0]
    # feet(2) and tail(3) drop below the 0.3 retention threshold at frame 0;
    # head is retained regardless of confidence (the rule covers feet/tail)
    assert 2 not in labels and 3 not in labels
    assert 0 in labels
    assert scene.cues.load_report["part_masks_low_conf"] == 2
    pix1, labels1, _ = scene.cues.part_samples[1]
    assert 2 in labels1


def test_track_anchor_validation(clean_scene, tmp_path):
    import shutil
    d = tmp_path / "scene"
    shutil.copytree(clean_scene, d)
    with open(d / "tracks.csv") as fh:
        lines = fh.read().splitlines()
    parts = lines[1].split(",")
    parts[1] = "7"  # not a key frame
    lines[1] = ",".join(parts)
    (d / "tracks.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(InputError, match="anchor"):
        load_scene(d, seed=0)
