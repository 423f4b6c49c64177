import filecmp

import numpy as np
import pytest

from quadfit.camera import CameraFrame, project
from quadfit.cues import load_scene
from quadfit.errors import InputError
from quadfit.losses import LossWeights, total_loss
from quadfit.model import pose_mesh
from quadfit.synth import (NoiseSpec, generate_scene, rasterize_silhouette,
                           visible_vertices)


def test_template_is_valid_and_quadruped_sized(quad_template):
    assert 500 <= quad_template.n_vertices <= 800
    assert quad_template.n_joints >= 15
    assert quad_template.n_limb_scales == 4
    assert len(quad_template.landmarks) == 4
    # root at the origin so global rotations act about the origin
    assert (quad_template.joint_offsets[0] == 0).all()


def test_clean_scene_losses_at_ground_truth(clean_scene):
    scene = load_scene(clean_scene, seed=0)
    rep = total_loss(scene.cues, scene.template, scene.gt_params, scene.cameras,
                     LossWeights())
    # exact-correspondence terms vanish at ground truth
    assert rep.values["pix"] < 1e-8
    assert rep.values["time"] < 1e-8
    # sampled coverage terms sit at their sampling floor, not zero by design
    assert rep.values["obj"] < 6.0
    assert rep.values["part"] < 40.0
    assert rep.values["lap"] == 0.0
    assert rep.values["vol"] == 0.0
    assert rep.values["arap"] == 0.0


def test_rasterize_silhouette_square_exact():
    # an axis-aligned square facing the camera lands on a known pixel rect
    cam = CameraFrame(fx=100.0, fy=100.0, cx=32.0, cy=32.0, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, 2.0]), image_size=(64, 64))
    half = 0.2
    verts = np.array([[-half, -half, 0.0], [half, -half, 0.0],
                      [half, half, 0.0], [-half, half, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mask = rasterize_silhouette(verts, faces, cam)
    # corners project to 32 +- 10 px
    ys, xs = np.nonzero(mask.grid)
    assert abs(xs.min() - 22) <= 1 and abs(xs.max() - (42 - 1)) <= 1
    assert abs(ys.min() - 22) <= 1 and abs(ys.max() - (42 - 1)) <= 1


def test_rasterize_behind_camera_empty():
    cam = CameraFrame(fx=100.0, fy=100.0, cx=32.0, cy=32.0, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, -5.0]), image_size=(64, 64))
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    mask = rasterize_silhouette(verts, np.array([[0, 1, 2]]), cam)
    assert mask.area() == 0


def test_self_rasterization_iou_one(clean_scene):
    from quadfit.evalmetrics import iou_for_params
    scene = load_scene(clean_scene, seed=0)
    res = iou_for_params(scene.template, scene.gt_params, scene.cameras,
                         scene.cues.masks)
    assert res.mean == 1.0
    assert res.worst5 == 1.0


def test_pixel_corrs_reference_visible_vertices(clean_scene, quad_template):
    scene = load_scene(clean_scene, seed=0)
    for f in range(scene.n_frames):
        posed = pose_mesh(scene.template, scene.gt_params[f])
        vis = set(visible_vertices(posed, scene.template.faces,
                                   scene.cameras[f]).tolist())
        pix, vids, _ = scene.cues.pixel_corrs[f]
        assert set(vids.tolist()) <= vis


def test_scene_byte_identical_across_runs(tmp_path, quad_template):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_scene(a, quad_template, frames=4, seed=13,
                   noise=NoiseSpec(sigma_px=0.5, outlier_frac=0.1, dropout_frac=0.25))
    generate_scene(b, quad_template, frames=4, seed=13,
                   noise=NoiseSpec(sigma_px=0.5, outlier_frac=0.1, dropout_frac=0.25))
    names = [p.name for p in sorted(a.iterdir())]
    assert names == [p.name for p in sorted(b.iterdir())]
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors


def test_scene_differs_across_seeds(tmp_path, quad_template):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_scene(a, quad_template, frames=3, seed=1)
    generate_scene(b, quad_template, frames=3, seed=2)
    assert (a / "pixel_corrs.csv").read_text() != (b / "pixel_corrs.csv").read_text()


def test_sigma_noise_matches_chisquare_expectation(tmp_path, quad_template):
    # mean squared norm of 2-D Gaussian noise is 2 sigma^2
    sigma = 1.0
    d = tmp_path / "noisy"
    generate_scene(d, quad_template, frames=8, seed=21,
                   noise=NoiseSpec(sigma_px=sigma), n_pixel_corrs=300)
    scene = load_scene(d, seed=0)
    sq = []
    for f in range(scene.n_frames):
        posed = pose_mesh(scene.template, scene.gt_params[f])
        pix_true, _ = project(scene.cameras[f], posed)
        pix, vids, _ = scene.cues.pixel_corrs[f]
        sq.extend(((pix - pix_true[vids]) ** 2).sum(axis=1).tolist())
    assert len(sq) > 1000
    mean_sq = np.mean(sq)
    assert abs(mean_sq - 2 * sigma ** 2) < 0.1 * 2 * sigma ** 2


def test_dropout_empties_frames(noisy_scene):
    scene = load_scene(noisy_scene, seed=0)
    empty_pix = [f for f in range(scene.n_frames)
                 if len(scene.cues.pixel_corrs[f][0]) == 0]
    empty_parts = [f for f in range(scene.n_frames)
                   if len(scene.cues.part_samples[f][0]) == 0]
    assert empty_pix and empty_parts
    assert 0 not in empty_pix


def test_camera_path_intersection_fails(tmp_path, quad_template):
    with pytest.raises(InputError, match="intersect"):
        generate_scene(tmp_path / "bad", quad_template, frames=3, seed=0,
                       orbit_radius=0.3, orbit_height=0.0)


def test_track_anchor_clipping_short_video(clean_scene):
    scene = load_scene(clean_scene, seed=0)  # 8 frames: only anchor frame 0 fits
    assert set(scene.cues.tracks.anchors.tolist()) == {0}


def test_motion_spec_rejects_bad_joint(quad_template):
    from quadfit.synth import JointCurve, MotionSpec
    spec = MotionSpec(curves=[JointCurve(joint=999, axis=0, amplitude=0.1, cycles=1)])
    with pytest.raises(InputError):
        spec.params_at(quad_template, 0, 10)
