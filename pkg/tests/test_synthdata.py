from pathlib import Path

import numpy as np
import pytest
import torch

from motiondepth.errors import IngestionError, SampleIOError, SpecError
from motiondepth.geometry import CameraIntrinsics, RigidTransform, bilinear_sample, compute_static_flow
from motiondepth.synthdata import (
    Background,
    SceneSpec,
    Sprite,
    constant_motion,
    ingest_kitti_layout,
    random_scene_spec,
    read_dataset,
    read_sample,
    render_frame,
    render_scene,
    write_dataset,
    write_sample,
)

FIXTURE = Path(__file__).parent / "fixtures" / "kitti"
K = CameraIntrinsics(100.0, 100.0, 47.5, 15.5, 96, 32)


def _spec(poses, sprites=(), slope=-1.0):
    return SceneSpec(K, tuple(poses), Background(z0=10.0, slope=slope, texture_seed=3), tuple(sprites))


def test_static_scene_has_zero_flow_and_no_motion():
    sample = render_scene(_spec([RigidTransform.identity()] * 3, [Sprite((0, 0, 4.0), (0.5, 0.3))]))
    for f in sample.flows:
        assert np.abs(f).max() < 1e-12
    assert not any(m.any() for m in sample.motion_seg)
    assert np.array_equal(sample.frames[0], sample.frames[2])


def test_static_flow_matches_geometry():
    poses = constant_motion(3, (0.2, 0.0, 0.3), (0.0, 0.01, 0.0))
    sample = render_scene(_spec(poses, [Sprite((0.5, 0.1, 4.0), (0.6, 0.4), shape="disc")]))
    for k in range(2):
        t = k + 1
        depth = torch.tensor(sample.depths[t].values)
        static, valid = compute_static_flow(depth[None, None], K, K, sample.relative_pose(t, k))
        ok = sample.flow_valid[k] & valid[0, 0].numpy()
        assert ok.mean() > 0.8
        np.testing.assert_allclose(static[0].numpy()[:, ok], sample.flows[k][:, ok], atol=1e-4)


def test_lateral_sprite_motion_read_back():
    z = 4.0
    sprite = Sprite((0.0, 0.0, z), (0.5, 0.4), velocity=(2 * z / K.fx, 0.0, 0.0))
    sample = render_scene(_spec([RigidTransform.identity()] * 2, [sprite]))
    on_sprite = sample.meta["surfaces"][1] == 1
    assert np.array_equal(sample.motion_seg[1], on_sprite)
    dyn = np.linalg.norm(sample.flows[0], axis=0)
    ok = sample.flow_valid[0] & on_sprite
    np.testing.assert_allclose(dyn[ok], 2.0, atol=1e-9)
    assert np.abs(sample.flows[0][:, ~on_sprite]).max() < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_brightness_transport(seed):
    sample = render_scene(random_scene_spec(seed, width=96, height=32))
    H, W = K.height, K.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    for k, (f, ok) in enumerate(zip(sample.flows, sample.flow_valid)):
        ref = torch.tensor(sample.frames[k])[None]
        out, _ = bilinear_sample(ref, torch.tensor(u + f[0])[None], torch.tensor(v + f[1])[None])
        err = np.abs(out[0].numpy() - sample.frames[k + 1]).max(0)
        assert err[ok].max() <= 2 / 255


def test_motion_seg_matches_nonzero_dynamic_flow():
    sample = render_scene(random_scene_spec(11, width=96, height=32, n_sprites=(2, 3), moving_fraction=1.0))
    for k in range(2):
        t = k + 1
        Ks = sample.intrinsics
        depth = torch.tensor(sample.depths[t].values)[None, None]
        static, _ = compute_static_flow(depth, Ks, Ks, sample.relative_pose(t, k))
        dyn = np.linalg.norm(sample.flows[k] - static[0].numpy(), axis=0)
        assert np.array_equal(dyn > 1e-9, sample.motion_seg[t])


def test_deterministic_render():
    a = render_scene(random_scene_spec(5))
    b = render_scene(random_scene_spec(5))
    for x, y in zip(a.frames + a.flows, b.frames + b.flows):
        assert np.array_equal(x, y)


def test_static_world_counterfactual_moves_only_camera():
    sprite = Sprite((0.0, 0.0, 4.0), (0.5, 0.4), velocity=(0.2, 0.0, 0.0))
    spec = _spec([RigidTransform.identity()] * 2, [sprite])
    img_t, _, _ = render_frame(spec, 1)
    img_cf, _, _ = render_frame(spec, 0, sprite_time=1)
    assert np.array_equal(img_t, img_cf)


def test_spec_errors():
    behind = Sprite((0.0, 0.0, 0.5), (0.1, 0.1))
    with pytest.raises(SpecError):
        render_scene(_spec(constant_motion(2, (0.0, 0.0, 1.0)), [behind]))
    with pytest.raises(SpecError):
        render_scene(_spec([RigidTransform.identity()], [Sprite((0, 0, 50.0), (1, 1))]))


def test_sample_round_trip(tmp_path):
    sample = render_scene(random_scene_spec(2, width=96, height=32))
    back = read_sample(write_sample(sample, tmp_path / "s"))
    for a, b in zip(sample.frames, back.frames):
        assert np.abs(a - b).max() <= 0.5 / 255 + 1e-12
    for a, b in zip(sample.depths, back.depths):
        assert np.array_equal(a.valid, b.valid)
        assert np.abs(a.values - b.values).max() < 1e-3
    for a, b in zip(sample.flows, back.flows):
        assert np.abs(a - b).max() < 1e-4
    for a, b in zip(sample.poses, back.poses):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-15)
    assert all(np.array_equal(a, b) for a, b in zip(sample.motion_seg, back.motion_seg))
    assert all(np.array_equal(a, b) for a, b in zip(sample.flow_valid, back.flow_valid))
    assert back.intrinsics == sample.intrinsics


def test_far_depth_survives_round_trip(tmp_path):
    sample = render_scene(_spec([RigidTransform.identity()], slope=-6.0))
    assert sample.depths[0].values.max() > 65.535
    back = read_sample(write_sample(sample, tmp_path / "s"))
    assert np.abs(sample.depths[0].values - back.depths[0].values).max() < 1e-3


def test_corrupted_file_raises(tmp_path):
    path = write_sample(render_scene(random_scene_spec(1, width=96, height=32)), tmp_path / "s")
    (path / "depth_01.npy").write_bytes(b"garbage")
    with pytest.raises(SampleIOError) as info:
        read_sample(path)
    assert "depth_01.npy" in str(info.value)
    (path / "meta.txt").write_text("format nope\n")
    with pytest.raises(SampleIOError):
        read_sample(path)


def test_dataset_manifest(tmp_path):
    samples = [render_scene(random_scene_spec(s, width=96, height=32)) for s in range(2)]
    write_dataset(samples[:1], tmp_path, "train")
    write_dataset(samples[1:], tmp_path, "test")
    assert len(list(read_dataset(tmp_path, "train"))) == 1
    assert len(list(read_dataset(tmp_path, "test"))) == 1


def test_kitti_fixture():
    samples = list(ingest_kitti_layout(FIXTURE, FIXTURE / "split.txt"))
    assert len(samples) == 1
    s = samples[0]
    assert len(s.frames) == 3 and s.frames[0].shape == (3, 12, 40)
    assert s.depths is None and s.flows is None and s.motion_seg is None
    assert s.intrinsics.fx == pytest.approx(23.24)


def test_kitti_resize_scales_intrinsics():
    (s,) = ingest_kitti_layout(FIXTURE, FIXTURE / "split.txt", size=(20, 6))
    assert s.frames[0].shape == (3, 6, 20)
    assert s.intrinsics.fx == pytest.approx(11.62)


def test_kitti_missing_calibration(tmp_path):
    img = tmp_path / "2011_09_26" / "drive" / "image_02" / "data"
    img.mkdir(parents=True)
    with pytest.raises(IngestionError) as info:
        list(ingest_kitti_layout(tmp_path, ["2011_09_26/drive 1 l"]))
    assert "calib_cam_to_cam.txt" in str(info.value)


def test_kitti_missing_image(tmp_path):
    with pytest.raises(IngestionError) as info:
        list(ingest_kitti_layout(FIXTURE, ["2011_09_26/2011_09_26_drive_0001_sync 5 l"]))
    assert "0000000004.png" in str(info.value)


def test_kitti_empty_split():
    assert list(ingest_kitti_layout(FIXTURE, [])) == []
