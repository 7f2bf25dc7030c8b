import json

import numpy as np
import pytest
import torch
from torch import nn

from motiondepth.errors import CompatibilityError, NumericError, ParameterError
from motiondepth.networks import depth_to_disparity, state_digest
from motiondepth.pipeline import (
    PipelineConfig,
    StageError,
    compute_losses,
    forward_two_stage,
    infer,
    load_config,
    load_model,
    make_batch,
    build_pipeline_model,
    save_config,
    train,
)
from motiondepth import pipeline
from motiondepth.synthdata import constant_motion, generate_dataset, render_scene, random_scene_spec, training_pairs

W, H = 64, 32


def small_config(**kw):
    base = dict(width=W, height=H, min_depth=1.5, max_depth=40.0, n_bins=8, pose_source="ground_truth", batch_size=2)
    base.update(kw)
    return PipelineConfig(**base)


class FixedDisparity(nn.Module):
    """Stand-in coarse network that returns a given disparity map."""

    def __init__(self, disp):
        super().__init__()
        self.register_buffer("disp", disp)

    def forward(self, image):
        return self.disp


def static_sample(seed=3):
    return render_scene(random_scene_spec(seed, width=W, height=H, dynamic=False))


def oracle_model(config, sample, t=1):
    model = build_pipeline_model(config)
    gt = torch.as_tensor(sample.depths[t].values, dtype=torch.float32)[None, None]
    model.coarse_net = FixedDisparity(depth_to_disparity(gt, config.min_depth, config.max_depth).clamp(0, 1))
    return model


def test_static_scene_has_no_motion_and_untouched_reference():
    config = small_config()
    sample = static_sample()
    model = oracle_model(config, sample)
    batch = make_batch([(sample, 1)])
    with torch.no_grad():
        out = forward_two_stage(model, batch, config)
    assert not out.motion_mask.any()
    assert torch.equal(out.pseudo_static, batch.I_r)
    assert torch.equal(out.reference_used, batch.I_r)


def test_flow_toggle_leaves_static_volume_unchanged():
    config = small_config()
    sample = static_sample(4)
    model = oracle_model(config, sample)
    batch = make_batch([(sample, 1)])
    with torch.no_grad():
        on = forward_two_stage(model, batch, config)
        off = forward_two_stage(model, batch, config.replace(use_flow=False))
    assert off.motion_mask is None
    assert torch.equal(on.V_m, off.V_m)


def test_moving_sprite_is_masked_and_replaced():
    config = small_config()
    for seed in range(20):
        sample = render_scene(random_scene_spec(seed, width=W, height=H, moving_fraction=1.0))
        if sample.motion_seg[1].sum() > 10:
            break
    model = oracle_model(config, sample)
    batch = make_batch([(sample, 1)])
    with torch.no_grad():
        out = forward_two_stage(model, batch, config)
    seg = torch.as_tensor(sample.motion_seg[1])
    hit = (out.motion_mask[0, 0] & seg).sum() / seg.sum()
    assert hit > 0.8
    assert not torch.equal(out.pseudo_static, batch.I_r)


def test_prior_only_returns_coarse_depth():
    config = small_config(prior_depth_only=True)
    sample = static_sample()
    model = build_pipeline_model(config)
    out = forward_two_stage(model, make_batch([(sample, 1)]), config)
    assert out.D_t is out.D_c and out.V_m is None


def test_ablation_variants_are_distinct():
    names = {
        small_config().variant,
        small_config(use_flow=False).variant,
        small_config(use_volume_attention=False).variant,
        small_config(prior_depth_only=True).variant,
    }
    assert names == {"full", "no-flow", "no-volume-attention", "prior-only"}


@pytest.mark.parametrize("variant", [{}, {"use_flow": False}, {"use_volume_attention": False}, {"prior_depth_only": True}])
def test_every_variant_runs_and_respects_depth_range(variant):
    config = small_config(**variant)
    sample = static_sample()
    model = build_pipeline_model(config)
    batch = make_batch([(sample, 1), (sample, 2)])
    out = forward_two_stage(model, batch, config)
    losses = compute_losses(out, batch, config)
    losses.total.backward()
    assert torch.isfinite(losses.total)
    assert out.D_t.min() >= config.min_depth - 1e-4 and out.D_t.max() <= config.max_depth + 1e-3


def test_stage_errors_name_the_stage():
    config = small_config()
    sample = static_sample()
    batch = make_batch([(sample, 1)])
    batch.T_rt = None
    with pytest.raises(StageError) as info:
        forward_two_stage(build_pipeline_model(config), batch, config)
    assert info.value.stage == "stage 1"
    with pytest.raises(ParameterError):
        forward_two_stage(build_pipeline_model(config), batch, config.replace(width=128))


def _final_loss(config, samples):
    return train(samples, config).records[-1]["loss"]["total"]


def test_training_is_deterministic():
    samples = generate_dataset(2, seed=5, width=W, height=H)
    config = small_config(steps=3)
    a = train(samples, config)
    b = train(samples, config)
    assert [r["loss"] for r in a.records] == [r["loss"] for r in b.records]
    assert state_digest(a.model) == state_digest(b.model)


def test_zero_learning_rate_keeps_parameters():
    sample = static_sample()
    config = small_config(steps=3, learning_rate=0.0, batch_size=1)
    model = build_pipeline_model(config)
    before = state_digest(model)
    res = train([render_scene(random_scene_spec(3, width=W, height=H, dynamic=False, n_frames=2))], config, model=model)
    assert state_digest(res.model) == before
    losses = [r["loss"]["total"] for r in res.records]
    assert losses == [losses[0]] * 3


def test_photometric_loss_decreases_on_static_scenes():
    samples = generate_dataset(10, seed=6, width=W, height=H, dynamic=False)
    config = small_config(steps=200, batch_size=4, learning_rate=1e-3)
    res = train(samples, config)
    photo = [r["loss"]["photometric"] for r in res.records]
    assert np.mean(photo[-20:]) < np.mean(photo[:20])


def test_training_artifacts_and_checkpoint_round_trip(tmp_path):
    samples = generate_dataset(2, seed=7, width=W, height=H)
    config = small_config(steps=2, checkpoint_every=1)
    res = train(samples, config, out_dir=tmp_path)
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 1]
    assert all(np.isfinite(r["loss"]["total"]) for r in records)
    assert load_config(tmp_path / "config.yaml") == config

    model, loaded_config = load_model(res.checkpoint)
    assert loaded_config == config
    batch = make_batch([(samples[0], 1)])
    res.model.eval()
    with torch.no_grad():
        a = forward_two_stage(res.model, batch, config)
        b = forward_two_stage(model, batch, config)
    assert torch.equal(a.D_t, b.D_t) and torch.equal(a.D_c, b.D_c)

    with pytest.raises(CompatibilityError):
        load_model(res.checkpoint, config.replace(n_bins=4))
    # schedule-only changes keep the checkpoint usable
    load_model(res.checkpoint, config.replace(steps=10, learning_rate=1e-3))


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    samples = generate_dataset(2, seed=8, width=W, height=H)
    config = small_config(steps=5)
    real = pipeline.compute_losses
    calls = {"n": 0}
    snapshot = {}

    def flaky(out, batch, cfg, bins=None):
        calls["n"] += 1
        if calls["n"] == 3:
            snapshot["digest"] = state_digest(model)
            raise NumericError("photometric loss is not finite (nan)", term="photometric")
        return real(out, batch, cfg, bins)

    monkeypatch.setattr(pipeline, "compute_losses", flaky)
    model = build_pipeline_model(config)
    with pytest.raises(NumericError):
        train(samples, config, out_dir=tmp_path, model=model)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines[-1]["step"] == 2 and "error" in lines[-1] and lines[-1]["batch"]
    restored, _ = load_model(tmp_path / "last")
    assert state_digest(restored) == snapshot["digest"]


def test_infer_single_frame_falls_back_to_coarse_depth():
    config = small_config()
    sample = static_sample()
    model = build_pipeline_model(config)
    res = infer(sample.frames[:1], model, config, sample.intrinsics)
    with torch.no_grad():
        coarse = pipeline.disparity_to_depth(model.coarse_net(torch.as_tensor(sample.frames[0], dtype=torch.float32)[None]), 1.5, 40.0)
    assert res.pose_chain == []
    np.testing.assert_array_equal(res.depths[0], coarse[0, 0].double().numpy())


def test_infer_sequence_in_range_and_chain_composes():
    config = small_config()
    sample = render_scene(random_scene_spec(9, width=W, height=H, n_frames=4))
    model = build_pipeline_model(config)
    res = infer(sample.frames, model, config, sample.intrinsics, flows=sample.flows, poses=sample.poses)
    assert len(res.depths) == 4 and len(res.pose_chain) == 3
    for d in res.depths:
        assert d.min() >= config.min_depth - 1e-4 and d.max() <= config.max_depth + 1e-3
    traj = res.trajectory()
    for got, want in zip(traj, sample.poses):
        np.testing.assert_allclose(got.matrix(), want.matrix(), atol=1e-5)


def test_identity_motion_pose_chain_near_identity():
    samples = generate_dataset(4, seed=10, width=W, height=H, camera_moves=False, dynamic=False)
    config = small_config(pose_source="network", steps=20)
    model = train(samples, config).model
    res = infer(samples[0].frames, model, config, samples[0].intrinsics, flows=samples[0].flows)
    for T in res.pose_chain:
        R = T.matrix()[:3, :3]
        angle = np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))
        assert angle < 0.01


def test_config_validation_and_yaml(tmp_path):
    with pytest.raises(ParameterError):
        PipelineConfig(width=100)
    with pytest.raises(ParameterError):
        PipelineConfig(min_depth=5, max_depth=1)
    with pytest.raises(ParameterError):
        PipelineConfig.from_dict({"nonsense": 1})
    with pytest.raises(ParameterError):
        PipelineConfig.from_dict({"use_flow": "yes"})
    path = save_config(small_config(seed=3), tmp_path / "c.yaml")
    assert load_config(path) == small_config(seed=3)
    (tmp_path / "bad.yaml").write_text("- a\n- b\n")
    with pytest.raises(ParameterError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "broken.yaml").write_text("a: [1,\n")
    with pytest.raises(ParameterError):
        load_config(tmp_path / "broken.yaml")


def test_config_hash_covers_forward_fields_only():
    c = small_config()
    assert c.hash() == c.replace(steps=5, learning_rate=0.1, seed=9).hash()
    assert c.hash() != c.replace(n_bins=4).hash()
    assert c.hash() != c.replace(use_flow=False).hash()
