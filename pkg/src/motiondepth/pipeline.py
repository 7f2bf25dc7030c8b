"""Two-stage depth pipeline: configuration, forward pass, training and inference.

Stage 1 produces flow, relative pose and a coarse single-frame depth. Stage 2
uses them to detect moving pixels, builds a pseudo-static reference frame, a
plane-sweep cost volume from it, and decodes the final multi-frame depth.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import evaluate
from .costvolume import argmin_depth, blend_reference, build_cost_volume, make_depth_bins
from .errors import CompatibilityError, MotionDepthError, NumericError, ParameterError
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    build_pseudo_static_frame,
    compute_motion_mask,
    compute_static_flow,
    propagate_mask,
    warp_backward,
)
from .losses import (
    consistency_loss,
    consistency_mask,
    masked_mean,
    photometric_error,
    smoothness_loss,
    total_loss,
)
from .networks import (
    MATCH_STRIDE,
    DepthModel,
    build_model,
    disparity_to_depth,
    load_checkpoint,
    make_flow_provider,
    parameters_finite,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

# fields that change the forward pass; checkpoints are only valid under equal values
MODEL_FIELDS = (
    "width", "height", "min_depth", "max_depth", "n_bins", "alpha", "epsilon",
    "use_flow", "use_volume_attention", "prior_depth_only", "flow_provider", "pose_source",
)


@dataclass
class PipelineConfig:
    width: int = 192
    height: int = 64
    min_depth: float = 0.1
    max_depth: float = 80.0
    n_bins: int = 16
    alpha: float = 0.5
    epsilon: float = 1.0
    a: float = 0.15
    b: float = 0.85
    lambda_s: float = 1e-3
    lambda_c: float = 1.0
    consistency_threshold: float = 1.0
    use_flow: bool = True
    use_volume_attention: bool = True
    prior_depth_only: bool = False
    flow_provider: str = "ground_truth"
    pose_source: str = "network"
    learning_rate: float = 1e-4
    steps: int = 1000
    batch_size: int = 4
    checkpoint_every: int = 0
    seed: int = 0
    eval_min_depth: float = 0.1
    eval_max_depth: float = 80.0

    def __post_init__(self):
        stride = 2 ** 3
        if self.width <= 0 or self.height <= 0 or self.width % stride or self.height % stride:
            raise ParameterError(f"resolution {self.width}x{self.height} must be positive multiples of {stride}")
        if not 0 < self.min_depth < self.max_depth:
            raise ParameterError(f"need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}")
        if not 0 < self.eval_min_depth < self.eval_max_depth:
            raise ParameterError("need 0 < eval_min_depth < eval_max_depth")
        if self.n_bins < 2:
            raise ParameterError(f"n_bins must be >= 2, got {self.n_bins}")
        if not 0 <= self.alpha <= 1:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("a", "b", "lambda_s", "lambda_c", "learning_rate"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if not self.consistency_threshold > 0:
            raise ParameterError("consistency_threshold must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ParameterError("steps >= 0, batch_size >= 1 and checkpoint_every >= 0 required")
        if self.flow_provider not in ("ground_truth", "external"):
            raise ParameterError(f"unknown flow provider {self.flow_provider!r}")
        if self.pose_source not in ("network", "ground_truth"):
            raise ParameterError(f"unknown pose source {self.pose_source!r}")

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            kind = type(known[key].default)
            if kind is bool and not isinstance(value, bool):
                raise ParameterError(f"config key {key} must be true or false, got {value!r}")
            try:
                kwargs[key] = kind(value)
            except (TypeError, ValueError) as exc:
                raise ParameterError(f"config key {key}: cannot read {value!r} as {kind.__name__}") from exc
        return cls(**kwargs)

    def replace(self, **changes):
        return PipelineConfig.from_dict({**self.to_dict(), **changes})

    def hash(self) -> str:
        """Digest of the forward-pass fields; training schedule fields are excluded."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in MODEL_FIELDS}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def bins(self):
        return make_depth_bins(self.min_depth, self.max_depth, self.n_bins)

    @property
    def variant(self) -> str:
        if self.prior_depth_only:
            return "prior-only"
        if not self.use_flow:
            return "no-flow"
        if not self.use_volume_attention:
            return "no-volume-attention"
        return "full"


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ParameterError(f"config {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ParameterError(f"config {path} must be a key-value mapping")
    return PipelineConfig.from_dict(data)


def save_config(config: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path


# -- batches --------------------------------------------------------------------


@dataclass
class Batch:
    I_t: torch.Tensor  # (B, 3, H, W)
    I_r: torch.Tensor
    K: CameraIntrinsics
    T_rt: torch.Tensor | None = None  # (B, 4, 4) ground-truth target-to-reference
    flow: torch.Tensor | None = None  # (B, 2, H, W) stored flow
    depth: torch.Tensor | None = None  # (B, 1, H, W) ground truth
    depth_valid: torch.Tensor | None = None
    motion_seg: torch.Tensor | None = None
    ids: list = field(default_factory=list)

    @property
    def size(self):
        return self.I_t.shape[0]


def _stack(items, fn, dtype=torch.float32):
    values = [fn(x) for x in items]
    if any(v is None for v in values):
        return None
    return torch.as_tensor(np.stack(values), dtype=dtype)


def make_batch(pairs) -> Batch:
    """Collate ``(sample, target_index)`` pairs; the reference is the previous frame."""
    pairs = list(pairs)
    K = pairs[0][0].intrinsics
    for s, _ in pairs:
        if s.intrinsics != K:
            raise ParameterError("all samples in a batch must share intrinsics")
    return Batch(
        I_t=_stack(pairs, lambda p: p[0].frames[p[1]]),
        I_r=_stack(pairs, lambda p: p[0].frames[p[1] - 1]),
        K=K,
        T_rt=_stack(pairs, lambda p: p[0].relative_pose(p[1], p[1] - 1).matrix() if p[0].poses else None),
        flow=_stack(pairs, lambda p: p[0].flows[p[1] - 1] if p[0].flows else None),
        depth=_stack(pairs, lambda p: p[0].depths[p[1]].values[None] if p[0].depths else None),
        depth_valid=_stack(pairs, lambda p: p[0].depths[p[1]].valid[None] if p[0].depths else None, torch.bool),
        motion_seg=_stack(pairs, lambda p: p[0].motion_seg[p[1]][None] if p[0].motion_seg else None, torch.bool),
        ids=[f"{s.name}:{t}" for s, t in pairs],
    )


# -- forward pass ---------------------------------------------------------------


@dataclass
class StageOne:
    flow: torch.Tensor | None
    T_rt: torch.Tensor
    D_c: torch.Tensor


@dataclass
class ForwardOutput:
    D_t: torch.Tensor
    D_c: torch.Tensor
    T_rt: torch.Tensor
    V_m: torch.Tensor | None = None
    V_f: torch.Tensor | None = None
    motion_mask: torch.Tensor | None = None  # target frame
    reference_mask: torch.Tensor | None = None
    static_flow: torch.Tensor | None = None
    pseudo_static: torch.Tensor | None = None
    reference_used: torch.Tensor | None = None
    stage_one: StageOne | None = None


class StageError(MotionDepthError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def run_stage_one(model: DepthModel, batch: Batch, config: PipelineConfig, provider) -> StageOne:
    flow = None
    if config.use_flow and not config.prior_depth_only:
        flow = provider(batch.I_t, batch.I_r, batch.flow)
    if config.pose_source == "network":
        T_rt = model.pose_net(batch.I_t, batch.I_r).matrix()
    else:
        if batch.T_rt is None:
            raise ParameterError("pose_source is ground_truth but the batch carries no poses")
        T_rt = batch.T_rt
    D_c = disparity_to_depth(model.coarse_net(batch.I_t), config.min_depth, config.max_depth)
    return StageOne(flow, T_rt, D_c)


def forward_two_stage(model: DepthModel, batch: Batch, config: PipelineConfig, provider=None, bins=None):
    """Run both stages; errors are re-raised with the stage that produced them."""
    provider = provider or make_flow_provider(config.flow_provider)
    bins = bins or config.bins()
    K = batch.K
    if (K.width, K.height) != (config.width, config.height) or tuple(batch.I_t.shape[-2:]) != (config.height, config.width):
        raise ParameterError(f"batch is {K.width}x{K.height}, config expects {config.width}x{config.height}")
    try:
        s1 = run_stage_one(model, batch, config, provider)
    except MotionDepthError as exc:
        raise StageError("stage 1", exc) from exc
    if config.prior_depth_only:
        return ForwardOutput(D_t=s1.D_c, D_c=s1.D_c, T_rt=s1.T_rt, stage_one=s1)

    try:
        D_c = s1.D_c.detach()
        T_det = s1.T_rt.detach()
        out = ForwardOutput(D_t=None, D_c=s1.D_c, T_rt=s1.T_rt, stage_one=s1)
        I_ref = batch.I_r
        if config.use_flow:
            static_flow, sf_valid = compute_static_flow(D_c, K, K, T_det)
            mask_t = compute_motion_mask(s1.flow, static_flow, config.epsilon, valid=sf_valid)
            mask_r = propagate_mask(mask_t, s1.flow) | propagate_mask(mask_t, static_flow)
            pseudo = build_pseudo_static_frame(batch.I_r, batch.I_t, D_c, mask_r, K, K, T_det)
            I_ref = blend_reference(pseudo, batch.I_r, config.alpha)
            out.static_flow, out.motion_mask, out.reference_mask, out.pseudo_static = static_flow, mask_t, mask_r, pseudo
        out.reference_used = I_ref

        F_t = model.feature_extractor(batch.I_t)
        F_r = model.feature_extractor(I_ref)
        K_s = K.scaled(MATCH_STRIDE)
        V_m = build_cost_volume(F_t, [F_r], bins, K_s, K_s, [s1.T_rt])
        disp, V_f = model.depth_net(batch.I_t, V_m, F_t)
        out.D_t = disparity_to_depth(disp, config.min_depth, config.max_depth)
        out.V_m, out.V_f = V_m, V_f
    except MotionDepthError as exc:
        raise StageError("stage 2", exc) from exc
    return out


# -- objective ------------------------------------------------------------------


def _masked_errors(I_t, I_ref, depth, K, T_rt, config):
    """Photometric error of the reconstruction, validity, and the auto mask."""
    recon, valid = warp_backward(I_ref, depth, K, K, T_rt)
    err = photometric_error(I_t, recon, config.a, config.b)
    with torch.no_grad():
        identity = photometric_error(I_t, I_ref, config.a, config.b)
    # same rule as compute_auto_mask, reusing the reconstruction error
    return err, valid & (err.detach() < identity)


def compute_losses(out: ForwardOutput, batch: Batch, config: PipelineConfig, bins=None):
    """Total objective for one batch.

    The final depth reconstructs moving-object pixels from the pseudo-static
    reference and everything else from the raw reference. The coarse depth is
    supervised on the raw reference everywhere.
    """
    K = batch.K
    T = out.T_rt
    I_t = batch.I_t
    err_c, keep_c = _masked_errors(I_t, batch.I_r, out.D_c, K, T, config)
    photo_c = masked_mean(err_c, keep_c).value
    smooth = smoothness_loss(out.D_c, I_t)
    if config.prior_depth_only:
        return total_loss(photo_c, smooth, torch.zeros((), dtype=photo_c.dtype), config.lambda_s, config.lambda_c)

    err_t, keep_t = _masked_errors(I_t, batch.I_r, out.D_t, K, T, config)
    if out.motion_mask is not None:
        # moving pixels reconstruct from the pseudo-static reference instead
        m = out.motion_mask
        err_ps, keep_ps = _masked_errors(I_t, out.pseudo_static, out.D_t, K, T, config)
        err_t = torch.where(m, err_ps, err_t)
        keep_t = torch.where(m, keep_ps, keep_t)
    photo_t = masked_mean(err_t, keep_t).value
    smooth = smooth + smoothness_loss(out.D_t, I_t)

    bins = bins or config.bins()
    vol_depth = argmin_depth(out.V_m.detach(), bins)
    vol_depth = F.interpolate(vol_depth, size=out.D_c.shape[-2:], mode="nearest")
    mask = consistency_mask(vol_depth, out.D_c, config.consistency_threshold)
    consist = consistency_loss(out.D_c, out.D_t, mask).value
    return total_loss(photo_t + photo_c, smooth, consist, config.lambda_s, config.lambda_c)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DepthModel
    records: list
    checkpoint: Path | None = None


def _grad_norms(model: DepthModel):
    norms = {}
    for name in model.COMPONENTS:
        sq = 0.0
        for p in getattr(model, name).parameters():
            if p.grad is not None:
                sq += float((p.grad.double() ** 2).sum())
        norms[name] = math.sqrt(sq)
    return norms


def build_pipeline_model(config: PipelineConfig) -> DepthModel:
    return build_model(config.seed, config.n_bins, volume_attention=config.use_volume_attention)


def train(samples, config: PipelineConfig, out_dir=None, model: DepthModel | None = None, provider=None) -> TrainResult:
    """Adam on the total objective over ``(sample, target)`` pairs in a seeded order.

    Aborts on a non-finite loss or gradient, keeping the last good parameters
    in ``out_dir/last`` and logging the offending batch.
    """
    from .synthdata import training_pairs

    pairs = list(training_pairs(samples))
    if not pairs:
        raise ParameterError("training needs at least one sample with two frames")
    torch.manual_seed(config.seed)
    model = model or build_pipeline_model(config)
    model.train()
    provider = provider or make_flow_provider(config.flow_provider)
    bins = config.bins()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, out_dir / "config.yaml")
        log_file = (out_dir / "log.jsonl").open("w")

    def checkpoint(step):
        if out_dir is None:
            return None
        return save_checkpoint(out_dir / "last", model, config.hash(), {"config": config.to_dict(), "step": step})

    records = []
    order = np.array([], dtype=int)
    cursor = 0
    start = time.perf_counter()
    try:
        for step in range(config.steps):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(pairs))
                cursor = 0
            idx = order[cursor : cursor + config.batch_size]
            cursor += config.batch_size
            batch = make_batch(pairs[i] for i in idx)

            optimizer.zero_grad(set_to_none=True)
            try:
                out = forward_two_stage(model, batch, config, provider, bins)
                losses = compute_losses(out, batch, config, bins)
            except NumericError as exc:
                _abort(step, batch, exc, log_file, checkpoint)
            losses.total.backward()
            norms = _grad_norms(model)
            if not all(math.isfinite(v) for v in norms.values()):
                _abort(step, batch, NumericError("non-finite gradient", term="gradient"), log_file, checkpoint)
            optimizer.step()
            if not parameters_finite(model):
                raise NumericError(f"non-finite parameters after step {step}", term="parameters")

            record = {"step": step, "loss": losses.as_dict(), "grad_norm": norms,
                      "wall_clock": time.perf_counter() - start, "batch": batch.ids}
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                checkpoint(step + 1)
        ck = checkpoint(config.steps)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model, records, ck)


def _abort(step, batch, exc, log_file, checkpoint):
    logger.error("step %d: %s on batch %s", step, exc, batch.ids)
    if log_file:
        log_file.write(json.dumps({"step": step, "error": str(exc), "batch": batch.ids}) + "\n")
        log_file.flush()
    checkpoint(step)
    raise exc


def checkpoint_config(path) -> PipelineConfig:
    """Configuration stored alongside the parameters in a checkpoint."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        return PipelineConfig.from_dict(payload["extra"]["config"])
    except (OSError, RuntimeError, EOFError, KeyError, TypeError, pickle.UnpicklingError) as exc:
        raise CompatibilityError(f"{path} is not a readable checkpoint with a stored config ({exc})") from exc


def load_model(path, config: PipelineConfig | None = None):
    """Rebuild a model from a checkpoint; ``config`` must hash-match when given."""
    config = config or checkpoint_config(path)
    model = build_pipeline_model(config)
    load_checkpoint(path, model, config.hash())
    model.eval()
    return model, config


# -- inference ------------------------------------------------------------------


@dataclass
class InferenceResult:
    depths: list  # (H, W) numpy arrays
    pose_chain: list  # RigidTransform per consecutive pair, target-to-reference

    def trajectory(self):
        """World-to-camera poses with the first camera as the world frame."""
        poses = [RigidTransform.identity()]
        for T in self.pose_chain:
            poses.append(T.inverse() @ poses[-1])
        return poses


@torch.no_grad()
def infer(frames, model: DepthModel, config: PipelineConfig, intrinsics: CameraIntrinsics, flows=None, poses=None, provider=None):
    """Depth for every frame using its predecessor as reference.

    The first frame has no reference and falls back to the coarse depth.
    ``flows[k]`` / ``poses`` are only needed by ground-truth providers or the
    ground-truth pose source.
    """
    model.eval()
    provider = provider or make_flow_provider(config.flow_provider)
    bins = config.bins()
    imgs = [torch.as_tensor(np.asarray(f), dtype=torch.float32)[None] for f in frames]
    if not imgs:
        return InferenceResult([], [])
    first = disparity_to_depth(model.coarse_net(imgs[0]), config.min_depth, config.max_depth)
    depths = [first[0, 0].double().numpy()]
    chain = []
    for t in range(1, len(imgs)):
        T_gt = None
        if poses is not None:
            T_gt = torch.as_tensor((poses[t - 1] @ poses[t].inverse()).matrix(), dtype=torch.float32)[None]
        flow = None if flows is None else torch.as_tensor(flows[t - 1], dtype=torch.float32)[None]
        batch = Batch(I_t=imgs[t], I_r=imgs[t - 1], K=intrinsics, T_rt=T_gt, flow=flow)
        out = forward_two_stage(model, batch, config, provider, bins)
        depths.append(out.D_t[0, 0].double().numpy())
        M = out.T_rt[0].double().numpy()
        chain.append(RigidTransform.from_matrix(_orthonormalize(M)))
    return InferenceResult(depths, chain)


def _orthonormalize(M):
    U, _, Vt = np.linalg.svd(M[:3, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    out = np.eye(4)
    out[:3, :3], out[:3, 3] = R, M[:3, 3]
    return out


# -- evaluation over samples ----------------------------------------------------


@torch.no_grad()
def predict_depths(model: DepthModel, samples, config: PipelineConfig, provider=None):
    """Yield ``(sample, target, predicted depth)`` for every frame with a predecessor."""
    from .synthdata import training_pairs

    model.eval()
    provider = provider or make_flow_provider(config.flow_provider)
    bins = config.bins()
    for sample, t in training_pairs(samples):
        batch = make_batch([(sample, t)])
        out = forward_two_stage(model, batch, config, provider, bins)
        yield sample, t, out.D_t[0, 0].double().numpy()


def evaluate_model(model: DepthModel, samples, config: PipelineConfig, provider=None):
    """Mean full-image and dynamic-region metrics over all target frames."""
    full, dynamic = [], []
    for sample, t, pred in predict_depths(model, samples, config, provider):
        gt = sample.depths[t]
        full.append(evaluate.depth_metrics(pred, gt.values, gt.valid, config.eval_min_depth, config.eval_max_depth))
        seg = sample.motion_seg[t] & gt.valid
        if seg.any():
            dynamic.append(evaluate.dynamic_region_metrics(
                pred, gt.values, gt.valid, sample.motion_seg[t], config.eval_min_depth, config.eval_max_depth))
    return {
        "full": evaluate.mean_metrics(full),
        "dynamic": evaluate.mean_metrics(dynamic) if dynamic else None,
        "n_frames": len(full),
        "n_dynamic": len(dynamic),
    }
