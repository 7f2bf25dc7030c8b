"""Depth and odometry metrics, evaluated in float64 numpy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, EvaluationError, SampleIOError
from .geometry import RigidTransform

COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
HEADERS = ("Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self):
        return asdict(self)

    def row(self):
        return [getattr(self, c) for c in COLUMNS]


@dataclass(frozen=True)
class OdometryMetrics:
    translation_drift: float  # meters
    rotation_drift: float  # degrees


def _prepare(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    ok = np.isfinite(gt) & (gt > 0)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != gt.shape:
            raise DimensionError(f"validity {valid.shape} does not match depth {gt.shape}")
        ok &= valid
    return pred, gt, ok


def _scale_factor(pred, gt, ok):
    p = pred[ok]
    if not np.all(np.isfinite(p) & (p > 0)):
        raise EvaluationError("prediction has non-positive or non-finite depth at valid pixels")
    return np.median(gt[ok]) / np.median(p)


def _compute(p, g):
    thresh = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
    )


def _evaluate(pred, gt, valid, region, cap_min, cap_max, median_scale):
    pred, gt, ok = _prepare(pred, gt, valid)
    if not ok.any():
        raise EvaluationError("no valid ground-truth pixels")
    if median_scale:
        pred = pred * _scale_factor(pred, gt, ok)
    if cap_min is not None or cap_max is not None:
        pred = np.clip(pred, cap_min, cap_max)
        gt = np.clip(gt, cap_min, cap_max)
    sel = ok if region is None else ok & region
    if not sel.any():
        raise EvaluationError("evaluation region has no valid ground-truth pixels")
    p = pred[sel]
    if not np.all(np.isfinite(p) & (p > 0)):
        raise EvaluationError("prediction has non-positive or non-finite depth at valid pixels")
    return _compute(p, gt[sel])


def depth_metrics(pred, gt, valid=None, cap_min=0.1, cap_max=80.0, median_scale=True) -> DepthMetrics:
    """Standard depth error and accuracy metrics over valid ground-truth pixels.

    With ``median_scale`` the prediction is first rescaled by the ratio of the
    ground-truth and predicted medians; both maps are then clipped to the caps
    (pass ``None`` to disable clipping).
    """
    return _evaluate(pred, gt, valid, None, cap_min, cap_max, median_scale)


def dynamic_region_metrics(pred, gt, valid, motion_seg, cap_min=0.1, cap_max=80.0, median_scale=True) -> DepthMetrics:
    """Metrics restricted to moving-object pixels; median scale taken over the whole image."""
    motion_seg = np.asarray(motion_seg, dtype=bool)
    if motion_seg.shape != np.shape(gt):
        raise DimensionError(f"motion mask {motion_seg.shape} does not match depth {np.shape(gt)}")
    if not motion_seg.any():
        raise EvaluationError("motion segmentation is empty")
    return _evaluate(pred, gt, valid, motion_seg, cap_min, cap_max, median_scale)


def mean_metrics(items) -> DepthMetrics:
    items = list(items)
    if not items:
        raise EvaluationError("no metrics to average")
    return DepthMetrics(**{c: float(np.mean([getattr(m, c) for m in items])) for c in COLUMNS})


def format_table(rows: dict) -> str:
    """Fixed-width table, one row per named result, columns in the usual order."""
    name_w = max([len("model")] + [len(k) for k in rows])
    lines = [f"{'model':<{name_w}}  " + "  ".join(f"{h:>9}" for h in HEADERS)]
    for name, m in rows.items():
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{v:9.4f}" for v in m.row()))
    return "\n".join(lines)


# -- odometry -------------------------------------------------------------------


def _camera_to_world(poses):
    out = []
    for P in poses:
        M = P.matrix() if isinstance(P, RigidTransform) else np.asarray(P, dtype=np.float64)
        if M.shape != (4, 4):
            raise DimensionError(f"pose must be 4x4, got {M.shape}")
        out.append(np.linalg.inv(M))
    return out


def _rotation_angle(R):
    c = (np.trace(R) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def odometry_drift(pred_poses, gt_poses, scale_align=False) -> OdometryMetrics:
    """RMSE of first-frame-aligned trajectory errors.

    Inputs are world-to-camera poses per frame. Both trajectories are expressed
    relative to their first camera; the error at frame ``k`` is
    ``inv(gt_k) @ pred_k`` in camera-to-world form. ``scale_align`` rescales the
    predicted translations by the median ratio of ground-truth to predicted
    step lengths (for monocular estimates without metric scale).
    """
    if len(pred_poses) != len(gt_poses):
        raise DimensionError(f"pose chains differ in length: {len(pred_poses)} vs {len(gt_poses)}")
    if len(gt_poses) < 2:
        raise DimensionError("odometry needs at least two poses")
    pred = _camera_to_world(pred_poses)
    gt = _camera_to_world(gt_poses)
    pred = [np.linalg.inv(pred[0]) @ M for M in pred]
    gt = [np.linalg.inv(gt[0]) @ M for M in gt]
    if scale_align:
        ps = [np.linalg.norm(pred[k][:3, 3] - pred[k - 1][:3, 3]) for k in range(1, len(pred))]
        gs = [np.linalg.norm(gt[k][:3, 3] - gt[k - 1][:3, 3]) for k in range(1, len(gt))]
        ratios = [g / p for g, p in zip(gs, ps) if p > 0]
        s = float(np.median(ratios)) if ratios else 1.0
        for M in pred:
            M[:3, 3] *= s
    t_err, r_err = [], []
    for P, G in zip(pred, gt):
        E = np.linalg.inv(G) @ P
        t_err.append(np.linalg.norm(E[:3, 3]))
        r_err.append(np.degrees(_rotation_angle(E[:3, :3])))
    return OdometryMetrics(
        translation_drift=float(np.sqrt(np.mean(np.square(t_err)))),
        rotation_drift=float(np.sqrt(np.mean(np.square(r_err)))),
    )


# -- error maps -----------------------------------------------------------------


def error_map_rgb(pred, gt, valid=None, max_error=0.5):
    """Absolute relative error as an ``(H, W, 3)`` uint8 white-to-red ramp; invalid pixels black."""
    pred, gt, ok = _prepare(pred, gt, valid)
    ok &= np.isfinite(pred) & (pred > 0)
    err = np.zeros_like(gt)
    err[ok] = np.abs(pred[ok] - gt[ok]) / gt[ok]
    t = np.clip(err / max_error, 0.0, 1.0)
    fade = np.round(255 * (1 - t)).astype(np.uint8)
    rgb = np.stack([np.full_like(fade, 255), fade, fade], -1)
    rgb[~ok] = 0
    return rgb


def emit_error_map(pred, gt, path, valid=None, max_error=0.5) -> Path:
    path = Path(path)
    rgb = error_map_rgb(pred, gt, valid, max_error)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(path, format="PNG")
    except OSError as exc:
        raise SampleIOError(f"cannot write error map {path}: {exc}", path) from exc
    return path
