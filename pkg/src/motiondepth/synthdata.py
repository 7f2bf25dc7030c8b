"""Synthetic dynamic scenes with exact ground truth, sample I/O and KITTI ingestion.

A scene is a textured background plane plus planar sprites (rectangles or
discs facing the camera-0 optical axis), ray-cast per pixel with a z-buffer.
World coordinates are the camera-0 frame; ``poses`` are world-to-camera.

``flows[k]`` is the flow from target frame ``k + 1`` to reference frame ``k``
(the previous frame), i.e. ``p_ref = p_target + flow``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import IngestionError, SampleIOError, SpecError
from .geometry import CameraIntrinsics, RigidTransform

logger = logging.getLogger(__name__)

MIN_WAVELENGTH = 20.0
MAX_WAVELENGTH = 80.0
SAMPLE_FORMAT = "motiondepth-sample/1"


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.shape != valid.shape:
            raise SpecError(f"depth {values.shape} and validity {valid.shape} differ")
        v = values[valid]
        if not np.all(np.isfinite(v) & (v > 0)):
            raise SpecError("valid depth entries must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)


@dataclass(frozen=True)
class Background:
    """Plane ``z = z0 + slope * y`` in the camera-0 frame (y points down)."""

    z0: float = 10.0
    slope: float = 0.0
    texture_seed: int = 0


@dataclass(frozen=True)
class Sprite:
    center: tuple  # camera-0 frame at frame 0, meters
    half_size: tuple  # (half width, half height), meters
    velocity: tuple = (0.0, 0.0, 0.0)  # meters per frame
    shape: str = "rect"
    texture_seed: int = 0

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)


@dataclass(frozen=True)
class SceneSpec:
    intrinsics: CameraIntrinsics
    poses: tuple  # RigidTransform per frame, world-to-camera
    background: Background = Background()
    sprites: tuple = ()
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.poses)


@dataclass
class SceneSample:
    frames: list
    intrinsics: CameraIntrinsics
    poses: list = None
    depths: list = None
    flows: list = None
    flow_valid: list = None
    motion_seg: list = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frames)
        for attr in ("poses", "depths", "motion_seg"):
            value = getattr(self, attr)
            if value is not None and len(value) != n:
                raise SpecError(f"{attr} has {len(value)} entries for {n} frames")
        for attr in ("flows", "flow_valid"):
            value = getattr(self, attr)
            if value is not None and len(value) != n - 1:
                raise SpecError(f"{attr} needs one entry per consecutive pair, got {len(value)}")

    def relative_pose(self, target: int, reference: int) -> RigidTransform:
        """Transform taking target-camera points into the reference camera."""
        return self.poses[reference] @ self.poses[target].inverse()


def constant_motion(n_frames, translation, axis_angle=(0.0, 0.0, 0.0)):
    """World-to-camera poses for a camera stepping by a fixed camera-frame motion.

    ``translation`` is the camera displacement per frame expressed in the
    previous camera's frame.
    """
    step = RigidTransform.from_axis_angle(axis_angle, np.zeros(3))
    # camera i+1 centre sits at +translation in camera i coordinates
    step = RigidTransform(step.rotation, -step.rotation @ np.asarray(translation, dtype=np.float64))
    poses = [RigidTransform.identity()]
    for _ in range(n_frames - 1):
        poses.append(step @ poses[-1])
    return tuple(poses)


# -- textures -------------------------------------------------------------------


def _texture_params(seed, n_waves=6, sprite=False):
    """Near-grey background, saturated sprites: a single frame then tells objects apart.

    Base levels 0.3/0.7 plus six waves of amplitude 0.05 stay inside [0, 1].
    """
    rng = np.random.default_rng(seed)
    if sprite:
        base = rng.choice([0.3, 0.7], 3)
        while base.min() == base.max():
            base = rng.choice([0.3, 0.7], 3)
    else:
        base = rng.uniform(0.4, 0.6) + rng.uniform(-0.03, 0.03, 3)
    wavelength = rng.uniform(MIN_WAVELENGTH, MAX_WAVELENGTH, (3, n_waves))
    angle = rng.uniform(0, np.pi, (3, n_waves))
    phase = rng.uniform(0, 2 * np.pi, (3, n_waves))
    amp = np.full((3, n_waves), 0.05)
    return base, wavelength, angle, phase, amp


def _texture(params, s, t):
    """Band-limited colour at texture coordinates (units: frame-0 pixels)."""
    base, wavelength, angle, phase, amp = params
    out = np.empty((3,) + s.shape)
    for c in range(3):
        acc = np.full(s.shape, base[c])
        for w, a, p, m in zip(wavelength[c], angle[c], phase[c], amp[c]):
            k = 2 * np.pi / w
            acc += m * np.sin(k * (np.cos(a) * s + np.sin(a) * t) + p)
        out[c] = acc
    return out


# -- rendering ------------------------------------------------------------------


def _validate(spec: SceneSpec):
    if spec.n_frames < 1:
        raise SpecError("scene needs at least one frame")
    K = spec.intrinsics
    bg = spec.background
    if bg.z0 <= 0:
        raise SpecError(f"background offset must be positive, got {bg.z0}")
    half_fov = (K.height - 1 - K.cy) / K.fy, K.cy / K.fy
    near = min(bg.z0 / (1 - bg.slope * y) for y in (half_fov[0], -half_fov[1]))
    for i, sp in enumerate(spec.sprites):
        if sp.shape not in ("rect", "disc"):
            raise SpecError(f"sprite {i}: unknown shape {sp.shape!r}")
        if min(sp.half_size) <= 0:
            raise SpecError(f"sprite {i}: half sizes must be positive")
        for f, pose in enumerate(spec.poses):
            centre = np.asarray(sp.center, dtype=np.float64) + f * np.asarray(sp.velocity, dtype=np.float64)
            z = (pose.rotation @ centre + pose.translation)[2]
            if z <= 0:
                raise SpecError(f"sprite {i} is behind the camera in frame {f}")
        if sp.center[2] >= near:
            raise SpecError(f"sprite {i} at depth {sp.center[2]} is not in front of the background (near {near:.3f})")


def _rays(spec: SceneSpec, pose: RigidTransform):
    K = spec.intrinsics
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])
    R = pose.rotation
    d_world = np.einsum("ji,jhw->ihw", R, d_cam)  # R^T d
    centre = -R.T @ pose.translation
    return centre, d_world


def _frame0_pixels(K, X):
    return K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy


def _trace(spec: SceneSpec, pose: RigidTransform, sprite_time: float):
    """Ray-cast one view; returns (depth, surface id, world hit points).

    Surface 0 is the background, sprite ``j`` is ``j + 1``; ``-1`` is a miss.
    """
    centre, d = _rays(spec, pose)
    H, W = d.shape[1:]
    depth = np.full((H, W), np.inf)
    surface = np.full((H, W), -1, dtype=np.int64)

    bg = spec.background
    n = np.array([0.0, -bg.slope, 1.0])
    denom = np.einsum("i,ihw->hw", n, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bg = (bg.z0 - n @ centre) / denom
    hit = np.isfinite(t_bg) & (t_bg > 0)
    depth[hit] = t_bg[hit]
    surface[hit] = 0

    for j, sp in enumerate(spec.sprites):
        c = np.asarray(sp.center, dtype=np.float64) + sprite_time * np.asarray(sp.velocity, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (c[2] - centre[2]) / d[2]
        lx = centre[0] + t * d[0] - c[0]
        ly = centre[1] + t * d[1] - c[1]
        sx, sy = sp.half_size
        if sp.shape == "rect":
            inside = (np.abs(lx) <= sx) & (np.abs(ly) <= sy)
        else:
            inside = (lx / sx) ** 2 + (ly / sy) ** 2 <= 1.0
        hit = inside & np.isfinite(t) & (t > 0) & (t < depth)
        depth[hit] = t[hit]
        surface[hit] = j + 1

    if (surface < 0).any():
        raise SpecError("some rays miss every surface; tilt or move the background")
    points = centre[:, None, None] + depth * d
    return depth, surface, points


def _shade(spec: SceneSpec, surface, points, sprite_time):
    K = spec.intrinsics
    H, W = surface.shape
    img = np.zeros((3, H, W))
    m = surface == 0
    if m.any():
        s, t = _frame0_pixels(K, points[:, m])
        img[:, m] = _texture(_texture_params(spec.background.texture_seed), s, t)
    for j, sp in enumerate(spec.sprites):
        m = surface == j + 1
        if not m.any():
            continue
        c = np.asarray(sp.center, dtype=np.float64) + sprite_time * np.asarray(sp.velocity, dtype=np.float64)
        scale = K.fx / sp.center[2]
        s = (points[0, m] - c[0]) * scale
        t = (points[1, m] - c[1]) * scale
        img[:, m] = _texture(_texture_params(sp.texture_seed, sprite=True), s, t)
    return np.clip(img, 0.0, 1.0)


def render_frame(spec: SceneSpec, index: int, sprite_time: float | None = None):
    """Render view ``index`` with sprites placed at ``sprite_time`` (default ``index``).

    Passing another frame's time renders a static-world counterfactual.
    Returns ``(image, depth, surface)``.
    """
    _validate(spec)
    sprite_time = index if sprite_time is None else sprite_time
    depth, surface, points = _trace(spec, spec.poses[index], sprite_time)
    return _shade(spec, surface, points, sprite_time), depth, surface


def _pair_flow(spec, target, reference, depth_t, surface_t, points_t, depth_r, surface_r):
    K = spec.intrinsics
    H, W = surface_t.shape
    velocity = np.zeros((len(spec.sprites) + 1, 3))
    for j, sp in enumerate(spec.sprites):
        velocity[j + 1] = sp.velocity
    # material point position at the reference time
    X = points_t - (target - reference) * np.moveaxis(velocity[surface_t], -1, 0)
    pose = spec.poses[reference]
    Xr = np.einsum("ij,jhw->ihw", pose.rotation, X) + pose.translation[:, None, None]
    z = Xr[2]
    ahead = z > 0
    zs = np.where(ahead, z, 1.0)
    pu = K.fx * Xr[0] / zs + K.cx
    pv = K.fy * Xr[1] / zs + K.cy
    # difference of two projections (not against the grid) so a still scene is exactly zero
    pose_t = spec.poses[target]
    Xt = np.einsum("ij,jhw->ihw", pose_t.rotation, points_t) + pose_t.translation[:, None, None]
    flow = np.stack([pu - (K.fx * Xt[0] / Xt[2] + K.cx), pv - (K.fy * Xt[1] / Xt[2] + K.cy)])

    valid = ahead & (pu >= 0) & (pu <= W - 1) & (pv >= 0) & (pv <= H - 1)
    u0 = np.clip(np.floor(pu), 0, W - 1).astype(int)
    v0 = np.clip(np.floor(pv), 0, H - 1).astype(int)
    u1, v1 = np.clip(u0 + 1, 0, W - 1), np.clip(v0 + 1, 0, H - 1)
    for uu, vv in ((u0, v0), (u1, v0), (u0, v1), (u1, v1)):
        same = surface_r[vv, uu] == surface_t
        # depth consistency rejects self-occlusion on the same surface
        close = np.abs(depth_r[vv, uu] - z) <= 0.05 * z
        valid &= same & close
    return flow, valid


def render_scene(spec: SceneSpec) -> SceneSample:
    """Render every frame of ``spec`` with exact depth, flow and motion segmentation."""
    _validate(spec)
    frames, depths, surfaces, points = [], [], [], []
    for i in range(spec.n_frames):
        depth, surface, pts = _trace(spec, spec.poses[i], i)
        frames.append(_shade(spec, surface, pts, i))
        depths.append(depth)
        surfaces.append(surface)
        points.append(pts)
    moving = np.array([False] + [sp.moving for sp in spec.sprites])
    motion_seg = [moving[s] for s in surfaces]
    flows, flow_valid = [], []
    for k in range(spec.n_frames - 1):
        f, ok = _pair_flow(spec, k + 1, k, depths[k + 1], surfaces[k + 1], points[k + 1], depths[k], surfaces[k])
        flows.append(f)
        flow_valid.append(ok)
    return SceneSample(
        frames=frames,
        intrinsics=spec.intrinsics,
        poses=list(spec.poses),
        depths=[DepthMap(d, np.isfinite(d)) for d in depths],
        flows=flows,
        flow_valid=flow_valid,
        motion_seg=motion_seg,
        name=f"scene_{spec.seed:06d}",
        meta={"surfaces": surfaces},
    )


def random_scene_spec(
    seed: int,
    width: int = 192,
    height: int = 64,
    n_frames: int = 3,
    n_sprites: tuple = (1, 3),
    moving_fraction: float = 0.5,
    camera_moves: bool = True,
    dynamic: bool = True,
) -> SceneSpec:
    """Driving-like scene: sloped ground-to-far plane, box sprites in front of it.

    ``dynamic=False`` keeps every sprite still.
    """
    rng = np.random.default_rng(seed)
    f = 0.52 * width
    K = CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    bg = Background(z0=rng.uniform(8.0, 11.0), slope=rng.uniform(-2.0, -1.4) * (0.32 * f / (height / 2)),
                    texture_seed=int(rng.integers(1 << 30)))
    if camera_moves:
        side = rng.choice([-1.0, 1.0])
        translation = (side * rng.uniform(0.15, 0.35), rng.uniform(-0.03, 0.03), rng.uniform(0.2, 0.5))
        rotation = tuple(rng.normal(0, 0.004, 3))
    else:
        translation, rotation = (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
    poses = constant_motion(n_frames, translation, rotation)

    sprites = []
    count = int(rng.integers(n_sprites[0], n_sprites[1] + 1))
    for _ in range(count):
        z = rng.uniform(3.0, 4.5)
        centre = (rng.uniform(-0.9, 0.9) * z, rng.uniform(-0.15, 0.25) * z, z)
        half = (rng.uniform(0.35, 0.7), rng.uniform(0.3, 0.55))
        velocity = (0.0, 0.0, 0.0)
        if dynamic and rng.random() < moving_fraction:
            speed = rng.uniform(0.12, 0.3)
            heading = rng.uniform(0, 2 * np.pi)
            velocity = (speed * np.cos(heading), 0.5 * speed * np.sin(heading), rng.uniform(-0.15, 0.15))
        sprites.append(
            Sprite(center=centre, half_size=half, velocity=velocity,
                   shape=str(rng.choice(["rect", "disc"])), texture_seed=int(rng.integers(1 << 30)))
        )
    return SceneSpec(intrinsics=K, poses=poses, background=bg, sprites=tuple(sprites), seed=seed)


def generate_dataset(n_scenes: int, seed: int = 0, **kwargs) -> list:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 1 << 31, n_scenes)
    return [render_scene(random_scene_spec(int(s), **kwargs)) for s in seeds]


def training_pairs(samples: Iterable[SceneSample]):
    """Yield ``(sample, target_index)`` for every frame that has a previous frame."""
    for s in samples:
        for t in range(1, len(s.frames)):
            yield s, t


# -- on-disk format -------------------------------------------------------------


def _write_png(path: Path, array):
    try:
        Image.fromarray(array).save(path)
    except OSError as exc:
        raise SampleIOError(f"cannot write {path}: {exc}", path) from exc


def _read_png(path: Path):
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise SampleIOError(f"cannot read {path}: {exc}", path) from exc


def _write_array(path: Path, array):
    try:
        np.save(path, np.ascontiguousarray(array, dtype=np.float32), allow_pickle=False)
    except OSError as exc:
        raise SampleIOError(f"cannot write {path}: {exc}", path) from exc


def _read_array(path: Path):
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError, EOFError) as exc:
        raise SampleIOError(f"cannot read {path}: {exc}", path) from exc


def write_sample(sample: SceneSample, path) -> Path:
    """Write ``sample`` to directory ``path`` (PNG images and masks, .npy arrays)."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SampleIOError(f"cannot create {path}: {exc}", path) from exc
    K = sample.intrinsics
    lines = [
        f"format {SAMPLE_FORMAT}",
        f"name {sample.name}",
        f"frames {len(sample.frames)}",
        f"intrinsics {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}",
    ]
    for i, frame in enumerate(sample.frames):
        rgb = np.clip(np.round(np.moveaxis(frame, 0, -1) * 255), 0, 255).astype(np.uint8)
        _write_png(path / f"image_{i:02d}.png", rgb)
    if sample.poses is not None:
        for i, pose in enumerate(sample.poses):
            lines.append(f"pose_{i:02d} " + " ".join(repr(float(x)) for x in pose.matrix()[:3].ravel()))
    if sample.depths is not None:
        for i, d in enumerate(sample.depths):
            _write_array(path / f"depth_{i:02d}.npy", np.where(d.valid, d.values, 0.0))
            _write_png(path / f"depth_valid_{i:02d}.png", d.valid.astype(np.uint8) * 255)
    if sample.flows is not None:
        for i, f in enumerate(sample.flows):
            _write_array(path / f"flow_{i:02d}.npy", f)
    if sample.flow_valid is not None:
        for i, m in enumerate(sample.flow_valid):
            _write_png(path / f"flow_valid_{i:02d}.png", m.astype(np.uint8) * 255)
    if sample.motion_seg is not None:
        for i, m in enumerate(sample.motion_seg):
            _write_png(path / f"motion_{i:02d}.png", m.astype(np.uint8) * 255)
    try:
        (path / "meta.txt").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise SampleIOError(f"cannot write {path / 'meta.txt'}: {exc}", path) from exc
    return path


def _parse_meta(path: Path) -> dict:
    meta_path = path / "meta.txt"
    try:
        text = meta_path.read_text()
    except OSError as exc:
        raise SampleIOError(f"cannot read {meta_path}: {exc}", meta_path) from exc
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" ")
        meta[key] = value.strip()
    if meta.get("format") != SAMPLE_FORMAT:
        raise SampleIOError(f"{meta_path}: unsupported or missing format tag {meta.get('format')!r}", meta_path)
    return meta


def read_sample(path) -> SceneSample:
    path = Path(path)
    meta = _parse_meta(path)
    try:
        n = int(meta["frames"])
        fx, fy, cx, cy, w, h = meta["intrinsics"].split()
        K = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    except (KeyError, ValueError) as exc:
        raise SampleIOError(f"{path / 'meta.txt'}: malformed header ({exc})", path) from exc

    frames = []
    for i in range(n):
        rgb = _read_png(path / f"image_{i:02d}.png")
        if rgb.shape != (K.height, K.width, 3):
            raise SampleIOError(f"{path / f'image_{i:02d}.png'}: shape {rgb.shape} does not match header", path)
        frames.append(np.moveaxis(rgb.astype(np.float64) / 255.0, -1, 0))

    def optional(pattern, count, reader):
        if not (path / pattern.format(0)).exists():
            return None
        return [reader(path / pattern.format(i)) for i in range(count)]

    poses = None
    if "pose_00" in meta:
        try:
            poses = [
                RigidTransform.from_matrix(np.vstack([np.array(meta[f"pose_{i:02d}"].split(), float).reshape(3, 4), [0, 0, 0, 1]]))
                for i in range(n)
            ]
        except (KeyError, ValueError) as exc:
            raise SampleIOError(f"{path / 'meta.txt'}: malformed pose ({exc})", path) from exc

    depth_values = optional("depth_{:02d}.npy", n, _read_array)
    depth_valid = optional("depth_valid_{:02d}.png", n, _read_png)
    depths = None
    if depth_values is not None:
        depths = [DepthMap(d.astype(np.float64), m > 0) for d, m in zip(depth_values, depth_valid)]
    flows = optional("flow_{:02d}.npy", n - 1, lambda p: _read_array(p).astype(np.float64))
    flow_valid = optional("flow_valid_{:02d}.png", n - 1, lambda p: _read_png(p) > 0)
    motion_seg = optional("motion_{:02d}.png", n, lambda p: _read_png(p) > 0)
    for group in (depths, flows):
        for a in group or []:
            shape = a.values.shape if isinstance(a, DepthMap) else a.shape[-2:]
            if tuple(shape) != (K.height, K.width):
                raise SampleIOError(f"{path}: array of shape {shape} does not match header", path)
    return SceneSample(
        frames=frames, intrinsics=K, poses=poses, depths=depths, flows=flows,
        flow_valid=flow_valid, motion_seg=motion_seg, name=meta.get("name", path.name),
    )


def write_dataset(samples: Iterable[SceneSample], root, split: str = "train") -> Path:
    """Write samples under ``root/<split>/`` and append them to ``root/manifest.txt``."""
    root = Path(root)
    entries = []
    for i, sample in enumerate(samples):
        rel = Path(split) / f"{i:05d}"
        write_sample(sample, root / rel)
        entries.append(f"{split} {rel.as_posix()}")
    manifest = root / "manifest.txt"
    try:
        with manifest.open("a") as fh:
            fh.write("".join(e + "\n" for e in entries))
    except OSError as exc:
        raise SampleIOError(f"cannot write {manifest}: {exc}", manifest) from exc
    return manifest


def read_dataset(root, split: str = "train") -> Iterator[SceneSample]:
    root = Path(root)
    manifest = root / "manifest.txt"
    try:
        lines = manifest.read_text().splitlines()
    except OSError as exc:
        raise SampleIOError(f"cannot read {manifest}: {exc}", manifest) from exc
    for line in lines:
        if not line.strip():
            continue
        s, rel = line.split(maxsplit=1)
        if s == split:
            yield read_sample(root / rel)


# -- KITTI raw layout ------------------------------------------------------------


def _read_calib(path: Path) -> dict:
    if not path.is_file():
        raise IngestionError(f"missing calibration file {path}", path)
    out = {}
    for line in path.read_text().splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            continue
        try:
            out[key.strip()] = np.array(value.split(), dtype=np.float64)
        except ValueError:
            continue  # non-numeric entries such as calib_time
    return out


def ingest_kitti_layout(root, split, image_ext=".png", size=None) -> Iterator[SceneSample]:
    """Stream frame triplets from a raw KITTI directory tree.

    ``split`` is a split file path or an iterable of lines of the form
    ``"<date>/<drive> <frame index> <l|r>"``. ``size=(width, height)`` resizes
    frames and intrinsics. Ground-truth fields are left as ``None``.
    """
    root = Path(root)
    if isinstance(split, (str, Path)):
        split_path = Path(split)
        if not split_path.is_file():
            raise IngestionError(f"missing split file {split_path}", split_path)
        split = split_path.read_text().splitlines()
    for line in split:
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise IngestionError(f"malformed split line {line!r}")
        folder, index, side = parts[0], int(parts[1]), parts[2]
        cam = {"l": "02", "r": "03"}.get(side)
        if cam is None:
            raise IngestionError(f"unknown camera side {side!r} in {line!r}")
        date = Path(folder).parts[0]
        calib_path = root / date / "calib_cam_to_cam.txt"
        calib = _read_calib(calib_path)
        key = f"P_rect_{cam}"
        if key not in calib:
            raise IngestionError(f"{calib_path} has no {key} entry", calib_path)
        P = calib[key].reshape(3, 4)

        frames = []
        for i in (index - 1, index, index + 1):
            img_path = root / folder / f"image_{cam}" / "data" / f"{i:010d}{image_ext}"
            if not img_path.is_file():
                raise IngestionError(f"missing image {img_path}", img_path)
            with Image.open(img_path) as im:
                im = im.convert("RGB")
                native = im.size
                if size is not None:
                    im = im.resize(size, Image.BILINEAR)
                frames.append(np.moveaxis(np.asarray(im, dtype=np.float64) / 255.0, -1, 0))
        K = CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], native[0], native[1])
        if size is not None:
            K = K.resized(*size)
        yield SceneSample(frames=frames, intrinsics=K, name=f"{folder} {index} {side}")
