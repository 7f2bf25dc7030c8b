"""Learnable components: multi-branch encoder, attention blocks, depth decoder,
coarse depth and pose networks, flow providers and the checkpoint archive."""

from __future__ import annotations

import hashlib
import logging
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .costvolume import ChannelGate, VolumeFusion
from .errors import CompatibilityError, DimensionError, ProviderError, RangeError
from .geometry import RigidTransform, axis_angle_to_matrix

logger = logging.getLogger(__name__)

BRANCH_WIDTHS = (16, 32, 64, 128)
MATCH_CHANNELS = 16
MATCH_STRIDE = 4
POSE_SCALE = 0.01
CHECKPOINT_FORMAT = "motiondepth-checkpoint/1"
# images in [0, 1] are standardised before the first convolution
IMAGE_MEAN, IMAGE_STD = 0.45, 0.225


def _check_divisible(x, factor):
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise DimensionError(f"input {H}x{W} must be divisible by {factor}")


def _resize(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _standardise(image):
    return (image - IMAGE_MEAN) / IMAGE_STD


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1)


class BasicBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class Downsample(nn.Module):
    """Strided 3x3 convs taking a branch ``steps`` levels down."""

    def __init__(self, cin, cout, steps):
        super().__init__()
        layers = []
        for i in range(steps):
            last = i == steps - 1
            layers.append(conv3x3(cin, cout if last else cin, stride=2))
            if not last:
                layers.append(nn.ReLU())
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class Exchange(nn.Module):
    """Multi-resolution fusion: every output branch sums all resampled inputs."""

    def __init__(self, widths):
        super().__init__()
        n = len(widths)
        self.paths = nn.ModuleList()
        for i in range(n):  # output branch
            row = nn.ModuleList()
            for j in range(n):  # input branch
                if j == i:
                    row.append(nn.Identity())
                elif j > i:
                    row.append(nn.Conv2d(widths[j], widths[i], 1))
                else:
                    row.append(Downsample(widths[j], widths[i], i - j))
            self.paths.append(row)

    def forward(self, xs):
        out = []
        for i, row in enumerate(self.paths):
            size = xs[i].shape[-2:]
            acc = 0
            for j, path in enumerate(row):
                acc = acc + _resize(path(xs[j]), size)
            out.append(F.relu(acc))
        return out


@dataclass
class BranchFeatures:
    """``stages[b][k]`` is branch ``b + 1`` after stage ``b + 1 + k`` (0-based lists)."""

    stages: list

    @property
    def n_branches(self):
        return len(self.stages)

    def branch(self, b):
        """All stage features of 1-based branch ``b``."""
        return self.stages[b - 1]

    def final(self, b):
        return self.stages[b - 1][-1]

    def resolutions(self):
        return [tuple(s[-1].shape[-2:]) for s in self.stages]


class HighResolutionEncoder(nn.Module):
    """Four parallel branches at strides 1, 2, 4, 8 with exchange after each stage.

    Branch ``b`` appears at stage ``b`` and emits one feature map per stage
    from then on.
    """

    def __init__(self, widths=BRANCH_WIDTHS, in_channels=3):
        super().__init__()
        self.widths = tuple(widths)
        n = len(widths)
        self.stem = nn.Sequential(conv3x3(in_channels, widths[0]), nn.ReLU())
        self.new_branch = nn.ModuleList([Downsample(widths[s - 1], widths[s], 1) for s in range(1, n)])
        self.blocks = nn.ModuleList(
            nn.ModuleList(BasicBlock(widths[b]) for b in range(s + 1)) for s in range(n)
        )
        self.exchange = nn.ModuleList(Exchange(widths[: s + 1]) for s in range(1, n))

    def forward(self, image) -> BranchFeatures:
        n = len(self.widths)
        _check_divisible(image, 2 ** (n - 1))
        xs = [self.stem(_standardise(image))]
        stages = [[] for _ in range(n)]
        for s in range(n):
            if s > 0:
                xs.append(F.relu(self.new_branch[s - 1](xs[-1])))
            xs = [blk(x) for blk, x in zip(self.blocks[s], xs)]
            if s > 0:
                xs = self.exchange[s - 1](xs)
            for b, x in enumerate(xs):
                stages[b].append(x)
        return BranchFeatures(stages)


class MatchingFeatureExtractor(nn.Module):
    """Stride-4, 16-channel features for plane-sweep matching."""

    def __init__(self, channels=MATCH_CHANNELS):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(3, 16, 2), nn.ReLU(),
            conv3x3(16, 32, 2), nn.ReLU(),
            BasicBlock(32),
            nn.Conv2d(32, channels, 1),
        )

    def forward(self, image):
        _check_divisible(image, MATCH_STRIDE)
        return self.body(_standardise(image))


class ChannelAttention(nn.Module):
    """Concatenate query and context, gate channels, project to ``out_channels``."""

    def __init__(self, in_channels, out_channels, reduction=4):
        super().__init__()
        self.gate = ChannelGate(in_channels, reduction)
        self.proj = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, query, context=()):
        size = query.shape[-2:]
        for c in context:
            if c.shape[-2:] != size or c.shape[0] != query.shape[0]:
                raise DimensionError(f"context {tuple(c.shape)} does not match query {tuple(query.shape)}")
        x = torch.cat([query, *context], 1)
        return self.proj(x * self.gate(x))


class NonLocalAttention(nn.Module):
    """Softmax attention over all spatial positions with a residual connection."""

    def __init__(self, channels, key_channels=None):
        super().__init__()
        # equal query/key/value widths let the fused attention kernel apply
        key_channels = key_channels or channels
        self.query = nn.Conv2d(channels, key_channels, 1)
        self.key = nn.Conv2d(channels, key_channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.scale = key_channels ** -0.5

    def attention(self, x):
        """``(B, HW, HW)`` row-stochastic attention weights."""
        q = self.query(x).flatten(2)
        k = self.key(x).flatten(2)
        return torch.softmax(q.transpose(1, 2) @ k * self.scale, dim=-1)

    def forward(self, x):
        B, C, H, W = x.shape
        q = self.query(x).flatten(2).transpose(1, 2).contiguous()
        k = self.key(x).flatten(2).transpose(1, 2).contiguous()
        v = self.value(x).flatten(2).transpose(1, 2).contiguous()
        # fused kernel, same weights as attention() without materializing them
        out = F.scaled_dot_product_attention(q[:, None], k[:, None], v[:, None], scale=self.scale)[:, 0]
        return x + out.transpose(1, 2).reshape(B, C, H, W)


class AttentionDepthDecoder(nn.Module):
    """Coarse-to-fine fusion of the encoder branches and the fused cost volume.

    Level 0 runs at branch ``B - 1`` resolution on the upsampled coarsest
    features concatenated with the volume; each later level attends non-locally
    over the previous output, upsamples it and fuses the next finer branch.
    """

    def __init__(self, widths=BRANCH_WIDTHS, volume_channels=0, reduction=4):
        super().__init__()
        n = len(widths)
        self.n_branches = n
        self.fuse = nn.ModuleList()
        self.refine = nn.ModuleList()
        self.nonlocal_blocks = nn.ModuleList()
        prev = None
        for j in range(n - 1):
            b = n - 1 - j  # 1-based context branch
            n_ctx = n - b + 1  # stages b..n
            if j == 0:
                cin = widths[-1] + volume_channels + n_ctx * widths[b - 1]
            else:
                cin = prev + n_ctx * widths[b - 1]
                self.nonlocal_blocks.append(NonLocalAttention(prev))
            cout = widths[b - 1]
            self.fuse.append(ChannelAttention(cin, cout, reduction))
            self.refine.append(conv3x3(cout, cout))
            prev = cout
        self.head = conv3x3(prev, 1)
        self.volume_channels = volume_channels

    def forward(self, features: BranchFeatures, volume=None):
        n = self.n_branches
        if features.n_branches != n:
            raise DimensionError(f"decoder needs {n} branches, got {features.n_branches}")
        if (volume is None) != (self.volume_channels == 0):
            raise DimensionError("volume presence does not match the decoder configuration")
        x = None
        for j in range(n - 1):
            b = n - 1 - j
            ctx = features.branch(b)
            size = ctx[0].shape[-2:]
            if j == 0:
                query = _resize(features.final(n), size)
                if volume is not None:
                    if volume.shape[-2:] != size:
                        raise DimensionError(f"volume {tuple(volume.shape)} not at branch-{b} resolution {tuple(size)}")
                    query = torch.cat([query, volume], 1)
            else:
                query = _resize(self.nonlocal_blocks[j - 1](x), size)
            x = F.elu(self.refine[j](self.fuse[j](query, ctx)))
        return torch.sigmoid(self.head(x))


def disparity_to_depth(disp, d_min, d_max):
    """Map sigmoid disparity in (0, 1) to depth in [d_min, d_max] via inverse depth."""
    if not 0 < d_min < d_max:
        raise RangeError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if bool((disp < 0).any()) or bool((disp > 1).any()):
        raise RangeError("disparity must lie in [0, 1]")
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return 1.0 / (lo + disp * (hi - lo))


def depth_to_disparity(depth, d_min, d_max):
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return (1.0 / depth - lo) / (hi - lo)


class MultiFrameDepthNet(nn.Module):
    """Encoder, volume fusion and attention decoder producing disparity."""

    def __init__(self, n_bins, widths=BRANCH_WIDTHS, volume_attention=True, use_volume=True):
        super().__init__()
        self.encoder = HighResolutionEncoder(widths)
        self.fusion = VolumeFusion(n_bins, MATCH_CHANNELS, attention=volume_attention) if use_volume else None
        vc = self.fusion.out_channels if use_volume else 0
        self.decoder = AttentionDepthDecoder(widths, volume_channels=vc)

    def forward(self, image, volume=None, match_features=None):
        feats = self.encoder(image)
        V_f = None
        if self.fusion is not None:
            V_f = self.fusion(volume, match_features)
        return self.decoder(feats, V_f), V_f


class CoarseDepthNet(nn.Module):
    """Single-frame encoder-decoder with a sigmoid disparity head."""

    def __init__(self, widths=BRANCH_WIDTHS):
        super().__init__()
        self.down = nn.ModuleList()
        cin = 3
        for w in widths:
            self.down.append(nn.Sequential(conv3x3(cin, w, 2), nn.ELU(), conv3x3(w, w), nn.ELU()))
            cin = w
        self.up = nn.ModuleList()
        skips = list(widths[:-1][::-1]) + [0]
        outs = list(widths[:-1][::-1]) + [widths[0]]
        for skip, out in zip(skips, outs):
            self.up.append(nn.Sequential(conv3x3(cin + skip, out), nn.ELU()))
            cin = out
        self.head = conv3x3(cin, 1)

    def forward(self, image):
        _check_divisible(image, 2 ** len(self.down))
        skips = []
        x = _standardise(image)
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips = skips[:-1][::-1]
        for i, layer in enumerate(self.up):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i < len(skips):
                x = torch.cat([x, skips[i]], 1)
            x = layer(x)
        return torch.sigmoid(self.head(x))


@dataclass(frozen=True)
class PoseEstimate:
    axis_angle: torch.Tensor  # (B, 3) radians
    translation: torch.Tensor  # (B, 3) meters

    def matrix(self):
        """``(B, 4, 4)`` differentiable transform taking target points to the reference."""
        B = self.axis_angle.shape[0]
        T = torch.zeros(B, 4, 4, dtype=self.axis_angle.dtype, device=self.axis_angle.device)
        T[:, :3, :3] = torch.stack([axis_angle_to_matrix(w) for w in self.axis_angle])
        T[:, :3, 3] = self.translation
        T[:, 3, 3] = 1
        return T

    def to_transforms(self):
        return [RigidTransform(m[:3, :3], m[:3, 3]) for m in self.matrix().detach().double().cpu().numpy()]


class PoseNet(nn.Module):
    """Pairwise relative pose from the concatenated target and reference frames."""

    def __init__(self, widths=(16, 32, 64, 128, 128)):
        super().__init__()
        layers, cin = [], 6
        for w in widths:
            layers += [conv3x3(cin, w, 2), nn.ReLU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 6, 1)

    def forward(self, I_t, I_r) -> PoseEstimate:
        if I_t.shape != I_r.shape:
            raise DimensionError(f"pose inputs differ: {tuple(I_t.shape)} vs {tuple(I_r.shape)}")
        out = self.head(self.body(_standardise(torch.cat([I_t, I_r], 1)))).mean((2, 3)) * POSE_SCALE
        return PoseEstimate(out[:, :3], out[:, 3:])


# -- flow providers -------------------------------------------------------------


class FlowProvider:
    """Dense flow ``f`` with ``p_ref = p_target + f`` for a target/reference pair."""

    def __call__(self, I_t, I_r, gt_flow=None):
        raise NotImplementedError


class GroundTruthFlowProvider(FlowProvider):
    """Pass-through of stored synthetic flow."""

    def __call__(self, I_t, I_r, gt_flow=None):
        if gt_flow is None:
            raise ProviderError("ground-truth flow provider called without stored flow")
        if gt_flow.shape[0] != I_t.shape[0] or gt_flow.shape[-2:] != I_t.shape[-2:]:
            raise DimensionError(f"stored flow {tuple(gt_flow.shape)} does not match frames {tuple(I_t.shape)}")
        return gt_flow


class ExternalFlowProvider(FlowProvider):
    """Adapter around a frozen pretrained flow model ``model(I_t, I_r) -> flow``."""

    def __init__(self, model=None):
        self.model = model

    def __call__(self, I_t, I_r, gt_flow=None):
        if self.model is None:
            raise ProviderError("no pretrained flow model is configured for the external provider")
        if I_t.shape != I_r.shape:
            raise DimensionError(f"flow inputs differ: {tuple(I_t.shape)} vs {tuple(I_r.shape)}")
        with torch.no_grad():
            flow = self.model(I_t, I_r)
        if flow.shape[1] != 2 or flow.shape[-2:] != I_t.shape[-2:]:
            raise ProviderError(f"external flow model returned shape {tuple(flow.shape)}")
        return flow


def make_flow_provider(name, model=None) -> FlowProvider:
    if name == "ground_truth":
        return GroundTruthFlowProvider()
    if name == "external":
        return ExternalFlowProvider(model)
    raise ProviderError(f"unknown flow provider {name!r}")


# -- model container and checkpoints ----------------------------------------------


class DepthModel(nn.Module):
    """All trainable parameter sets, keyed by component name."""

    COMPONENTS = ("feature_extractor", "depth_net", "pose_net", "coarse_net")

    def __init__(self, n_bins, volume_attention=True, use_volume=True, widths=BRANCH_WIDTHS):
        super().__init__()
        self.feature_extractor = MatchingFeatureExtractor()
        self.depth_net = MultiFrameDepthNet(n_bins, widths, volume_attention, use_volume)
        self.pose_net = PoseNet()
        self.coarse_net = CoarseDepthNet(widths)


def build_model(seed, n_bins, volume_attention=True, use_volume=True, widths=BRANCH_WIDTHS) -> DepthModel:
    """Construct every parameter set deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DepthModel(n_bins, volume_attention, use_volume, widths)


def parameters_finite(model: nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: DepthModel, config_hash: str, extra=None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "components": {name: getattr(model, name).state_dict() for name in model.COMPONENTS},
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, model: DepthModel, config_hash: str | None = None) -> dict:
    """Load parameters into ``model``; ``config_hash`` must match when given."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CompatibilityError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CompatibilityError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if config_hash is not None and payload["config_hash"] != config_hash:
        raise CompatibilityError(
            f"checkpoint {path} was trained with config {payload['config_hash'][:12]}, current config is {config_hash[:12]}"
        )
    for name in model.COMPONENTS:
        try:
            getattr(model, name).load_state_dict(payload["components"][name])
        except (KeyError, RuntimeError) as exc:
            raise CompatibilityError(f"checkpoint {path}: component {name} does not fit the model ({exc})") from exc
    return payload
