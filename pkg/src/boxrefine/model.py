"""Siamese refinement network: backbone, fusion, box heads and mask head.

Feature cell ``(r, c)`` corresponds to the crop pixel center
``((c + 0.5) * stride, (r + 0.5) * stride)``. Box heads emit
``(left, top, right, bottom)`` normalized by ``input_size``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import FUSION_KINDS, correlate
from .geometry import Box

HEAD_KINDS = ("rpn", "rcnn", "corner")
CHECKPOINT_VERSION = 1

# images are fed as (pixel / 255 - PIXEL_MEAN) / PIXEL_STD, channels first
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    stage_channels: tuple = (16, 32, 64, 64)
    fusion_kind: str = "pixelwise"
    head_kind: str = "corner"
    with_mask: bool = False
    input_size: int = 256
    softargmax_temperature: float = 1.0
    fused_channels: int = 64

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not self.stage_channels:
            raise ValueError("backbone needs at least one stage")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion_kind {self.fusion_kind!r}; expected one of {FUSION_KINDS}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head_kind {self.head_kind!r}; expected one of {HEAD_KINDS}")
        if self.input_size % self.stride:
            raise ValueError(f"input_size {self.input_size} not divisible by total stride {self.stride}")
        if self.softargmax_temperature <= 0:
            raise ValueError("softargmax_temperature must be positive")

    @property
    def stride(self) -> int:
        return 2 ** len(self.stage_channels)

    @property
    def grid_size(self) -> int:
        return self.input_size // self.stride

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d


@dataclass
class HeadOutput:
    box_crop: Box
    score: Optional[float] = None
    heatmaps: Optional[tuple] = None
    mask: Optional[np.ndarray] = None


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HWC (or NHWC) arrays in [0, 255] -> normalized NCHW tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return ((t / 255.0 - PIXEL_MEAN) / PIXEL_STD).to(dtype)


def conv_bn_relu(cin, cout, stride=1, kernel_size=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size, stride, kernel_size // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def soft_argmax(heatmap: torch.Tensor, stride: float, temperature: float = 1.0):
    """Expected grid-center position under ``softmax(heatmap / temperature)``.

    ``heatmap`` is ``(..., H, W)``; returns ``(x, y)`` tensors of shape ``...``
    in crop pixels.
    """
    h, w = heatmap.shape[-2:]
    prob = F.softmax(heatmap.flatten(-2) / temperature, dim=-1).view(heatmap.shape)
    xs = (torch.arange(w, dtype=heatmap.dtype, device=heatmap.device) + 0.5) * stride
    ys = (torch.arange(h, dtype=heatmap.dtype, device=heatmap.device) + 0.5) * stride
    x = (prob.sum(-2) * xs).sum(-1)
    y = (prob.sum(-1) * ys).sum(-1)
    return x, y


def cell_centers(grid: int, stride: float, dtype=torch.float32):
    """``(grid*grid, 2)`` crop-pixel ``(x, y)`` centers in row-major order."""
    idx = (torch.arange(grid, dtype=dtype) + 0.5) * stride
    yy, xx = torch.meshgrid(idx, idx, indexing="ij")
    return torch.stack([xx.flatten(), yy.flatten()], dim=1)


class Backbone(nn.Module):
    """Stride-2 stages of two Conv-BN-ReLU blocks each."""

    def __init__(self, stage_channels=(16, 32, 64, 64), in_channels=3):
        super().__init__()
        stages = []
        cin = in_channels
        for cout in stage_channels:
            stages.append(nn.Sequential(conv_bn_relu(cin, cout, stride=2), conv_bn_relu(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return x, skips


class FusionLayer(nn.Module):
    """Correlation followed by a 1x1 Conv-BN-ReLU to a fixed width."""

    def __init__(self, kind, feat_channels, kernel_hw, out_channels=64):
        super().__init__()
        self.kind = kind
        if kind == "pixelwise":
            corr_channels = kernel_hw[0] * kernel_hw[1]
        elif kind == "depthwise":
            corr_channels = feat_channels
        else:
            corr_channels = 1
        self.adjust = conv_bn_relu(corr_channels, out_channels, kernel_size=1)

    def forward(self, ref_feat, test_feat):
        return self.adjust(correlate(ref_feat, test_feat, self.kind))


def _tower(channels, depth=4):
    return nn.Sequential(*[conv_bn_relu(channels, channels) for _ in range(depth)])


class CornerHead(nn.Module):
    def __init__(self, channels=64):
        super().__init__()
        self.tower = _tower(channels)
        self.pred = nn.Conv2d(channels, 2, 1)

    def forward(self, fused):
        heat = self.pred(self.tower(fused))
        return heat[:, 0], heat[:, 1]


class RPNHead(nn.Module):
    """Per-cell nonnegative edge distances (normalized) and score logits."""

    def __init__(self, channels=64):
        super().__init__()
        self.box_tower = _tower(channels)
        self.box_pred = nn.Conv2d(channels, 4, 1)
        self.score_tower = _tower(channels)
        self.score_pred = nn.Conv2d(channels, 1, 1)

    def forward(self, fused):
        dist = F.softplus(self.box_pred(self.box_tower(fused)))
        score = self.score_pred(self.score_tower(fused))[:, 0]
        return dist, score


class RCNNHead(nn.Module):
    def __init__(self, channels=64):
        super().__init__()
        self.tower = _tower(channels)
        self.fc = nn.Linear(channels, 4)

    def forward(self, fused):
        pooled = self.tower(fused).mean(dim=(2, 3))
        return torch.sigmoid(self.fc(pooled))


class MaskHead(nn.Module):
    """Decoder upsampling x2 per stage and fusing the matching backbone skip."""

    def __init__(self, stage_channels, in_channels=64):
        super().__init__()
        blocks = []
        cin = in_channels
        # skips ordered shallow -> deep; the deepest one is the fused map's level
        for skip_ch in reversed(stage_channels[:-1]):
            cout = max(skip_ch, 8)
            blocks.append(nn.Sequential(conv_bn_relu(cin + skip_ch, cout), conv_bn_relu(cout, cout)))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Sequential(conv_bn_relu(cin, 8), nn.Conv2d(8, 1, 3, padding=1))

    def logits(self, fused, skips):
        x = fused
        for block, skip in zip(self.blocks, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.final(x)[:, 0]

    def forward(self, fused, skips):
        return torch.sigmoid(self.logits(fused, skips))


class RefineNet(nn.Module):
    """Shared backbone on both branches, a fusion layer, one box head, optional mask head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        grid = config.grid_size
        self.backbone = Backbone(config.stage_channels)
        self.fusion = FusionLayer(config.fusion_kind, config.stage_channels[-1], (grid, grid),
                                  config.fused_channels)
        if config.head_kind == "corner":
            self.head = CornerHead(config.fused_channels)
        elif config.head_kind == "rpn":
            self.head = RPNHead(config.fused_channels)
        else:
            self.head = RCNNHead(config.fused_channels)
        self.mask_head = MaskHead(config.stage_channels, config.fused_channels) if config.with_mask else None

    def _check_input(self, x):
        s = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) input, got {tuple(x.shape)}")

    def extract_features(self, x):
        self._check_input(x)
        return self.backbone(x)

    def fuse(self, ref_feat, test_feat):
        return self.fusion(ref_feat, test_feat)

    def box_outputs(self, fused) -> dict:
        """Head-specific raw outputs plus ``ltrb``: normalized (B, 4) boxes."""
        cfg = self.config
        if cfg.head_kind == "corner":
            tl, br = self.head(fused)
            x1, y1 = soft_argmax(tl, cfg.stride, cfg.softargmax_temperature)
            x2, y2 = soft_argmax(br, cfg.stride, cfg.softargmax_temperature)
            ltrb = torch.stack([x1, y1, x2, y2], dim=1) / cfg.input_size
            return {"ltrb": ltrb, "heatmaps": (tl, br)}
        if cfg.head_kind == "rpn":
            dist, score = self.head(fused)
            cells = cell_centers(cfg.grid_size, cfg.stride / cfg.input_size, fused.dtype)
            d = dist.flatten(2).transpose(1, 2)  # (B, N, 4)
            cell_ltrb = torch.cat([cells - d[..., :2], cells + d[..., 2:]], dim=-1)
            best = score.flatten(1).argmax(dim=1)
            ltrb = cell_ltrb[torch.arange(len(best)), best]
            return {"ltrb": ltrb, "cell_ltrb": cell_ltrb, "score": score}
        return {"ltrb": self.head(fused)}

    def forward_from_reference(self, ref_feat, test, with_mask=None) -> dict:
        if with_mask is None:
            with_mask = self.mask_head is not None
        test_feat, skips = self.extract_features(test)
        fused = self.fuse(ref_feat, test_feat)
        out = self.box_outputs(fused)
        if with_mask:
            if self.mask_head is None:
                raise ValueError("model was built without a mask head")
            out["mask_logits"] = self.mask_head.logits(fused, skips)
        return out

    def forward(self, ref, test, with_mask=None) -> dict:
        ref_feat, _ = self.extract_features(ref)
        return self.forward_from_reference(ref_feat, test, with_mask)


def decode_rpn(cell_ltrb: np.ndarray, score: np.ndarray):
    """Pick the highest-score cell (lowest row-major index on ties).

    ``cell_ltrb`` is ``(N, 4)`` and ``score`` has N elements in row-major
    cell order. Returns ``(index, ltrb, score)``.
    """
    flat = np.asarray(score).reshape(-1)
    idx = int(np.argmax(flat))
    return idx, np.asarray(cell_ltrb)[idx], float(flat[idx])


def ltrb_to_crop_box(ltrb, input_size: int, min_size: float = 1.0) -> Box:
    """Denormalize a (possibly unordered) ltrb vector to a valid crop box."""
    l, t, r, b = (float(v) * input_size for v in ltrb)
    l, r = min(l, r), max(l, r)
    t, b = min(t, b), max(t, b)
    return Box.from_ltrb(l, t, max(r, l + min_size), max(b, t + min_size)).clamp(input_size, input_size, min_size)


def to_head_output(out: dict, config: ModelConfig, index: int = 0) -> HeadOutput:
    """Convert batch element ``index`` of ``RefineNet`` raw outputs."""
    ltrb = out["ltrb"][index].detach().cpu().numpy()
    score = None
    if "score" in out:
        score = float(out["score"][index].max())
    heatmaps = None
    if "heatmaps" in out:
        heatmaps = tuple(h[index].detach().cpu().numpy() for h in out["heatmaps"])
    mask = None
    if "mask_logits" in out:
        mask = torch.sigmoid(out["mask_logits"][index]).detach().cpu().numpy()
    return HeadOutput(ltrb_to_crop_box(ltrb, config.input_size), score, heatmaps, mask)


def save_checkpoint(path, model: RefineNet, extra: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> RefineNet:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    config = ModelConfig(**payload["config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(f"{path}: checkpoint config {config} does not match requested {expected_config}")
    model = RefineNet(config)
    first = next(iter(payload["state_dict"].values()), None)
    if first is not None and first.is_floating_point():
        model.to(first.dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
