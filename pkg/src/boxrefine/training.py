"""Training-pair construction, losses and the Adam training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import (
    CropTransform,
    JitterParams,
    box_image_to_crop,
    crop_and_resize,
    iou_many,
    jitter_crop_spec,
    make_search_region,
)
from .model import RefineNet, cell_centers, images_to_tensor, save_checkpoint

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class SamplePair:
    ref_crop: np.ndarray
    test_crop: np.ndarray
    target_ltrb: np.ndarray
    target_mask: Optional[np.ndarray]
    transform_test: CropTransform
    ref_index: int = 0
    test_index: int = 0


@dataclass
class LossConfig:
    lambda_mask: float = 1000.0

    def __post_init__(self):
        if self.lambda_mask < 0:
            raise ValueError("lambda_mask must be nonnegative")


@dataclass
class TrainConfig:
    epochs: int = 10
    iterations_per_epoch: int = 200
    batch_size: int = 16
    base_learning_rate: float = 1e-3
    lr_halving_period_epochs: int = 8
    max_frame_interval: int = 50
    seed: int = 0
    val_pairs: int = 64

    def __post_init__(self):
        for name in ("epochs", "iterations_per_epoch", "batch_size", "lr_halving_period_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_frame_interval < 2:
            raise ValueError("max_frame_interval must be >= 2")
        if self.base_learning_rate <= 0:
            raise ValueError("base_learning_rate must be positive")


class TrainingError(RuntimeError):
    pass


def sample_frame_indices(n: int, rng: np.random.Generator, max_interval: int) -> tuple[int, int]:
    """Two distinct frame indices less than ``max_interval`` apart."""
    if n < 2:
        raise ValueError("sequence needs at least 2 frames")
    if max_interval < 2:
        raise ValueError("max_interval must be >= 2 for two distinct frames")
    i_ref = int(rng.integers(n))
    lo, hi = max(0, i_ref - max_interval + 1), min(n - 1, i_ref + max_interval - 1)
    i_test = int(rng.integers(lo, hi))
    if i_test >= i_ref:
        i_test += 1
    return i_ref, i_test


def build_pair(seq, rng: np.random.Generator, jitter: JitterParams = JitterParams(),
               max_interval: int = 50, out_size: int = 256, with_mask: bool = True) -> SamplePair:
    i_ref, i_test = sample_frame_indices(len(seq), rng, max_interval)
    gt_ref, gt_test = seq.boxes[i_ref], seq.boxes[i_test]
    if gt_ref.w <= 0 or gt_test.w <= 0:
        raise ValueError(f"{seq.name}: degenerate ground truth")
    ref_crop, _ = crop_and_resize(seq.frames[i_ref], make_search_region(gt_ref, 2.0, out_size))
    spec = jitter_crop_spec(gt_test, jitter, rng, out_size)
    test_crop, t = crop_and_resize(seq.frames[i_test], spec)
    tb = box_image_to_crop(gt_test, t)
    ltrb = np.clip(np.array(tb.to_ltrb()) / out_size, 0.0, 1.0)
    mask = None
    if with_mask and seq.masks is not None:
        m, _ = crop_and_resize(seq.masks[i_test].astype(np.float32), spec, pad_value=0.0)
        m = m[..., 0] if m.ndim == 3 else m
        mask = (m >= 0.5).astype(np.float32)
    return SamplePair(ref_crop, test_crop, ltrb, mask, t, i_ref, i_test)


def collate(pairs, dtype=torch.float32) -> dict:
    batch = {
        "ref": images_to_tensor(np.stack([p.ref_crop for p in pairs]), dtype),
        "test": images_to_tensor(np.stack([p.test_crop for p in pairs]), dtype),
        "ltrb": torch.as_tensor(np.stack([p.target_ltrb for p in pairs]), dtype=dtype),
    }
    if all(p.target_mask is not None for p in pairs):
        batch["mask"] = torch.as_tensor(np.stack([p.target_mask for p in pairs]), dtype=dtype)
    return batch


def box_loss(pred_ltrb: torch.Tensor, target_ltrb: torch.Tensor) -> torch.Tensor:
    return (pred_ltrb - target_ltrb).square().mean()


def mask_loss(pred_probs: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    p = pred_probs.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target_mask * torch.log(p) + (1.0 - target_mask) * torch.log1p(-p)).mean()


def total_loss(box_l, mask_l, cfg: LossConfig = LossConfig()):
    if mask_l is None:
        return box_l
    return box_l + cfg.lambda_mask * mask_l


def rpn_targets(target_ltrb: torch.Tensor, grid: int, stride_norm: float) -> torch.Tensor:
    """Positive-cell mask ``(B, grid*grid)``: cell centers inside the GT box shrunk to 50%.

    A box covering no cell center falls back to the cell nearest its center.
    """
    cells = cell_centers(grid, stride_norm, target_ltrb.dtype)  # (N, 2)
    l, t, r, b = target_ltrb.unbind(1)
    cx, cy = (l + r) / 2, (t + b) / 2
    hw, hh = (r - l) / 4, (b - t) / 4
    inside = ((cells[None, :, 0] - cx[:, None]).abs() <= hw[:, None]) & \
             ((cells[None, :, 1] - cy[:, None]).abs() <= hh[:, None])
    dist = (cells[None, :, 0] - cx[:, None]).square() + (cells[None, :, 1] - cy[:, None]).square()
    nearest = F.one_hot(dist.argmin(dim=1), cells.shape[0]).bool()
    empty = ~inside.any(dim=1, keepdim=True)
    return torch.where(empty, nearest, inside)


def compute_losses(model: RefineNet, out: dict, batch: dict, loss_cfg: LossConfig) -> dict:
    cfg = model.config
    target = batch["ltrb"]
    if cfg.head_kind == "rpn":
        pos = rpn_targets(target, cfg.grid_size, cfg.stride / cfg.input_size)
        cell_ltrb = out["cell_ltrb"]
        diff = (cell_ltrb - target[:, None, :]).square().mean(-1)
        reg = (diff * pos).sum() / pos.sum()
        score = F.binary_cross_entropy_with_logits(out["score"].flatten(1), pos.to(target.dtype))
        b_loss = reg + score
    else:
        b_loss = box_loss(out["ltrb"], target)
    m_loss = None
    if "mask_logits" in out and "mask" in batch:
        m_loss = mask_loss(torch.sigmoid(out["mask_logits"]), batch["mask"])
    return {"loss": total_loss(b_loss, m_loss, loss_cfg), "box_loss": b_loss, "mask_loss": m_loss}


def lr_at_epoch(base_lr: float, epoch: int, period: int) -> float:
    """Learning rate for zero-based ``epoch``: halved every ``period`` epochs."""
    return base_lr * 0.5 ** (epoch // period)


def ltrb_iou(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    l, t = np.minimum(pred[:, 0], pred[:, 2]), np.minimum(pred[:, 1], pred[:, 3])
    r, b = np.maximum(pred[:, 0], pred[:, 2]), np.maximum(pred[:, 1], pred[:, 3])
    pw, ph = np.maximum(r - l, 1e-9), np.maximum(b - t, 1e-9)
    p = np.stack([l, t, pw, ph], 1)
    g = np.stack([target[:, 0], target[:, 1], target[:, 2] - target[:, 0], target[:, 3] - target[:, 1]], 1)
    return iou_many(p, g)


@torch.no_grad()
def evaluate_pairs(model: RefineNet, batch: dict) -> float:
    was_training = model.training
    model.eval()
    out = model(batch["ref"], batch["test"], with_mask=False)
    model.train(was_training)
    return float(ltrb_iou(out["ltrb"].numpy(), batch["ltrb"].numpy()).mean())


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    val_miou: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    seconds: float = 0.0

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.history]


def make_pair_sampler(sequences, jitter, max_interval, out_size, with_mask, rng):
    usable = [s for s in sequences if len(s) >= 2]
    if not usable:
        raise ValueError("dataset has no sequence with at least 2 frames")

    def sample(n):
        return [build_pair(usable[int(rng.integers(len(usable)))], rng, jitter, max_interval,
                           out_size, with_mask) for _ in range(n)]
    return sample


def train(model: RefineNet, sequences, cfg: TrainConfig, jitter: JitterParams = JitterParams(),
          loss_cfg: LossConfig = LossConfig(), val_sequences=None, log_path=None,
          checkpoint_path=None, fixed_batch: Optional[dict] = None) -> TrainResult:
    """Optimize all parameters with Adam on freshly sampled pairs.

    ``fixed_batch`` replaces sampling with one repeated batch (overfit probe).
    Writes one JSON record per iteration (and per epoch) to ``log_path``.
    """
    if not sequences and fixed_batch is None:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mcfg = model.config
    with_mask = model.mask_head is not None
    sampler = None
    if fixed_batch is None:
        sampler = make_pair_sampler(sequences, jitter, cfg.max_frame_interval, mcfg.input_size, with_mask, rng)
    val_batch = None
    if val_sequences:
        vrng = np.random.default_rng([cfg.seed, 1])
        vs = make_pair_sampler(val_sequences, jitter, cfg.max_frame_interval, mcfg.input_size, False, vrng)
        val_batch = collate(vs(cfg.val_pairs))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_learning_rate)
    result = TrainResult()
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    start = time.perf_counter()
    step = 0
    try:
        model.train()
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg.base_learning_rate, epoch, cfg.lr_halving_period_epochs)
            for g in opt.param_groups:
                g["lr"] = lr
            for _ in range(cfg.iterations_per_epoch):
                batch = fixed_batch if fixed_batch is not None else collate(sampler(cfg.batch_size))
                out = model(batch["ref"], batch["test"])
                losses = compute_losses(model, out, batch, loss_cfg)
                loss = losses["loss"]
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at epoch {epoch} iteration {step} "
                        f"(box_loss={losses['box_loss'].item()}, lr={lr})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                rec = {
                    "iter": step,
                    "epoch": epoch,
                    "loss": loss.item(),
                    "box_loss": losses["box_loss"].item(),
                    "mask_loss": None if losses["mask_loss"] is None else losses["mask_loss"].item(),
                    "lr": lr,
                }
                result.history.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                step += 1
            if val_batch is not None:
                miou = evaluate_pairs(model, val_batch)
                result.val_miou.append(miou)
                log.info("epoch %d: loss %.5f, held-out mIoU %.4f", epoch, result.history[-1]["loss"], miou)
                if log_file:
                    log_file.write(json.dumps({"epoch_end": epoch, "val_miou": miou}) + "\n")
    finally:
        if log_file:
            log_file.close()
    model.eval()
    result.seconds = time.perf_counter() - start
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"train_config": vars(cfg).copy(), "seconds": result.seconds})
        result.checkpoint = Path(checkpoint_path)
    return result
