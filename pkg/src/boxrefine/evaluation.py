"""One-pass evaluation: run records, success/precision metrics, oracle runs,
latency accounting, the ablation grid and report files.

Conventions (fixed so numbers are reproducible):

* success(t) is the fraction of frames with IoU strictly greater than t, for
  t in {0, 0.05, ..., 1}; AUC is the mean of those 21 values, so a perfect
  tracker scores 20/21.
* precision is the fraction of frames whose center error is <= 20 px.
* normalized precision divides the center error componentwise by the GT
  (w, h) and averages the fraction <= t over t in {0, 0.005, ..., 0.5}.
* multi-sequence metrics average per-sequence values, sequences sorted by id.
* latency summaries skip the first ``WARMUP_FRAMES`` tracked frames.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .geometry import Box, JitterParams, boxes_to_array, iou_many
from .model import RefineNet
from .refine import BoxRefiner, SimulatedTracker
from .training import LossConfig, train

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 101)
WARMUP_FRAMES = 3

REPORT_COLUMNS = ("name", "tags", "n_sequences", "n_frames", "auc", "norm_precision", "precision",
                  "base_ms", "refine_ms", "delta_t_ms", "total_ms")
ABLATION_COLUMNS = ("rank", "fusion", "head", "mask", "auc", "norm_precision", "precision",
                    "coarse_auc", "delta_auc", "refine_ms", "train_s", "final_loss")

# full-scale LaSOT AUC (%) of each variant on a SiamRPN++ base tracker;
# reported next to desk-scale grids for context, never asserted.
REFERENCE_HEAD_AUC = {"rpn": 50.2, "rcnn": 48.9, "corner": 54.6,
                      "rpn+mask": 53.7, "rcnn+mask": 51.6, "corner+mask": 55.9}
REFERENCE_FUSION_AUC = {"pixelwise": 55.9, "depthwise": 54.8, "naive": 53.1}


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return boxes_to_array(list(boxes))


@dataclass
class RunResult:
    sequence: str
    coarse: np.ndarray
    refined: Optional[np.ndarray] = None
    gt: Optional[np.ndarray] = None
    base_ms: np.ndarray = None
    refine_ms: np.ndarray = None
    total_ms: np.ndarray = None
    oracle: bool = False
    mode: str = "detached"
    tracker: str = ""

    def __post_init__(self):
        self.coarse = _as_array(self.coarse)
        n = len(self.coarse)
        if self.refined is not None:
            self.refined = _as_array(self.refined)
            if len(self.refined) != n:
                raise ValueError("refined and coarse box counts differ")
        if self.gt is not None:
            self.gt = _as_array(self.gt)
        for name in ("base_ms", "refine_ms", "total_ms"):
            v = getattr(self, name)
            v = np.zeros(n) if v is None else np.asarray(v, dtype=np.float64)
            if len(v) != n:
                raise ValueError(f"{name} has {len(v)} entries for {n} frames")
            if (v < 0).any():
                raise ValueError(f"{name} has negative times")
            setattr(self, name, v)

    @property
    def predictions(self) -> np.ndarray:
        return self.refined if self.refined is not None else self.coarse

    @property
    def tags(self) -> str:
        return "+".join(t for t in ("oracle" if self.oracle else "standard", self.mode, self.tracker) if t)

    def to_dict(self) -> dict:
        def rows(a):
            return [None] * len(self.coarse) if a is None else a.tolist()
        coarse, refined, gt = rows(self.coarse), rows(self.refined), rows(self.gt)
        return {
            "sequence": self.sequence, "oracle": self.oracle, "mode": self.mode, "tracker": self.tracker,
            "frames": [
                {"frame": i, "coarse": coarse[i], "refined": refined[i], "gt": gt[i],
                 "base_ms": float(self.base_ms[i]), "refine_ms": float(self.refine_ms[i]),
                 "total_ms": float(self.total_ms[i])}
                for i in range(len(self.coarse))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        fr = d["frames"]
        refined = None if fr and fr[0]["refined"] is None else [f["refined"] for f in fr]
        gt = None if fr and fr[0]["gt"] is None else [f["gt"] for f in fr]
        return cls(d["sequence"], np.array([f["coarse"] for f in fr], dtype=np.float64),
                   None if refined is None else np.array(refined, dtype=np.float64),
                   None if gt is None else np.array(gt, dtype=np.float64),
                   [f["base_ms"] for f in fr], [f["refine_ms"] for f in fr], [f["total_ms"] for f in fr],
                   d.get("oracle", False), d.get("mode", "detached"), d.get("tracker", ""))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "RunResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def success_auc(pred, gt, thresholds=SUCCESS_THRESHOLDS):
    """Return ``(auc, curve)`` with ``curve[k]`` = fraction of IoU > thresholds[k]."""
    ious = iou_many(_as_array(pred), _as_array(gt))
    curve = (ious[None, :] > np.asarray(thresholds)[:, None]).mean(axis=1)
    return float(curve.mean()), curve


def center_errors(pred, gt, normalized=False) -> np.ndarray:
    p, g = _as_array(pred), _as_array(gt)
    d = (p[:, :2] + p[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2)
    if normalized:
        d = d / g[:, 2:]
    return np.hypot(d[:, 0], d[:, 1])


def precision_curve(pred, gt, thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    err = center_errors(pred, gt)
    return (err[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def precision(pred, gt, pixel_threshold: float = 20.0) -> float:
    return float((center_errors(pred, gt) <= pixel_threshold).mean())


def normalized_precision_curve(pred, gt, thresholds=NORM_PRECISION_THRESHOLDS) -> np.ndarray:
    err = center_errors(pred, gt, normalized=True)
    return (err[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def normalized_precision(pred, gt, thresholds=NORM_PRECISION_THRESHOLDS) -> float:
    return float(normalized_precision_curve(pred, gt, thresholds).mean())


def latency_summary(results, warmup: int = WARMUP_FRAMES) -> dict:
    """Mean per-frame milliseconds over tracked frames after warm-up."""
    base, ref, total = [], [], []
    for r in results:
        sl = slice(1 + warmup, None) if len(r.coarse) > 1 + warmup else slice(1, None)
        base.append(r.base_ms[sl])
        ref.append(r.refine_ms[sl])
        total.append(r.total_ms[sl])
    cat = lambda xs: np.concatenate(xs) if xs and sum(map(len, xs)) else np.zeros(1)
    b, f, t = cat(base).mean(), cat(ref).mean(), cat(total).mean()
    return {"base_ms": float(b), "refine_ms": float(f), "delta_t_ms": float(f), "total_ms": float(t)}


@dataclass
class MetricReport:
    name: str
    tags: str
    auc: float
    precision: float
    norm_precision: float
    success_curve: np.ndarray
    precision_curve: np.ndarray
    norm_precision_curve: np.ndarray
    n_sequences: int
    n_frames: int
    latency: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"name": self.name, "tags": self.tags, "n_sequences": self.n_sequences, "n_frames": self.n_frames,
                "auc": self.auc, "norm_precision": self.norm_precision, "precision": self.precision,
                "base_ms": self.latency.get("base_ms", 0.0), "refine_ms": self.latency.get("refine_ms", 0.0),
                "delta_t_ms": self.latency.get("delta_t_ms", 0.0), "total_ms": self.latency.get("total_ms", 0.0)}


def compute_report(results, name: str = "", use: str = "predictions", gt=None) -> MetricReport:
    """Aggregate RunResults; ``use`` is ``"predictions"`` (refined if any) or ``"coarse"``.

    Ground truth comes from each result unless ``gt`` maps sequence id -> boxes.
    """
    results = sorted(results, key=lambda r: r.sequence)
    if not results:
        raise ValueError("no results to report")
    curves, pcurves, ncurves = [], [], []
    n_frames = 0
    for r in results:
        g = _as_array(gt[r.sequence]) if gt is not None else r.gt
        if g is None:
            raise ValueError(f"{r.sequence}: no ground truth available")
        p = r.coarse if use == "coarse" else r.predictions
        curves.append(success_auc(p, g)[1])
        pcurves.append(precision_curve(p, g))
        ncurves.append(normalized_precision_curve(p, g))
        n_frames += len(p)
    sc = np.mean(curves, axis=0)
    pc = np.mean(pcurves, axis=0)
    nc = np.mean(ncurves, axis=0)
    p20 = float(pc[np.searchsorted(PRECISION_THRESHOLDS, 20.0)])
    tags = sorted({r.tags for r in results})
    return MetricReport(name or tags[0], ",".join(tags), float(sc.mean()), p20, float(nc.mean()),
                        sc, pc, nc, len(results), n_frames, latency_summary(results))


def _box_of(out) -> Box:
    return out if isinstance(out, Box) else out.box


def run_sequence(seq, tracker, refiner=None, mode: str = "detached", tracker_name: str = "") -> RunResult:
    """One-pass run: init on frame 1 GT, then track (and optionally refine) each frame.

    In ``"feedback"`` mode the refined box is handed to ``tracker.update``.
    ``base_ms`` and ``refine_ms`` time the two stages; ``total_ms`` is an
    independent timer around the whole frame step.
    """
    if mode not in ("detached", "feedback"):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(seq)
    gt0 = seq.boxes[0]
    tracker.init(seq.frames[0], gt0)
    if refiner is not None and hasattr(refiner, "initialize"):
        refiner.initialize(seq.frames[0], gt0)
    coarse, refined = [gt0], [gt0]
    base_ms, refine_ms, total_ms = [0.0], [0.0], [0.0]
    clock = time.perf_counter
    for i in range(1, n):
        frame = seq.frames[i]
        t_start = clock()
        t0 = clock()
        cb = tracker.track(frame)
        t1 = clock()
        rb = cb
        if refiner is not None:
            rb = _box_of(refiner.refine(frame, cb))
        t2 = clock()
        if mode == "feedback" and refiner is not None and hasattr(tracker, "update"):
            tracker.update(rb)
        coarse.append(cb)
        refined.append(rb)
        t_end = clock()
        base_ms.append((t1 - t0) * 1e3)
        refine_ms.append((t2 - t1) * 1e3 if refiner is not None else 0.0)
        total_ms.append((t_end - t_start) * 1e3)
    return RunResult(seq.name, coarse, refined if refiner is not None else None, seq.boxes,
                     base_ms, refine_ms, total_ms, False, mode, tracker_name)


def oracle_run(seq, estimator, tracker=None, tracker_name: str = "oracle") -> RunResult:
    """Every frame's search region is centered on the GT center.

    With a base ``tracker`` the run is paired with the standard protocol: the
    tracker's box for the frame keeps its size but is moved to the GT center,
    so only localization error is removed. Without one, the size comes from
    the previous frame's refined box. ``estimator`` needs ``refine(frame,
    box)`` returning a Box or an object with ``.box``; its
    ``initialize(frame, gt)`` is called when present.
    """
    n = len(seq)
    gt0 = seq.boxes[0]
    if tracker is not None:
        tracker.init(seq.frames[0], gt0)
    if hasattr(estimator, "initialize"):
        estimator.initialize(seq.frames[0], gt0)
    coarse, refined = [gt0], [gt0]
    base_ms, refine_ms, total_ms = [0.0], [0.0], [0.0]
    clock = time.perf_counter
    for i in range(1, n):
        frame = seq.frames[i]
        t_start = clock()
        size_from = tracker.track(frame) if tracker is not None else refined[-1]
        t1 = clock()
        cx, cy = seq.boxes[i].center
        cb = Box.from_center(cx, cy, size_from.w, size_from.h)
        rb = _box_of(estimator.refine(frame, cb))
        t2 = clock()
        coarse.append(cb)
        refined.append(rb)
        t_end = clock()
        base_ms.append((t1 - t_start) * 1e3)
        refine_ms.append((t2 - t1) * 1e3)
        total_ms.append((t_end - t_start) * 1e3)
    return RunResult(seq.name, coarse, refined, seq.boxes, base_ms, refine_ms, total_ms,
                     True, "detached", tracker_name)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evaluate(sequences, tracker_spec, model=None, mode: str = "detached", oracle: bool = False,
             mask_enabled: bool = False, workers: int = 1, tracker_name: str = "sim") -> list:
    """Run every sequence with a fresh simulated tracker (stream = index) and refiner.

    Oracle runs pair with the same tracker when ``tracker_spec`` is given and
    fall back to previous-prediction sizes when it is ``None``.
    """
    def one(item):
        k, seq = item
        refiner = BoxRefiner(model, mask_enabled=mask_enabled) if model is not None else None
        if oracle:
            if refiner is None:
                raise ValueError("oracle runs need a model")
            trk = SimulatedTracker(tracker_spec, seq.boxes, stream=k) if tracker_spec is not None else None
            return oracle_run(seq, refiner, trk, tracker_name if trk is not None else "oracle")
        return run_sequence(seq, SimulatedTracker(tracker_spec, seq.boxes, stream=k), refiner, mode, tracker_name)

    return _map(one, list(enumerate(sequences)), workers)


def ablation_configs(fusions=("pixelwise", "depthwise", "naive"), heads=("corner", "rpn", "rcnn"),
                     masks=(True, False)) -> list:
    return [{"fusion_kind": f, "head_kind": h, "with_mask": m} for f, h, m in itertools.product(fusions, heads, masks)]


def ablation_grid(train_sequences, eval_sequences, model_config, train_config, tracker_spec,
                  jitter=None, loss_config=None, configs=None, workers: int = 1, progress=None) -> list:
    """Train and evaluate every configuration under identical seeds and budgets.

    Returns rows ranked by refined AUC (ties keep grid order).
    """
    jitter = jitter or JitterParams()
    loss_config = loss_config or LossConfig()
    configs = configs if configs is not None else ablation_configs()
    rows = []
    for k, overrides in enumerate(configs):
        mcfg = dataclasses.replace(model_config, **overrides)
        torch.manual_seed(train_config.seed)
        model = RefineNet(mcfg)
        res = train(model, train_sequences, train_config, jitter, loss_config)
        results = evaluate(eval_sequences, tracker_spec, model, workers=workers)
        rep = compute_report(results)
        coarse = compute_report(results, use="coarse")
        rows.append({
            "fusion": mcfg.fusion_kind, "head": mcfg.head_kind, "mask": mcfg.with_mask,
            "auc": rep.auc, "norm_precision": rep.norm_precision, "precision": rep.precision,
            "coarse_auc": coarse.auc, "delta_auc": rep.auc - coarse.auc,
            "refine_ms": rep.latency["refine_ms"], "train_s": res.seconds,
            "final_loss": float(np.mean(res.losses[-10:])), "_order": k,
        })
        if progress:
            progress(k + 1, len(configs), rows[-1])
    rows.sort(key=lambda r: (-r["auc"], r["_order"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
        del r["_order"]
    return rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_table_csv(rows, columns, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})
    return path


def format_table(rows, columns) -> str:
    cells = [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()
    out = [line(columns), line(["-" * w for w in widths])]
    out += [line(row) for row in cells]
    return "\n".join(out) + "\n"


def write_ablation(rows, out_dir) -> list:
    out_dir = Path(out_dir)
    csv_path = write_table_csv(rows, ABLATION_COLUMNS, out_dir / "ablation.csv")
    txt = format_table(rows, ABLATION_COLUMNS)
    ctx = ["", "Full-scale reference LaSOT AUC (%), context only:",
           "  heads:  " + ", ".join(f"{k} {v}" for k, v in REFERENCE_HEAD_AUC.items()),
           "  fusion: " + ", ".join(f"{k} {v}" for k, v in REFERENCE_FUSION_AUC.items())]
    txt_path = out_dir / "ablation.txt"
    txt_path.write_text(txt + "\n".join(ctx) + "\n")
    return [csv_path, txt_path]


def _plot_curves(reports, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    meta = {"Software": None}
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        ax.plot(SUCCESS_THRESHOLDS, r.success_curve, label=f"{r.name} [{r.auc:.3f}]")
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    ax.set_title("Success plot")
    p = out_dir / "success.png"
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        ax.plot(PRECISION_THRESHOLDS, r.precision_curve, label=f"{r.name} [{r.precision:.3f}]")
    ax.set_xlabel("location error threshold (px)")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    ax.set_title("Precision plot")
    p = out_dir / "precision.png"
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(reports) + 2), 4))
    ax.bar(range(len(reports)), [r.auc for r in reports], color="tab:blue")
    ax.set_xticks(range(len(reports)), [r.name for r in reports], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("AUC")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    p = out_dir / "auc_bars.png"
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)
    return paths


def emit_report(reports, out_dir, formats=("csv", "txt", "png"), plot_dir=None) -> list:
    """Write ``report.csv`` (columns ``REPORT_COLUMNS``), ``report.txt`` and curve plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in reports]
    paths = []
    if "csv" in formats:
        paths.append(write_table_csv(rows, REPORT_COLUMNS, out_dir / "report.csv"))
    if "txt" in formats:
        p = out_dir / "report.txt"
        p.write_text(format_table(rows, REPORT_COLUMNS))
        paths.append(p)
    if "png" in formats:
        plot_dir = Path(plot_dir) if plot_dir else out_dir
        plot_dir.mkdir(parents=True, exist_ok=True)
        paths += _plot_curves(reports, plot_dir)
    return paths


def save_results(results, out_dir, prefix: str = "") -> list:
    out_dir = Path(out_dir)
    return [r.save(out_dir / f"{prefix}{r.sequence}.json") for r in results]


def load_results(paths) -> list:
    files = []
    for p in map(Path, paths):
        if not p.exists():
            raise FileNotFoundError(f"run results {p} not found")
        files +=  sorted(p.rglob("*.json")) if p.is_dir() else [p]
    return [RunResult.load(f) for f in files]


def latency_consistent(latency: dict, tol: float = 0.05) -> bool:
    """Whether mean total time equals mean base + mean refine within ``tol`` relative."""
    total = latency["total_ms"]
    parts = latency["base_ms"] + latency["delta_t_ms"]
    return math.isclose(total, parts, rel_tol=tol)
