"""Command-line entry point: ``boxrefine <command> [options]``.

Every command writes under ``--out`` using a fixed layout::

    config.resolved   checkpoints/   results/   reports/   plots/
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .config import ConfigError, RunConfig, load_config
from .data import generate_synthetic_dataset, load_dataset, load_sequence, save_dataset
from .fusion import depthwise_correlation, naive_correlation, pixelwise_correlation
from .geometry import crop_and_resize, make_search_region
from .model import RefineNet, images_to_tensor, load_checkpoint
from .refine import calibrate_translation_noise
from .training import train

log = logging.getLogger("boxrefine")

LAYOUT = ("checkpoints", "results", "reports", "plots")


def _common(p):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--out", type=Path, help="run directory (overrides paths.out)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--workers", type=int, help="parallel sequence evaluations")
    p.add_argument("--preset", choices=("micro", "small"), help="budget preset applied before the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def _checkpoint_flag(p, required=False):
    p.add_argument("--checkpoint", type=Path, required=required,
                   help="model checkpoint (default: paths.checkpoint, then <out>/checkpoints/model.pt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxrefine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/eval datasets")
    _common(p)

    p = sub.add_parser("train", help="train a refinement model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, help="iterations per epoch")

    p = sub.add_parser("eval", help="base tracker vs base tracker + refinement")
    _common(p)
    _checkpoint_flag(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--no-refine", action="store_true", help="evaluate the base tracker alone")
    p.add_argument("--mode", choices=("detached", "feedback"))
    p.add_argument("--mask", action="store_true", help="run the mask head at inference")

    p = sub.add_parser("oracle", help="search region centered on the ground truth")
    _common(p)
    _checkpoint_flag(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--unpaired", action="store_true",
                   help="take the search size from the previous refined box instead of the base tracker")

    p = sub.add_parser("ablate", help="fusion x head x mask grid")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("demo", help="render naive / depth-wise / pixel-wise responses")
    _common(p)
    _checkpoint_flag(p)
    p.add_argument("--sequence", type=Path, help="sequence directory (default: first synthetic eval sequence)")
    p.add_argument("--frames", type=int, nargs=2, default=(0, 10), metavar=("REF", "TEST"))

    p = sub.add_parser("report", help="merge saved run results into reports and plots")
    _common(p)
    p.add_argument("results", nargs="+", type=Path, help="RunResult JSON files or directories")
    return parser


def resolve(args) -> tuple[RunConfig, Path]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.workers is not None:
        overrides.append({"eval": {"workers": args.workers}})
    if getattr(args, "epochs", None) is not None:
        overrides.append({"train": {"epochs": args.epochs}})
    if getattr(args, "iterations", None) is not None:
        overrides.append({"train": {"iterations_per_epoch": args.iterations}})
    if getattr(args, "mode", None) is not None:
        overrides.append({"eval": {"mode": args.mode}})
    if getattr(args, "mask", False):
        overrides.append({"eval": {"mask_enabled": True}})
    cfg = load_config(args.config, args.preset, overrides)
    out = Path(args.out) if args.out is not None else Path(cfg.paths.out)
    cfg.paths.out = str(out)
    for d in LAYOUT:
        (out / d).mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved")
    return cfg, out


def datasets(cfg: RunConfig, data_dir=None):
    data_dir = data_dir or cfg.paths.dataset
    if data_dir is not None:
        data_dir = Path(data_dir)
        train_seqs = load_dataset(data_dir / "train")
        eval_dir = data_dir / "eval"
        eval_seqs = load_dataset(eval_dir) if eval_dir.exists() else generate_synthetic_dataset(cfg.eval_data_spec())
        return train_seqs, eval_seqs
    return generate_synthetic_dataset(cfg.data), generate_synthetic_dataset(cfg.eval_data_spec())


def tracker_spec(cfg: RunConfig, sequences):
    spec = cfg.tracker
    if cfg.eval.target_coarse_iou is None:
        return spec
    ratio = spec.sigma_log_scale / spec.sigma_translation if spec.sigma_translation > 0 else 1.0
    spec = calibrate_translation_noise(sequences, cfg.eval.target_coarse_iou, spec, ratio)
    log.info("calibrated tracker: sigma_translation=%.4f sigma_log_scale=%.4f",
             spec.sigma_translation, spec.sigma_log_scale)
    return spec


def find_checkpoint(args, cfg, out, required=True):
    for cand in (getattr(args, "checkpoint", None), cfg.paths.checkpoint, out / "checkpoints" / "model.pt"):
        if cand is not None and Path(cand).exists():
            return Path(cand)
    if getattr(args, "checkpoint", None) is not None:
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    if required:
        raise FileNotFoundError("no checkpoint given and none found under the run directory")
    return None


def cmd_gen_data(args):
    cfg, out = resolve(args)
    root = out / "data"
    save_dataset(generate_synthetic_dataset(cfg.data), root / "train")
    save_dataset(generate_synthetic_dataset(cfg.eval_data_spec()), root / "eval")
    print(f"wrote {cfg.data.num_sequences} train and {cfg.eval.num_sequences} eval sequences to {root}")


def cmd_train(args):
    cfg, out = resolve(args)
    train_seqs, eval_seqs = datasets(cfg, args.data)
    torch.manual_seed(cfg.seed)
    model = RefineNet(cfg.model)
    log_path = out / "reports" / "train_metrics.jsonl"
    if log_path.exists():
        log_path.unlink()
    res = train(model, train_seqs, cfg.train, cfg.jitter, cfg.loss, val_sequences=eval_seqs,
                log_path=log_path, checkpoint_path=out / "checkpoints" / "model.pt")
    print(f"trained {len(res.history)} iterations in {res.seconds:.1f}s; "
          f"final loss {np.mean(res.losses[-10:]):.5f}; held-out mIoU {res.val_miou[-1]:.4f}")
    print(f"checkpoint: {res.checkpoint}")


def _load_model(args, cfg, out):
    ckpt = find_checkpoint(args, cfg, out)
    return load_checkpoint(ckpt, expected_config=cfg.model)


def cmd_eval(args):
    cfg, out = resolve(args)
    _, eval_seqs = datasets(cfg, args.data)
    spec = tracker_spec(cfg, eval_seqs)
    model = None if args.no_refine else _load_model(args, cfg, out)
    results = ev.evaluate(eval_seqs, spec, model, cfg.eval.mode, mask_enabled=cfg.eval.mask_enabled,
                          workers=cfg.eval.workers)
    tag = results[0].tags
    ev.save_results(results, out / "results" / tag)
    reports = [ev.compute_report(results, name="base", use="coarse")]
    if model is not None:
        reports.append(ev.compute_report(results, name="base+refine"))
    ev.emit_report(reports, out / "reports", plot_dir=out / "plots")
    for r in reports:
        print(f"{r.name}: auc {r.auc:.4f}  p_norm {r.norm_precision:.4f}  p@20 {r.precision:.4f}  "
              f"refine {r.latency['delta_t_ms']:.2f} ms/frame")


def cmd_oracle(args):
    cfg, out = resolve(args)
    _, eval_seqs = datasets(cfg, args.data)
    spec = tracker_spec(cfg, eval_seqs)
    model = _load_model(args, cfg, out)
    standard = ev.evaluate(eval_seqs, spec, model, cfg.eval.mode, workers=cfg.eval.workers)
    oracle = ev.evaluate(eval_seqs, None if args.unpaired else spec, model, oracle=True,
                         workers=cfg.eval.workers)
    ev.save_results(standard, out / "results" / standard[0].tags)
    ev.save_results(oracle, out / "results" / oracle[0].tags)
    reports = [ev.compute_report(standard, name="standard"), ev.compute_report(oracle, name="oracle")]
    ev.emit_report(reports, out / "reports", plot_dir=out / "plots")
    for r in reports:
        print(f"{r.name}: auc {r.auc:.4f}  p_norm {r.norm_precision:.4f}  p@20 {r.precision:.4f}")


def cmd_ablate(args):
    cfg, out = resolve(args)
    train_seqs, eval_seqs = datasets(cfg, args.data)
    eval_seqs = eval_seqs[: cfg.ablation.num_eval_sequences]
    spec = tracker_spec(cfg, eval_seqs)
    budget = dataclasses.replace(cfg.train, epochs=cfg.ablation.epochs,
                                 iterations_per_epoch=cfg.ablation.iterations_per_epoch)
    configs = ev.ablation_configs(cfg.ablation.fusions, cfg.ablation.heads, cfg.ablation.masks)

    def progress(k, n, row):
        print(f"[{k}/{n}] {row['fusion']}/{row['head']}/{'mask' if row['mask'] else 'nomask'}: auc {row['auc']:.4f}")

    rows = ev.ablation_grid(train_seqs, eval_seqs, cfg.model, budget, spec, cfg.jitter, cfg.loss,
                            configs, cfg.eval.workers, progress)
    paths = ev.write_ablation(rows, out / "reports")
    print(paths[1].read_text())


def _tile(maps, cols):
    n = len(maps)
    rows = -(-n // cols)
    h, w = maps[0].shape
    grid = np.full((rows * (h + 1), cols * (w + 1)), np.nan)
    for k, m in enumerate(maps):
        r, c = divmod(k, cols)
        rng = np.ptp(m) or 1.0
        grid[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = (m - m.min()) / rng
    return grid


@torch.no_grad()
def cmd_demo(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg, out = resolve(args)
    ckpt = find_checkpoint(args, cfg, out, required=False)
    if ckpt is not None:
        model = load_checkpoint(ckpt, expected_config=cfg.model)
    else:
        log.warning("no checkpoint found; rendering responses of an untrained backbone")
        torch.manual_seed(cfg.seed)
        model = RefineNet(cfg.model).eval()
    seq = load_sequence(args.sequence) if args.sequence else \
        generate_synthetic_dataset(dataclasses.replace(cfg.eval_data_spec(), num_sequences=1))[0]
    i_ref, i_test = args.frames
    if not (0 <= i_ref < len(seq) and 0 <= i_test < len(seq)):
        raise ValueError(f"frame indices {args.frames} outside sequence of length {len(seq)}")
    size = cfg.model.input_size
    ref, _ = crop_and_resize(seq.frames[i_ref], make_search_region(seq.boxes[i_ref], 2.0, size))
    test, _ = crop_and_resize(seq.frames[i_test], make_search_region(seq.boxes[i_test], 2.0, size))
    kf, _ = model.extract_features(images_to_tensor(ref))
    sf, _ = model.extract_features(images_to_tensor(test))
    naive = naive_correlation(kf, sf)[0].numpy()
    dw = depthwise_correlation(kf, sf)[0, :32].numpy()
    pw = pixelwise_correlation(kf, sf)[0].numpy()

    fig, axes = plt.subplots(1, 5, figsize=(20, 4.4))
    panels = [(np.clip(ref, 0, 255).astype(np.uint8), "(a) reference"), (np.clip(test, 0, 255).astype(np.uint8), "(b) test"),
              (naive[0], "(c) naive"), (_tile(list(dw), 8), f"(d) depth-wise, first {len(dw)} channels"),
              (_tile(list(pw), int(np.ceil(np.sqrt(len(pw))))), f"(e) pixel-wise, {len(pw)} channels")]
    for ax, (img, title) in zip(axes, panels):
        ax.imshow(img, cmap=None if img.ndim == 3 else "viridis")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    path = out / "plots" / "correlation_demo.png"
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
    print(f"wrote {path}")


def cmd_report(args):
    cfg, out = resolve(args)
    results = ev.load_results(args.results)
    if not results:
        raise ValueError("no run results found")
    groups = {}
    for r in results:
        groups.setdefault(r.tags, []).append(r)
    reports = []
    for tag in sorted(groups):
        rs = groups[tag]
        if all(r.refined is not None for r in rs) and not rs[0].oracle:
            reports.append(ev.compute_report(rs, name=f"{tag}:base", use="coarse"))
            reports.append(ev.compute_report(rs, name=f"{tag}:refined"))
        else:
            reports.append(ev.compute_report(rs, name=tag))
    ev.emit_report(reports, out / "reports", plot_dir=out / "plots")
    print(ev.format_table([r.row() for r in reports], ev.REPORT_COLUMNS))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "ablate": cmd_ablate,
    "demo": cmd_demo,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"boxrefine {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
