import csv

import pytest

from boxrefine.cli import main

TINY = ["--set", "data.num_sequences=3", "--set", "data.seq_length=6", "--set", "eval.num_sequences=2",
        "--set", "eval.seq_length=6", "--set", "data.image_size=[64,64]", "--set", "model.input_size=64"]


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_pipeline_smoke(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["gen-data", "--out", out, *TINY]) == 0
    assert main(["train", "--out", out, "--data", f"{out}/data", "--epochs", "1", "--iterations", "2", *TINY]) == 0
    assert main(["eval", "--out", out, "--data", f"{out}/data", *TINY]) == 0
    assert main(["oracle", "--out", out, "--data", f"{out}/data", *TINY]) == 0
    assert main(["demo", "--out", out, "--frames", "0", "3", *TINY]) == 0
    assert main(["report", "--out", out, f"{out}/results", *TINY]) == 0
    run = tmp_path / "run"
    for d in ("config.resolved", "checkpoints/model.pt", "reports/report.csv", "reports/train_metrics.jsonl",
              "plots/success.png", "plots/correlation_demo.png"):
        assert (run / d).exists(), d
    names = [r["name"] for r in rows(run / "reports" / "report.csv")]
    assert "oracle+detached+sim" in names
    assert main(["oracle", "--unpaired", "--out", out, "--data", f"{out}/data", *TINY]) == 0


def test_eval_zero_noise_no_refiner(tmp_path):
    out = tmp_path / "run"
    assert main(["eval", "--out", str(out), "--no-refine", *TINY]) == 0
    (row,) = rows(out / "reports" / "report.csv")
    assert float(row["auc"]) == pytest.approx(20 / 21, abs=1e-4)


def test_flags_win_and_config_echoed(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 3\neval:\n  workers: 1\n")
    out = tmp_path / "run"
    assert main(["eval", "--config", str(cfg), "--seed", "8", "--workers", "2", "--out", str(out),
                 "--no-refine", *TINY]) == 0
    text = (out / "config.resolved").read_text()
    assert "seed: 8" in text and "workers: 2" in text


def test_ablate_small_grid(tmp_path):
    out = tmp_path / "run"
    assert main(["ablate", "--out", str(out), "--set", "ablation.fusions=[naive]", "--set",
                 "ablation.heads=[rcnn]", "--set", "ablation.iterations_per_epoch=1",
                 "--set", "ablation.num_eval_sequences=1", *TINY]) == 0
    assert len(rows(out / "reports" / "ablation.csv")) == 2


@pytest.mark.parametrize("argv, needle", [
    (["eval", "--set", "bogus.key=1"], "unknown key"),
    (["eval"], "checkpoint"),
    (["train", "--data", "/nonexistent"], "not found"),
    (["report", "/nonexistent"], "not found"),
])
def test_errors_exit_nonzero_one_line(tmp_path, capsys, argv, needle):
    code = main([*argv, "--out", str(tmp_path / "run"), *TINY])
    err = capsys.readouterr().err.strip()
    assert code != 0
    assert len(err.splitlines()) == 1 and needle in err


def test_malformed_groundtruth_reported(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", "--out", str(out), *TINY]) == 0
    gt = out / "data" / "train" / "seq0001" / "groundtruth.txt"
    lines = gt.read_text().splitlines()
    lines[2] = "1,2,oops,4"
    gt.write_text("\n".join(lines) + "\n")
    assert main(["train", "--out", str(out), "--data", str(out / "data"), *TINY]) == 1
    assert "groundtruth.txt:3: malformed" in capsys.readouterr().err


def test_checkpoint_mismatch(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--epochs", "1", "--iterations", "1", *TINY]) == 0
    assert main(["eval", "--out", str(out), "--set", "model.head_kind=rcnn", *TINY]) == 1
    assert "does not match" in capsys.readouterr().err
