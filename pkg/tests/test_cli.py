import csv
import json
from pathlib import Path

import pytest

from utopic.cli import RunConfig, build_parser, main

TINY = {
    "generation": {"points_per_cloud": 48, "keep_fraction": 0.75},
    "training": {"epochs": 1, "k_samples": 4, "optimizer": "adam", "learning_rate": 1e-3},
    "model": {"feat_dim": 8, "d_t": 8, "n_iter": 1, "k_local": 4, "extractor_channels": [6, 6],
              "descriptor_scales": [4], "n_completion": 4, "ffn_mult": 1},
    "data": {"n_samples": 2, "n_eval": 1},
    "sweep": {"points_per_cloud": 48, "base_points": 1024, "n_pairs": 1, "keep_counts": [768, 560]},
}

# files whose bytes must repeat exactly; run.log carries wall-clock stamps
NUMERIC = {".csv", ".json", ".ply", ".ckpt"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "gen"), "--seed", "5"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(root / "train")]) == 0
    return root, cfg


def _snapshot(d: Path):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.suffix in NUMERIC}


def test_generate_layout(workspace):
    root, _ = workspace
    summary = json.loads((root / "gen" / "summary.json").read_text())
    assert summary["n_samples"] == 2 and 0 < summary["mean_overlap_ratio"] <= 1
    sample = root / "gen" / "dataset" / "sample_00000"
    assert {p.name for p in sample.iterdir()} == {"source.ply", "target.ply", "complete.ply", "meta.json"}
    resolved = json.loads((root / "gen" / "resolved_config.json").read_text())
    assert resolved["seed"] == 5 and resolved["command"] == "generate"
    assert (root / "gen" / "run.log").exists()


def test_train_layout(workspace):
    root, _ = workspace
    names = {p.name for p in (root / "train").iterdir()}
    assert {"best.ckpt", "last.ckpt", "loss.csv", "history.json", "resolved_config.json"} <= names


def test_register_eval_inspect(workspace, tmp_path):
    root, cfg = workspace
    ck = str(root / "train" / "last.ckpt")
    s = root / "gen" / "dataset" / "sample_00000"
    assert main(["register", str(s / "source.ply"), str(s / "target.ply"), "--config", str(cfg),
                 "--checkpoint", ck, "--out", str(tmp_path / "reg")]) == 0
    res = json.loads((tmp_path / "reg" / "result.json").read_text())
    assert len(res["rotation"]) == 9 and len(res["overlap_p"]) == 36
    assert main(["eval", "--config", str(cfg), "--checkpoint", ck, "--data", str(root / "gen" / "dataset"),
                 "--out", str(tmp_path / "ev")]) == 0
    with (tmp_path / "ev" / "metrics.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:8] == ["pair", "rmse_r", "mae_r", "rmse_t", "mae_t", "err_r", "err_t", "oa"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "mean"]
    # predictions route scores a saved result without a model
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "sample_00000.json").write_text((tmp_path / "reg" / "result.json").read_text())
    assert main(["eval", "--config", str(cfg), "--predictions", str(pred), "--data", str(root / "gen" / "dataset"),
                 "--out", str(tmp_path / "ev2")]) == 0
    agg = json.loads((tmp_path / "ev2" / "metrics.json").read_text())["aggregate"]
    assert agg["n_pairs"] == 2 and agg["failed"] >= 1           # sample_00001 had no prediction
    assert main(["inspect", str(s / "source.ply"), str(s / "target.ply"), "--config", str(cfg),
                 "--checkpoint", ck, "--out", str(tmp_path / "ins")]) == 0
    assert (tmp_path / "ins" / "source_overlap.ply").exists()
    with (tmp_path / "ins" / "points.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 1 + 72


def test_sweep_rows(workspace, tmp_path):
    root, cfg = workspace
    assert main(["sweep", "--config", str(cfg), "--checkpoint", str(root / "train" / "last.ckpt"),
                 "--out", str(tmp_path / "sw")]) == 0
    with (tmp_path / "sw" / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["keep_count"] for r in rows] == ["768", "560"]
    assert all(r["err_r"] != "" for r in rows)


@pytest.mark.parametrize("cmd", ["generate", "train", "eval", "sweep", "register", "inspect"])
def test_every_command_is_deterministic(cmd, workspace, tmp_path):
    root, cfg = workspace
    s = root / "gen" / "dataset" / "sample_00000"
    ck = ["--checkpoint", str(root / "train" / "last.ckpt")]
    extra = {"generate": [], "train": [], "sweep": ck, "eval": ck + ["--data", str(root / "gen" / "dataset")],
             "register": [str(s / "source.ply"), str(s / "target.ply")] + ck,
             "inspect": [str(s / "source.ply"), str(s / "target.ply")] + ck}[cmd]
    snaps = []
    for run in ("one", "two"):
        out = tmp_path / run
        assert main([cmd, "--config", str(cfg), "--out", str(out), "--seed", "3"] + extra) == 0
        snaps.append(_snapshot(out))
    assert snaps[0].keys() == snaps[1].keys() and snaps[0]
    for k in snaps[0]:
        assert snaps[0][k] == snaps[1][k], k


def test_jobs_do_not_change_output(workspace, tmp_path):
    _, cfg = workspace
    for j in ("1", "2"):
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / j), "--jobs", j]) == 0
    assert _snapshot(tmp_path / "1") == _snapshot(tmp_path / "2")


def test_hard_errors_exit_nonzero(workspace, tmp_path, capsys):
    root, cfg = workspace
    s = root / "gen" / "dataset" / "sample_00000"
    assert main(["register", str(s / "source.ply"), str(s / "target.ply"), "--checkpoint",
                 str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "x")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"training": {"epochz": 1}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert "unknown keys" in capsys.readouterr().err
    other = tmp_path / "other.json"
    other.write_text(json.dumps(dict(TINY, model=dict(TINY["model"], feat_dim=16, d_t=16))))
    assert main(["register", str(s / "source.ply"), str(s / "target.ply"), "--config", str(other),
                 "--checkpoint", str(root / "train" / "last.ckpt"), "--out", str(tmp_path / "z")]) == 2
    assert "feat_dim" in capsys.readouterr().err
    assert main(["eval", "--config", str(cfg), "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "w"),
                 "--checkpoint", str(root / "train" / "last.ckpt")]) == 2


def test_config_round_trip():
    cfg = RunConfig.from_dict(TINY)
    again = RunConfig.from_dict({k: v for k, v in cfg.to_dict().items()})
    assert again.to_dict() == cfg.to_dict()


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_generate_zero_samples(tmp_path):
    assert main(["generate", "--n", "0", "--out", str(tmp_path)]) == 0
    assert list((tmp_path / "dataset").iterdir()) == []
    assert json.loads((tmp_path / "summary.json").read_text())["n_samples"] == 0


def test_eval_on_ground_truth_predictions_is_zero(workspace, tmp_path):
    import numpy as np
    from utopic.dataset import list_samples, load_sample
    from utopic.registration import RegistrationResult

    root, cfg = workspace
    pred = tmp_path / "pred"
    pred.mkdir()
    for d in list_samples(root / "gen" / "dataset"):
        s = load_sample(d)
        hard = s.gt_correspondence
        pairs = [(int(i), int(j), 1.0) for i, j in zip(*np.nonzero(hard[:-1, :-1]))]
        res = RegistrationResult(s.gt_transform, hard, pairs, s.gt_overlap_p.astype(float),
                                 s.gt_overlap_q.astype(float), np.zeros(len(s.source)), np.zeros(len(s.target)))
        (pred / f"{d.name}.json").write_text(res.to_json())
    assert main(["eval", "--config", str(cfg), "--predictions", str(pred), "--data", str(root / "gen" / "dataset"),
                 "--out", str(tmp_path / "ev")]) == 0
    agg = json.loads((tmp_path / "ev" / "metrics.json").read_text())["aggregate"]
    for k in ("rmse_r", "mae_r", "rmse_t", "mae_t", "err_r", "err_t"):
        assert agg[k] == pytest.approx(0.0, abs=1e-9), k
    assert agg["oa"] == 1.0 and agg["failed"] == 0


def test_sweep_five_buckets_without_model(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--config", str(_sweep_cfg(tmp_path))]) == 0
    with (tmp_path / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["bucket"]) for r in rows] == [0, 1, 2, 3, 4]
    assert [int(r["keep_count"]) for r in rows] == [768, 700, 640, 600, 560]


def _sweep_cfg(tmp_path):
    p = tmp_path / "sw.json"
    p.write_text(json.dumps({"sweep": {"n_pairs": 1, "points_per_cloud": 64}}))
    return p


def test_parallel_eval_matches_serial(workspace, tmp_path):
    root, cfg = workspace
    args = ["eval", "--config", str(cfg), "--checkpoint", str(root / "train" / "last.ckpt"),
            "--data", str(root / "gen" / "dataset")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
