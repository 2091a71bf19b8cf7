import csv
import json

import pytest

from csdt import experiment
from csdt.cli import main
from csdt.experiment import ConfigError, ExperimentConfig

SMALL = {
    "out_root": None,  # filled per test
    "seed": 0,
    "dataset": {"train_count": 16, "val_count": 4, "test_per_light": 2, "labeling_rate": "1/4", "image_size": [64, 64]},
    "train": {
        "batch_labeled": 2,
        "batch_unlabeled": 2,
        "max_iterations": 4,
        "pretrain_iterations": 3,
        "val_every": 2,
        "checkpoint_every": 2,
        "network": {"base_channels": 4, "depths": 2},
    },
}


@pytest.fixture
def exp_file(tmp_path):
    cfg = dict(SMALL, out_root=str(tmp_path / "runs"), name="csdt")
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def test_experiment_config_round_trip():
    exp = ExperimentConfig.from_dict(dict(SMALL, out_root="runs", ablate=["lc"], mdpc_count=2))
    again = ExperimentConfig.from_dict(json.loads(json.dumps(exp.to_dict())))
    assert again == exp
    cfg = again.resolved_train()
    assert cfg.network.dilation_rates == [1, 2]
    assert not cfg.lc_active


@pytest.mark.parametrize(
    "bad",
    [{"mdpc_count": 0}, {"ablate": ["xx"]}, {"colour": 1}, {"dataset": {"pixels": 3}}, {"train": {"ema_decay": 2}}],
)
def test_bad_experiment_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(SMALL, out_root="runs", **bad))


def test_full_pipeline_and_compare(tmp_path, exp_file):
    runs = tmp_path / "runs"
    assert main(["run", "--config", str(exp_file)]) == 0
    run = runs / "csdt"
    for rel in ("config.json", "report.json", "report.csv", "checkpoints/dt_final.npz", "checkpoints/st.npz",
                "logs/metrics.jsonl", "logs/pretrain.jsonl", "plots/losses.png", "plots/metrics.png"):
        assert (run / rel).exists(), rel
    rep = json.loads((run / "report.json").read_text())
    assert set(rep["categories"]) == {"sun", "earth", "moon", "mixed"}

    # the recorded config replays to the same loss log
    log_a = (run / "logs" / "metrics.jsonl").read_bytes()
    replay = json.loads((run / "config.json").read_text())
    replay["name"] = "replay"
    replay["data"] = str(run / "data")
    (tmp_path / "replay.json").write_text(json.dumps(replay))
    assert main(["run", "--config", str(tmp_path / "replay.json")]) == 0
    assert (runs / "replay" / "logs" / "metrics.jsonl").read_bytes() == log_a

    # rerunning a finished run is a no-op
    assert main(["run", "--config", str(exp_file)]) == 0
    assert (run / "logs" / "metrics.jsonl").read_bytes() == log_a

    assert main(["run", "--config", str(exp_file), "--name", "sup", "--teacher-mode", "none"]) == 0
    assert main(["run", "--config", str(exp_file), "--name", "half", "--stages", "gen,pretrain"]) == 0
    out_csv = tmp_path / "cmp.csv"
    code = main(["compare", str(run), str(runs / "sup"), str(runs / "half"), "--baseline", "sup",
                 "--csv", str(out_csv), "--plots", str(tmp_path / "plots")])
    assert code == 0
    rows = {r["run"]: r for r in csv.DictReader(out_csv.open())}
    assert rows["half"]["status"].startswith("incomplete")
    assert float(rows["csdt"]["d_dice"]) == pytest.approx(float(rows["csdt"]["dice"]) - float(rows["sup"]["dice"]))
    assert (tmp_path / "plots" / "compare_metrics.png").exists()

    assert main(["report", "--runs", str(runs), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").exists()


def test_changed_config_is_refused(tmp_path, exp_file):
    assert main(["run", "--config", str(exp_file), "--stages", "gen"]) == 0
    assert main(["run", "--config", str(exp_file), "--stages", "gen", "--seed", "5"]) == 1


def test_compare_table_marks_best_and_deltas(tmp_path):
    from csdt.metrics import CategoryMetrics, MetricReport

    def fake(name, dice, fa):
        d = tmp_path / name
        (d / "checkpoints").mkdir(parents=True)
        (d / "config.json").write_text("{}")
        (d / "checkpoints" / "dt_final.npz").write_bytes(b"")
        m = CategoryMetrics(dice, dice - 10, 90.0, fa, 10, 9, 10, int(fa * 100), 1000000)
        (d / "report.json").write_text(MetricReport(m).to_json())
        return d

    dirs = [fake("sup", 60.0, 3.0), fake("csdt", 70.0, 2.0)]
    rows, best = experiment.compare_runs(dirs, baseline="sup")
    assert best == {"dice": "csdt", "miou": "csdt", "pd": "sup", "fa": "csdt"}
    assert rows[1]["d_dice"] == pytest.approx(10.0)
    text = experiment.format_comparison(rows, best)
    assert "70.00*" in text and "2.00*" in text
    assert len(experiment.compare_runs(dirs[:1])[0]) == 1
    with pytest.raises(ConfigError):
        experiment.compare_runs(dirs, baseline="nope")
    pooled, _ = experiment.compare_runs(dirs, pooled_fa=True)
    assert pooled[-1]["fa"] == pytest.approx((300 + 200) / 2e6 / 1e-4)


def test_gen_eval_infer_commands(tmp_path):
    data = tmp_path / "data"
    args = ["gen", "--out", str(data), "--train", "8", "--val", "2", "--test-per-light", "1",
            "--label-rate", "1/2", "--size", "64", "64"]
    assert main(args) == 0
    assert main(args) == 2  # refuses to overwrite
    assert main(args + ["--force"]) == 0
    ckpt = tmp_path / "st.npz"
    assert main(["pretrain", "--data", str(data), "--out", str(ckpt), "--iters", "2", "--batch", "2",
                 "--base-channels", "4", "--depths", "2"]) == 0
    assert main(["train", "--data", str(data), "--st", str(ckpt), "--out", str(tmp_path / "t"), "--iters", "2",
                 "--batch", "2", "--base-channels", "4", "--depths", "2", "--ablate", "dt"]) == 0
    assert json.loads((tmp_path / "t" / "train_config.json").read_text())["teacher_mode"] == "st"
    out = tmp_path / "ev" / "r.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["categories"] == {}
    assert out.with_suffix(".csv").exists()
    assert main(["infer", "--ckpt", str(ckpt), "--images", str(data / "val" / "img"), "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("*_mask.png"))) == 2


def test_exit_codes(tmp_path):
    assert main(["nope"]) == 1
    assert main(["gen", "--out", str(tmp_path / "d"), "--label-rate", "2"]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "missing.npz"), "--data", str(tmp_path), "--out", "x.json"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 1


def test_stage_failures_are_tagged(tmp_path, capsys):
    cfg = dict(SMALL, out_root=str(tmp_path / "runs"), name="x", data=str(tmp_path / "nowhere"))
    p = tmp_path / "e.json"
    p.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(p)]) == 2
    assert "[gen]" in capsys.readouterr().err
