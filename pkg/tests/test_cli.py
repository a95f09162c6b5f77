import csv
import json

import numpy as np
import pytest

from vlstm.cli import ExperimentConfig, UsageError, load_config, main
from vlstm.data import write_csv
from vlstm.sweep import RunRecord
from vlstm.synthetic import rough_vol_panel

SPLITS = """
[splits]
train_start = "2000-01-04"
train_end = "2000-08-01"
val_end = "2000-10-15"
test_end = "2000-12-29"
"""


@pytest.fixture
def workspace(tmp_path):
    write_csv(tmp_path / "rv.csv", rough_vol_panel(2, "2000-01-04", "2000-12-29", seed=3))
    cfg = tmp_path / "exp.toml"
    cfg.write_text(f"""data = "{tmp_path / 'rv.csv'}"
out_dir = "{tmp_path / 'out'}"
{SPLITS}
[train]
learning_rate = 0.01
max_epochs = 3

[grid]
archs = ["lstm", "vlstm"]
bias = [false]
n_hidden = [1]
seq_len = [5]
seeds = [0, 1]
""")
    return tmp_path, cfg


def test_fit_kernel_writes_csv_and_reports(tmp_path, capsys):
    assert main(["fit-kernel", "--alpha", "0.5", "--lo", "1", "--hi", "1.0001", "--n", "1",
                 "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    err = float(out.split("sup_rel_error=")[1].split()[0])
    assert err < 1e-8
    rows = list(csv.reader(open(tmp_path / "kernel_alpha0.5_n1.csv")))
    assert rows[0] == ["tau", "weight"] and float(rows[1][1]) == 1.0


def test_fit_kernel_rejects_negative_alpha(tmp_path, capsys):
    assert main(["fit-kernel", "--alpha", "-1", "--out-dir", str(tmp_path)]) == 2
    assert "alpha" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_train_missing_data_file(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path / "o")])
    assert code == 1 and "not found" in capsys.readouterr().err


def test_train_deterministic_and_reduction(workspace, capsys):
    tmp, cfg = workspace

    def run(out, *extra):
        assert main(["train", "--config", str(cfg), "--out-dir", str(tmp / out), "--n-hidden", "2",
                     "--seq-len", "5", *extra]) == 0
        return RunRecord.from_json(capsys.readouterr().out.strip().splitlines()[-1])

    a = run("a", "--arch", "vlstm")
    b = run("b", "--arch", "vlstm")
    assert a.to_json(drop=("wall_time_s",)) == b.to_json(drop=("wall_time_s",))
    assert (tmp / "a" / a.archive).exists() and (tmp / "a" / "config.json").exists()
    lstm = run("c", "--arch", "lstm")
    one = run("d", "--arch", "vlstm", "--n-scales", "1")
    assert (lstm.val_loss, lstm.test_loss) == (one.val_loss, one.test_loss)


def test_sweep_select_report_baseline(workspace, capsys):
    tmp, cfg = workspace
    out = tmp / "out"
    assert main(["sweep", "--config", str(cfg)]) == 0
    assert len((out / "runs.jsonl").read_text().splitlines()) == 4
    assert main(["sweep", "--config", str(cfg)]) == 0  # resume: nothing new
    assert len((out / "runs.jsonl").read_text().splitlines()) == 4
    assert main(["select", "--config", str(cfg)]) == 0
    sel = json.loads((out / "selection.json").read_text())
    assert sel["method"] == "quantile_gap" and all(g["fallback"] for g in sel["groups"])
    assert main(["baseline", "--config", str(cfg), "--seq-len", "5"]) == 0
    assert main(["report", "--config", str(cfg), "--reference-mse", "0.25"]) == 0
    table = (out / "report" / "summary_table.csv").read_text()
    assert "0.25" in table and "persistence" in table and "VLSTM" in table
    written = {p.relative_to(tmp).parts[0] for p in tmp.rglob("*")}
    assert written == {"rv.csv", "exp.toml", "out"}


def test_select_on_bimodal_log_keeps_low_mode(tmp_path):
    rng = np.random.default_rng(0)
    out = tmp_path / "out"
    out.mkdir()
    with open(out / "runs.jsonl", "w") as fh:
        for s in range(20):
            low = s % 2 == 0
            v = float((0.2 if low else 0.8) + 0.01 * rng.random())
            fh.write(RunRecord("LSTM", "lstm", True, "independent", 1, 1, 10, s, v, v, 5, True).to_json() + "\n")
    assert main(["select", "--out-dir", str(out)]) == 0
    [group] = json.loads((out / "selection.json").read_text())["groups"]
    seeds = {int(r.rsplit("-s", 1)[1]) for r in group["selected"]}
    assert seeds and all(s % 2 == 0 for s in seeds)  # only low-mode runs


def test_report_on_empty_log(tmp_path, capsys):
    (tmp_path / "runs.jsonl").write_text("")
    assert main(["report", "--out-dir", str(tmp_path)]) == 1
    assert "no run records" in capsys.readouterr().err


def test_config_flags_win(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('out_dir = "x"\n[train]\nlearning_rate = 0.5\n')
    assert load_config(p).train.learning_rate == 0.5
    assert main(["report", "--config", str(p), "--out-dir", str(tmp_path / "y")]) == 1  # flag dir is empty


def test_config_validation(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("colour = 1\n")
    with pytest.raises(UsageError, match="colour"):
        load_config(p)
    p.write_text("[train]\nbatch_size = 0\n")
    with pytest.raises(UsageError, match="batch_size"):
        load_config(p)
    cfg = ExperimentConfig(parallelism=0)
    with pytest.raises(UsageError):
        cfg.validate()
