import json

import pytest

from fmchest.bench import CSV_COLUMNS, read_csv
from fmchest.channel import load_dataset
from fmchest.cli import main
from fmchest.nn import FM_MAGIC, SM_MAGIC, load_checkpoint

TINY = {"base-channels": 8, "levels": "1,2", "res-blocks": 1, "time-dim": 8, "epochs": 1, "batch-size": 8}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["generate-data", "--m", "8", "--n", "8", "--train", "16", "--val", "4", "--test", "4",
                 "--out", "d.bin"]) == 0
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def test_generate_data_documented_example(tmp_path):
    out = tmp_path / "d.bin"
    assert main(["generate-data", "--m", "8", "--n", "32", "--train", "200", "--val", "50", "--test", "50",
                 "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert ds.sizes == (200, 50, 50) and ds.shape == (8, 32)
    assert out.read_bytes()[:8] == b"FMCHEST1"


def test_seed_changes_data(tmp_path):
    args = ["generate-data", "--m", "2", "--n", "2", "--train", "2", "--val", "1", "--test", "1"]
    main(args + ["--out", str(tmp_path / "a.bin")])
    main(args + ["--out", str(tmp_path / "b.bin"), "--seed", "1"])
    main(args + ["--out", str(tmp_path / "c.bin")])
    a, b, c = (load_dataset(tmp_path / f"{x}.bin") for x in "abc")
    assert a == c and a != b


def test_train_estimate_sweep_timing(workdir, capsys):
    assert main(["train-fm", "--config", "tiny.json", "--data", "d.bin", "--out", "fm.ckpt", "--log", "log.csv"]) == 0
    model, meta = load_checkpoint("fm.ckpt", FM_MAGIC)
    assert meta["sigma_tilde"] == 0.1 and model.config.base_channels == 8
    assert (workdir / "log.csv").read_text().startswith("epoch,train_loss")
    assert main(["train-sm", "--config", "tiny.json", "--data", "d.bin", "--out", "sm.ckpt", "--n-levels", "5"]) == 0
    _, sm_meta = load_checkpoint("sm.ckpt", SM_MAGIC)
    assert sm_meta["n_levels"] == 5

    assert main(["estimate", "--data", "d.bin", "--fm", "fm.ckpt", "--snr", "10", "--steps", "3",
                 "--trajectory", "traj.csv"]) == 0
    traj = (workdir / "traj.csv").read_text().splitlines()
    assert traj[0] == "step,nmse_db" and len(traj) == 5

    exp = {"dataset": "d.bin", "fm_checkpoint": "fm.ckpt", "sm_checkpoint": "sm.ckpt",
           "estimators": ["ls", "fm:2", "sm:3:2"], "snr_db": [0, 10], "trials": 4,
           "pilots": {"n": 8, "t": 8, "power": 1.0}, "seed": 2}
    (workdir / "exp.json").write_text(json.dumps(exp))
    assert main(["sweep", "--config", "exp.json", "--out", "r.csv"]) == 0
    rows = read_csv(workdir / "r.csv")
    assert len(rows) == 6
    assert (workdir / "r.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert "numpy" in json.loads((workdir / "r.csv.meta.json").read_text())

    capsys.readouterr()
    assert main(["timing", "--data", "d.bin", "--fm", "fm.ckpt", "--sm", "sm.ckpt", "--fm-steps", "1,5",
                 "--sm-kl", "3,2", "--trials", "4", "--out", "t.csv"]) == 0
    table = capsys.readouterr().out
    assert "time (s)" in table and "SM" in table
    assert [r.evals for r in read_csv(workdir / "t.csv")] == [4, 20, 24]


def test_unknown_option_file_key(workdir, capsys):
    (workdir / "bad.json").write_text(json.dumps({"nonsense": 1}))
    assert main(["train-fm", "--config", "bad.json", "--data", "d.bin", "--out", "x.ckpt"]) == 1
    assert "nonsense" in capsys.readouterr().err


def test_missing_files_are_config_errors(workdir):
    assert main(["estimate", "--data", "missing.bin"]) == 1
    assert main(["sweep", "--config", "missing.json", "--out", "r.csv"]) == 1


def test_corrupt_dataset_is_runtime_error(workdir, capsys):
    (workdir / "bad.bin").write_bytes(b"FMCHEST1" + b"\0" * 10)
    assert main(["estimate", "--data", "bad.bin"]) == 2
    assert "offset" in capsys.readouterr().err


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["generate-data"])
    assert exc.value.code == 1
