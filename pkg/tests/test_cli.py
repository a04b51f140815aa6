import json

import pytest

from btnet.cli import main

SMALL = """
[run]
n_train = 64
n_val = 32
n_test = 40
[gen]
mean_tracks = 6
[model]
rep_width = 8
latent_dim = 8
hidden_width = 16
[train]
epochs = 1
batch_size = 32
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "small.ini").write_text(SMALL)
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_train_eval(workdir, capsys):
    ini, data, out = workdir / "small.ini", workdir / "data", workdir / "run"
    code, text, _ = run(capsys, "gen", "--config", ini, "--seed", 1, "--out", data)
    assert code == 0 and "train: 64 events" in text
    assert {p.name for p in data.iterdir()} >= {"train.bin", "val.bin", "test.bin", "config.ini"}
    code, text, _ = run(capsys, "train", "--config", ini, "--seed", 1, "--data", data, "--out", out, "--model", "vector")
    assert code == 0 and text.startswith("vector+BiL+SO2:")
    assert json.loads((out / "train_summary.json").read_text())["model"] == "vector+BiL+SO2"
    code, text, _ = run(capsys, "eval", "--data", data, "--out", out)
    assert code == 0 and "AUC" in text
    s = json.loads((out / "eval_summary.json").read_text())
    assert s["test_events"] == 40 and 0 <= s["auc"] <= 1
    assert (out / "roc.txt").read_text().startswith("# efficiency")


def test_untrained_eval_is_chance(workdir, capsys):
    ini, data = workdir / "small.ini", workdir / "data"
    run(capsys, "gen", "--config", ini, "--seed", 2, "--out", data)
    code, _, _ = run(capsys, "eval", "--config", ini, "--seed", 2, "--data", data, "--out", workdir / "u",
                     "--untrained")
    assert code == 0
    assert json.loads((workdir / "u" / "eval_summary.json").read_text())["auc"] == 0.5


def test_same_seed_same_files(workdir, capsys):
    ini = workdir / "small.ini"
    for name in ("a", "b"):
        run(capsys, "gen", "--config", ini, "--seed", 5, "--out", workdir / name)
    for split in ("train", "val", "test"):
        assert (workdir / "a" / f"{split}.bin").read_bytes() == (workdir / "b" / f"{split}.bin").read_bytes()


def test_missing_data_exits_2(workdir, capsys):
    code, _, err = run(capsys, "train", "--seed", 0, "--data", workdir / "nope", "--out", workdir / "r")
    assert code == 2 and "missing train dataset" in err


def test_missing_seed_exits_2(workdir, capsys):
    code, _, err = run(capsys, "gen", "--out", workdir / "d")
    assert code == 2 and "seed" in err


def test_bad_config_exits_2(workdir, capsys):
    (workdir / "bad.ini").write_text("[train]\naugment = flip\n")
    code, _, err = run(capsys, "gen", "--config", workdir / "bad.ini", "--seed", 0, "--out", workdir / "d")
    assert code == 2 and "augment" in err


def test_eval_config_mismatch_exits_2(workdir, capsys):
    ini, data, out = workdir / "small.ini", workdir / "data", workdir / "run"
    run(capsys, "gen", "--config", ini, "--seed", 1, "--out", data)
    run(capsys, "train", "--config", ini, "--seed", 1, "--data", data, "--out", out, "--model", "vector")
    code, _, err = run(capsys, "eval", "--config", ini, "--data", data, "--out", out, "--model", "tensor")
    assert code == 2 and "different model config" in err


def test_check_with_fault_exits_1(capsys):
    code, text, _ = run(capsys, "check", "--inject-fault", "transpose")
    assert code == 1 and "FAILED" in text and text.startswith("[fault injected: transpose]")


def test_bad_subcommand_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_ablate_table(workdir, capsys):
    ini, data = workdir / "small.ini", workdir / "data"
    run(capsys, "gen", "--config", ini, "--seed", 1, "--out", data)
    code, text, _ = run(capsys, "ablate", "--config", ini, "--seed", 1, "--data", data, "--out", workdir / "ab",
                        "--n-seeds", 1, "--configs", "baseline,vector")
    assert code == 0
    rows = text.splitlines()
    assert rows[0].startswith("model") and rows[2].startswith("baseline") and rows[3].startswith("vector")
    assert "+0.0%" in rows[2]
    assert (workdir / "ab" / "ablation.json").is_file()


def test_ablate_unknown_config_exits_2(workdir, capsys):
    code, _, err = run(capsys, "ablate", "--seed", 1, "--data", workdir, "--configs", "vector,giant")
    assert code == 2 and "unknown ablation" in err
