import csv
import json

import pytest

from anti_learn.cli import COMMAND_KEYS, main
from anti_learn.data import load_perturbation, validate_budget
from anti_learn.predictor import load_checkpoint

SMALL = ["--n-train", "60", "--n-test", "30"]


@pytest.fixture(autouse=True)
def _workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_generate_is_deterministic_and_prints_summary(capsys):
    args = ["generate", "--method", "synthetic", "--eps", "16/255", "--dataset", "blobs16", "--seed", "7"]
    assert main(args + ["--out", "a.zip"]) == 0
    summary = capsys.readouterr().out
    assert "method=synthetic" in summary and "eps=16/255" in summary and "budget=OK" in summary
    assert "wall=" in summary
    assert main(args + ["--out", "b.zip"]) == 0
    a, b = load_perturbation("a.zip"), load_perturbation("b.zip")
    assert a.digest() == b.digest()
    side = json.loads(open("a.zip.config.json").read())
    assert side["digest"] == a.extra["run_config_digest"]
    assert side["config"]["seed"] == 7


def test_em_zero_budget_exits_with_no_convergence(capsys):
    code = main(["generate", "--method", "em", "--eps", "0/255", "--em-max-rounds", "2",
                 "--em-model-steps", "2", "--out", "e.zip"] + SMALL)
    assert code == 4
    assert _error(capsys)["error"] == "NoConvergence"
    pset = load_perturbation("e.zip")
    assert pset.extra["converged"] is False


def test_segmentation_em_artifact():
    code = main(["generate", "--method", "em", "--dataset", "shapes_seg", "--n-train", "8", "--n-test", "2",
                 "--eps", "16/255", "--em-max-rounds", "1", "--em-model-steps", "2", "--out", "s.zip"])
    assert code in (0, 4)
    pset = load_perturbation("s.zip")
    assert pset.method == "em" and pset.deltas.shape == (8, 32, 32, 1)
    assert validate_budget(pset).ok
    assert open("s.trace.csv").readline().startswith("round,")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_clean_then_eval_reports_method_none(capsys):
    assert main(["train", "--epochs", "2", "--out", "clean.zip"] + SMALL) == 0
    _, meta = load_checkpoint("clean.zip")
    assert meta["method"] == "none" and meta["regime"] == "std"
    assert open("clean.history.csv").readline().startswith("epoch,")
    assert main(["eval", "--checkpoint", "clean.zip", "--out", "ev"] + SMALL) == 0
    (row,) = _rows("ev/report.csv")
    assert row["method"] == "none" and row["drop"] == "0.0"
    assert json.loads(open("ev/config.json").read())["config"]["checkpoint"] == "clean.zip"


def test_adversarial_training_is_recorded(capsys):
    assert main(["generate", "--method", "synthetic", "--eps", "16/255", "--out", "p.zip"] + SMALL) == 0
    assert main(["train", "--epochs", "1", "--out", "clean.zip"] + SMALL) == 0
    assert main(["train", "--epochs", "1", "--perturbation", "p.zip", "--adv-eps", "8/255",
                 "--out", "adv.zip"] + SMALL) == 0
    assert main(["eval", "--checkpoint", "adv.zip", "--clean-checkpoint", "clean.zip", "--out", "ev"]
                + SMALL) == 0
    (row,) = _rows("ev/report.csv")
    assert (row["method"], row["regime"], row["eps_a_num"], row["eps_num"]) == ("synthetic", "adv", "8", "16")


def test_mixed_provenance_exits_with_checksum_code(capsys):
    assert main(["generate", "--method", "synthetic", "--eps", "8/255", "--out", "p.zip"] + SMALL) == 0
    # same generator, different data seed: the artifact does not belong to this dataset
    assert main(["apply", "--perturbation", "p.zip", "--data-seed", "1"] + SMALL) == 3
    assert _error(capsys)["error"] == "ChecksumMismatch"
    assert main(["train", "--epochs", "1", "--out", "m.zip"] + SMALL) == 0
    assert main(["eval", "--checkpoint", "m.zip", "--data-seed", "1"] + SMALL) == 3
    assert _error(capsys)["exit_code"] == 3


def test_poisoned_eval_needs_a_clean_baseline(capsys):
    assert main(["generate", "--method", "synthetic", "--eps", "8/255", "--out", "p.zip"] + SMALL) == 0
    assert main(["train", "--epochs", "1", "--perturbation", "p.zip", "--out", "m.zip"] + SMALL) == 0
    assert main(["eval", "--checkpoint", "m.zip"] + SMALL) == 2
    assert main(["eval", "--checkpoint", "m.zip", "--clean-checkpoint", "m.zip"] + SMALL) == 2


def test_apply_writes_loadable_pair(capsys):
    from anti_learn.ingestion import load_medmnist_archive

    assert main(["generate", "--method", "synthetic", "--eps", "8/255", "--out", "p.zip"] + SMALL) == 0
    assert main(["apply", "--perturbation", "p.zip", "--out", "poisoned.npz", "--quantize"] + SMALL) == 0
    train, test = load_medmnist_archive("poisoned.npz")
    assert len(train) == 60 and len(test) == 30
    assert main(["train", "--epochs", "1", "--dataset", "poisoned.npz", "--out", "m.zip"]) == 0


@pytest.mark.parametrize("argv", [
    ["train", "--bogus", "1"],
    ["generate", "--method", "none"],
    ["generate", "--method", "em", "--eps", "400/255"],
    ["reproduce", "--suite", "full"],
    ["frobnicate"],
])
def test_invalid_config_exits_2(argv, capsys):
    assert main(argv) == 2
    assert _error(capsys)["error"] == "ConfigInvalid"


def test_unknown_key_in_config_file(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text("method = synthetic\nwarp_factor = 9\n")
    assert main(["generate", "--config", "run.cfg"]) == 2
    assert "warp_factor" in _error(capsys)["message"]


def test_config_file_with_flag_override(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text("method = synthetic\neps = 4/255\nseed = 3\n")
    assert main(["generate", "--config", "run.cfg", "--eps", "8/255", "--out", "p.zip"] + SMALL) == 0
    pset = load_perturbation("p.zip")
    assert pset.budget.label == "8/255" and pset.seed == 3


def test_every_command_accepts_a_config_file():
    assert set(COMMAND_KEYS) == {"generate", "apply", "train", "eval", "reproduce"}
