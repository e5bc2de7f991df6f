import json

import numpy as np
import pytest

from smlstm.checkpoint import load_checkpoint
from smlstm.cli import main, parse_assignment, parse_sweep
from smlstm.config import ConfigError
from smlstm.model import SmLSTM
from smlstm.trainer import model_from_checkpoint

GEN = ["--n-pairs", "14", "--n-val", "2", "--n-test", "4", "--grid-rows", "2", "--grid-cols", "2",
       "--region-dim", "8", "--context-dim", "6", "--instances", "2", "--concepts", "6",
       "--max-fillers", "1", "--sentences-per-image", "2"]
TINY = ["--profile", "tiny", "--set", "max_words=5", "--set", "batch_size=4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-synthetic", "--out", str(out), *GEN]) == 0
    return out


def _train(data_dir, out, *extra):
    return main(["train", "--manifest", str(data_dir / "manifest.jsonl"), "--output", str(out), *TINY, *extra])


def test_parse_helpers():
    assert parse_assignment("lam=0.5") == ("lam", 0.5)
    assert parse_assignment("variant=mean") == ("variant", "mean")
    assert parse_sweep("T=1..5") == ("timesteps", [1, 2, 3, 4, 5])
    assert parse_sweep("lambda=0,100") == ("lam", [0, 100])
    with pytest.raises(ConfigError):
        parse_sweep("T=")


def test_zero_epochs_writes_init_checkpoint(data_dir, tmp_path):
    assert _train(data_dir, tmp_path, "--max-epochs", "0") == 0
    assert (tmp_path / "train_log.jsonl").read_text() == ""
    ckpt = load_checkpoint(tmp_path / "checkpoint.smck")
    init = SmLSTM.initialize(model_from_checkpoint(ckpt).config)
    assert all(np.array_equal(ckpt.params[k], p.data) for k, p in init.params.items())


def test_variants_train_differently(data_dir, tmp_path):
    first = {}
    for variant in ("full", "mean"):
        assert _train(data_dir, tmp_path / variant, "--variant", variant, "--max-steps", "1") == 0
        line = (tmp_path / variant / "train_log.jsonl").read_text().splitlines()[0]
        first[variant] = json.loads(line)["total"]
    assert first["full"] != first["mean"]


def test_ensemble_of_one_equals_eval(data_dir, tmp_path, capsys):
    assert _train(data_dir, tmp_path, "--max-epochs", "2") == 0
    capsys.readouterr()
    man = str(data_dir / "manifest.jsonl")
    ck = str(tmp_path / "checkpoint.smck")
    assert main(["eval", "--checkpoint", ck, "--manifest", man]) == 0
    plain = json.loads(capsys.readouterr().out)
    assert main(["eval", "--ensemble", ck, "--manifest", man]) == 0
    ens = json.loads(capsys.readouterr().out)
    assert plain == ens


def test_eval_sweep_and_saliency(data_dir, tmp_path, capsys):
    assert _train(data_dir, tmp_path, "--max-epochs", "1") == 0
    capsys.readouterr()
    rc = main(["eval", "--checkpoint", str(tmp_path / "last.smck"), "--manifest", str(data_dir / "manifest.jsonl"),
               "--sweep", "T=1..3", "--dump-saliency", str(tmp_path / "sal"), "--saliency-limit", "1",
               "--report", str(tmp_path / "rep.json")])
    assert rc == 0
    reports = json.loads((tmp_path / "rep.json").read_text())
    assert [r["timesteps"] for r in reports] == [1, 2, 3]
    assert (tmp_path / "sal" / "average_t1.pgm").exists()
    assert len(list((tmp_path / "sal").glob("pair*_t*.pgm"))) == 2


def test_two_pair_fit_is_perfect(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["gen-synthetic", "--out", str(data), "--n-pairs", "2", "--n-test", "0", "--grid-rows", "2",
                 "--grid-cols", "2", "--region-dim", "8", "--context-dim", "6", "--instances", "2",
                 "--concepts", "6"]) == 0
    man = str(data / "manifest.jsonl")
    assert main(["train", "--manifest", man, "--output", str(tmp_path / "r"), "--profile", "tiny",
                 "--set", "max_words=6", "--set", "lr=0.01", "--max-epochs", "150"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.smck"), "--manifest", man,
                 "--split", "train"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["annotation"]["R@1"] == 100.0 and report["retrieval"]["R@1"] == 100.0


def test_resume_matches_uninterrupted_run(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "full", "--max-epochs", "4") == 0
    assert _train(data_dir, tmp_path / "half", "--max-epochs", "2") == 0
    rc = main(["train", "--manifest", str(data_dir / "manifest.jsonl"), "--output", str(tmp_path / "rest"),
               "--resume", str(tmp_path / "half" / "last.smck"), "--max-epochs", "4"])
    assert rc == 0
    assert (tmp_path / "full" / "last.smck").read_bytes() == (tmp_path / "rest" / "last.smck").read_bytes()


def test_exit_codes(data_dir, tmp_path):
    man = str(data_dir / "manifest.jsonl")
    assert main(["train", "--manifest", str(tmp_path / "none.jsonl"), *TINY]) == 2
    assert main(["train", "--manifest", man, *TINY, "--set", "bogus=1"]) == 1
    assert main(["train", "--manifest", man, "--profile", "desk", "--output", str(tmp_path / "x")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a"}\n')
    assert main(["train", "--manifest", str(bad), *TINY]) == 2
    assert main(["gen-synthetic", "--out", str(tmp_path / "g"), "--n-pairs", "1"]) == 1


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--corrupt-gate", "o"]) == 3
    assert "agg.cell.W_so" in capsys.readouterr().out
