import json
import subprocess
import sys

import pytest

from artasr.cli import read_config_file, run_cli
from artasr.train import CKPT_MAGIC, load_checkpoint


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "d"
    assert run_cli(["gen-data", "--n", "100", "--seed", "7", "--max-words", "2", "--out", str(d)]) == 0
    return d


def test_gen_data(data_dir):
    lines = (data_dir / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 100
    assert (data_dir / "payload.bin").exists()
    assert json.loads((data_dir / "corpus.json").read_text())["seed"] == 7


def test_train_writes_versioned_checkpoint(data_dir, tmp_path):
    out = tmp_path / "m.ckpt"
    rc = run_cli(["train", "--variant", "proposed", "--loss", "ubw", "--data", str(data_dir), "--out", str(out),
                  "--steps", "2", "--subset", "8", "--d-model", "16", "--n-heads", "2", "--d-ff", "16",
                  "--trace", str(tmp_path / "t.csv")])
    assert rc == 0
    blob = out.read_bytes()
    assert blob[:4] == CKPT_MAGIC
    assert int.from_bytes(blob[4:8], "little") == 1
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 3


def test_resume_continues_steps(data_dir, tmp_path):
    base = ["--data", str(data_dir), "--subset", "8", "--d-model", "16", "--n-heads", "2", "--d-ff", "16"]
    run_cli(["train", *base, "--steps", "4", "--out", str(tmp_path / "full.ckpt")])
    run_cli(["train", *base, "--steps", "2", "--out", str(tmp_path / "half.ckpt")])
    assert run_cli(["train", "--data", str(data_dir), "--resume", str(tmp_path / "half.ckpt"),
                    "--steps", "4", "--out", str(tmp_path / "resumed.ckpt")]) == 0
    a, b = load_checkpoint(tmp_path / "full.ckpt"), load_checkpoint(tmp_path / "resumed.ckpt")
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_eval_decode_lm(data_dir, tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    run_cli(["train", "--variant", "baseline", "--data", str(data_dir), "--out", str(ck), "--steps", "1",
             "--subset", "4", "--d-model", "16", "--n-heads", "2", "--d-ff", "16"])
    assert run_cli(["lm-train", "--data", str(data_dir), "--order", "2", "--out", str(tmp_path / "lm.txt")]) == 0
    assert run_cli(["eval", "--ckpt", str(ck), "--data", str(data_dir), "--lm", str(tmp_path / "lm.txt"),
                    "--beam", "2", "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"wer_nolm", "wer_lm", "cer_nolm", "variant"} <= set(rep)
    capsys.readouterr()
    assert run_cli(["decode", "--ckpt", str(ck), "--data", str(data_dir), "--limit", "3"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_config_file_precedence(data_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# defaults\nsteps = 3\nvariant=baseline\nd-model=16\nn_heads=2\nd_ff=16\nsubset=4\n")
    assert read_config_file(cfg)["d_model"] == "16"
    assert run_cli(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "a.ckpt"),
                    "--steps", "1"]) == 0
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.step == 1  # flag beats file
    assert ck.model_config.variant == "baseline" and ck.model_config.d_model == 16  # file beats default


def test_config_file_unknown_key(data_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus=1\n")
    assert run_cli(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "x")]) == 1


def test_unknown_flag_is_usage_error(capsys):
    assert run_cli(["train", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run_cli(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand():
    assert run_cli([]) == 1


def test_missing_corpus_is_data_error(tmp_path):
    assert run_cli(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 2
    assert run_cli(["sweep", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "s")]) == 2


def test_bad_checkpoint_is_data_error(data_dir, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"junk" * 10)
    assert run_cli(["eval", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(data_dir)]) == 2


@pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "decode", "lm-train", "sweep", "report"])
def test_help_per_subcommand(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli([cmd, "--help"])
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out


def test_sweep_and_report(data_dir, tmp_path, capsys):
    out = tmp_path / "s"
    args = ["sweep", "--data", str(data_dir), "--sizes", "4,8", "--seeds", "0", "--steps", "1",
            "--n-eval", "2", "--beam", "2", "--out", str(out)]
    assert run_cli(args) == 0
    for name in ("runs.jsonl", "rows.jsonl", "report.md", "sweep.json"):
        assert (out / name).exists()
    assert len((out / "runs.jsonl").read_text().splitlines()) == 2 * 2 * 2
    capsys.readouterr()
    assert run_cli(["report", "--rows", str(out / "rows.jsonl")]) == 0
    assert capsys.readouterr().out == (out / "report.md").read_text()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "artasr", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
