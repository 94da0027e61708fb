import json

import pytest

from sambaunet import checkpoint as ckpt_io
from sambaunet.cli import CHECKPOINT_ENV, build_parser, main, read_config_file, resolve_configs
from sambaunet.data import read_dataset
from sambaunet.errors import SambaError
from sambaunet.metrics import TABLE_COLUMNS

SMALL = ["--preset", "micro", "--image-size", "32", "--batch-size", "2", "--eval-interval", "1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "d.smbd"
    assert main(["gen-data", "--count", "5", "--size", "32", "--seed", "2", "-o", str(path)]) == 0
    return path


def parse(argv):
    return resolve_configs(build_parser().parse_args(argv))


def test_config_file_parsing(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nlr = 0.5  # trailing\nmax-iters=7\n\nchannels = 8, 16\n")
    assert read_config_file(f) == {"lr": "0.5", "max_iters": "7", "channels": "8, 16"}
    f.write_text("bogus = 1\n")
    with pytest.raises(SambaError, match="unknown key"):
        read_config_file(f)
    f.write_text("lr 0.5\n")
    with pytest.raises(SambaError, match="key = value"):
        read_config_file(f)


def test_precedence(tmp_path, monkeypatch):
    f = tmp_path / "c.cfg"
    f.write_text("lr = 0.5\nmomentum = 0.8\nseed = 9\nbsea = false\n")
    monkeypatch.setenv(CHECKPOINT_ENV, "from-env")
    t, n = parse(["train", "--data", "x", "--config", str(f), "--lr", "0.25"])
    assert (t.lr, t.momentum, t.seed, n.seed) == (0.25, 0.8, 9, 9)
    assert t.checkpoint_dir == "from-env" and n.bsea is False
    t, _ = parse(["train", "--data", "x", "--checkpoint-dir", "flag"])
    assert t.checkpoint_dir == "flag"
    f.write_text("checkpoint_dir = file\n")
    t, _ = parse(["train", "--data", "x", "--config", str(f)])
    assert t.checkpoint_dir == "file"


def test_profile_and_switch_flags():
    t, n = parse(["train", "--data", "x", "--profile", "paper", "--no-oca", "--fuse-mode", "sum",
                  "--channels", "4", "8"])
    assert (t.batch_size, t.max_iters) == (12, 10000)
    assert n.oca is False and n.hoacm_fuse_mode == "sum" and n.channels == (4, 8)


def test_gen_data_and_pgm(tmp_path, capsys):
    out = tmp_path / "g.smbd"
    assert main(["gen-data", "--count", "3", "--size", "32", "-o", str(out), "--pgm", str(tmp_path / "p")]) == 0
    assert len(read_dataset(out)) == 3
    assert len(list((tmp_path / "p").glob("*.pgm"))) == 6
    assert "wrote 3 samples" in capsys.readouterr().out


def test_train_then_eval(dataset, tmp_path, capsys):
    ck = tmp_path / "ck"
    assert main(["train", "--data", str(dataset), *SMALL, "--max-iters", "2", "--checkpoint-dir", str(ck)]) == 0
    assert (ck / "best.smbc").exists() and (ck / "last.smbc").exists()
    lines = (ck / "history.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,val_mDice,val_HD95" and len(lines) == 3
    assert json.loads((ck / "summary.json").read_text())["iterations"] == 2
    capsys.readouterr()
    rc = main(["eval", "--checkpoint", str(ck / "best.smbc"), "--data", str(dataset),
               "--csv", str(tmp_path / "m.csv"), "--json", str(tmp_path / "m.json")])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == " | ".join(TABLE_COLUMNS)
    assert (tmp_path / "m.csv").exists()
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["iteration"] == ckpt_io.load(ck / "best.smbc").iteration


def test_ablate_writes_table(dataset, tmp_path, capsys):
    table, js = tmp_path / "t.md", tmp_path / "t.json"
    rc = main(["ablate", "--data", str(dataset), *SMALL, "--max-iters", "0",
               "--output", str(table), "--json", str(js)])
    assert rc == 0
    lines = table.read_text().splitlines()
    assert lines[0] == "Configuration | " + " | ".join(TABLE_COLUMNS)
    assert len(json.loads(js.read_text())["rows"]) == 8


def test_grad_check_subset(capsys):
    assert main(["grad-check", "--trials", "2", "add", "softmax"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2 and "0 failing" in out
    assert main(["grad-check", "nonsense"]) == 2


def test_bench_scan(capsys):
    assert main(["bench-scan", "--lengths", "64", "128", "--repeats", "2", "--channels", "2"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("L |") and len(rows) == 3


def test_missing_files_exit_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path / "none")]) == 2
    assert "samba: error" in capsys.readouterr().err
