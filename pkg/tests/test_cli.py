import csv

import numpy as np
import pytest

from sgp import cli, gpm
from sgp.data import write_idx

SMALL = """\
[data]
generator = synthetic
tasks = 3
samples_per_class = 60

[network]
hidden = 16, 16

[train]
seed = 7
epochs = 6

[method]
methods = {methods}
alpha = {alpha}
epsilon_th = 0.97

[output]
dir = {out}
"""


def write_config(tmp_path, methods="sgp, gpm", alpha=10, out=None, extra=""):
    path = tmp_path / "exp.ini"
    path.write_text(SMALL.format(methods=methods, alpha=alpha, out=out or tmp_path / "out") + extra)
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_run_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for m in ("sgp", "gpm"):
        files = {p.name for p in (out / m).iterdir()}
        assert {"metrics.csv", "summary.json", "memory.npz", "network.npz", "memory_task1.npz"} <= files
        assert any(n.startswith("importance_") for n in files)
        rows = read_csv(out / m / "metrics.csv")
        assert [r["after_task"] for r in rows] == ["1", "2", "3"]
        assert rows[0]["task_2"] == ""
    comp = read_csv(out / "comparison.csv")
    assert comp[0]["method_a"] == "sgp" and comp[0]["method_b"] == "gpm"
    assert "ACC=" in capsys.readouterr().out


def test_alpha_limit_comparison(tmp_path):
    cfg = write_config(tmp_path, methods="gpm, sgp", alpha=1e9)
    assert cli.main(["run", "--config", str(cfg)]) == 0
    row = read_csv(tmp_path / "out" / "comparison.csv")[0]
    assert abs(float(row["delta_acc"])) <= 1e-4


def test_missing_dataset_file(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(f"[data]\ngenerator = file\npath = {tmp_path / 'nope.npz'}\n"
                   f"[output]\ndir = {tmp_path / 'out'}\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert not (tmp_path / "out").exists()
    assert "error" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    cfg = write_config(tmp_path, extra="\n[extra]\nbogus = 1\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    cfg.write_text(SMALL.format(methods="sgp", alpha=1, out=tmp_path / "o").replace("epochs = 6", "epoch = 6"))
    assert cli.main(["run", "--config", str(cfg)]) == 2


def test_bad_method(tmp_path):
    cfg = write_config(tmp_path, methods="sgp, ewc")
    assert cli.main(["run", "--config", str(cfg)]) == 2


def test_output_precedence(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, methods="finetune")
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "finetune" / "metrics.csv").exists()
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "finetune" / "metrics.csv").exists()
    assert not (tmp_path / "out").exists()


def test_flag_overrides(tmp_path):
    cfg = cli.load_config(write_config(tmp_path))
    args = cli._parser().parse_args(["run", "--config", "x", "--seed", "3", "--alpha", "2",
                                     "--epsilon-th", "0.9", "--method", "gpm", "--optimizer", "adam_gp"])
    cfg = cli.apply_overrides(cfg, args)
    assert cfg.seed == 3 and cfg.methods == ("gpm",)
    assert cfg.method["alpha"] == 2 and cfg.method["epsilon_th"] == 0.9
    assert cfg.train["optimizer"] == "adam_gp"


def test_numerical_abort(tmp_path, monkeypatch):
    from sgp import trainer
    from sgp.errors import NumericalError

    def boom(*a, **k):
        raise NumericalError("nan loss")

    monkeypatch.setattr(trainer, "train_continual", boom)
    assert cli.main(["run", "--config", str(write_config(tmp_path, methods="sgp"))]) == 3


def test_inspect_memory(tmp_path, capsys):
    cfg = write_config(tmp_path, methods="sgp")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "out" / "sgp" / "memory_task1.npz"
    hist = tmp_path / "hist.csv"
    capsys.readouterr()
    assert cli.main(["inspect-memory", str(ckpt), "--csv", str(hist)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "checkpoint,layer,in_dim,bases,lambda_one,fraction_lambda_one"
    for line in lines[1:]:
        assert line.split(",")[4] == "1"
    rows = read_csv(hist)
    mem = gpm.load_memory(ckpt)
    assert sum(int(r["count"]) for r in rows) == sum(mem.sizes)


def test_inspect_empty_memory(tmp_path, capsys):
    gpm.save_memory(gpm.BasisMemory([gpm.LayerMemory.empty(4)]), tmp_path / "e.npz")
    report = cli.inspect_memory([tmp_path / "e.npz"])
    assert report[0]["bases"] == 0 and report[0]["fraction_lambda_one"] == 0.0


def test_inspect_version_mismatch(tmp_path):
    np.savez(tmp_path / "bad.npz", format_version=np.array(7), n_layers=np.array(0))
    assert cli.main(["inspect-memory", str(tmp_path / "bad.npz")]) == 2


def test_gen_data(tmp_path):
    from sgp.data import gen_synthetic_split, load_sequence

    cfg = write_config(tmp_path)
    dest = tmp_path / "seq.npz"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(dest)]) == 0
    seq = load_sequence(dest)
    assert len(seq) == 3 and seq.provenance["generator"] == "synthetic_split"


def test_idx_split_run(tmp_path, rng):
    imgs = rng.integers(0, 256, (120, 6, 6), dtype=np.uint8)
    labels = np.repeat(np.arange(4, dtype=np.uint8), 30)
    write_idx(tmp_path / "img", imgs)
    write_idx(tmp_path / "lab", labels)
    cfg = tmp_path / "idx.ini"
    cfg.write_text(f"[data]\ngenerator = idx_split\nimages = {tmp_path / 'img'}\n"
                   f"labels = {tmp_path / 'lab'}\nclasses_per_task = 2\n"
                   "[network]\nconv = 4:3:1\nhidden = 8\n[train]\nepochs = 2\n"
                   f"[method]\nmethods = sgp\n[output]\ndir = {tmp_path / 'out'}\n")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert len(read_csv(tmp_path / "out" / "sgp" / "metrics.csv")) == 2
