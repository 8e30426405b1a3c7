import csv
import json

import numpy as np
import pytest

from drupi import cli
from drupi import config as CFG
from drupi import data as D


BASE_CONFIG = """
[experiment]
schema_version = 1
master_seed = 3
seeds = 1,2
out_dir = {out}

[data]
source = blobs
classes = 3
per_class = 6
test_per_class = 6
image_size = 1x8x8
sigma = 0.05
class_sep = 0.05
smoothness = 1.0

[reduce]
ipc = 1
init = random
backend = dc
outer_steps = 1
inner_steps = 1
batch_real = 4

[model]
family = convnet
depth = 2
width = 8

[privileged]
lambda_reg = 0.5
lambda_task = 0.1
n_feat = 1
feature_init = weak-model

[eval]
epochs = 3
lr = 0.02
probe_epochs = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    def make(out_name="run", **overrides):
        text = BASE_CONFIG.format(out=tmp_path / out_name)
        for key, val in overrides.items():
            section, _, name = key.partition(".")
            old = None
            for line in text.splitlines():
                if line.startswith(f"{name} = "):
                    old = line
            assert old is not None, f"override target {name} not in template"
            text = text.replace(old, f"{name} = {val}", 1)
        p = tmp_path / "exp.ini"
        p.write_text(text)
        return p
    return make


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_run_writes_rows_and_artifacts(cfg_file, tmp_path):
    rc = cli.main(["run", "--config", str(cfg_file())])
    assert rc == 0
    rows = read_csv(tmp_path / "run" / "summary.csv")
    assert len(rows) == 3                      # 2 seeds + aggregate
    assert [r["seed"] for r in rows] == ["1", "2", "mean"]
    for r in rows[:2]:
        assert 0.0 <= float(r["accuracy"]) <= 1.0
        assert r["error"] == ""
    assert (tmp_path / "run" / "reduced.drpi").exists()
    assert (tmp_path / "run" / "report.json").exists()
    # container round-trips through the standard loader
    ds = D.load_reduced(tmp_path / "run" / "reduced.drpi")
    assert ds.feature_sets is not None


def test_rerun_identical_except_wall_clock(cfg_file, tmp_path):
    cli.main(["run", "--config", str(cfg_file())])
    first = read_csv(tmp_path / "run" / "summary.csv")
    cli.main(["run", "--config", str(cfg_file())])
    second = read_csv(tmp_path / "run" / "summary.csv")
    for a, b in zip(first, second):
        for col in a:
            if col == "wall_time_s":
                continue
            assert a[col] == b[col], col


def test_dry_run_writes_nothing(cfg_file, tmp_path, capsys):
    rc = cli.main(["run", "--config", str(cfg_file()), "--dry-run"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "config_hash" in out
    assert not (tmp_path / "run").exists()


def test_invalid_config_nonzero_exit_with_field_message(cfg_file, tmp_path, capsys):
    p = cfg_file()
    text = p.read_text().replace("init = random", "init = fancy")
    p.write_text(text)
    rc = cli.main(["run", "--config", str(p)])
    assert rc == 2
    assert "init" in capsys.readouterr().err


def test_config_hash_stable_across_reordering(tmp_path):
    p1 = tmp_path / "a.ini"
    p1.write_text(BASE_CONFIG.format(out="x"))
    cfg1 = CFG.load_config(p1)
    # same logical config, different key order in one section
    lines = BASE_CONFIG.format(out="x").splitlines()
    i = lines.index("lambda_reg = 0.5")
    j = lines.index("lambda_task = 0.1")
    lines[i], lines[j] = lines[j], lines[i]
    p2 = tmp_path / "b.ini"
    p2.write_text("\n".join(lines))
    cfg2 = CFG.load_config(p2)
    assert cfg1.config_hash == cfg2.config_hash
    cfg2.privileged.lambda_reg = 0.7
    assert cfg1.config_hash != cfg2.config_hash


def test_inspect_prints_header_json(cfg_file, tmp_path, capsys):
    cli.main(["run", "--config", str(cfg_file())])
    capsys.readouterr()
    rc = cli.main(["inspect", str(tmp_path / "run" / "reduced.drpi")])
    assert rc == 0
    header = json.loads(capsys.readouterr().out)
    assert header["channels"][:2] == ["images", "labels"]
    assert header["n_feat"] == 1


def test_metrics_verb(cfg_file, tmp_path, capsys):
    # ipc=2 so per-class counts support the metrics
    cli.main(["run", "--config", str(cfg_file(**{"reduce.ipc": 2}))])
    capsys.readouterr()
    rc = cli.main(["metrics", str(tmp_path / "run" / "reduced.drpi")])
    out = capsys.readouterr().out
    assert rc == 0
    header, values = out.strip().splitlines()
    assert header == "diversity,discriminability"
    div, disc = map(float, values.split(","))
    assert 0.0 <= disc <= 1.0


def test_metrics_verb_unavailable_on_ipc1(cfg_file, tmp_path, capsys):
    cli.main(["run", "--config", str(cfg_file())])
    capsys.readouterr()
    rc = cli.main(["metrics", str(tmp_path / "run" / "reduced.drpi")])
    assert rc == 1


def test_sweep_grid_counts_and_csv(cfg_file, tmp_path):
    rc = cli.main([
        "sweep", "--config", str(cfg_file()), "--param", "lambda_task",
        "--values", "0,0.1", "--out", str(tmp_path / "sw"),
    ])
    assert rc == 0
    rows = read_csv(tmp_path / "sw" / "sweep.csv")
    assert len(rows) == 6                      # 2 points x (2 seeds + aggregate)
    assert {r["value"] for r in rows} == {"0", "0.1"}
    assert (tmp_path / "sw" / "lambda_task_0" / "summary.csv").exists()
    assert (tmp_path / "sw" / "lambda_task_0.1" / "summary.csv").exists()


def test_sweep_size_one_matches_run(cfg_file, tmp_path):
    cli.main(["run", "--config", str(cfg_file())])
    run_rows = read_csv(tmp_path / "run" / "summary.csv")
    cli.main(["sweep", "--config", str(cfg_file()), "--param", "n_feat",
              "--values", "1", "--out", str(tmp_path / "sw1")])
    sweep_rows = read_csv(tmp_path / "sw1" / "sweep.csv")
    assert len(sweep_rows) == len(run_rows)
    for a, b in zip(run_rows, sweep_rows):
        assert a["accuracy"] == b["accuracy"]


def test_run_with_idx_source(tmp_path):
    # build a small idx pair with the independent writer from the data tests
    from test_data import write_idx_fixture
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(12, 8, 8), dtype=np.uint8)
    labels = np.tile([0, 1, 2], 4)
    ipath, lpath = write_idx_fixture(tmp_path, pixels, labels)
    text = BASE_CONFIG.format(out=tmp_path / "idxrun")
    text = text.replace("source = blobs", "source = idx")
    text += (f"\n[data]\n" if "[data]" not in text else "")
    text = text.replace(
        "source = idx",
        "source = idx\ntrain_images = {0}\ntrain_labels = {1}\n"
        "test_images = {0}\ntest_labels = {1}".format(ipath, lpath),
    )
    p = tmp_path / "idx.ini"
    p.write_text(text)
    rc = cli.main(["run", "--config", str(p)])
    assert rc == 0
    rows = read_csv(tmp_path / "idxrun" / "summary.csv")
    assert len(rows) == 3
