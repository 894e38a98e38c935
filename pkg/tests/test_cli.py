import csv

import numpy as np
import pytest

from splitfedcl import cli, data, pgm
from splitfedcl.errors import MissingRun
from splitfedcl.protocol import REPORT_COLUMNS

TINY = """config_version = 1
mode = "{mode}"
seed = 3
global_rounds = {rounds}
local_epochs = 1
batch_size = 4
lr = 1e-3
image_size = 32
axis_min = 3.0
axis_max = 4.5
client_sizes = [5, 4, 6]
corruption_ratios = [0.4, 0.0, 0.5]
test_size = 4
fe_width = 4
s_width = 4
dump_samples = 1
"""


def write_config(tmp_path, mode="splitfed_cl", rounds=2, extra=""):
    path = tmp_path / f"{mode}-{rounds}.toml"
    path.write_text(TINY.format(mode=mode, rounds=rounds) + extra)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fedavg_single_round_rows(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(write_config(tmp_path, "fedavg", 1)), "--out", str(out)]) == 0
    rows = read_rows(out / "rounds.csv")
    assert len(rows) == 3 + 1
    assert list(rows[0]) == list(REPORT_COLUMNS)
    final = read_rows(out / "final.csv")
    assert len(final) == 1 and final[0]["mode"] == "fedavg" and final[0]["rounds"] == "1"
    assert (out / "config.toml").is_file()
    dumped = sorted(p.name for p in (out / "labels_before_after").iterdir())
    # one corrupted sample each for clients 0 and 2, four files per sample
    assert len(dumped) == 8 and dumped[0].startswith("client0_")


def test_deterministic_runs_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["run", "--config", str(cfg), "--deterministic", "--out", str(out)]) == 0
    for name in ("rounds.csv", "final.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    # floats survive the CSV round trip exactly
    row = read_rows(outs[0] / "final.csv")[0]
    assert repr(float(row["mean_iou"])) == row["mean_iou"]


def test_seed_override_from_environment(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "fedavg", 1)
    monkeypatch.setenv("SFCL_SEED", "11")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert read_rows(tmp_path / "s" / "final.csv")[0]["seed"] == "11"
    monkeypatch.setenv("SFCL_SEED", "eleven")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("config_version = 1\nwat = 1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "bad.toml:2" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2


def test_runtime_errors_exit_3(tmp_path):
    cfg = write_config(tmp_path)
    # valid config, but two shapes this large cannot share the frame
    cfg.write_text(cfg.read_text().replace("image_size = 32", "image_size = 22")
                   .replace("axis_max = 4.5", "axis_max = 5.5"))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 3
    assert cli.main(["compare", "--runs", str(tmp_path / "nowhere")]) == 3


def test_compare(tmp_path, capsys):
    dirs = []
    for mode in ("fedavg", "no_consistency"):
        out = tmp_path / mode
        assert cli.main(["run", "--config", str(write_config(tmp_path, mode, 1)), "--out", str(out)]) == 0
        dirs.append(out)
    capsys.readouterr()
    table = tmp_path / "table.csv"
    assert cli.main(["compare", "--runs", *map(str, dirs), "--out", str(table)]) == 0
    text = capsys.readouterr().out
    assert "fedavg" in text and "no_consistency" in text
    rows = read_rows(table)
    assert [r["mode"] for r in rows] == ["fedavg", "no_consistency"]
    assert rows[0]["mean_iou"] == read_rows(dirs[0] / "final.csv")[0]["mean_iou"]
    with pytest.raises(MissingRun):
        cli.compare_modes([tmp_path])


def test_corrupt_command(tmp_path, capsys):
    cfg = data.SceneConfig()
    fine_image, fine_label, _ = data.render_scene(cfg, 1)
    pgm.write_image(tmp_path / "img.pgm", fine_image)
    pgm.write_label(tmp_path / "lab.pgm", fine_label)
    args = ["corrupt", "--image", str(tmp_path / "img.pgm"), "--label", str(tmp_path / "lab.pgm"),
            "--out", str(tmp_path / "noisy.pgm"), "--amax-scale", "4"]
    assert cli.main(args) == 0
    noisy = pgm.read_label(tmp_path / "noisy.pgm")
    assert noisy.shape == fine_label.shape and (noisy != fine_label).any()
    assert "pixels changed" in capsys.readouterr().out
    # restricting to class 1 leaves class 2 alone
    assert cli.main(args[:-2] + ["--classes", "1"]) == 0
    only1 = pgm.read_label(tmp_path / "noisy.pgm")
    np.testing.assert_array_equal(only1 == 2, fine_label == 2)
    assert cli.main(args[:-2] + ["--rho", "-1"]) == 2
    assert cli.main(args[:-2] + ["--classes", "a,b"]) == 2
