import csv
import json

import pytest

from casnet import io
from casnet.cli import main

SMALL = ["--grid", "12", "--classes", "3"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["generate-data", "--out", str(data), "--n", "5", "--n-test", "2", *SMALL]) == 0
    assert main(["train", "--data-dir", str(data), "--out-dir", str(run), "--epochs", "2",
                 "--checkpoint-every", "1", *SMALL]) == 0
    return root, data, run


def test_generate_data_manifest(trained):
    _, data, _ = trained
    subjects = json.loads((data / "manifest.json").read_text())["subjects"]
    assert [s["split"] for s in subjects] == ["train"] * 3 + ["test"] * 2
    assert {"id", "age", "group", "split", "seed"} <= set(subjects[0])
    image, kind = io.read_vvol(data / f"{subjects[0]['id']}_image.vvol")
    assert kind == "scalar" and tuple(image.shape) == (12, 12, 12)


def test_train_outputs(trained):
    _, _, run = trained
    rows = list(csv.DictReader(open(run / "train_log.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert {"L_S", "L_R", "L_C", "L_Reg", "total", "lambda_i", "lambda_l"} <= set(rows[0])
    assert (run / "checkpoint" / "manifest.txt").exists()
    assert (run / "checkpoints" / "epoch_0002" / "manifest.txt").exists()
    assert "epochs=2" in (run / "config.txt").read_text()


def test_make_atlas_segment_evaluate_export(trained):
    root, data, run = trained
    ck = str(run / "checkpoint")
    assert main(["make-atlas", "--checkpoint", ck, "--out", str(root / "atlases"), *SMALL]) == 0
    for g in range(4):
        assert (root / "atlases" / f"atlas_group{g}_labels.vvol").exists()
        assert io.read_pnm(root / "atlases" / f"atlas_group{g}_image.pgm").shape == (12, 12)

    subjects = json.loads((data / "manifest.json").read_text())["subjects"]
    test = [s for s in subjects if s["split"] == "test"][0]
    seg = root / "seg"
    assert main(["segment", "--checkpoint", ck, "--image", str(data / f"{test['id']}_image.vvol"),
                 "--age", str(test["age"]), "--out", str(seg), "--test-steps", "3", *SMALL]) == 0
    merged, kind = io.read_vvol(seg / "seg_merged.vvol")
    assert kind == "prob" and merged.shape[-1] == 3
    assert io.read_vvol(seg / "phi_displacement.vvol")[1] == "vector"

    report = root / "eval.csv"
    assert main(["evaluate", "--checkpoint", ck, "--data", str(data), "--report", str(report),
                 "--test-steps", "3", *SMALL]) == 0
    rows = list(csv.reader(open(report)))
    assert rows[0][0] == "method" and rows[0][-1] == "overall"
    assert [r[0] for r in rows[1:]] == ["SS", "SS", "DRS", "DRS", "CAS-Net", "CAS-Net"]
    assert (root / "eval_diagnostics.csv").exists()

    out = root / "slice.ppm"
    assert main(["export-slices", "--input", str(seg / "seg_merged.vvol"), "--out", str(out)]) == 0
    assert io.read_pnm(out).shape == (12, 12, 3)


def test_training_is_byte_reproducible(trained, tmp_path):
    _, data, run = trained
    again = tmp_path / "again"
    assert main(["train", "--data-dir", str(data), "--out-dir", str(again), "--epochs", "2", *SMALL]) == 0
    assert (again / "train_log.csv").read_bytes() == (run / "train_log.csv").read_bytes()
    for f in sorted((run / "checkpoint").iterdir()):
        assert (again / "checkpoint" / f.name).read_bytes() == f.read_bytes(), f.name


def test_config_file_and_flag_override(trained, tmp_path):
    _, data, _ = trained
    conf = tmp_path / "c.txt"
    conf.write_text(f"grid=12\nclasses=3\nepochs=5\ndata_dir={data}\nout_dir={tmp_path / 'r'}\n")
    assert main(["train", "--config", str(conf), "--epochs", "1"]) == 0
    assert "epochs=1" in (tmp_path / "r" / "config.txt").read_text()


@pytest.mark.parametrize("argv", [
    ["train", "--config", "/nonexistent/conf.txt"],
    ["train", "--epochs", "abc"],
    ["train", "--data-dir", "/nonexistent/data"],
    ["evaluate", "--checkpoint", "/nonexistent/ck"],
    ["generate-data", "--n", "2", "--n-test", "2", "--out", "/tmp/casnet-unused"],
    ["generate-data", "--noise-sd", "-1", "--out", "/tmp/casnet-unused"],
    ["export-slices", "--input", "/nonexistent.vvol", "--out", "/tmp/x.pgm"],
])
def test_config_and_input_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_export_slice_index_out_of_range(trained, tmp_path):
    _, data, _ = trained
    vol = next(data.glob("*_image.vvol"))
    assert main(["export-slices", "--input", str(vol), "--index", "40", "--out", str(tmp_path / "x.pgm")]) == 2


def test_numeric_failure_exits_3(trained, tmp_path):
    _, data, _ = trained
    assert main(["train", "--data-dir", str(data), "--out-dir", str(tmp_path / "r"), "--epochs", "3",
                 "--lr-field", "1e300", *SMALL]) == 3


def test_grad_check_command(capsys):
    assert main(["grad-check", "--size", "6", "--probes", "4", "--inits", "1", "--classes", "3"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["grad-check", "--size", "6", "--probes", "16", "--inits", "1", "--classes", "3", "--corrupt"]) == 3
