import csv
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from mspcaps.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from mspcaps.data import read_mspd
from mspcaps.graph import LAST_CHECKPOINT, METRICS_FILE


@pytest.fixture
def trained(small_run, tmp_path):
    """Train the small model through the CLI and return the run directory."""
    config = tmp_path / "run.json"
    config.write_text(json.dumps(small_run.model_dump(mode="json")))
    assert main(["train", "--config", str(config)]) == EXIT_OK
    return Path(small_run.out_dir), config


def test_inspect_reports_the_tiny_layout(capsys):
    assert main(["inspect"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "344,320" in out
    assert "  total    84" in out
    assert "CAR group sizes: 4, 4" in out


def test_inspect_ablation_flags(capsys):
    assert main(["inspect", "--scale-mask", "0,1,0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "86,904" in out and "16x16" in out and "32x32" not in out


def test_convert_idx_pair(tmp_path):
    pixels = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    images = tmp_path / "train-images-idx3-ubyte"
    labels = tmp_path / "train-labels-idx1-ubyte"
    images.write_bytes(b"\x00\x00\x08\x03" + struct.pack(">III", 2, 4, 4) + pixels.tobytes())
    labels.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 2) + bytes([4, 2]))
    out = tmp_path / "mnist.mspd"
    assert main(["convert", str(images), str(labels), "-o", str(out)]) == EXIT_OK
    got_images, got_labels = read_mspd(out)
    assert got_images.shape == (2, 1, 4, 4)
    np.testing.assert_allclose(got_images[:, 0], pixels / 255, rtol=1e-6)
    np.testing.assert_array_equal(got_labels, [4, 2])


def test_convert_cifar_batch(tmp_path):
    batch = tmp_path / "test_batch.bin"
    batch.write_bytes(bytes([3]) + bytes([255]) * 3072)
    out = tmp_path / "cifar.mspd"
    assert main(["convert", str(batch), "--output", str(out)]) == EXIT_OK
    images, labels = read_mspd(out)
    assert images.shape == (1, 3, 32, 32) and np.all(images == 1.0)
    np.testing.assert_array_equal(labels, [3])


def test_convert_failures_exit_with_data_code(tmp_path):
    unknown = tmp_path / "images.png"
    unknown.write_bytes(b"\x89PNG")
    assert main(["convert", str(unknown), "-o", str(tmp_path / "x.mspd")]) == EXIT_DATA
    damaged = tmp_path / "data_batch_1.bin"
    damaged.write_bytes(b"\x01" * 100)
    assert main(["convert", str(damaged), "-o", str(tmp_path / "y.mspd")]) == EXIT_DATA


def test_bad_config_exits_with_config_code(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text('{"epochs": "ten"}')
    assert main(["train", "--config", str(config)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    assert main(["inspect", "--patch-size", "3"]) == EXIT_CONFIG


def test_missing_data_exits_with_data_code(tmp_path):
    args = ["train", "--dataset", "mnist", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path / "run")]
    assert main(args) == EXIT_DATA


def test_train_eval_attack_round(trained, capsys):
    out_dir, _ = trained
    capsys.readouterr()
    checkpoint = str(out_dir / LAST_CHECKPOINT)

    assert main(["eval", checkpoint]) == EXIT_OK
    assert capsys.readouterr().out.startswith("accuracy ")
    with (out_dir / METRICS_FILE).open() as f:
        last = list(csv.reader(f))[-1]
    assert last[:2] == ["2", "eval"]

    robustness = out_dir / "robustness.csv"
    args = ["attack", checkpoint, "--attack", "bim", "--steps", "2", "--eps-list", "0,0.05", "--out", str(robustness)]
    assert main(args) == EXIT_OK
    rows = robustness.read_text().splitlines()
    assert rows[0] == "epsilon,accuracy,attack,model"
    assert len(rows) == 3 and rows[1].startswith("0.0,") and rows[2].endswith(",bim,last")

    assert main(["inspect", checkpoint]) == EXIT_OK
    assert "CAR group sizes: 4, 4" in capsys.readouterr().out


def test_checkpoint_problems_map_to_exit_codes(trained, tmp_path):
    out_dir, config = trained
    checkpoint = out_dir / LAST_CHECKPOINT
    assert main(["eval", str(tmp_path / "missing.ckpt")]) == EXIT_DATA

    damaged = tmp_path / "damaged.ckpt"
    damaged.write_bytes(b"MSPX" + checkpoint.read_bytes()[4:])
    assert main(["eval", str(damaged)]) == EXIT_DATA

    other = json.loads(config.read_text())
    other["model_overrides"]["d_out"] = 5
    mismatched = tmp_path / "other.json"
    mismatched.write_text(json.dumps(other))
    assert main(["eval", str(checkpoint), "--config", str(mismatched)]) == EXIT_CONFIG
