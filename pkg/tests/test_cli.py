"""Command-line surface: determinism, exit codes, run-dir discipline, and
the output files every subcommand promises."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from refcomp import imageio
from refcomp.cli import main
from refcomp.curation import FrameRecord
from refcomp.synthbench import SceneConfig, generate_dataset, write_dataset


def dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    write_dataset(generate_dataset(SceneConfig(image_size=8), 6, base_seed=900), path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("runs") / "train"
    code = main(["train", "--data", str(dataset_dir), "--out", str(out),
                 "--steps", "6", "--batch", "2", "--t-steps", "20"])
    assert code == 0
    return out


class TestGen:
    def test_twice_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen", "--seed", "7", "--count", "5", "--size", "16",
                     "--out", str(a)]) == 0
        assert main(["gen", "--seed", "7", "--count", "5", "--size", "16",
                     "--out", str(b)]) == 0
        assert dir_bytes(a) == dir_bytes(b)

    def test_config_echo_written(self, tmp_path):
        out = tmp_path / "run"
        assert main(["gen", "--seed", "1", "--count", "2", "--out", str(out)]) == 0
        echo = json.loads((out / "config.json").read_text())
        assert echo["command"] == "gen"
        assert echo["options"]["seed"] == 1

    def test_config_file_merging(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"count": 3, "seed": 5}))
        out = tmp_path / "run"
        assert main(["gen", "--config", str(cfg), "--seed", "9",
                     "--out", str(out)]) == 0
        echo = json.loads((out / "config.json").read_text())
        assert echo["options"]["count"] == 3      # from file
        assert echo["options"]["seed"] == 9       # flag wins

    def test_non_empty_out_rejected(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "junk").write_text("x")
        assert main(["gen", "--out", str(out)]) == 2

    def test_run_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("REFCOMP_RUN_ROOT", str(tmp_path))
        assert main(["gen", "--count", "1", "--out", "nested/run"]) == 0
        assert (tmp_path / "nested/run/manifest.jsonl").exists()


class TestExitCodes:
    def test_unknown_flag(self):
        assert main(["gen", "--out", "/tmp/x", "--bogus"]) == 1

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_unreadable_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "out"), "--steps", "1"]) == 2

    def test_bad_config_keys(self, tmp_path, dataset_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_dit_patch_divisibility_contradiction(self, tmp_path):
        data = tmp_path / "data"
        write_dataset(generate_dataset(SceneConfig(image_size=14), 2, 0), data)
        code = main(["train", "--data", str(data), "--out", str(tmp_path / "out"),
                     "--backbone", "dit", "--steps", "1", "--t-steps", "5"])
        assert code == 2


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "model_shared.ckpt").exists()
        lines = (trained / "loss_shared.csv").read_text().splitlines()
        assert lines[0] == "step,loss,variant,wall_time"
        assert len(lines) == 7
        assert json.loads((trained / "config.json").read_text())["options"]["steps"] == 6


class TestSample:
    def test_background_preserved(self, tmp_path, dataset_dir, trained):
        out = tmp_path / "samp"
        code = main(["sample", "--data", str(dataset_dir),
                     "--checkpoint", str(trained / "model_shared.ckpt"),
                     "--out", str(out), "--count", "2", "--steps", "4"])
        assert code == 0
        from refcomp.synthbench import load_dataset
        samples = load_dataset(dataset_dir)
        for i in range(2):
            img = imageio.read_ppm(out / f"out_{i:04d}.ppm")
            np.testing.assert_array_equal(img * samples[i].mask_bg,
                                          samples[i].masked_bg)


class TestAblate:
    def test_csv_row_count(self, tmp_path, dataset_dir):
        out = tmp_path / "abl"
        code = main(["ablate", "--data", str(dataset_dir), "--out", str(out),
                     "--steps", "4", "--batch", "2", "--t-steps", "20",
                     "--draws", "2"])
        assert code == 0
        rows = (out / "ablate.csv").read_text().splitlines()[1:]
        depth = 8  # default backbone depth
        assert len(rows) == 3 * depth
        for variant in ("shared", "dual_frozen", "dual_trainable"):
            assert (out / f"model_{variant}.ckpt").exists()
            assert sum(r.startswith(variant + ",") for r in rows) == depth


class TestConlab:
    def test_report_files(self, tmp_path, dataset_dir, trained):
        out = tmp_path / "lab"
        code = main(["conlab", "--data", str(dataset_dir),
                     "--checkpoint", str(trained / "model_shared.ckpt"),
                     "--out", str(out), "--draws", "2",
                     "--train-log", str(trained / "loss_shared.csv")])
        assert code == 0
        summary = json.loads((out / "consistency.json").read_text())
        assert summary["merging_loss_mean"] is not None
        assert summary["training_loss_reference"] is not None
        assert (out / "consistency.csv").exists()


class TestCurate:
    def make_frames(self, path: Path):
        rng = np.random.default_rng(0)
        checker = np.indices((16, 16)).sum(axis=0) % 2 * 0.5
        index_lines = []
        for k in range(3):
            img = np.clip(checker + rng.random((3, 16, 16)) * 0.5, 0, 1)
            imageio.write_ppm(path / f"frame{k}.ppm", img)
            mask = np.zeros((16, 16), dtype=np.float32)
            mask[4:10, 4:10] = 1.0
            imageio.write_pgm(path / f"mask{k}.pgm", mask)
            index_lines.append(json.dumps({
                "source": "vid0", "frame": k, "image": f"frame{k}.ppm",
                "masks": [{"label": "chair", "path": f"mask{k}.pgm"}]}))
        (path / "index.jsonl").write_text("\n".join(index_lines) + "\n")

    def test_pairs_manifest(self, tmp_path):
        frames = tmp_path / "frames"
        frames.mkdir()
        self.make_frames(frames)
        out = tmp_path / "cur"
        assert main(["curate", "--frames", str(frames), "--out", str(out)]) == 0
        lines = (out / "pairs.jsonl").read_text().splitlines()
        summary = json.loads(lines[0])["summary"]
        assert summary["clusters"] >= 1
        assert len(lines) - 1 == sum(1 for line in lines[1:])

    def test_threshold_flags(self, tmp_path):
        frames = tmp_path / "frames"
        frames.mkdir()
        self.make_frames(frames)
        out = tmp_path / "cur"
        assert main(["curate", "--frames", str(frames), "--out", str(out),
                     "--sobel-threshold", "1e12"]) == 0
        summary = json.loads((out / "pairs.jsonl").read_text().splitlines()[0])
        assert summary["summary"]["dropped"]["blur"] == 3


class TestMetrics:
    def test_csv(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        rng = np.random.default_rng(1)
        for i in range(2):
            img = imageio.quantize(rng.random((3, 16, 16)))
            imageio.write_ppm(a / f"im{i}.ppm", img)
            imageio.write_ppm(b / f"im{i}.ppm", img)
        out = tmp_path / "met"
        assert main(["metrics", "--outputs", str(a), "--truths", str(b),
                     "--out", str(out)]) == 0
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0] == "file,psnr,ssim,ssim_fallback"
        assert len(rows) == 3
        assert all("inf" in r for r in rows[1:])  # identical pairs


class TestNumericExit:
    def test_numerical_error_maps_to_exit_3(self, monkeypatch, tmp_path):
        from refcomp import cli
        from refcomp.diffusion import NumericalError

        def boom(model, dataset, s, steps, batch_size, lr, seed, on_step=None,
                 augment=None):
            raise NumericalError("diverged", {"loss": float("nan")})

        monkeypatch.setattr(cli, "train", boom)
        data = tmp_path / "data"
        write_dataset(generate_dataset(SceneConfig(image_size=8), 2, 0), data)
        code = main(["train", "--data", str(data), "--out", str(tmp_path / "o"),
                     "--steps", "1", "--t-steps", "5"])
        assert code == 3
