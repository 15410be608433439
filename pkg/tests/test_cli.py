"""CLI tests: end-to-end command wiring on a miniature configuration."""

import json
import os

import pytest

from fieldgan.cli import main
from fieldgan.data import load_png

TINY = {
    "field": {"hidden_layers": 1, "hidden_width": 8, "pe_frequencies": 1,
              "fmm_rank": 2},
    "generator": {"z_dim": 4, "trunk_layers": 1, "trunk_width": 8},
    "render": {"width": 16, "height": 16, "samples_per_ray": 3},
    "data": {"n_scenes": 4, "image_size": 16},
    "train": {"batch_size": 2, "total_steps": 2, "log_every": 1,
              "checkpoint_every": 0, "instance_noise_sigma": 0.0},
    "metrics": {"eval_samples": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def trained(tmp_path, tiny_config):
    run_dir = str(tmp_path / "run")
    assert main(["train", "--config", tiny_config, "--out", run_dir]) == 0
    return os.path.join(run_dir, "checkpoint.bin")


class TestGenData:
    def test_writes_pngs_and_manifest(self, tmp_path, tiny_config):
        out = str(tmp_path / "ds")
        assert main(["gen-data", "--config", tiny_config, "--n", "4",
                     "--out", out]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert len(manifest["images"]) == 4
        for name in manifest["images"]:
            assert os.path.exists(os.path.join(out, name))

    def test_default_config(self, tmp_path):
        out = str(tmp_path / "ds")
        assert main(["gen-data", "--n", "2", "--out", out]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["resolution"] == 32


class TestTrain:
    def test_writes_checkpoint_and_metrics(self, tmp_path, tiny_config):
        run_dir = str(tmp_path / "run")
        assert main(["train", "--config", tiny_config, "--out", run_dir]) == 0
        assert os.path.exists(os.path.join(run_dir, "checkpoint.bin"))
        lines = open(os.path.join(run_dir, "metrics.jsonl")).read().splitlines()
        records = [json.loads(ln) for ln in lines]
        assert [r["step"] for r in records] == [1, 2]
        assert all("loss_d" in r and "wallclock_s" in r for r in records)

    def test_steps_override_and_resume(self, tmp_path, tiny_config):
        run_dir = str(tmp_path / "run")
        assert main(["train", "--config", tiny_config, "--out", run_dir,
                     "--steps", "1"]) == 0
        ckpt = os.path.join(run_dir, "checkpoint.bin")
        assert main(["train", "--config", tiny_config, "--out", run_dir,
                     "--steps", "2", "--checkpoint", ckpt]) == 0


class TestRender:
    def test_samples_written(self, tmp_path, trained):
        out = str(tmp_path / "renders")
        assert main(["render", "--checkpoint", trained, "--out", out,
                     "--n", "2"]) == 0
        assert sorted(os.listdir(out)) == ["sample_000.png", "sample_001.png"]

    def test_same_seed_identical_pngs(self, tmp_path, trained):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        for out in (out_a, out_b):
            assert main(["render", "--checkpoint", trained, "--out", out,
                         "--n", "1", "--seed", "9"]) == 0
        bytes_a = open(os.path.join(out_a, "sample_000.png"), "rb").read()
        bytes_b = open(os.path.join(out_b, "sample_000.png"), "rb").read()
        assert bytes_a == bytes_b

    def test_sweep_frames(self, tmp_path, trained):
        out = str(tmp_path / "sweep")
        assert main(["render", "--checkpoint", trained, "--out", out, "--sweep",
                     "--sweep-steps", "3"]) == 0
        assert sorted(os.listdir(out)) == [f"sweep_{i:03d}.png" for i in range(3)]

    def test_missing_checkpoint_nonzero_exit(self, tmp_path):
        assert main(["render", "--checkpoint", str(tmp_path / "nope.bin"),
                     "--out", str(tmp_path / "o")]) == 1


class TestInterpolate:
    def test_strip_and_endpoint_consistency(self, tmp_path, trained):
        out = str(tmp_path / "interp")
        assert main(["interpolate", "--checkpoint", trained, "--out", out,
                     "--seed", "3", "--seed2", "4", "--steps", "3"]) == 0
        frames = sorted(f for f in os.listdir(out) if f.startswith("frame"))
        assert frames == ["frame_000.png", "frame_001.png", "frame_002.png"]
        strip = load_png(os.path.join(out, "strip.png"))
        assert strip.shape == (16, 48, 3)
        # endpoints must equal direct sweeps of the same latent seeds
        sweep_a = str(tmp_path / "sa")
        sweep_b = str(tmp_path / "sb")
        assert main(["render", "--checkpoint", trained, "--out", sweep_a, "--sweep",
                     "--sweep-steps", "1", "--seed", "3"]) == 0
        assert main(["render", "--checkpoint", trained, "--out", sweep_b, "--sweep",
                     "--sweep-steps", "1", "--seed", "4"]) == 0
        a = open(os.path.join(out, "frame_000.png"), "rb").read()
        b = open(os.path.join(sweep_a, "sweep_000.png"), "rb").read()
        assert a == b
        c = open(os.path.join(out, "frame_002.png"), "rb").read()
        d = open(os.path.join(sweep_b, "sweep_000.png"), "rb").read()
        assert c == d


class TestMesh:
    def test_writes_parseable_obj(self, tmp_path, trained):
        out = str(tmp_path / "m.obj")
        assert main(["mesh", "--checkpoint", trained, "--out", out,
                     "--grid-res", "12", "--tau", "0.05"]) == 0
        text = open(out).read()
        assert text.startswith("#")
        from fieldgan.meshing import read_obj

        read_obj(out)  # parses without error


class TestEval:
    def test_writes_metric_reports(self, tmp_path, trained, tiny_config):
        out = str(tmp_path / "eval")
        assert main(["eval", "--checkpoint", trained, "--config", tiny_config,
                     "--out", out]) == 0
        lines = open(os.path.join(out, "metrics.json")).read().strip().splitlines()
        docs = [json.loads(ln) for ln in lines]
        names = {d["name"] for d in docs}
        assert "kid_poly_pixel" in names and "channel_stats" in names


class TestBench:
    def test_reports_throughput(self, tmp_path, trained, capsys):
        assert main(["bench", "--checkpoint", trained, "--size", "24",
                     "--workers", "2"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["bit_identical_across_workers"] is True
        assert set(doc["ray_samples_per_s"]) == {"1", "2"}
        assert all(v > 0 for v in doc["ray_samples_per_s"].values())


class TestWorkersEnv:
    def test_env_fallback(self, tmp_path, trained, monkeypatch):
        out = str(tmp_path / "renders")
        monkeypatch.setenv("HNG_WORKERS", "2")
        assert main(["render", "--checkpoint", trained, "--out", out,
                     "--n", "1"]) == 0
