"""End-to-end tests of the command-line surface (main.run) on small images."""

import json

import numpy as np
import pytest
from PIL import Image as PILImage

from engine.config import RunConfig, save_config
from main import run


@pytest.fixture
def conf(tmp_path):
    """64-pixel runs on a 3-scale, 8-orientation bank."""
    cfg = RunConfig().with_overrides({
        "bank.n_scales": 3,
        "bank.n_orientations": 8,
        "image_size": 64,
        "workers": 1,
    })
    path = tmp_path / "run.conf"
    save_config(path, cfg)
    return str(path)


@pytest.fixture
def manifest(tmp_path, rng):
    folder = tmp_path / "corpus"
    folder.mkdir()
    lines = []
    for i in range(4):
        PILImage.fromarray(rng.integers(0, 256, size=(40, 40)).astype(np.uint8)).save(folder / f"n{i}.png")
        lines.append(f"{'test' if i == 3 else 'train'}: n{i}.png")
    path = folder / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def _synth(conf, out):
    return run(["--config", conf, "synth", "--radius", "12", "--circle-scale", "1", "--out", str(out)])


class TestPipeline:
    """synth -> extract -> reconstruct"""

    def test_reconstruction_matches_reported_residual(self, conf, tmp_path):
        stim = tmp_path / "stim.npy"
        edges = tmp_path / "edges.json"
        prepared = tmp_path / "prepared.npy"
        rec = tmp_path / "rec.npy"
        assert _synth(conf, stim) == 0
        assert run(["--config", conf, "extract", "--in", str(stim), "--edges", str(edges),
                    "--max-edges", "3000", "--prepared-out", str(prepared)]) == 0
        assert run(["--config", conf, "reconstruct", "--edges", str(edges), "--out", str(rec)]) == 0

        prep = np.load(prepared)
        err = float(np.sum((prep - np.load(rec)) ** 2) / np.sum(prep ** 2))
        meta = json.loads((tmp_path / "edges.json.meta.json").read_text())
        assert err == pytest.approx(meta["residual"], abs=1e-9)
        assert err <= 0.03 + 1e-6
        assert meta["subcommand"] == "extract"

    def test_reconstruct_rejects_out_of_range_edge(self, conf, tmp_path):
        stim = tmp_path / "stim.npy"
        edges = tmp_path / "edges.json"
        assert _synth(conf, stim) == 0
        assert run(["--config", conf, "extract", "--in", str(stim), "--edges", str(edges), "--max-edges", "5"]) == 0
        data = json.loads(edges.read_text())
        data["edges"][0]["x"] = 999
        edges.write_text(json.dumps(data))
        assert run(["--config", conf, "reconstruct", "--edges", str(edges), "--out", str(tmp_path / "rec.npy")]) == 1

    def test_synth_is_deterministic(self, conf, tmp_path):
        assert _synth(conf, tmp_path / "a.npy") == 0
        assert _synth(conf, tmp_path / "b.npy") == 0
        assert np.array_equal(np.load(tmp_path / "a.npy"), np.load(tmp_path / "b.npy"))
        meta_a = json.loads((tmp_path / "a.npy.meta.json").read_text())
        meta_b = json.loads((tmp_path / "b.npy.meta.json").read_text())
        assert meta_a == meta_b

    def test_envelope_mosaic(self, conf, tmp_path):
        assert run(["--config", conf, "synth", "--radius", "12", "--out", str(tmp_path / "s.png"),
                    "--envelopes", str(tmp_path / "env.png")]) == 0
        assert (tmp_path / "env.png").exists()
        assert (tmp_path / "env.png.meta.json").exists()


class TestStatistics:
    """stats -> equalize -> extract with the new orientations or the chevron prior"""

    def test_stats_equalize_and_guided_extraction(self, conf, tmp_path):
        stim = tmp_path / "stim.npy"
        folder = tmp_path / "edges"
        assert _synth(conf, stim) == 0
        assert run(["--config", conf, "extract", "--in", str(stim), "--edges", str(folder / "stim.json"),
                    "--max-edges", "200"]) == 0
        hist, chevron, thetas = tmp_path / "hist.json", tmp_path / "chevron.json", tmp_path / "thetas.json"
        assert run(["--config", conf, "stats", "--edges-dir", str(folder), "--orientation", str(hist),
                    "--chevron", str(chevron)]) == 0
        assert run(["--config", conf, "equalize", "--hist", str(hist), "--n", "8", "--out", str(thetas)]) == 0
        assert len(json.loads(thetas.read_text())["thetas"]) == 8

        assert run(["--config", conf, "extract", "--in", str(stim), "--edges", str(tmp_path / "eq.json"),
                    "--max-edges", "50", "--thetas", str(thetas)]) == 0
        assert run(["--config", conf, "extract", "--in", str(stim), "--edges", str(tmp_path / "guided.json"),
                    "--max-edges", "50", "--prior", str(chevron), "--eta", "0.2"]) == 0
        guided = json.loads((tmp_path / "guided.json.meta.json").read_text())
        assert str(chevron) in guided["inputs"]

    def test_stats_needs_an_output(self, conf, tmp_path):
        folder = tmp_path / "edges"
        folder.mkdir()
        assert run(["--config", conf, "stats", "--edges-dir", str(folder)]) == 1


class TestCorpusCommands:
    def test_learn_with_report(self, manifest, tmp_path):
        cfg = RunConfig().with_overrides({
            "image_size": 32, "workers": 1,
            "shl.patch_side": 4, "shl.n_atoms": 8, "shl.l0_target": 2, "shl.n_steps": 10, "shl.batch_size": 4,
        })
        conf = tmp_path / "learn.conf"
        save_config(conf, cfg)
        out = tmp_path / "dict.npz"
        assert run(["--config", str(conf), "learn", "--corpus", manifest, "--out", str(out),
                    "--log", str(tmp_path / "log.csv"), "--report", str(tmp_path / "report.csv"),
                    "--report-patches", "20"]) == 0
        assert out.exists()
        assert (tmp_path / "report.csv").read_text().startswith("N,learned_mean")

    def test_bench_efficiency(self, manifest, tmp_path):
        cfg = RunConfig().with_overrides({"image_size": 32, "workers": 1,
                                          "bank.n_scales": 2, "bank.n_orientations": 4})
        conf = tmp_path / "bench.conf"
        save_config(conf, cfg)
        out = tmp_path / "results"
        assert run(["--config", str(conf), "bench", "efficiency", "--corpus", manifest, "--out", str(out),
                    "--max-edges", "16"]) == 0
        assert (out / "efficiency.csv").exists()
        assert (out / "efficiency_summary.csv.meta.json").exists()

    def test_bench_without_corpus(self, conf, tmp_path, monkeypatch):
        monkeypatch.delenv("SPARSELETS_CORPUS", raising=False)
        assert run(["--config", conf, "bench", "efficiency", "--out", str(tmp_path / "r")]) == 1


class TestExitCodes:
    def test_usage_error(self):
        assert run(["extract"]) == 2
        assert run([]) == 2

    def test_missing_input(self, conf, tmp_path):
        assert run(["--config", conf, "extract", "--in", str(tmp_path / "none.png"),
                    "--edges", str(tmp_path / "e.json")]) == 1
        assert run(["--config", conf, "reconstruct", "--edges", str(tmp_path / "none.json"),
                    "--out", str(tmp_path / "r.npy")]) == 1

    def test_bad_config(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("bank.colour = red\n")
        assert run(["--config", str(path), "synth", "--out", str(tmp_path / "s.npy")]) == 1
