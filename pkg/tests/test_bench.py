"""Tests for bench.py: code-length accounting and the corpus experiments on tiny corpora."""

import csv
import math

import numpy as np
import pytest

from engine.bench import (
    EFFICIENCY_HEADER,
    SWEEP_HEADER,
    EnergyBookkeepingError,
    SweepSpec,
    _checked_curve,
    aggregate,
    bits_per_pixel,
    code_length_at,
    efficiency_experiment,
    n_grid,
    noise_robustness,
    orientation_experiment,
    orientation_usage,
    parameter_sweep,
    size_experiment,
    write_csv,
)
from engine.imagecore import EmptyCorpusError, prepare_image
from engine.loggabor import render_atoms
from engine.pursuit import EdgeList, PursuitParams, extract
from tests.conftest import SMALL_PARAMS


def _atoms_image(bank, rng, count=8):
    n = bank.image_size
    items = [((int(rng.integers(bank.n_scales)), int(rng.integers(bank.n_orientations)),
               int(rng.integers(n)), int(rng.integers(n))), complex(*rng.standard_normal(2)))
             for _ in range(count)]
    return render_atoms(bank, items)


class TestCodeLength:
    def test_n_grid(self):
        assert n_grid(0) == [0]
        assert n_grid(8) == [0, 1, 2, 4, 8]
        assert n_grid(5) == [0, 1, 2, 4, 5]

    def test_bits_per_pixel(self):
        assert bits_per_pixel(10, 1024, 64) == pytest.approx(10 * 10 / 64)

    def test_interpolation_in_log_n(self):
        curve = [1.0, 0.5, 0.25, 0.1]
        log2_m = 12.0
        assert code_length_at(curve, 0.25, log2_m) == pytest.approx(2 * log2_m)
        assert code_length_at(curve, 0.2, log2_m) == pytest.approx(2 * 1.5 ** (1 / 3) * log2_m)
        assert code_length_at(curve, 0.75, log2_m) == pytest.approx(0.5 * log2_m)
        assert code_length_at(curve, 1.0, log2_m) == 0.0
        assert math.isnan(code_length_at(curve, 0.05, log2_m))

    def test_bookkeeping_mismatch_is_reported(self):
        edges = EdgeList(edges=[], image_size=16, bank_params=SMALL_PARAMS, initial_energy=1.0, alpha=1.0,
                         step_moduli=[1.0], measured_energies=[1.0, 0.5])
        with pytest.raises(EnergyBookkeepingError):
            _checked_curve(edges)


class TestEfficiency:
    def test_records_per_image_and_grid(self, bank16, rng):
        corpus = [(f"im{i}", prepare_image(rng.standard_normal((16, 16)))) for i in range(3)]
        records = efficiency_experiment(corpus, bank16, PursuitParams(max_edges=16))
        assert len(records) == 3 * len(n_grid(16))
        assert all(r.E_N == 1.0 for r in records if r.N == 0)
        by_image = [r.E_N for r in records if r.image_id == "im0"]
        assert by_image == sorted(by_image, reverse=True)
        assert records[1].bits_per_pixel == pytest.approx(math.log2(bank16.n_coefficients) / 256)

    def test_aggregate_ignores_order(self, bank16, rng):
        corpus = [(f"im{i}", prepare_image(rng.standard_normal((16, 16)))) for i in range(3)]
        records = efficiency_experiment(corpus, bank16, PursuitParams(max_edges=8))
        rows = aggregate(records)
        assert aggregate(list(reversed(records))) == rows
        assert [r["N"] for r in rows] == n_grid(8)

    def test_empty_corpus(self, bank16):
        with pytest.raises(EmptyCorpusError):
            efficiency_experiment([], bank16)


class TestSweep:
    def test_baseline_gain_is_one_and_bad_values_are_kept(self, bank32, rng):
        corpus = [(f"im{i}", _atoms_image(bank32, rng)) for i in range(2)]
        spec = SweepSpec("n_scales", (1, 2, 9), target_extraction=0.5, baseline=SMALL_PARAMS)
        rows = parameter_sweep(corpus, spec, PursuitParams(max_edges=500))
        assert [r["value"] for r in rows] == [1, 2, 9]
        assert rows[1]["gain_mean"] == 1.0
        assert rows[1]["gain_std"] == 0.0
        assert math.isnan(rows[2]["gain_mean"])
        assert "n_scales" in rows[2]["error"]

    def test_unknown_variable(self):
        with pytest.raises(ValueError):
            SweepSpec("alpha", (0.5,))


class TestNoiseAndSize:
    def test_noise_free_comparison_is_identical(self, bank32, rng):
        raw = [(f"im{i}", rng.standard_normal((32, 32))) for i in range(2)]
        result = noise_robustness(raw, bank32, PursuitParams(max_edges=64), snr_halving=False,
                                  energy_target=0.9)
        assert len(result.clean) == 2 * len(n_grid(64))
        assert result.clean_bpp == result.noisy_bpp
        assert [r.E_N for r in result.clean] == [r.E_N for r in result.noisy]

    def test_sizes(self, rng):
        raw = [(f"im{i}", rng.standard_normal((64, 64))) for i in range(2)]
        rows = size_experiment(raw, (32, 64), SMALL_PARAMS, PursuitParams(max_edges=400), energy_target=0.8)
        assert [r["size"] for r in rows] == [32, 64]
        assert all(r["bpp_mean"] > 0 for r in rows)


class TestOrientation:
    def test_usage_sums_to_one(self, bank32, rng):
        edges = extract(rng.standard_normal((32, 32)), bank32, PursuitParams(max_edges=40))
        usage = orientation_usage([edges], 4)
        assert usage.sum() == pytest.approx(1.0)

    def test_equalized_bank_report(self, rng):
        corpus = [(f"im{i}", prepare_image(rng.standard_normal((32, 32)))) for i in range(2)]
        result = orientation_experiment(corpus, SMALL_PARAMS, PursuitParams(max_edges=50))
        assert len(result["thetas"]) == 4
        assert all(-math.pi / 2 < t <= math.pi / 2 for t in result["thetas"])
        assert result["matched_steps"] <= 50
        assert 0 <= result["baseline_deviation"] <= 1


class TestCsv:
    def test_records_and_dict_rows(self, tmp_path, bank16, rng):
        corpus = [("im0", prepare_image(rng.standard_normal((16, 16))))]
        records = efficiency_experiment(corpus, bank16, PursuitParams(max_edges=4))
        write_csv(tmp_path / "eff.csv", records, EFFICIENCY_HEADER)
        with open(tmp_path / "eff.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows[0] == {"image_id": "im0", "N": "0", "E_N": "1.0", "bpp": "0.0"}
        write_csv(tmp_path / "sweep.csv", [{"param": "B_f", "value": 0.4, "gain_mean": 1.0,
                                            "gain_std": 0.0, "error": ""}], SWEEP_HEADER)
        with open(tmp_path / "sweep.csv", newline="") as f:
            assert next(csv.reader(f)) == SWEEP_HEADER
