"""Tests for priors.py: orientation histograms, the chevron map and prior-guided pursuit."""

import json
import math

import numpy as np
import pytest

from engine.imagecore import EmptyCorpusError
from engine.loggabor import BankParams, build_bank, default_orientations
from engine.priors import (
    BinningMismatchError,
    ChevronBinning,
    ChevronFileError,
    ChevronHistogram,
    CoocParams,
    CoocPredictor,
    OrientationHistogram,
    angle_bin,
    angle_centers,
    bank_bin_edges,
    chevron_ratio_map,
    chevron_stats,
    edge_geometry,
    equalize_orientations,
    extract_with_prior,
    load_chevron,
    load_orientation_hist,
    load_thetas,
    max_uniform_deviation,
    orientation_stats,
    rim_precision,
    rotate_edges,
    save_chevron,
    save_orientation_hist,
    save_thetas,
)
from engine.pursuit import Edge, EdgeList, PursuitParams, extract

PARAMS_64 = BankParams(n_scales=3, n_orientations=24)


def _edge_list(specs, size=64, params=PARAMS_64):
    """specs: (x, y, theta, coeff[, scale]) tuples."""
    edges = []
    for step, spec in enumerate(specs):
        x, y, theta, coeff = spec[:4]
        scale = spec[4] if len(spec) > 4 else 0
        edges.append(Edge(x=x, y=y, scale=scale, orientation=0, theta=theta, coeff=complex(coeff), step=step))
    return EdgeList(edges=edges, image_size=size, bank_params=params, initial_energy=1.0, alpha=0.8)


def _random_edges(rng, n, size=64):
    specs = [(int(rng.integers(size)), int(rng.integers(size)), float(rng.uniform(-math.pi / 2, math.pi / 2)),
              float(rng.uniform(0.5, 2.0))) for _ in range(n)]
    return _edge_list(specs, size)


def _mirror_index(n):
    """Bin of -angle for each bin k."""
    return np.mod(n - 2 - np.arange(n), n)


@pytest.fixture(scope="module")
def bank24():
    return build_bank(PARAMS_64, 64, workers=1)


class TestAngleBins:
    def test_centers_map_to_own_bin(self):
        assert angle_bin(angle_centers(24), 24).tolist() == list(range(24))

    def test_vertical_wraps(self):
        assert angle_bin(math.pi / 2, 8) == 7
        assert angle_bin(-math.pi / 2, 8) == 7

    def test_mirror_index(self):
        centers = angle_centers(12)
        assert angle_bin(-centers, 12).tolist() == _mirror_index(12).tolist()


class TestOrientationHistogram:
    """First-order statistics and equalization."""

    def test_modulus_and_count_weighting(self):
        edges = _edge_list([(1, 1, 0.0, 3.0), (2, 2, math.pi / 4, 1.0)])
        by_mass = orientation_stats([edges], n_bins=4)
        assert by_mass.weights.tolist() == [0.0, 0.75, 0.25, 0.0]
        by_count = orientation_stats([edges], n_bins=4, weighting="counts")
        assert by_count.weights.tolist() == [0.0, 0.5, 0.5, 0.0]
        assert by_count.n_edges == 2

    def test_vertical_edges_share_a_bin(self):
        hist = OrientationHistogram(bank_bin_edges(4), np.ones(4))
        assert hist.bin_of(math.pi / 2) == 3
        assert hist.bin_of(-math.pi / 2) == 3

    def test_uniform_equalization_is_default_bank(self):
        hist = OrientationHistogram(bank_bin_edges(24), np.ones(24))
        # compare on the circle: the last orientation may land on either side of pi/2
        shift = math.pi / 48
        got = np.sort(np.mod(equalize_orientations(hist, 24) + shift, math.pi))
        assert np.allclose(got, np.sort(np.mod(default_orientations(24) + shift, math.pi)))
        assert max_uniform_deviation(hist) == pytest.approx(0.0)

    def test_skewed_equalization(self):
        hist = OrientationHistogram([-math.pi / 2, 0.0, math.pi / 2], [0.75, 0.25])
        thetas = equalize_orientations(hist, 4)
        expected = [-5 * math.pi / 12, -math.pi / 4, -math.pi / 12, math.pi / 4]
        assert np.allclose(thetas, expected)

    def test_random_orientations_are_flat(self, rng):
        edges = _edge_list([(0, 0, float(t), 1.0) for t in rng.uniform(-math.pi / 2, math.pi / 2, 24000)])
        hist = orientation_stats([edges], n_bins=24, weighting="counts")
        p = 1 / 24
        sigma = math.sqrt(p * (1 - p) / 24000)
        assert max_uniform_deviation(hist) <= 4 * sigma

    def test_empty_input(self):
        with pytest.raises(EmptyCorpusError):
            orientation_stats([_edge_list([])])

    def test_invalid_bins(self):
        with pytest.raises(BinningMismatchError):
            OrientationHistogram([0.0, 1.0], [1.0])


class TestEdgeGeometry:
    def test_collinear(self):
        a = Edge(x=0, y=0, scale=0, orientation=0, theta=0.0, coeff=1, step=0)
        b = Edge(x=4, y=0, scale=0, orientation=0, theta=0.0, coeff=1, step=1)
        psi, theta, d, log_sigma = edge_geometry(a, b, 2.0)
        assert (psi, theta, d, log_sigma) == pytest.approx((0.0, 0.0, 2.0, 0.0))

    def test_cocircular_pair_has_zero_psi(self):
        r, beta = 10.0, math.pi / 3
        a = Edge(x=0, y=0, scale=0, orientation=0, theta=0.0, coeff=1, step=0)
        b = Edge(x=r * math.sin(beta), y=r - r * math.cos(beta), scale=0, orientation=0, theta=beta, coeff=1, step=1)
        psi, theta, _, _ = edge_geometry(a, b, 1.0)
        assert psi == pytest.approx(0.0, abs=1e-12)
        assert theta == pytest.approx(beta)

    def test_swap_negates_theta_keeps_psi(self):
        a = Edge(x=3, y=4, scale=0, orientation=0, theta=0.3, coeff=1, step=0)
        b = Edge(x=10, y=1, scale=1, orientation=0, theta=-0.9, coeff=1, step=1)
        psi_ab, theta_ab, _, sigma_ab = edge_geometry(a, b, 2.0, 4.0)
        psi_ba, theta_ba, _, sigma_ba = edge_geometry(b, a, 4.0, 2.0)
        assert theta_ba == pytest.approx(-theta_ab)
        assert math.cos(2 * (psi_ab - psi_ba)) == pytest.approx(1.0)
        assert (sigma_ab, sigma_ba) == pytest.approx((1.0, -1.0))

    def test_distance_uses_both_wavelengths(self):
        a = Edge(x=0, y=0, scale=0, orientation=0, theta=0.0, coeff=1, step=0)
        b = Edge(x=8, y=0, scale=2, orientation=0, theta=0.0, coeff=1, step=1)
        _, _, d_ab, _ = edge_geometry(a, b, 2.0, 8.0)
        _, _, d_ba, _ = edge_geometry(b, a, 8.0, 2.0)
        assert d_ab == d_ba == pytest.approx(2.0)


class TestChevron:
    """Second-order statistics."""

    def test_ordered_pairs_and_zero_distance(self):
        binning = ChevronBinning()
        close = _edge_list([(10, 10, 0.0, 1.0), (11, 10, 0.2, 1.0)])
        assert chevron_stats([close], binning).n_pairs == 2
        stacked = _edge_list([(10, 10, 0.0, 1.0), (10, 10, 0.2, 1.0)])
        assert chevron_stats([stacked], binning).n_pairs == 0

    def test_map_is_mirror_symmetric_in_theta(self, rng):
        hist = chevron_stats([_random_edges(rng, 120) for _ in range(3)], ChevronBinning(), workers=2)
        assert hist.n_pairs > 0
        counts = hist.counts.sum(axis=(2, 3))
        assert np.allclose(counts, counts[:, _mirror_index(24)])

    def test_mixed_scales_count_both_orders(self, rng):
        specs = [(int(rng.integers(64)), int(rng.integers(64)), float(rng.uniform(-math.pi / 2, math.pi / 2)),
                  float(rng.uniform(0.5, 2.0)), int(rng.integers(3))) for _ in range(120)]
        hist = chevron_stats([_edge_list(specs)], ChevronBinning())
        assert hist.n_pairs > 0
        assert hist.n_pairs % 2 == 0
        counts = hist.counts.sum(axis=(2, 3))
        assert np.allclose(counts, counts[:, _mirror_index(24)])
        for i in range(0, 119, 7):
            pair = chevron_stats([_edge_list([specs[i], specs[i + 1]])], ChevronBinning())
            assert pair.n_pairs in (0, 2)

    def test_rotation_invariance(self, rng):
        edges = _random_edges(rng, 80)
        base = chevron_stats([edges]).counts
        turned = chevron_stats([rotate_edges(edges, 0.7)]).counts
        assert np.allclose(base, turned)

    def test_weightings(self):
        edges = _edge_list([(10, 10, 0.0, 2.0), (11, 10, 0.2, 3.0)])
        assert chevron_stats([edges]).counts.sum() == pytest.approx(12.0)
        assert chevron_stats([edges], ChevronBinning(weighting="counts")).counts.sum() == pytest.approx(2.0)

    def test_ratio_of_uniform_counts(self):
        binning = ChevronBinning(n_psi=6, n_theta=6)
        hist = ChevronHistogram(binning, np.ones(binning.shape), 10)
        assert np.allclose(hist.ratio, 1.0)
        assert np.allclose(chevron_ratio_map(hist), 1.0)

    def test_merge_requires_same_binning(self):
        a = ChevronHistogram(ChevronBinning(n_psi=6), np.zeros(ChevronBinning(n_psi=6).shape))
        b = ChevronHistogram(ChevronBinning(), np.zeros(ChevronBinning().shape))
        with pytest.raises(BinningMismatchError):
            a.merge(b)

    def test_invalid_distance_edges(self):
        with pytest.raises(ValueError):
            ChevronBinning(d_edges=(0.5, 1.0))


class TestFiles:
    def test_chevron_round_trip(self, rng, tmp_path):
        hist = chevron_stats([_random_edges(rng, 60)])
        path = tmp_path / "chevron.json"
        save_chevron(path, hist)
        back = load_chevron(path)
        assert back.binning == hist.binning
        assert back.n_pairs == hist.n_pairs
        assert np.array_equal(back.counts, hist.counts)

    def test_orientation_and_thetas(self, tmp_path):
        hist = OrientationHistogram([-math.pi / 2, 0.0, math.pi / 2], [3.0, 1.0], "counts", 4)
        save_orientation_hist(tmp_path / "hist.json", hist)
        back = load_orientation_hist(tmp_path / "hist.json")
        assert back.weights.tolist() == [0.75, 0.25]
        save_thetas(tmp_path / "thetas.json", [0.1, -0.4])
        assert load_thetas(tmp_path / "thetas.json") == (0.1, -0.4)

    def test_bad_files(self, tmp_path):
        path = tmp_path / "v2.json"
        path.write_text(json.dumps({"version": 2}))
        with pytest.raises(ChevronFileError):
            load_chevron(path)
        with pytest.raises(ChevronFileError):
            load_thetas(tmp_path / "missing.json")


class TestCoocPredictor:
    """Bias from a prior that favours collinear continuations."""

    @pytest.fixture
    def prior(self):
        binning = ChevronBinning()
        counts = np.ones(binning.shape)
        counts[11, 11, :, :] = 50.0
        return ChevronHistogram(binning, counts, 1000)

    def _vertical_edge(self, coeff=1.0):
        # theta = pi/2 is orientation 23 of the default 24
        return Edge(x=20, y=30, scale=0, orientation=23, theta=math.pi / 2, coeff=complex(coeff), step=0)

    def test_collinear_candidate_is_favoured(self, bank24, prior):
        predictor = CoocPredictor(bank24, prior, CoocParams())
        predictor.accept(self._vertical_edge(), 0j)
        # five pixels further along the edge
        aligned = predictor.bias[23, 35, 20]
        crossing = predictor.bias[11, 35, 20]
        assert aligned == pytest.approx(0.15 * predictor.log_ratio[11, 11, 2])
        assert aligned > 0 > crossing
        assert predictor.bias[23, 30, 20] == 0.0

    def test_splat_scales_with_modulus_change(self, bank24, prior):
        once = CoocPredictor(bank24, prior, CoocParams())
        once.accept(self._vertical_edge(3.0), 1.0 + 0j)
        twice = CoocPredictor(bank24, prior, CoocParams())
        twice.accept(self._vertical_edge(2.0), 0j)
        assert np.allclose(once.bias, twice.bias)

    def test_select_prefers_prior_over_small_margin(self, bank24, prior):
        predictor = CoocPredictor(bank24, prior, CoocParams())
        predictor.accept(self._vertical_edge(), 0j)

        class _State:
            stack = np.zeros(bank24.dims, dtype=complex)

        _State.stack[0, 11, 35, 20] = 10.01
        _State.stack[0, 23, 35, 20] = 10.0j
        assert predictor.select(_State) == (0, 23, 20, 35)

    def test_radius_must_fit_prior(self, bank24, prior):
        with pytest.raises(BinningMismatchError):
            CoocPredictor(bank24, prior, CoocParams(neighborhood_radius=5.0))


class TestExtractWithPrior:
    def test_zero_eta_is_plain_pursuit(self, bank24, rng):
        img = rng.standard_normal((64, 64))
        prior = ChevronHistogram(ChevronBinning(), np.ones(ChevronBinning().shape))
        params = PursuitParams(max_edges=30)
        plain = extract(img, bank24, params)
        guided = extract_with_prior(img, bank24, prior, params, CoocParams(eta=0.0))
        assert [e.address for e in guided] == [e.address for e in plain]

    def test_guided_energy_still_decreases(self, bank24, rng):
        img = rng.standard_normal((64, 64))
        prior = ChevronHistogram(ChevronBinning(), rng.uniform(0.5, 2.0, ChevronBinning().shape))
        edges = extract_with_prior(img, bank24, prior, PursuitParams(max_edges=40), CoocParams(eta=0.5))
        assert edges.n_steps == 40
        assert np.all(np.diff(edges.measured_energies) <= 1e-9)
        drop = edges.alpha * (2 - edges.alpha)
        for k, modulus in enumerate(edges.step_moduli):
            expected = edges.measured_energies[k] - drop * modulus ** 2
            assert edges.measured_energies[k + 1] == pytest.approx(expected, rel=1e-8)


class TestRimPrecision:
    def test_counts_edges_near_the_circle(self):
        edges = _edge_list([(42, 32, 0.0, 1.0), (32, 12, 0.0, 1.0), (32, 32, 0.0, 1.0), (60, 60, 0.0, 1.0)])
        assert rim_precision(edges, 10.0) == pytest.approx(0.25)
        assert rim_precision(edges, 20.0, first=2) == pytest.approx(0.5)
        assert rim_precision(_edge_list([]), 10.0) == 0.0
