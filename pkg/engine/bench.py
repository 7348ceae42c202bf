"""Corpus experiments: coding efficiency, parameter sweeps, noise, image size,
and orientation equalization.

Code length is counted in address bits only: N edges cost N * log2(M) bits
where M is the bank's coefficient count, reported per pixel.

Input: corpus of (image_id, Image) pairs, prepared or raw as each function states
Output: plot-ready rows, written with write_csv
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from engine.imagecore import (
    EmptyCorpusError,
    WhiteningParams,
    add_noise,
    central_crop,
    prepare_image,
)
from engine.loggabor import BankParams, BankParamsError, LogGaborBank, build_bank
from engine.pursuit import PursuitParams, energy_curve, extract, measured_curve

logger = logging.getLogger(__name__)

SWEEP_VARIABLES = ("B_f", "B_theta", "n_orientations", "n_scales", "scale_ratio")
EFFICIENCY_HEADER = ["image_id", "N", "E_N", "bpp"]
SWEEP_HEADER = ["param", "value", "gain_mean", "gain_std"]
SIZE_HEADER = ["size", "bpp_mean", "bpp_std"]
# max tolerated gap between the energy formula and the measured residual
IDENTITY_TOLERANCE = 1e-6


class EnergyBookkeepingError(RuntimeError):
    """Raised when the energy formula disagrees with the measured residuals."""
    pass


@dataclass(frozen=True)
class EfficiencyRecord:
    image_id: str
    N: int
    E_N: float
    bits_per_pixel: float

    def as_row(self) -> dict:
        return {"image_id": self.image_id, "N": self.N, "E_N": self.E_N, "bpp": self.bits_per_pixel}


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    target_extraction: float = 0.85
    baseline: BankParams = field(default_factory=BankParams)

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r} (expected one of {SWEEP_VARIABLES})")
        if len(self.values) == 0:
            raise ValueError("sweep values must be nonempty")
        if not 0 < self.target_extraction < 1:
            raise ValueError(f"target_extraction must lie in (0, 1), got {self.target_extraction}")
        object.__setattr__(self, "values", tuple(self.values))


@dataclass
class NoiseComparison:
    clean: list
    noisy: list
    clean_bpp: float
    noisy_bpp: float


# ---------------------------------------------------------------------------
# Code length
# ---------------------------------------------------------------------------

def n_grid(max_edges: int) -> list:
    """0 and the powers of two up to max_edges (max_edges itself included)."""
    grid = [0]
    n = 1
    while n <= max_edges:
        grid.append(n)
        n *= 2
    if max_edges > 0 and grid[-1] != max_edges:
        grid.append(max_edges)
    return grid


def bits_per_pixel(n_edges: float, n_coefficients: int, n_pixels: int) -> float:
    return n_edges * math.log2(n_coefficients) / n_pixels


def code_length_at(curve, energy_target: float, log2_M: float) -> float:
    """Bits needed to bring the residual fraction down to energy_target.

    The crossing N is interpolated linearly in log N between consecutive
    steps; NaN when the curve never reaches the target.
    """
    curve = np.asarray(curve, dtype=np.float64)
    below = np.flatnonzero(curve <= energy_target)
    if below.size == 0:
        return float("nan")
    k = int(below[0])
    if k == 0:
        return 0.0
    e_hi, e_lo = curve[k - 1], curve[k]
    frac = (e_hi - energy_target) / (e_hi - e_lo) if e_hi > e_lo else 1.0
    if k == 1:
        n_star = frac
    else:
        n_star = math.exp(math.log(k - 1) + frac * (math.log(k) - math.log(k - 1)))
    return n_star * log2_M


def _checked_curve(edges) -> np.ndarray:
    curve = energy_curve(edges)
    measured = measured_curve(edges)
    gap = float(np.max(np.abs(curve - measured))) if curve.size else 0.0
    if gap > IDENTITY_TOLERANCE:
        raise EnergyBookkeepingError(f"energy formula deviates from measured residual by {gap:.3e}")
    return curve


def extract_curves(corpus, bank: LogGaborBank, pparams: PursuitParams) -> list:
    """(image_id, E_N curve) per image; each curve is checked against the measured residuals."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("empty corpus")
    t0 = time.perf_counter()
    curves = [(image_id, _checked_curve(extract(img, bank, pparams))) for image_id, img in corpus]
    logger.info("Extracted %d images at %dx%d in %.1fs", len(corpus), bank.image_size, bank.image_size,
                time.perf_counter() - t0)
    return curves


def _curve_value(curve: np.ndarray, n: int) -> float:
    # a run that stopped early keeps its last residual
    return float(curve[min(n, len(curve) - 1)])


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def efficiency_experiment(corpus, bank: LogGaborBank, pparams: PursuitParams = PursuitParams(),
                          grid=None) -> list:
    """E_N and bits/pixel on an N grid for every prepared image of the corpus."""
    grid = n_grid(pparams.max_edges) if grid is None else list(grid)
    n_pixels = bank.image_size ** 2
    records = []
    for image_id, curve in extract_curves(corpus, bank, pparams):
        for n in grid:
            records.append(EfficiencyRecord(image_id, n, _curve_value(curve, n),
                                            bits_per_pixel(n, bank.n_coefficients, n_pixels)))
    return records


def aggregate(records) -> list:
    """Mean and std of E_N per N, independent of corpus order."""
    by_n = {}
    for r in records:
        by_n.setdefault(r.N, []).append((r.image_id, r.E_N, r.bits_per_pixel))
    rows = []
    for n in sorted(by_n):
        values = sorted(by_n[n])
        e = np.array([v[1] for v in values])
        rows.append({"N": n, "E_mean": float(e.mean()), "E_std": float(e.std()), "bpp": values[0][2]})
    return rows


def mean_bits_per_pixel(curves, bank: LogGaborBank, energy_target: float) -> tuple:
    """Mean and std over images of bits/pixel needed to reach energy_target."""
    log2_m = math.log2(bank.n_coefficients)
    bpp = np.array([code_length_at(c, energy_target, log2_m) for _, c in curves]) / bank.image_size ** 2
    return float(np.nanmean(bpp)), float(np.nanstd(bpp))


def parameter_sweep(corpus, spec: SweepSpec, pparams: PursuitParams = PursuitParams()) -> list:
    """Code length to reach the target extraction, relative to the baseline bank, per grid value.

    corpus holds prepared images. Values whose bank cannot be built are
    reported with NaN gains and the error message.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("empty corpus")
    n = corpus[0][1].shape[0]
    target = 1.0 - spec.target_extraction
    run = replace(pparams, energy_threshold=target)

    def _bits(params: BankParams) -> np.ndarray:
        bank = build_bank(params, n)
        log2_m = math.log2(bank.n_coefficients)
        return np.array([code_length_at(c, target, log2_m) for _, c in extract_curves(corpus, bank, run)])

    baseline_bits = _bits(spec.baseline)
    baseline_value = getattr(spec.baseline, spec.variable)
    rows = []
    for value in spec.values:
        row = {"param": spec.variable, "value": value, "gain_mean": float("nan"),
               "gain_std": float("nan"), "error": ""}
        try:
            if value == baseline_value:
                bits = baseline_bits
            else:
                changes = {spec.variable: value}
                if spec.variable == "n_orientations":
                    changes["thetas"] = None
                bits = _bits(replace(spec.baseline, **changes))
        except BankParamsError as e:
            logger.error("Sweep %s=%s failed: %s", spec.variable, value, e)
            row["error"] = str(e)
            rows.append(row)
            continue
        gains = bits / baseline_bits
        row["gain_mean"] = float(np.nanmean(gains))
        row["gain_std"] = float(np.nanstd(gains))
        logger.info("Sweep %s=%s: gain %.3f +- %.3f", spec.variable, value, row["gain_mean"], row["gain_std"])
        rows.append(row)
    return rows


def noise_robustness(raw_corpus, bank: LogGaborBank, pparams: PursuitParams = PursuitParams(),
                     snr_halving: bool = True, whitening: WhiteningParams = WhiteningParams(),
                     seed: int = 0, energy_target: float = 0.15) -> NoiseComparison:
    """Efficiency on clean images vs the same images with noise of equal variance added before whitening."""
    raw_corpus = list(raw_corpus)
    rng = np.random.default_rng(seed)
    clean = [(i, prepare_image(img, whitening)) for i, img in raw_corpus]
    noisy = [(i, prepare_image(add_noise(img, rng, snr_halving), whitening)) for i, img in raw_corpus]
    grid = n_grid(pparams.max_edges)
    n_pixels = bank.image_size ** 2
    tables = []
    summaries = []
    for corpus in (clean, noisy):
        curves = extract_curves(corpus, bank, pparams)
        tables.append([EfficiencyRecord(i, n, _curve_value(c, n), bits_per_pixel(n, bank.n_coefficients, n_pixels))
                       for i, c in curves for n in grid])
        summaries.append(mean_bits_per_pixel(curves, bank, energy_target)[0])
    logger.info("Noise: %.4f bpp clean vs %.4f bpp noisy at E=%.2f", summaries[0], summaries[1], energy_target)
    return NoiseComparison(tables[0], tables[1], summaries[0], summaries[1])


def size_experiment(raw_corpus, sizes, bank_params: BankParams = BankParams(),
                    pparams: PursuitParams = PursuitParams(), whitening: WhiteningParams = WhiteningParams(),
                    energy_target: float = 0.03) -> list:
    """Bits/pixel to reach energy_target on central crops of each size."""
    raw_corpus = list(raw_corpus)
    rows = []
    run = replace(pparams, energy_threshold=energy_target)
    for size in sizes:
        bank = build_bank(bank_params.fitted(size), size)
        corpus = []
        for image_id, img in raw_corpus:
            crop = central_crop(img, size).copy()
            crop -= crop.mean()
            corpus.append((image_id, prepare_image(crop, whitening)))
        mean, std = mean_bits_per_pixel(extract_curves(corpus, bank, run), bank, energy_target)
        logger.info("Size %d: %.4f +- %.4f bpp at E=%.2f", size, mean, std, energy_target)
        rows.append({"size": size, "bpp_mean": mean, "bpp_std": std})
    return rows


def orientation_usage(edge_lists, n_orientations: int) -> np.ndarray:
    """Modulus-weighted share of each bank orientation among extracted edges."""
    usage = np.zeros(n_orientations)
    for el in edge_lists:
        for e in el.edges:
            usage[e.orientation] += e.modulus
    total = usage.sum()
    return usage / total if total > 0 else usage


def orientation_experiment(corpus, bank_params: BankParams = BankParams(),
                           pparams: PursuitParams = PursuitParams()) -> dict:
    """Baseline bank vs a bank rebuilt on equalized orientations, on prepared images.

    Reports the max deviation from uniform of each bank's orientation usage
    and the mean residual at matched edge counts.
    """
    from engine.priors import equalize_orientations, orientation_stats

    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("empty corpus")
    n = corpus[0][1].shape[0]
    k = bank_params.n_orientations
    base_bank = build_bank(bank_params, n)
    base = [extract(img, base_bank, pparams) for _, img in corpus]
    hist = orientation_stats(base, n_bins=k)
    thetas = equalize_orientations(hist, k)
    eq_bank = build_bank(replace(bank_params, thetas=tuple(float(t) for t in thetas)), n)
    eq = [extract(img, eq_bank, pparams) for _, img in corpus]

    steps = min(min(e.n_steps for e in base), min(e.n_steps for e in eq))
    base_res = float(np.mean([measured_curve(e)[steps] for e in base]))
    eq_res = float(np.mean([measured_curve(e)[steps] for e in eq]))
    result = {
        "baseline_deviation": float(np.max(np.abs(orientation_usage(base, k) - 1.0 / k))),
        "equalized_deviation": float(np.max(np.abs(orientation_usage(eq, k) - 1.0 / k))),
        "baseline_residual": base_res,
        "equalized_residual": eq_res,
        "residual_change": (eq_res - base_res) / base_res if base_res > 0 else 0.0,
        "matched_steps": steps,
        "thetas": [float(t) for t in thetas],
        "histogram": hist,
    }
    logger.info("Orientation usage deviation %.4f -> %.4f, residual change %+.2f%%",
                result["baseline_deviation"], result["equalized_deviation"], 100 * result["residual_change"])
    return result


def write_csv(path, rows, header) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_row() if hasattr(row, "as_row") else row)
