"""First- and second-order edge statistics and co-occurrence-guided pursuit.

First order: a histogram of edge orientations and its equalization, giving a
bank orientation set that is denser where edges are more frequent.

Second order: the chevron map, a histogram of edge pairs over
  theta = orientation of B relative to A
  phi   = azimuth of B seen from A, relative to A's orientation
  psi   = phi - theta / 2   (swap-invariant, zero for co-circular pairs)
  d     = distance AB in wavelengths of A
  sigma = log2 of the wavelength ratio B / A
All angles wrap on period pi into (-pi/2, pi/2].

extract_with_prior biases pursuit selection with the log ratio of the chevron
map against uniform, accumulated from the edges already extracted.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from engine.imagecore import EmptyCorpusError
from engine.loggabor import LogGaborBank, wrap_orientation
from engine.pursuit import (
    Edge,
    EdgeList,
    PursuitParams,
    extract,
    run_pursuit,
)

logger = logging.getLogger(__name__)

HIST_FILE_VERSION = 1
# angles are snapped before binning so relative angles bin identically under global rotation
ANGLE_DECIMALS = 9
WEIGHTINGS = ("modulus", "counts")


class BinningMismatchError(ValueError):
    """Raised when a prior's binning cannot serve the requested lookup."""
    pass


class ChevronFileError(Exception):
    """Raised for an unreadable or malformed histogram file."""
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


def _check_weighting(weighting: str) -> str:
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r} (expected one of {WEIGHTINGS})")
    return weighting


def _snap(values):
    return np.round(np.asarray(values, dtype=np.float64), ANGLE_DECIMALS)


def angle_bin(angle, n_bins: int):
    """Bin index for angles in (-pi/2, pi/2], bins centered on -pi/2 + (k+1) pi/n."""
    pos = np.round((_snap(wrap_orientation(angle)) + np.pi / 2) / (np.pi / n_bins)).astype(np.int64) - 1
    return np.mod(pos, n_bins)


def angle_centers(n_bins: int) -> np.ndarray:
    return -np.pi / 2 + (np.arange(n_bins) + 1) * np.pi / n_bins


# ---------------------------------------------------------------------------
# First order: orientation histogram
# ---------------------------------------------------------------------------

@dataclass
class OrientationHistogram:
    """Orientation mass over bins spanning one period pi from bin_edges[0]."""
    bin_edges: np.ndarray
    weights: np.ndarray
    weighting: str = "modulus"
    n_edges: int = 0

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.bin_edges) != len(self.weights) + 1:
            raise BinningMismatchError("bin_edges must have one more entry than weights")
        if not math.isclose(self.bin_edges[-1] - self.bin_edges[0], math.pi, abs_tol=1e-9):
            raise BinningMismatchError("bin_edges must span exactly one period pi")
        if np.any(np.diff(self.bin_edges) <= 0) or np.any(self.weights < 0):
            raise BinningMismatchError("bin_edges must increase and weights be non-negative")
        total = self.weights.sum()
        if total > 0:
            self.weights = self.weights / total

    @property
    def n_bins(self) -> int:
        return len(self.weights)

    @property
    def cdf(self) -> np.ndarray:
        """Cumulative mass at each bin edge (0 to 1)."""
        return np.concatenate([[0.0], np.cumsum(self.weights)])

    def bin_of(self, theta) -> np.ndarray:
        start = self.bin_edges[0]
        t = np.mod(_snap(theta) - start, np.pi) + start
        return np.clip(np.searchsorted(self.bin_edges, t, side="right") - 1, 0, self.n_bins - 1)

    def inverse_cdf(self, u) -> np.ndarray:
        """Piecewise-linear inverse of the cdf, on the unwrapped axis starting at bin_edges[0]."""
        u = np.asarray(u, dtype=np.float64)
        cum = self.cdf
        j = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, self.n_bins - 1)
        w = self.weights[j]
        frac = np.where(w > 0, (u - cum[j]) / np.where(w > 0, w, 1.0), 0.0)
        return self.bin_edges[j] + frac * (self.bin_edges[j + 1] - self.bin_edges[j])


def bank_bin_edges(n_bins: int) -> np.ndarray:
    """Edges of bins centered on the default bank orientations."""
    return -np.pi / 2 + (np.arange(n_bins + 1) + 0.5) * np.pi / n_bins


def orientation_stats(edge_lists, n_bins: int = 24, weighting: str = "modulus", bin_edges=None) -> OrientationHistogram:
    """Histogram of edge orientations over a corpus of EdgeLists."""
    _check_weighting(weighting)
    edges = [e for el in edge_lists for e in el.edges]
    if not edges:
        raise EmptyCorpusError("no edges to histogram")
    bin_edges = bank_bin_edges(n_bins) if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    hist = OrientationHistogram(bin_edges, np.zeros(len(bin_edges) - 1), weighting, len(edges))
    thetas = np.array([e.theta for e in edges])
    mass = np.array([e.modulus for e in edges]) if weighting == "modulus" else np.ones(len(edges))
    if mass.sum() == 0:
        raise EmptyCorpusError("edges carry no mass")
    hist.weights = np.bincount(hist.bin_of(thetas), weights=mass, minlength=hist.n_bins)
    hist.weights = hist.weights / hist.weights.sum()
    return hist


def equalize_orientations(hist: OrientationHistogram, n_orientations: int) -> np.ndarray:
    """theta_k = cdf^-1((k + 1/2) / n), wrapped into (-pi/2, pi/2] and sorted."""
    if n_orientations < 1:
        raise ValueError(f"n_orientations must be >= 1, got {n_orientations}")
    if not hist.weights.sum() > 0:
        raise ValueError("histogram has no mass")
    u = (np.arange(n_orientations) + 0.5) / n_orientations
    return np.sort(np.atleast_1d(wrap_orientation(hist.inverse_cdf(u))))


def max_uniform_deviation(hist: OrientationHistogram) -> float:
    return float(np.max(np.abs(hist.weights - 1.0 / hist.n_bins)))


# ---------------------------------------------------------------------------
# Second order: chevron map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChevronBinning:
    n_psi: int = 24
    n_theta: int = 24
    d_edges: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)
    # inner edges of log2 scale-ratio bins; the outer bins are open
    sigma_edges: tuple = (-1.5, -0.5, 0.5, 1.5)
    weighting: str = "modulus"

    def __post_init__(self):
        _check_weighting(self.weighting)
        if self.n_psi < 1 or self.n_theta < 1:
            raise ValueError("n_psi and n_theta must be >= 1")
        d = tuple(float(v) for v in self.d_edges)
        if len(d) < 2 or d[0] != 0.0 or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"d_edges must start at 0 and increase, got {self.d_edges}")
        object.__setattr__(self, "d_edges", d)
        object.__setattr__(self, "sigma_edges", tuple(float(v) for v in self.sigma_edges))

    @property
    def radius(self) -> float:
        return self.d_edges[-1]

    @property
    def shape(self) -> tuple:
        return (self.n_psi, self.n_theta, len(self.d_edges) - 1, len(self.sigma_edges) + 1)


@dataclass
class ChevronHistogram:
    binning: ChevronBinning
    counts: np.ndarray
    n_pairs: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != self.binning.shape:
            raise BinningMismatchError(f"counts shape {self.counts.shape} != binning {self.binning.shape}")

    @property
    def ratio(self) -> np.ndarray:
        """(psi, theta, d) mass over its uniform-in-angle expectation, per d bin."""
        marg = self.counts.sum(axis=3)
        per_d = marg.sum(axis=(0, 1))
        expected = per_d / (self.binning.n_psi * self.binning.n_theta)
        return np.where(expected > 0, marg / np.where(expected > 0, expected, 1.0), 1.0)

    def merge(self, other: "ChevronHistogram") -> "ChevronHistogram":
        if other.binning != self.binning:
            raise BinningMismatchError("cannot merge histograms with different binning")
        return ChevronHistogram(self.binning, self.counts + other.counts, self.n_pairs + other.n_pairs)


def edge_geometry(edge_a, edge_b, wavelength_a: float, wavelength_b: float = None) -> tuple:
    """(psi, theta, d, log2 scale ratio) of edge_b seen from edge_a.

    d is in units of sqrt(wavelength_a * wavelength_b), or wavelength_a alone
    when wavelength_b is not given, in which case the scale ratio is 0.
    """
    theta = wrap_orientation(edge_b.theta - edge_a.theta)
    phi = wrap_orientation(math.atan2(edge_b.y - edge_a.y, edge_b.x - edge_a.x) - edge_a.theta)
    psi = wrap_orientation(phi - theta / 2.0)
    scale = wavelength_a if wavelength_b is None else math.sqrt(wavelength_a * wavelength_b)
    d = math.hypot(edge_b.x - edge_a.x, edge_b.y - edge_a.y) / scale
    log_sigma = 0.0 if wavelength_b is None else math.log2(wavelength_b / wavelength_a)
    return psi, theta, d, log_sigma


def _pair_arrays(edges: EdgeList, wavelengths: np.ndarray) -> tuple:
    x = np.array([e.x for e in edges.edges], dtype=np.float64)
    y = np.array([e.y for e in edges.edges], dtype=np.float64)
    theta = np.array([e.theta for e in edges.edges], dtype=np.float64)
    lam = np.array([wavelengths[e.scale] for e in edges.edges], dtype=np.float64)
    mod = np.array([e.modulus for e in edges.edges], dtype=np.float64)
    return x, y, theta, lam, mod


def _chevron_one(edges: EdgeList, binning: ChevronBinning) -> ChevronHistogram:
    counts = np.zeros(binning.shape)
    if len(edges) < 2:
        return ChevronHistogram(binning, counts, 0)
    x, y, theta, lam, mod = _pair_arrays(edges, edges.wavelengths)
    # reference A along rows, B along columns
    dx = x[np.newaxis, :] - x[:, np.newaxis]
    dy = y[np.newaxis, :] - y[:, np.newaxis]
    # distance in units of the pair's geometric-mean wavelength, the same in both orders
    d = _snap(np.hypot(dx, dy) / np.sqrt(lam[:, np.newaxis] * lam[np.newaxis, :]))
    keep = (d > 0) & (d <= binning.radius)
    ia, ib = np.nonzero(keep)
    if ia.size == 0:
        return ChevronHistogram(binning, counts, 0)
    rel_theta = wrap_orientation(theta[ib] - theta[ia])
    phi = wrap_orientation(np.arctan2(dy[ia, ib], dx[ia, ib]) - theta[ia])
    psi = wrap_orientation(_snap(phi) - _snap(rel_theta) / 2.0)
    log_sigma = np.log2(lam[ib] / lam[ia])
    k_psi = angle_bin(psi, binning.n_psi)
    k_theta = angle_bin(rel_theta, binning.n_theta)
    k_d = np.clip(np.searchsorted(binning.d_edges, d[ia, ib], side="left") - 1, 0, len(binning.d_edges) - 2)
    k_sigma = np.searchsorted(binning.sigma_edges, _snap(log_sigma), side="right")
    mass = mod[ia] * mod[ib] if binning.weighting == "modulus" else np.ones(ia.size)
    np.add.at(counts, (k_psi, k_theta, k_d, k_sigma), mass)
    return ChevronHistogram(binning, counts, int(ia.size))


def chevron_stats(edge_lists, binning: ChevronBinning = ChevronBinning(), workers: int = 1) -> ChevronHistogram:
    """Pair co-occurrence histogram over a corpus; every ordered pair within the radius counts once."""
    edge_lists = list(edge_lists)
    total = ChevronHistogram(binning, np.zeros(binning.shape), 0)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda el: _chevron_one(el, binning), edge_lists))
    else:
        parts = [_chevron_one(el, binning) for el in edge_lists]
    for part in parts:
        total = total.merge(part)
    logger.info("Chevron histogram from %d edge lists: %d pairs", len(edge_lists), total.n_pairs)
    return total


def chevron_ratio_map(hist: ChevronHistogram) -> np.ndarray:
    """(psi, theta) mass over its uniform expectation, distances and scales marginalized."""
    marg = hist.counts.sum(axis=(2, 3))
    total = marg.sum()
    if total == 0:
        return np.ones_like(marg)
    return marg / (total / marg.size)


def rotate_edges(edges: EdgeList, angle: float, center=None) -> EdgeList:
    """Rotate every edge position and orientation by angle about center; positions become real-valued."""
    n = edges.image_size
    cx, cy = (n / 2.0, n / 2.0) if center is None else center
    c, s = math.cos(angle), math.sin(angle)
    rotated = [
        replace(e,
                x=cx + c * (e.x - cx) - s * (e.y - cy),
                y=cy + s * (e.x - cx) + c * (e.y - cy),
                theta=wrap_orientation(e.theta + angle))
        for e in edges.edges
    ]
    return replace(edges, edges=rotated)


# ---------------------------------------------------------------------------
# Co-occurrence-guided pursuit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoocParams:
    eta: float = 0.15
    neighborhood_radius: float = 4.0
    epsilon_prob: float = 1e-3

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not self.neighborhood_radius > 0:
            raise ValueError(f"neighborhood_radius must be > 0, got {self.neighborhood_radius}")
        if not self.epsilon_prob > 0:
            raise ValueError(f"epsilon_prob must be > 0, got {self.epsilon_prob}")


class CoocPredictor:
    """Per-(orientation, y, x) bias accumulated from the edges extracted so far.

    Accepting an edge (or raising its modulus) splats
    eta * delta|s| * log max(ratio, epsilon) around it; candidate scores are
    |a|^2 / 2 + bias, shared across scales.
    """

    def __init__(self, bank: LogGaborBank, prior: ChevronHistogram, cparams: CoocParams):
        if cparams.neighborhood_radius > prior.binning.radius:
            raise BinningMismatchError(
                f"neighborhood radius {cparams.neighborhood_radius} exceeds prior's d range {prior.binning.radius}"
            )
        self.bank = bank
        self.prior = prior
        self.cparams = cparams
        n = bank.image_size
        self.bias = np.zeros((bank.n_orientations, n, n))
        self.log_ratio = np.log(np.maximum(prior.ratio, cparams.epsilon_prob))

    def splat(self, edge: Edge, weight: float) -> None:
        if weight == 0:
            return
        bank = self.bank
        n = bank.image_size
        lam = float(bank.wavelengths[edge.scale])
        reach = self.cparams.neighborhood_radius * lam
        x0, x1 = max(0, int(math.floor(edge.x - reach))), min(n, int(math.ceil(edge.x + reach)) + 1)
        y0, y1 = max(0, int(math.floor(edge.y - reach))), min(n, int(math.ceil(edge.y + reach)) + 1)
        xs = np.arange(x0, x1, dtype=np.float64) - edge.x
        ys = np.arange(y0, y1, dtype=np.float64) - edge.y
        dx, dy = np.meshgrid(xs, ys)
        d = _snap(np.hypot(dx, dy) / lam)
        inside = (d > 0) & (d <= self.cparams.neighborhood_radius)
        b = self.prior.binning
        k_d = np.clip(np.searchsorted(b.d_edges, d, side="left") - 1, 0, len(b.d_edges) - 2)
        phi = _snap(wrap_orientation(np.arctan2(dy, dx) - edge.theta))
        for k, theta_k in enumerate(bank.thetas):
            rel = _snap(wrap_orientation(theta_k - edge.theta))
            psi = wrap_orientation(phi - rel / 2.0)
            values = self.log_ratio[angle_bin(psi, b.n_psi), angle_bin(rel, b.n_theta), k_d]
            self.bias[k, y0:y1, x0:x1] += np.where(inside, weight * values, 0.0)

    def accept(self, edge: Edge, old_coeff: complex) -> None:
        self.splat(edge, self.cparams.eta * (abs(edge.coeff) - abs(old_coeff)))

    def scores(self, stack: np.ndarray) -> np.ndarray:
        return 0.5 * np.abs(stack) ** 2 + self.bias[np.newaxis]

    def select(self, state) -> tuple:
        scores = self.scores(state.stack)
        s, k, y, x = np.unravel_index(int(np.argmax(scores)), scores.shape)
        return (int(s), int(k), int(x), int(y))


def extract_with_prior(img: np.ndarray, bank: LogGaborBank, prior: ChevronHistogram,
                       pparams: PursuitParams = PursuitParams(), cparams: CoocParams = CoocParams()) -> EdgeList:
    """Pursuit whose selection adds the co-occurrence prediction of already extracted edges.

    eta is in units of squared image amplitude per unit modulus; eta = 0 is
    plain extract.
    """
    if cparams.eta == 0:
        return extract(img, bank, pparams)
    predictor = CoocPredictor(bank, prior, cparams)
    return run_pursuit(img, bank, pparams, select=predictor.select, on_accept=predictor.accept)


# ---------------------------------------------------------------------------
# Segmentation check
# ---------------------------------------------------------------------------

def rim_precision(edges: EdgeList, radius: float, center=None, tol: float = 3.0, first: int = None) -> float:
    """Fraction of the first `first` edges lying within tol pixels of the circle rim."""
    n = edges.image_size
    cx, cy = (n / 2.0, n / 2.0) if center is None else center
    chosen = edges.edges[:first] if first is not None else edges.edges
    if not chosen:
        return 0.0
    hits = sum(1 for e in chosen if abs(math.hypot(e.x - cx, e.y - cy) - radius) <= tol)
    return hits / len(chosen)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ChevronFileError(path, "file not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ChevronFileError(path, f"invalid JSON ({e})") from e
    if data.get("version") != HIST_FILE_VERSION:
        raise ChevronFileError(path, f"unsupported version {data.get('version')!r}")
    return data


def _write_json(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=1)


def save_chevron(path, hist: ChevronHistogram) -> None:
    b = hist.binning
    _write_json(path, {
        "version": HIST_FILE_VERSION,
        "kind": "chevron",
        "n_psi": b.n_psi,
        "n_theta": b.n_theta,
        "d_edges": list(b.d_edges),
        "sigma_edges": list(b.sigma_edges),
        "weighting": b.weighting,
        "n_pairs": hist.n_pairs,
        "counts": hist.counts.tolist(),
    })


def load_chevron(path) -> ChevronHistogram:
    data = _read_json(path)
    try:
        binning = ChevronBinning(data["n_psi"], data["n_theta"], tuple(data["d_edges"]),
                                 tuple(data["sigma_edges"]), data["weighting"])
        return ChevronHistogram(binning, np.array(data["counts"], dtype=np.float64), int(data["n_pairs"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ChevronFileError(path, f"malformed chevron histogram ({e})") from e


def save_orientation_hist(path, hist: OrientationHistogram) -> None:
    _write_json(path, {
        "version": HIST_FILE_VERSION,
        "kind": "orientation",
        "bin_edges": hist.bin_edges.tolist(),
        "weights": hist.weights.tolist(),
        "weighting": hist.weighting,
        "n_edges": hist.n_edges,
    })


def load_orientation_hist(path) -> OrientationHistogram:
    data = _read_json(path)
    try:
        return OrientationHistogram(np.array(data["bin_edges"]), np.array(data["weights"]),
                                    data["weighting"], int(data["n_edges"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ChevronFileError(path, f"malformed orientation histogram ({e})") from e


def save_thetas(path, thetas) -> None:
    _write_json(path, {"version": HIST_FILE_VERSION, "kind": "thetas",
                       "thetas": [float(t) for t in thetas]})


def load_thetas(path) -> tuple:
    data = _read_json(path)
    try:
        return tuple(float(t) for t in data["thetas"])
    except (KeyError, TypeError, ValueError) as e:
        raise ChevronFileError(path, f"malformed orientation set ({e})") from e
