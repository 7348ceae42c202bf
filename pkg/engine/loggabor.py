"""Log-Gabor filter bank and the complex coefficient pyramid.

Envelopes are Gaussians in log-polar frequency space, built directly on the
FFT grid. Each envelope keeps a single lobe (the half-plane around its
gradient direction), so the spatial atoms are quadrature pairs: the real part
responds to symmetric edges, the imaginary part to antisymmetric ones.

Normalization: every real atom Re(e^{i phi} psi) has unit norm for any phase
phi, which makes the complex atom psi of norm sqrt(2). With that convention a
coefficient a = <I, psi> is directly the amplitude of the best-phase real atom
and Re(a * psi) is its contribution to the image.

The coefficient stack is an array of shape (n_scales, n_orientations, n, n).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import scipy.fft
from PIL import Image as PILImage

from engine.imagecore import check_square

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 16


class BankParamsError(ValueError):
    """Raised for an invalid filter-bank parameter combination."""
    def __init__(self, field: str, value, reason: str):
        super().__init__(f"bank parameter {field}={value!r}: {reason}")
        self.field = field
        self.value = value


class SizeMismatchError(ValueError):
    """Raised when an image does not match the bank's image size."""
    pass


class AddressError(IndexError):
    """Raised for an atom address outside the coefficient stack."""
    pass


def wrap_orientation(angle):
    """Wrap angles on period pi into (-pi/2, pi/2]."""
    w = np.mod(np.asarray(angle, dtype=np.float64) + np.pi / 2, np.pi) - np.pi / 2
    w = np.where(w <= -np.pi / 2, w + np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def default_orientations(n_orientations: int) -> np.ndarray:
    """Uniform orientations -pi/2 + (k+1) pi/K, covering (-pi/2, pi/2]."""
    k = np.arange(n_orientations)
    return -np.pi / 2 + (k + 1) * np.pi / n_orientations


@dataclass(frozen=True)
class BankParams:
    n_scales: int = 8
    n_orientations: int = 24
    B_f: float = 0.4
    B_theta: float = math.pi / 8
    scale_ratio: float = 2.0
    f_max: float = 0.45
    thetas: tuple = None

    def __post_init__(self):
        if int(self.n_scales) != self.n_scales or self.n_scales < 1:
            raise BankParamsError("n_scales", self.n_scales, "must be an integer >= 1")
        if int(self.n_orientations) != self.n_orientations or self.n_orientations < 1:
            raise BankParamsError("n_orientations", self.n_orientations, "must be an integer >= 1")
        if not self.B_f > 0:
            raise BankParamsError("B_f", self.B_f, "must be > 0")
        if not 0 < self.B_theta < math.pi:
            raise BankParamsError("B_theta", self.B_theta, "must lie in (0, pi)")
        if not self.scale_ratio > 1:
            raise BankParamsError("scale_ratio", self.scale_ratio, "must be > 1")
        if not 0 < self.f_max <= 0.5:
            raise BankParamsError("f_max", self.f_max, "center frequency above Nyquist (0.5 cycles/pixel)")
        if self.thetas is not None:
            thetas = tuple(float(t) for t in self.thetas)
            if len(thetas) != self.n_orientations:
                raise BankParamsError("thetas", len(thetas), f"expected {self.n_orientations} orientations")
            for t in thetas:
                if not -math.pi / 2 < t <= math.pi / 2:
                    raise BankParamsError("thetas", t, "orientation outside (-pi/2, pi/2]")
            object.__setattr__(self, "thetas", thetas)

    def center_frequencies(self) -> np.ndarray:
        """Center frequency of each scale, cycles/pixel, finest first."""
        return self.f_max / self.scale_ratio ** np.arange(self.n_scales)

    def orientations(self) -> np.ndarray:
        if self.thetas is not None:
            return np.array(self.thetas, dtype=np.float64)
        return default_orientations(self.n_orientations)

    def max_scales(self, image_size: int) -> int:
        """Largest scale count whose lowest band still reaches one cycle per image."""
        reach = self.f_max * math.exp(self.B_f) * image_size
        if reach < 1:
            return 0
        return 1 + int(math.floor(math.log(reach) / math.log(self.scale_ratio) + 1e-12))

    def check_size(self, image_size: int) -> None:
        if image_size < MIN_IMAGE_SIZE:
            raise BankParamsError("image_size", image_size, f"must be >= {MIN_IMAGE_SIZE}")
        if self.n_scales > self.max_scales(image_size):
            lowest = self.center_frequencies()[-1] * image_size
            raise BankParamsError(
                "n_scales", self.n_scales,
                f"lowest center frequency {lowest:.3f} cycles/image falls below the image "
                f"(at most {self.max_scales(image_size)} scales for size {image_size})",
            )

    def fitted(self, image_size: int) -> "BankParams":
        """Copy with n_scales reduced so the bank fits image_size."""
        limit = self.max_scales(image_size)
        if limit < 1:
            raise BankParamsError("f_max", self.f_max, f"no scale fits an image of size {image_size}")
        if self.n_scales <= limit:
            return self
        logger.info("Reducing n_scales from %d to %d for %dx%d images",
                    self.n_scales, limit, image_size, image_size)
        return replace(self, n_scales=limit)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thetas"] = list(self.thetas) if self.thetas is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BankParams":
        d = dict(d)
        if d.get("thetas") is not None:
            d["thetas"] = tuple(d["thetas"])
        return cls(**d)

    def params_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def log_gabor_envelope(f, theta, f_s, theta_k, B_f, B_theta):
    """Unnormalized envelope: log-Gaussian in radial frequency times Gaussian in orientation.

    f and f_s share units; theta and theta_k are edge orientations, compared on
    period pi. Zero at f = 0.
    """
    f = np.asarray(f, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_ratio = np.log(np.where(f > 0, f, 1.0) / f_s)
    radial = np.where(f > 0, np.exp(-log_ratio ** 2 / (2 * B_f ** 2)), 0.0)
    d = wrap_orientation(np.asarray(theta) - theta_k)
    angular = np.exp(-np.square(d) / (2 * B_theta ** 2))
    return radial * angular


def _frequency_grid(n: int):
    fx = np.fft.fftfreq(n)
    return fx[np.newaxis, :], fx[:, np.newaxis]


class LogGaborBank:
    """Immutable set of frequency-domain envelopes for one image size."""

    def __init__(self, params: BankParams, image_size: int, envelopes: np.ndarray, workers: int = None):
        self.params = params
        self.image_size = image_size
        self.envelopes = envelopes
        self.envelopes.setflags(write=False)
        self.workers = workers or int(os.environ.get("SPARSELETS_WORKERS", "0")) or os.cpu_count() or 1
        self.thetas = params.orientations()
        self.center_frequencies = params.center_frequencies()
        self.wavelengths = 1.0 / self.center_frequencies

    @property
    def n_scales(self) -> int:
        return self.params.n_scales

    @property
    def n_orientations(self) -> int:
        return self.params.n_orientations

    @property
    def dims(self) -> tuple:
        return (self.n_scales, self.n_orientations, self.image_size, self.image_size)

    @property
    def n_coefficients(self) -> int:
        return int(np.prod(self.dims))

    @property
    def params_hash(self) -> str:
        return self.params.params_hash()

    def check_address(self, address) -> tuple:
        s, k, x, y = (int(v) for v in address)
        n = self.image_size
        if not (0 <= s < self.n_scales and 0 <= k < self.n_orientations and 0 <= x < n and 0 <= y < n):
            raise AddressError(f"address {(s, k, x, y)} outside stack dims {self.dims}")
        return s, k, x, y


def build_bank(params: BankParams, image_size: int, workers: int = None) -> LogGaborBank:
    """Build the normalized single-lobe envelopes for an image_size x image_size grid."""
    params.check_size(image_size)
    n = image_size
    fx, fy = _frequency_grid(n)
    f = np.sqrt(fx ** 2 + fy ** 2)
    gradient_angle = np.arctan2(fy, fx)
    edge_angle = gradient_angle - np.pi / 2
    # Nyquist row and column alias onto themselves under negation: keep them empty
    nyquist = (fx == -0.5) | (fy == -0.5)

    thetas = params.orientations()
    envelopes = np.zeros((params.n_scales, params.n_orientations, n, n))
    for k, theta_k in enumerate(thetas):
        # keep the half-plane around the gradient direction of edges at theta_k
        omega = theta_k + np.pi / 2
        lobe = (fx * math.cos(omega) + fy * math.sin(omega) > 0) & ~nyquist
        angular = log_gabor_envelope(1.0, edge_angle, 1.0, theta_k, 1.0, params.B_theta)
        for s, f_s in enumerate(params.center_frequencies()):
            radial = log_gabor_envelope(f, 0.0, f_s, 0.0, params.B_f, 1.0)
            env = np.where(lobe, radial * angular, 0.0)
            power = float(np.sum(env ** 2))
            if power == 0:
                raise BankParamsError("image_size", n, f"envelope ({s}, {k}) is empty on this grid")
            envelopes[s, k] = env * math.sqrt(2.0 * n * n / power)
    logger.debug("Built log-Gabor bank %s for %dx%d", params, n, n)
    return LogGaborBank(params, image_size, envelopes, workers=workers)


def analyze(img: np.ndarray, bank: LogGaborBank) -> np.ndarray:
    """Complex coefficients a_j = <I, psi_j> at every scale, orientation and position."""
    n = check_square(img)
    if n != bank.image_size:
        raise SizeMismatchError(f"image size {n} does not match bank size {bank.image_size}")
    spectrum = scipy.fft.fft2(img, workers=bank.workers)
    return scipy.fft.ifft2(spectrum[np.newaxis, np.newaxis] * bank.envelopes,
                           axes=(-2, -1), workers=bank.workers)


def atom(bank: LogGaborBank, address) -> np.ndarray:
    """Complex spatial atom psi centered at (x, y); norm sqrt(2)."""
    s, k, x, y = bank.check_address(address)
    centered = scipy.fft.ifft2(bank.envelopes[s, k], workers=bank.workers)
    return np.roll(centered, (y, x), axis=(0, 1))


def synthesize_atom(bank: LogGaborBank, address, coeff: complex) -> np.ndarray:
    """Real image Re(coeff * psi_address); its norm equals |coeff|."""
    return np.real(coeff * atom(bank, address))


def render_atoms(bank: LogGaborBank, items) -> np.ndarray:
    """Sum of Re(c * psi_address) over (address, c) pairs, one inverse FFT overall."""
    n = bank.image_size
    grids = {}
    for address, c in items:
        s, k, x, y = bank.check_address(address)
        grid = grids.get((s, k))
        if grid is None:
            grid = grids[(s, k)] = np.zeros((n, n), dtype=np.complex128)
        grid[y, x] += c
    if not grids:
        return np.zeros((n, n))
    spectrum = np.zeros((n, n), dtype=np.complex128)
    for (s, k), grid in grids.items():
        spectrum += scipy.fft.fft2(grid, workers=bank.workers) * bank.envelopes[s, k]
    return np.real(scipy.fft.ifft2(spectrum, workers=bank.workers))


def nearest_orientation(bank: LogGaborBank, angle: float) -> int:
    """Index of the bank orientation closest to angle (period pi)."""
    d = np.abs(wrap_orientation(bank.thetas - angle))
    return int(np.argmin(d))


def export_envelope_grid(bank: LogGaborBank, path) -> None:
    """Save a mosaic of the (centered) envelopes: orientations by row, scales by column."""
    n = bank.image_size
    pad = 2
    rows, cols = bank.n_orientations, bank.n_scales
    mosaic = np.zeros((rows * (n + pad) + pad, cols * (n + pad) + pad))
    for s in range(cols):
        for k in range(rows):
            env = np.fft.fftshift(bank.envelopes[s, k])
            peak = env.max()
            if peak > 0:
                env = env / peak
            top = pad + k * (n + pad)
            left = pad + s * (n + pad)
            mosaic[top:top + n, left:left + n] = env
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.round(mosaic * 255).astype(np.uint8)).save(path)
    logger.info("Wrote envelope mosaic (%d x %d tiles) to %s", rows, cols, path)
