"""Matching Pursuit over the log-Gabor coefficient stack.

Each step picks the coefficient of largest modulus, subtracts a fraction
alpha of the corresponding real atom Re(a * psi) from the residual, and
updates the stack so that it stays equal to analyze(residual): channels
coupled to the removed atom are corrected inside a window around it, using
cropped atoms, and a full re-analysis every REANALYSIS_PERIOD steps clears
the truncation error. The selected coefficient is re-read from the residual
itself, which makes the energy bookkeeping exact:

    ||R'||^2 = ||R||^2 - alpha * (2 - alpha) * |a|^2

Input: prepared (whitened, masked) Image + LogGaborBank + PursuitParams
Output: EdgeList (JSON on disk, version 1)
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from engine.imagecore import check_square, image_energy
from engine.loggabor import (
    BankParams,
    LogGaborBank,
    SizeMismatchError,
    analyze,
    atom,
    render_atoms,
)

logger = logging.getLogger(__name__)

EDGE_FILE_VERSION = 1
# Full re-analysis of the residual every this many steps bounds float drift
REANALYSIS_PERIOD = 256
# Atom crops extend this many spatial standard deviations from the center
WINDOW_SIGMAS = 5.0
# Channels coupled to the removed atom below this wait for the next re-analysis
COUPLING_TOLERANCE = 1e-5
# Windowed updates apply while the window side is at most this fraction of the image
LOCAL_WINDOW_FRACTION = 0.75
# A projection this small relative to the residual norm ends the pursuit
NEGLIGIBLE_PROJECTION = 1e-12
# A windowed stack overstating the pick by more than this fraction is re-analyzed
DRIFT_SLACK = 0.05


class NothingToMatchError(ValueError):
    """Raised when every coefficient of the stack is zero."""
    pass


class BankMismatchError(ValueError):
    """Raised when an EdgeList was extracted with a different bank."""
    pass


class EdgeFileError(Exception):
    """Raised for an unreadable or incompatible edge file."""
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass(frozen=True)
class PursuitParams:
    alpha: float = 0.8
    max_edges: int = 2048
    energy_threshold: float = 0.03
    tie_epsilon: float = 1e-12

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.max_edges < 0:
            raise ValueError(f"max_edges must be >= 0, got {self.max_edges}")
        if not 0 <= self.energy_threshold < 1:
            raise ValueError(f"energy_threshold must lie in [0, 1), got {self.energy_threshold}")
        if not 0 <= self.tie_epsilon < 1:
            raise ValueError(f"tie_epsilon must lie in [0, 1), got {self.tie_epsilon}")


@dataclass
class Edge:
    x: int
    y: int
    scale: int
    orientation: int
    theta: float
    coeff: complex
    step: int

    @property
    def address(self) -> tuple:
        return (self.scale, self.orientation, self.x, self.y)

    @property
    def modulus(self) -> float:
        return abs(self.coeff)


@dataclass
class EdgeList:
    """Edges in order of first selection, plus the per-step energy record.

    step_moduli[k] is |a| picked at step k (repeats included);
    measured_energies[k] is ||R_k||^2, so it has one more entry than step_moduli.
    """
    edges: list
    image_size: int
    bank_params: BankParams
    initial_energy: float
    alpha: float
    step_moduli: list = field(default_factory=list)
    measured_energies: list = field(default_factory=list)
    repeat_count: int = 0

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    @property
    def n_steps(self) -> int:
        return len(self.step_moduli)

    @property
    def thetas(self) -> np.ndarray:
        return self.bank_params.orientations()

    @property
    def wavelengths(self) -> np.ndarray:
        return 1.0 / self.bank_params.center_frequencies()

    def residual_fraction(self) -> float:
        if not self.measured_energies or self.initial_energy == 0:
            return 0.0 if self.initial_energy == 0 else 1.0
        return self.measured_energies[-1] / self.initial_energy


# ---------------------------------------------------------------------------
# Selection and residual update
# ---------------------------------------------------------------------------

def best_match(stack: np.ndarray, tie_epsilon: float = 1e-12) -> tuple:
    """Address (scale, orientation, x, y) of the largest |a| and its complex value.

    Ties within a relative tie_epsilon go to the lowest linear index.
    """
    modulus = np.abs(stack)
    peak = modulus.max() if modulus.size else 0.0
    if not peak > 0:
        raise NothingToMatchError("coefficient stack is all zero")
    if tie_epsilon > 0:
        flat = int(np.flatnonzero(modulus.ravel() >= peak * (1.0 - tie_epsilon))[0])
    else:
        flat = int(np.argmax(modulus))
    s, k, y, x = np.unravel_index(flat, stack.shape)
    return (int(s), int(k), int(x), int(y)), complex(stack[s, k, y, x])


def _mirror(grid: np.ndarray) -> np.ndarray:
    """grid(-xi) on the FFT grid, over the last two axes."""
    return np.roll(grid[..., ::-1, ::-1], 1, axis=(-2, -1))


class LocalStackUpdate:
    """Cropped atoms and scale coupling of one bank, for windowed stack updates.

    radii[s] is the crop half-side of scale-s atoms, WINDOW_SIGMAS spatial
    standard deviations of the envelope (None when the crop covers the image).
    coupling[s, t] bounds |change of a scale-t coefficient| / |a| when an atom
    of scale s with coefficient a is removed; scales coupled below
    COUPLING_TOLERANCE are left to the next re-analysis.
    """

    def __init__(self, bank: LogGaborBank):
        n = bank.image_size
        c = n // 2
        bandwidth = min(bank.params.B_f, bank.params.B_theta)
        self.radii = []
        self.kernels = []
        for s, f_s in enumerate(bank.center_frequencies):
            radius = int(math.ceil(WINDOW_SIGMAS / (2 * math.pi * f_s * bandwidth)))
            if 2 * radius + 1 >= n:
                self.radii.append(None)
                self.kernels.append(None)
                continue
            centered = np.fft.fftshift(scipy.fft.ifft2(bank.envelopes[s], axes=(-2, -1), workers=bank.workers),
                                       axes=(-2, -1))
            crop = centered[:, c - radius:c + radius + 1, c - radius:c + radius + 1]
            # correlation with the atom is convolution with its flipped conjugate
            self.radii.append(radius)
            self.kernels.append(np.ascontiguousarray(np.conj(crop)[:, ::-1, ::-1]))

        flat = bank.envelopes.reshape(bank.n_scales * bank.n_orientations, -1)
        mirrored = _mirror(bank.envelopes).reshape(flat.shape)
        overlap = (flat @ flat.T + np.abs(flat @ mirrored.T)) / (2.0 * n * n)
        self.coupling = overlap.reshape(bank.n_scales, bank.n_orientations,
                                        bank.n_scales, bank.n_orientations).max(axis=(1, 3))
        self.image_size = n
        logger.debug("Local update radii %s for size %d", self.radii, n)

    def width(self, s: int, t: int):
        """Half-side of the scale-t window touched by a scale-s atom, or None for a full update."""
        if self.radii[s] is None or self.radii[t] is None:
            return None
        width = self.radii[s] + self.radii[t]
        if 2 * width + 1 > LOCAL_WINDOW_FRACTION * self.image_size:
            return None
        return width

    def apply(self, state: "PursuitState", removed: np.ndarray, spectrum: np.ndarray,
              s: int, x: int, y: int, alpha: float) -> None:
        """Subtract alpha * analyze(removed) from the state's stack, one scale block at a time."""
        bank = state.bank
        n = bank.image_size
        rho = self.radii[s]
        for t in np.flatnonzero(self.coupling[s] >= COUPLING_TOLERANCE):
            width = self.width(s, t)
            if width is None:
                state.stack[t] -= alpha * scipy.fft.ifft2(spectrum[np.newaxis] * bank.envelopes[t],
                                                          axes=(-2, -1), workers=bank.workers)
                state.modulus[t] = np.abs(state.stack[t])
                state.row_max[t] = state.modulus[t].max(axis=-1)
                continue
            near = np.arange(-rho, rho + 1)
            patch = removed[np.ix_((y + near) % n, (x + near) % n)]
            side = 2 * width + 1
            size = scipy.fft.next_fast_len(side)
            product = (scipy.fft.fft2(patch, s=(size, size), workers=bank.workers)[np.newaxis]
                       * scipy.fft.fft2(self.kernels[t], s=(size, size), axes=(-2, -1), workers=bank.workers))
            delta = scipy.fft.ifft2(product, axes=(-2, -1), workers=bank.workers)[:, :side, :side]
            window = np.arange(-width, width + 1)
            rows = ((y + window) % n)[:, np.newaxis]
            cols = ((x + window) % n)[np.newaxis, :]
            block = state.stack[t]
            block[:, rows, cols] -= alpha * delta
            state.modulus[t][:, rows, cols] = np.abs(block[:, rows, cols])
            state.row_max[t][:, rows[:, 0]] = state.modulus[t][:, rows[:, 0], :].max(axis=-1)


_local_updates = weakref.WeakKeyDictionary()
_local_lock = threading.Lock()


def local_stack_update(bank: LogGaborBank) -> LocalStackUpdate:
    """The LocalStackUpdate of a bank, built on first use and shared between threads."""
    with _local_lock:
        update = _local_updates.get(bank)
        if update is None:
            update = _local_updates[bank] = LocalStackUpdate(bank)
        return update


class PursuitState:
    """Residual image and its coefficient stack, kept consistent step by step.

    The residual and its energy are always exact. With local_updates=False
    every step updates the whole stack through the frequency domain, so it
    stays equal to analyze(residual) to rounding; with local_updates=True the
    stack is corrected in windows around each removed atom (see
    LocalStackUpdate) and re-analyzed every REANALYSIS_PERIOD steps.
    """

    def __init__(self, img: np.ndarray, bank: LogGaborBank, stack: np.ndarray = None,
                 local_updates: bool = True):
        n = check_square(img)
        if n != bank.image_size:
            raise SizeMismatchError(f"image size {n} does not match bank size {bank.image_size}")
        self.bank = bank
        self.residual = np.array(img, dtype=np.float64, copy=True)
        if stack is None:
            self.stack = analyze(self.residual, bank)
        else:
            self.stack = np.array(stack, dtype=np.complex128, copy=True)
        self.energy = image_energy(self.residual)
        self._since_refresh = 0
        self._local = local_stack_update(bank) if local_updates else None
        self.modulus = None
        self.row_max = None
        if self._local is not None:
            self._index_stack()
        fx = np.fft.fftfreq(n)
        self._fx = fx

    def _index_stack(self) -> None:
        self.modulus = np.abs(self.stack)
        self.row_max = self.modulus.max(axis=-1)

    def _scan(self, tie_epsilon: float) -> tuple:
        """best_match over the stack, read from the cached row maxima when they exist."""
        if self.row_max is None:
            return best_match(self.stack, tie_epsilon)
        peak = self.row_max.max() if self.row_max.size else 0.0
        if not peak > 0:
            raise NothingToMatchError("coefficient stack is all zero")
        floor = peak * (1.0 - tie_epsilon)
        row = int(np.flatnonzero(self.row_max.ravel() >= floor)[0])
        s, k, y = np.unravel_index(row, self.row_max.shape)
        x = int(np.flatnonzero(self.modulus[s, k, y] >= floor)[0])
        return (int(s), int(k), x, int(y)), complex(self.stack[s, k, y, x])

    def best(self, tie_epsilon: float = 1e-12) -> tuple:
        """Address of the largest stack modulus and its exact projection a.

        A windowed stack that overstates the pick by more than DRIFT_SLACK is
        re-analyzed and scanned again.
        """
        address, value = self._scan(tie_epsilon)
        a = self.projection(address)
        if self._local is not None and self._since_refresh and abs(a) < (1.0 - DRIFT_SLACK) * abs(value):
            logger.debug("stack drift at %s (%.4g vs %.4g), re-analyzing", address, abs(value), abs(a))
            self.refresh()
            address, value = self._scan(tie_epsilon)
            a = self.projection(address)
        return address, a

    def projection(self, address) -> complex:
        """Exact <R, psi_address> read from the residual image."""
        return complex(np.vdot(atom(self.bank, address), self.residual))

    def subtract(self, address, alpha: float, a: complex = None) -> complex:
        """Remove alpha * Re(a * psi) at address; returns the projection a used.

        a defaults to the exact projection at address.
        """
        bank = self.bank
        s, k, x, y = bank.check_address(address)
        if a is None:
            a = self.projection(address)
        ramp = np.exp(-2j * np.pi * self._fx[:, np.newaxis] * y) * np.exp(-2j * np.pi * self._fx[np.newaxis, :] * x)
        env = bank.envelopes[s, k]
        # spectrum of Re(a * psi_p): Hermitian, so its inverse transform is real
        spectrum = 0.5 * (a * env + np.conj(a) * _mirror(env)) * ramp
        removed = np.real(scipy.fft.ifft2(spectrum, workers=bank.workers))
        self.residual -= alpha * removed
        if self._local is None:
            self.stack -= alpha * scipy.fft.ifft2(spectrum[np.newaxis, np.newaxis] * bank.envelopes,
                                                  axes=(-2, -1), workers=bank.workers)
        else:
            self._local.apply(self, removed, spectrum, s, x, y, alpha)
        self.energy = image_energy(self.residual)
        self._since_refresh += 1
        if self._since_refresh >= REANALYSIS_PERIOD:
            self.refresh()
        return a

    def refresh(self) -> None:
        self.stack = analyze(self.residual, self.bank)
        if self._local is not None:
            self._index_stack()
        self._since_refresh = 0


def pursue_step(img: np.ndarray, stack: np.ndarray, bank: LogGaborBank, alpha: float,
                tie_epsilon: float = 1e-12) -> tuple:
    """One pursuit step on copies of (img, stack): returns (Edge, residual, stack)."""
    state = PursuitState(img, bank, stack=stack)
    address, _ = best_match(state.stack, tie_epsilon)
    a = state.subtract(address, alpha)
    s, k, x, y = address
    edge = Edge(x=x, y=y, scale=s, orientation=k, theta=float(bank.thetas[k]), coeff=alpha * a, step=0)
    return edge, state.residual, state.stack


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def run_pursuit(img: np.ndarray, bank: LogGaborBank, params: PursuitParams,
                select=None, on_accept=None, local_updates: bool = True) -> EdgeList:
    """Pursuit loop shared by plain and prior-guided extraction.

    select(state) returns the address to extract (default: best_match on the
    stack); on_accept(edge, old_coeff) is called after each accumulation.
    """
    state = PursuitState(img, bank, local_updates=local_updates)
    e0 = state.energy
    edges = []
    index = {}
    moduli = []
    energies = [e0]
    repeats = 0
    result = EdgeList(edges=edges, image_size=bank.image_size, bank_params=bank.params,
                      initial_energy=e0, alpha=params.alpha, step_moduli=moduli,
                      measured_energies=energies)
    if e0 == 0:
        return result

    t0 = time.perf_counter()
    target = params.energy_threshold * e0
    while len(moduli) < params.max_edges and state.energy > target:
        try:
            if select is None:
                address, a = state.best(params.tie_epsilon)
            else:
                address = select(state)
                a = state.projection(address)
        except NothingToMatchError:
            break
        step = len(moduli)
        if abs(a) <= NEGLIGIBLE_PROJECTION * np.sqrt(state.energy):
            logger.debug("step %d: projection at %s is negligible, stopping", step, address)
            break
        a = state.subtract(address, params.alpha, a)
        moduli.append(abs(a))
        energies.append(state.energy)
        increment = params.alpha * a
        if address in index:
            edge = edges[index[address]]
            old = edge.coeff
            edge.coeff = old + increment
            repeats += 1
        else:
            s, k, x, y = address
            old = 0j
            edge = Edge(x=x, y=y, scale=s, orientation=k, theta=float(bank.thetas[k]),
                        coeff=increment, step=step)
            index[address] = len(edges)
            edges.append(edge)
        if on_accept is not None:
            on_accept(edge, old)
        if (step + 1) % REANALYSIS_PERIOD == 0:
            logger.debug("step %d: residual %.5f", step + 1, state.energy / e0)

    result.repeat_count = repeats
    logger.info("Extracted %d edges in %d steps (%d repeats), residual %.4f, %.1fs",
                len(edges), len(moduli), repeats, state.energy / e0, time.perf_counter() - t0)
    return result


def extract(img: np.ndarray, bank: LogGaborBank, params: PursuitParams = PursuitParams()) -> EdgeList:
    """Greedy extraction until the residual falls under the threshold or max_edges steps.

    The input should already be whitened and masked (imagecore.prepare_image).
    max_edges bounds pursuit steps; repeated picks of one address add to its
    coefficient instead of creating a new edge.
    """
    return run_pursuit(img, bank, params)


def extract_corpus(corpus, bank: LogGaborBank, params: PursuitParams = PursuitParams(),
                   workers: int = 1) -> list:
    """Extract every (image_id, Image) of a corpus; returns (image_id, EdgeList) in input order."""
    def _one(item):
        image_id, img = item
        return image_id, extract(img, bank, params)

    if workers <= 1:
        return [_one(item) for item in corpus]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, corpus))


def reconstruct(edges: EdgeList, bank: LogGaborBank) -> np.ndarray:
    """Sum of Re(s_i * psi_i) over the edge list."""
    if edges.image_size != bank.image_size or edges.bank_params.params_hash() != bank.params_hash:
        raise BankMismatchError(
            f"edges were extracted with bank {edges.bank_params.params_hash()} at size "
            f"{edges.image_size}, got bank {bank.params_hash} at size {bank.image_size}"
        )
    return render_atoms(bank, [(e.address, e.coeff) for e in edges.edges])


def energy_curve(edges: EdgeList, alpha: float = None) -> np.ndarray:
    """E_N = 1 - alpha(2 - alpha) * sum_{k<N} |a_k|^2 / ||I||^2, for N = 0..n_steps."""
    alpha = edges.alpha if alpha is None else alpha
    moduli = np.asarray(edges.step_moduli, dtype=np.float64)
    if edges.initial_energy == 0:
        return np.ones(len(moduli) + 1)
    drops = alpha * (2.0 - alpha) * np.cumsum(moduli ** 2) / edges.initial_energy
    return np.concatenate([[1.0], 1.0 - drops])


def measured_curve(edges: EdgeList) -> np.ndarray:
    """Residual energy fractions recorded during extraction."""
    if edges.initial_energy == 0:
        return np.ones(len(edges.measured_energies))
    return np.asarray(edges.measured_energies, dtype=np.float64) / edges.initial_energy


# ---------------------------------------------------------------------------
# Edge files
# ---------------------------------------------------------------------------

def edges_to_dict(edges: EdgeList) -> dict:
    return {
        "version": EDGE_FILE_VERSION,
        "image_size": edges.image_size,
        "bank_params": edges.bank_params.to_dict(),
        "initial_energy": edges.initial_energy,
        "alpha": edges.alpha,
        "thetas": [float(t) for t in edges.thetas],
        "step_moduli": [float(m) for m in edges.step_moduli],
        "measured_energies": [float(e) for e in edges.measured_energies],
        "repeat_count": edges.repeat_count,
        "edges": [
            {
                "x": e.x, "y": e.y, "scale": e.scale, "orientation": e.orientation,
                "theta": e.theta, "coeff_re": e.coeff.real, "coeff_im": e.coeff.imag,
                "step": e.step,
            }
            for e in edges.edges
        ],
    }


def save_edges(path, edges: EdgeList) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(edges_to_dict(edges), f, indent=1)
    logger.info("Saved %d edges to %s", len(edges), path)


def load_edges(path) -> EdgeList:
    path = Path(path)
    if not path.exists():
        raise EdgeFileError(path, "file not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise EdgeFileError(path, f"invalid JSON ({e})") from e
    version = data.get("version")
    if version != EDGE_FILE_VERSION:
        raise EdgeFileError(path, f"unsupported edge file version {version!r}")
    try:
        edges = [
            Edge(x=int(e["x"]), y=int(e["y"]), scale=int(e["scale"]),
                 orientation=int(e["orientation"]), theta=float(e["theta"]),
                 coeff=complex(e["coeff_re"], e["coeff_im"]), step=int(e["step"]))
            for e in data["edges"]
        ]
        return EdgeList(
            edges=edges,
            image_size=int(data["image_size"]),
            bank_params=BankParams.from_dict(data["bank_params"]),
            initial_energy=float(data["initial_energy"]),
            alpha=float(data["alpha"]),
            step_moduli=[float(m) for m in data.get("step_moduli", [])],
            measured_energies=[float(e) for e in data.get("measured_energies", [])],
            repeat_count=int(data.get("repeat_count", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise EdgeFileError(path, f"malformed edge file ({e})") from e
