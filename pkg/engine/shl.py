"""Sparse Hebbian Learning on image patches.

Learning alternates three steps on batches of whitened patches:
  1. code_mp: greedy Matching Pursuit (alpha = 1) for l0_target steps
  2. hebbian_update: each active atom moves along its coefficient times the residual
  3. homeostasis_update: usage statistics bias the next selections toward rarely used atoms

Homeostasis modes:
  none                    plain |correlation| selection
  gain_variance           score = gain_i * |correlation|, gain from a moving coefficient variance
  histogram_equalization  score = CDF_i(|correlation|), the atom's own running distribution

Gains and CDFs only bias which atom is picked; stored coefficients are always
the raw projections.

Input: patch source (PatchSampler or array of unit-norm patches) + SHLParams
Output: Dictionary (.npz) + training log (CSV)
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import kurtosis

from engine.imagecore import EmptyCorpusError

logger = logging.getLogger(__name__)

HOMEO_MODES = ("none", "gain_variance", "histogram_equalization")
HOMEO_ALIASES = {"variance": "gain_variance", "histogram": "histogram_equalization"}
N_QUANTILES = 128
MIN_PATCH_VARIANCE = 1e-4
BURN_IN_FRACTION = 0.1
# Atom re-initialization: an atom picked under DEAD_USAGE_FRACTION of the mean
# rate, or the less used of two atoms correlated above DUPLICATE_CORRELATION,
# restarts from the residual of a badly coded patch out of RESEED_SAMPLE fresh ones
DEAD_USAGE_FRACTION = 0.25
DUPLICATE_CORRELATION = 0.8
RESEED_SAMPLE = 512
RESEED_STOP_FRACTION = 0.5
DICTIONARY_FILE_VERSION = 1
LOG_COLUMNS = ["step", "residual", "kurtosis", "min_pick_rate", "max_pick_rate", "eta"]


class HomeostasisModeError(ValueError):
    """Raised for an unknown homeostasis mode."""
    pass


class DictionaryError(ValueError):
    """Raised for a malformed dictionary (zero columns, bad shapes, bad file)."""
    pass


def resolve_homeo_mode(mode: str) -> str:
    mode = HOMEO_ALIASES.get(mode, mode)
    if mode not in HOMEO_MODES:
        raise HomeostasisModeError(
            f"unknown homeostasis mode {mode!r} (expected one of {HOMEO_MODES + tuple(HOMEO_ALIASES)})"
        )
    return mode


@dataclass(frozen=True)
class SHLParams:
    patch_side: int = 12
    n_atoms: int = 324
    eta: float = 0.01
    l0_target: int = 16
    n_steps: int = 20000
    batch_size: int = 16
    homeo_mode: str = "histogram_equalization"
    homeo_rate: float = 0.005
    reseed_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "homeo_mode", resolve_homeo_mode(self.homeo_mode))
        if self.patch_side < 1:
            raise ValueError(f"patch_side must be >= 1, got {self.patch_side}")
        if self.n_atoms < 1:
            raise ValueError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not 1 <= self.l0_target <= self.n_atoms:
            raise ValueError(f"l0_target must lie in [1, n_atoms={self.n_atoms}], got {self.l0_target}")
        if self.n_steps < 0 or self.batch_size < 1:
            raise ValueError("n_steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.homeo_rate <= 1:
            raise ValueError(f"homeo_rate must lie in [0, 1], got {self.homeo_rate}")
        if self.reseed_every < 0:
            raise ValueError(f"reseed_every must be >= 0, got {self.reseed_every}")

    @property
    def patch_size(self) -> int:
        return self.patch_side * self.patch_side


@dataclass
class SparseVector:
    """Nonzero coefficients keyed by atom index."""
    entries: dict = field(default_factory=dict)

    @property
    def l0(self) -> int:
        return len(self.entries)

    def to_dense(self, n_atoms: int) -> np.ndarray:
        dense = np.zeros(n_atoms)
        for i, a in self.entries.items():
            dense[i] = a
        return dense

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseVector":
        return cls({int(i): float(dense[i]) for i in np.flatnonzero(dense)})


class Dictionary:
    """L x M atom matrix with the homeostasis state that biases selection."""

    def __init__(self, atoms: np.ndarray, homeo_mode: str = "none", gains=None,
                 variances=None, cdf=None, pick_counts=None, n_coded: int = 0):
        atoms = np.array(atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise DictionaryError(f"atoms must be an L x M matrix, got shape {atoms.shape}")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(norms == 0):
            raise DictionaryError(f"zero atom columns: {np.flatnonzero(norms == 0).tolist()}")
        self.atoms = atoms
        self.homeo_mode = resolve_homeo_mode(homeo_mode)
        m = atoms.shape[1]
        self.gains = np.ones(m) if gains is None else np.array(gains, dtype=np.float64)
        self.variances = np.ones(m) if variances is None else np.array(variances, dtype=np.float64)
        if cdf is None:
            cdf = np.tile(np.linspace(0.0, 1.0, N_QUANTILES), (m, 1))
        self.cdf = np.array(cdf, dtype=np.float64)
        self.pick_counts = np.zeros(m, dtype=np.int64) if pick_counts is None else np.array(pick_counts, dtype=np.int64)
        self.n_coded = int(n_coded)

    @property
    def patch_size(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def copy(self) -> "Dictionary":
        return Dictionary(self.atoms.copy(), self.homeo_mode, self.gains.copy(), self.variances.copy(),
                          self.cdf.copy(), self.pick_counts.copy(), self.n_coded)

    def normalize(self, columns=None) -> None:
        cols = slice(None) if columns is None else columns
        self.atoms[:, cols] /= np.linalg.norm(self.atoms[:, cols], axis=0)

    def cdf_at(self, magnitude: np.ndarray) -> np.ndarray:
        """Each atom's running CDF evaluated at |correlation| (last axis indexes atoms)."""
        pos = np.clip(magnitude, 0.0, 1.0) * (N_QUANTILES - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), N_QUANTILES - 2)
        frac = pos - lo
        rows = np.arange(self.n_atoms)
        return self.cdf[rows, lo] * (1.0 - frac) + self.cdf[rows, lo + 1] * frac


def init_dictionary(patch_size: int, n_atoms: int, seed: int = 0, homeo_mode: str = "none") -> Dictionary:
    """White-noise atoms, normalized to unit columns."""
    rng = np.random.default_rng(seed)
    atoms = rng.standard_normal((patch_size, n_atoms))
    atoms /= np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms, homeo_mode=homeo_mode)


# ---------------------------------------------------------------------------
# Patch source
# ---------------------------------------------------------------------------

class PatchSampler:
    """Random unit-norm, zero-mean patches from whitened images.

    Each image is scaled to unit variance first; patches whose variance falls
    under MIN_PATCH_VARIANCE are redrawn.
    """

    def __init__(self, images, patch_side: int, seed: int = 0, max_attempts: int = 1000):
        images = [np.asarray(img, dtype=np.float64) for img in images]
        images = [img for img in images if min(img.shape) >= patch_side]
        if not images:
            raise EmptyCorpusError(f"no images large enough for {patch_side}x{patch_side} patches")
        self.images = []
        for img in images:
            std = float(np.std(img))
            self.images.append(img / std if std > 0 else img)
        self.patch_side = patch_side
        self.rng = np.random.default_rng(seed)
        self.max_attempts = max_attempts

    @property
    def patch_size(self) -> int:
        return self.patch_side * self.patch_side

    def sample(self, n: int) -> np.ndarray:
        out = np.empty((n, self.patch_size))
        side = self.patch_side
        filled = 0
        attempts = 0
        while filled < n:
            attempts += 1
            if attempts > self.max_attempts * max(n, 1):
                raise EmptyCorpusError("could not draw enough patches above the variance floor")
            img = self.images[int(self.rng.integers(len(self.images)))]
            y = int(self.rng.integers(img.shape[0] - side + 1))
            x = int(self.rng.integers(img.shape[1] - side + 1))
            patch = img[y:y + side, x:x + side].ravel()
            if patch.var() < MIN_PATCH_VARIANCE:
                continue
            patch = patch - patch.mean()
            out[filled] = patch / np.linalg.norm(patch)
            filled += 1
        return out


class _ArraySource:
    def __init__(self, patches: np.ndarray, seed: int):
        if len(patches) == 0:
            raise EmptyCorpusError("empty patch array")
        self.patches = np.asarray(patches, dtype=np.float64)
        self.rng = np.random.default_rng(seed)

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    def sample(self, n: int) -> np.ndarray:
        return self.patches[self.rng.integers(len(self.patches), size=n)]


# ---------------------------------------------------------------------------
# Coding
# ---------------------------------------------------------------------------

def _scores(dictionary: Dictionary, corr: np.ndarray, mode: str) -> np.ndarray:
    magnitude = np.abs(corr)
    if mode == "gain_variance":
        return dictionary.gains * magnitude
    if mode == "histogram_equalization":
        # raw magnitude breaks ties between atoms sitting at the same quantile
        return dictionary.cdf_at(magnitude) + 1e-6 * magnitude
    return magnitude


def code_batch(patches: np.ndarray, dictionary: Dictionary, l0_target: int, mode: str = None,
               count_picks: bool = False) -> tuple:
    """Matching Pursuit (alpha = 1) on a batch of patches.

    Returns (A, energies): A is the (B, M) coefficient matrix, energies the
    (B, steps + 1) residual energies after each step. A row stops once its
    residual norm falls under 1e-12 of the patch norm.
    """
    mode = dictionary.homeo_mode if mode is None else resolve_homeo_mode(mode)
    X = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    phi = dictionary.atoms
    gram = phi.T @ phi
    C = X @ phi
    R = X.copy()
    A = np.zeros((X.shape[0], dictionary.n_atoms))
    e0 = np.sum(X ** 2, axis=1)
    energies = [e0]
    rows = np.arange(X.shape[0])
    for _ in range(l0_target):
        active = energies[-1] > 1e-24 * e0
        if not active.any():
            break
        idx = np.argmax(_scores(dictionary, C, mode), axis=1)
        a = np.where(active, C[rows, idx], 0.0)
        A[rows, idx] += a
        R -= a[:, np.newaxis] * phi[:, idx].T
        C -= a[:, np.newaxis] * gram[idx]
        if count_picks:
            np.add.at(dictionary.pick_counts, idx[active], 1)
        energies.append(np.sum(R ** 2, axis=1))
    return A, np.stack(energies, axis=1)


def code_mp(patch: np.ndarray, dictionary: Dictionary, l0_target: int, mode: str = None) -> SparseVector:
    """Sparse code of one patch with at most l0_target pursuit steps."""
    if np.asarray(patch).shape != (dictionary.patch_size,):
        raise DictionaryError(f"patch length {np.asarray(patch).shape} does not match L={dictionary.patch_size}")
    A, _ = code_batch(patch, dictionary, l0_target, mode)
    return SparseVector.from_dense(A[0])


# ---------------------------------------------------------------------------
# Learning rules
# ---------------------------------------------------------------------------

def hebbian_update(dictionary: Dictionary, patch: np.ndarray, code, eta: float) -> Dictionary:
    """Phi_i += eta * a_i * (I - Phi a) for active atoms, then renormalize them.

    patch/code may be a single patch with its SparseVector, or a (B, L) batch
    with a (B, M) coefficient matrix (the batch update is averaged).
    The dictionary is updated in place and returned.
    """
    X = np.atleast_2d(np.asarray(patch, dtype=np.float64))
    if isinstance(code, SparseVector):
        A = code.to_dense(dictionary.n_atoms)[np.newaxis, :]
    else:
        A = np.atleast_2d(np.asarray(code, dtype=np.float64))
    residual = X - A @ dictionary.atoms.T
    active = np.flatnonzero(np.any(A != 0, axis=0))
    if active.size == 0:
        return dictionary
    delta = eta * (residual.T @ A[:, active]) / X.shape[0]
    dictionary.atoms[:, active] += delta
    dictionary.normalize(active)
    return dictionary


def homeostasis_update(dictionary: Dictionary, code, mode: str = None, rate: float = 0.005,
                       correlations: np.ndarray = None) -> Dictionary:
    """Update usage statistics from one coded batch (in place).

    gain_variance tracks v_i <- (1 - rate) v_i + rate * a_i^2 and sets
    gains = v^-1/2 scaled to unit geometric mean. histogram_equalization moves
    each atom's CDF grid toward the empirical CDF of |correlations| (the
    patch-atom correlations before coding; the coefficients stand in when
    they are not given).
    """
    mode = dictionary.homeo_mode if mode is None else resolve_homeo_mode(mode)
    if mode == "none":
        return dictionary
    if isinstance(code, SparseVector):
        A = code.to_dense(dictionary.n_atoms)[np.newaxis, :]
    else:
        A = np.atleast_2d(np.asarray(code, dtype=np.float64))

    if mode == "gain_variance":
        dictionary.variances = (1.0 - rate) * dictionary.variances + rate * np.mean(A ** 2, axis=0)
        gains = 1.0 / np.sqrt(np.maximum(dictionary.variances, 1e-300))
        dictionary.gains = gains / np.exp(np.mean(np.log(gains)))
    else:
        magnitude = np.abs(A if correlations is None else np.atleast_2d(correlations))
        grid = np.linspace(0.0, 1.0, N_QUANTILES)
        empirical = np.mean(magnitude[:, :, np.newaxis] <= grid, axis=0)
        dictionary.cdf = (1.0 - rate) * dictionary.cdf + rate * empirical
    return dictionary


def eta_schedule(step: int, n_steps: int, eta: float) -> float:
    """Constant for the first tenth of the run, then decaying as 1/t."""
    burn_in = max(1, int(BURN_IN_FRACTION * n_steps))
    if step < burn_in:
        return eta
    return eta * burn_in / (step + 1)


def stale_atoms(dictionary: Dictionary, usage) -> np.ndarray:
    """Indices of atoms to re-initialize, given per-atom pick counts over a recent window.

    An atom is stale when it was picked under DEAD_USAGE_FRACTION of the mean
    count, or when it is the less used of a pair whose |correlation| exceeds
    DUPLICATE_CORRELATION.
    """
    usage = np.asarray(usage, dtype=np.float64)
    stale = set(np.flatnonzero(usage < DEAD_USAGE_FRACTION * usage.mean()).tolist())
    overlap = np.abs(dictionary.atoms.T @ dictionary.atoms)
    for i, j in zip(*np.nonzero(np.triu(overlap > DUPLICATE_CORRELATION, k=1))):
        if i in stale or j in stale:
            continue
        stale.add(int(j) if usage[j] <= usage[i] else int(i))
    return np.array(sorted(stale), dtype=np.int64)


def reseed_atoms(dictionary: Dictionary, source, usage, l0_target: int, n_sample: int = RESEED_SAMPLE) -> np.ndarray:
    """Restart stale atoms from the residuals of the worst coded patches (in place).

    Fresh patches are coded without homeostasis; each stale atom takes the
    normalized residual of a different patch, worst first. Homeostasis state
    of restarted atoms is reset to the average of the others. Returns the
    restarted indices.
    """
    stale = stale_atoms(dictionary, usage)
    if stale.size == 0:
        return stale
    X = source.sample(max(n_sample, stale.size))
    A, _ = code_batch(X, dictionary, l0_target, mode="none")
    R = X - A @ dictionary.atoms.T
    worst = np.argsort(-np.sum(R ** 2, axis=1), kind="stable")[:stale.size]
    for i, b in zip(stale, worst):
        norm = np.linalg.norm(R[b])
        dictionary.atoms[:, i] = R[b] / norm if norm > 1e-12 else X[b] / np.linalg.norm(X[b])

    kept = np.setdiff1d(np.arange(dictionary.n_atoms), stale)
    if kept.size:
        dictionary.cdf[stale] = dictionary.cdf[kept].mean(axis=0)
        dictionary.variances[stale] = dictionary.variances[kept].mean()
        dictionary.gains[stale] = np.exp(np.mean(np.log(dictionary.gains[kept])))
    else:
        dictionary.cdf[stale] = np.linspace(0.0, 1.0, N_QUANTILES)
        dictionary.variances[stale] = 1.0
        dictionary.gains[stale] = 1.0
    return stale


def coefficient_kurtosis(A: np.ndarray) -> float:
    """Excess kurtosis of the nonzero coefficients."""
    values = np.asarray(A)[np.asarray(A) != 0]
    if values.size < 4:
        return float("nan")
    return float(kurtosis(values, fisher=True))


def learn(corpus, params: SHLParams = SHLParams(), seed: int = 0, dictionary: Dictionary = None,
          log_every: int = None) -> tuple:
    """Run n_steps of code -> Hebbian update -> homeostasis on random batches.

    corpus is a PatchSampler (anything with .sample(n)) or an array of
    patches. Every reseed_every steps, during the first RESEED_STOP_FRACTION
    of the run, dead and duplicated atoms are re-initialized (reseed_atoms).
    Returns (dictionary, log) where log is a list of dict rows with the
    LOG_COLUMNS fields, one per log_every steps.
    """
    source = corpus if hasattr(corpus, "sample") else _ArraySource(corpus, seed)
    if source.patch_size != params.patch_size and dictionary is None:
        raise DictionaryError(f"patch size {source.patch_size} does not match params {params.patch_size}")
    if dictionary is None:
        dictionary = init_dictionary(params.patch_size, params.n_atoms, seed, params.homeo_mode)
    log_every = log_every or max(1, params.n_steps // 100)

    t0 = time.perf_counter()
    log = []
    window = []
    window_picks = np.zeros(dictionary.n_atoms, dtype=np.int64)
    window_patches = 0
    residuals = []
    reseed_until = RESEED_STOP_FRACTION * params.n_steps
    reseed_mark = dictionary.pick_counts.copy()
    for step in range(params.n_steps):
        X = source.sample(params.batch_size)
        before = dictionary.pick_counts.copy()
        A, energies = code_batch(X, dictionary, params.l0_target, count_picks=True)
        dictionary.n_coded += X.shape[0]
        eta = eta_schedule(step, params.n_steps, params.eta)
        correlations = X @ dictionary.atoms
        hebbian_update(dictionary, X, A, eta)
        homeostasis_update(dictionary, A, rate=params.homeo_rate, correlations=correlations)
        if params.reseed_every and (step + 1) % params.reseed_every == 0 and step + 1 < reseed_until:
            restarted = reseed_atoms(dictionary, source, dictionary.pick_counts - reseed_mark, params.l0_target)
            reseed_mark = dictionary.pick_counts.copy()
            if restarted.size:
                logger.debug("step %d: re-initialized %d atoms", step + 1, restarted.size)

        window.append(A[A != 0])
        window_picks += dictionary.pick_counts - before
        window_patches += X.shape[0]
        residuals.append(np.mean(energies[:, -1] / energies[:, 0]))
        if (step + 1) % log_every == 0 or step + 1 == params.n_steps:
            rates = window_picks / window_patches
            row = {
                "step": step + 1,
                "residual": float(np.mean(residuals)),
                "kurtosis": coefficient_kurtosis(np.concatenate(window)),
                "min_pick_rate": float(rates.min()),
                "max_pick_rate": float(rates.max()),
                "eta": eta,
            }
            log.append(row)
            logger.debug("step %d: residual %.4f kurtosis %.2f", row["step"], row["residual"], row["kurtosis"])
            window, residuals = [], []
            window_picks[:] = 0
            window_patches = 0
    logger.info("Learned %d atoms over %d steps (%s homeostasis) in %.1fs",
                dictionary.n_atoms, params.n_steps, dictionary.homeo_mode, time.perf_counter() - t0)
    return dictionary, log


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def efficiency_report(dictionary: Dictionary, test_patches: np.ndarray, n_grid=(0, 1, 2, 4, 8, 16, 32)) -> list:
    """Mean and std of ||I - Phi A|| / ||I|| after N plain pursuit steps, for N in n_grid.

    Selection ignores homeostasis so that dictionaries are compared on
    reconstruction alone.
    """
    X = np.atleast_2d(np.asarray(test_patches, dtype=np.float64))
    n_max = max(n_grid)
    _, energies = code_batch(X, dictionary, n_max, mode="none")
    # rows that stopped early keep their last residual
    if energies.shape[1] < n_max + 1:
        pad = np.repeat(energies[:, -1:], n_max + 1 - energies.shape[1], axis=1)
        energies = np.concatenate([energies, pad], axis=1)
    rel = np.sqrt(energies / energies[:, :1])
    return [{"N": int(n), "mean": float(rel[:, n].mean()), "std": float(rel[:, n].std())} for n in n_grid]


def pick_rate_ratio(dictionary: Dictionary, patches: np.ndarray = None, l0_target: int = None) -> float:
    """max/min per-atom selection rate.

    With patches, rates are measured by coding them with the current
    dictionary state; otherwise the counts accumulated during learning are used.
    """
    if patches is not None:
        counter = dictionary.copy()
        counter.pick_counts[:] = 0
        code_batch(patches, counter, l0_target or 1, count_picks=True)
        counts = counter.pick_counts
    else:
        counts = dictionary.pick_counts
    if counts.min() == 0:
        return float("inf")
    return float(counts.max() / counts.min())


def parametric_costs(patch: np.ndarray, dictionary: Dictionary, code, sigma_n: float, beta: float,
                     sigma: float, lam: float) -> tuple:
    """(C1, C0): the log-Cauchy sparse cost and the l0 cost of a given code."""
    if sigma_n == 0 or sigma == 0:
        raise ValueError("sigma_n and sigma must be nonzero")
    a = code.to_dense(dictionary.n_atoms) if isinstance(code, SparseVector) else np.asarray(code, dtype=np.float64)
    residual = np.asarray(patch, dtype=np.float64) - dictionary.atoms @ a
    fidelity = float(residual @ residual) / (2.0 * sigma_n ** 2)
    c1 = fidelity + beta * float(np.sum(np.log1p(a ** 2 / sigma ** 2)))
    c0 = fidelity + lam * int(np.count_nonzero(a))
    return c1, c0


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_dictionary(path, dictionary: Dictionary, params: SHLParams = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": DICTIONARY_FILE_VERSION,
        "L": dictionary.patch_size,
        "M": dictionary.n_atoms,
        "homeo_mode": dictionary.homeo_mode,
        "n_coded": dictionary.n_coded,
        "params": asdict(params) if params is not None else None,
    }
    with open(path, "wb") as f:
        np.savez(f, header=np.array(json.dumps(header)), atoms=dictionary.atoms, gains=dictionary.gains,
                 variances=dictionary.variances, cdf=dictionary.cdf, pick_counts=dictionary.pick_counts)
    logger.info("Saved %dx%d dictionary to %s", dictionary.patch_size, dictionary.n_atoms, path)


def load_dictionary(path) -> Dictionary:
    path = Path(path)
    if not path.exists():
        raise DictionaryError(f"{path}: file not found")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("version") != DICTIONARY_FILE_VERSION:
                raise DictionaryError(f"{path}: unsupported dictionary version {header.get('version')!r}")
            d = Dictionary(data["atoms"], header["homeo_mode"], data["gains"], data["variances"],
                           data["cdf"], data["pick_counts"], header.get("n_coded", 0))
    except (KeyError, OSError, json.JSONDecodeError) as e:
        raise DictionaryError(f"{path}: malformed dictionary file ({e})") from e
    if d.atoms.shape != (header["L"], header["M"]):
        raise DictionaryError(f"{path}: atoms shape {d.atoms.shape} disagrees with header")
    return d


def write_training_log(path, log: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
