"""Phase-stability PS selection.

Chain: amplitude-dispersion candidates -> weighted circular-mean low-pass
filter over candidate neighbours (spatially correlated phase) -> grid search
plus least-squares refinement of the uncorrelated DEM error per candidate ->
temporal coherence of the residual noise -> SNR weights for the next round.
Iterates until the RMS change in per-candidate coherence drops below a
tolerance, then thresholds coherence.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from psselect.stack import InterferogramStack, PixelMask, wrap

log = logging.getLogger(__name__)

WEIGHT_MAX = 1.0e6
SNR_EPS = 1.0e-12
MIN_NEIGHBOURS = 8
# candidates processed per inversion task; fixed so results never depend on worker count
INVERSION_BLOCK = 512


@dataclass
class ClassicalConfig:
    d_a_threshold: float = 0.4
    filter_radius: float = 10.0
    dh_search_max: float = 20.0
    dh_search_step: float = 0.1
    gamma_threshold: float = 0.75
    max_iters: int = 10
    rms_tol: float = 1.0e-3

    def __post_init__(self):
        if self.d_a_threshold <= 0:
            raise ValueError("d_a_threshold must be positive")
        if self.filter_radius <= 0:
            raise ValueError("filter_radius must be positive")
        if not 0 < self.dh_search_step < self.dh_search_max:
            raise ValueError("need 0 < dh_search_step < dh_search_max")
        if not 0 < self.gamma_threshold < 1:
            raise ValueError("gamma_threshold must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rms_tol < 0:
            raise ValueError("rms_tol must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassicalConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ClassicalConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CandidateRecord:
    pixel: tuple
    d_a: float
    weight: float
    delta_h_su: float
    noise_series: np.ndarray
    gamma: float
    low_support: bool = False
    dh_unidentifiable: bool = False


@dataclass
class SulaResult:
    delta_h: np.ndarray
    noise: np.ndarray
    gamma: np.ndarray
    unidentifiable: np.ndarray


@dataclass
class ClassicalResult:
    candidates: np.ndarray  # (n_cand, 2) row, col
    d_a: np.ndarray
    weights: np.ndarray
    delta_h: np.ndarray
    noise: np.ndarray  # (n_cand, n_ifgs)
    gamma: np.ndarray
    low_support: np.ndarray
    unidentifiable: np.ndarray
    mask: PixelMask
    gamma_total: list = field(default_factory=list)
    rms_change: list = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.gamma_total)

    def records(self) -> list:
        return [
            CandidateRecord(
                pixel=(int(r), int(c)), d_a=float(self.d_a[k]), weight=float(self.weights[k]),
                delta_h_su=float(self.delta_h[k]), noise_series=self.noise[k].copy(),
                gamma=float(self.gamma[k]), low_support=bool(self.low_support[k]),
                dh_unidentifiable=bool(self.unidentifiable[k]),
            )
            for k, (r, c) in enumerate(self.candidates)
        ]


def amplitude_dispersion(stack: InterferogramStack) -> np.ndarray:
    """Temporal std / mean of amplitude per pixel; ``inf`` where the mean is zero."""
    amp = stack.amplitude.astype(np.float64)
    mean = amp.mean(axis=0)
    std = amp.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        da = np.where(mean > 0, std / np.where(mean > 0, mean, 1.0), np.inf)
    return da


def select_candidates(d_a: np.ndarray, threshold: float) -> np.ndarray:
    """Row-major (row, col) pairs with ``d_a < threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    cand = np.argwhere(np.asarray(d_a) < threshold)
    if len(cand) == 0:
        warnings.warn("no pixel passed the amplitude-dispersion threshold", RuntimeWarning, stacklevel=2)
    return cand.reshape(-1, 2)


def neighbour_matrix(candidates: np.ndarray, radius: float) -> sparse.csr_matrix:
    """Sparse 0/1 adjacency of candidates within ``radius`` pixels (no self loops)."""
    n = len(candidates)
    if n == 0:
        return sparse.csr_matrix((0, 0))
    tree = cKDTree(candidates.astype(np.float64))
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return sparse.csr_matrix((n, n))
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    a = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    a.sort_indices()
    return a


def alpf(stack: InterferogramStack, candidates: np.ndarray, weights: np.ndarray,
         radius: float = 10.0, neighbours: sparse.csr_matrix | None = None):
    """Split candidate phase into correlated and uncorrelated parts.

    The correlated estimate of candidate ``x`` in ifg ``i`` is the argument of
    the weighted phasor sum over candidates within ``radius``. ``x`` itself is
    left out when it has at least 8 neighbours.

    Returns
    -------
    sc : (n_cand, n_ifgs) wrapped correlated-phase estimate
    su : (n_cand, n_ifgs) wrapped residual ``wrap(phase - sc)``
    low_support : (n_cand,) bool, fewer than 8 neighbours or zero weight
    """
    candidates = np.asarray(candidates).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(candidates),):
        raise ValueError("one weight per candidate required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if neighbours is None:
        neighbours = neighbour_matrix(candidates, radius)
    rows, cols = candidates[:, 0], candidates[:, 1]
    phase = stack.phase[:, rows, cols].astype(np.float64).T  # (n_cand, n_ifgs)
    phasor = w[:, None] * np.exp(1j * phase)

    n_nb = np.asarray(neighbours.sum(axis=1)).ravel()
    include_self = n_nb < MIN_NEIGHBOURS
    acc = neighbours @ phasor
    acc = acc + np.where(include_self[:, None], phasor, 0.0)
    wsum = neighbours @ w + np.where(include_self, w, 0.0)

    zero = wsum <= 0
    sc = np.angle(acc)
    sc = np.where(zero[:, None], 0.0, sc)
    su = wrap(phase - sc)
    low_support = include_self | zero
    return wrap(sc), su, low_support


def dh_grid(dh_max: float, step: float) -> np.ndarray:
    """Search grid ordered by |dh| (0, -s, +s, -2s, ...) so argmax ties favour small |dh|."""
    k = int(math.floor(dh_max / step + 1e-9))
    ks = np.arange(-k, k + 1)
    order = np.lexsort((ks, np.abs(ks)))
    return ks[order] * step


def temporal_coherence(noise_series) -> np.ndarray | float:
    """``|mean(exp(j*phi))|`` over the trailing axis."""
    x = np.asarray(noise_series, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("noise series must be non-empty")
    g = np.abs(np.exp(1j * x).mean(axis=-1))
    g = np.clip(g, 0.0, 1.0)
    return float(g) if g.ndim == 0 else g


def _coherence_at(su, kb, dh):
    return np.abs(np.exp(1j * (su - kb * dh[..., None])).mean(axis=-1))


def _invert_block(su, kb, grid, tie_tol=1e-12):
    n_c = su.shape[0]
    # (n_c, G, n) phasors; grid ordered by |dh|
    res = su[:, None, :] - kb[:, None, :] * grid[None, :, None]
    gam = np.abs(np.exp(1j * res).mean(axis=-1))
    best = gam.max(axis=1, keepdims=True)
    idx = np.argmax(gam >= best - tie_tol, axis=1)
    dh0 = grid[idx]
    g0 = gam[np.arange(n_c), idx]

    # one least-squares step on wrapped residuals (offset + slope in kb)
    r = wrap(su - kb * dh0[:, None])
    kbc = kb - kb.mean(axis=1, keepdims=True)
    rc = r - r.mean(axis=1, keepdims=True)
    den = (kbc * kbc).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(den > 0, (kbc * rc).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)
    dh1 = dh0 + delta
    g1 = _coherence_at(su, kb, dh1)
    dh = np.where(g1 >= g0, dh1, dh0)

    ident = np.any(kb != 0, axis=1)
    dh = np.where(ident, dh, 0.0)
    noise = wrap(su - kb * dh[:, None])
    return dh, noise, temporal_coherence(noise), ~ident


def invert_sula(su_series, b_perp, k, cfg: ClassicalConfig | None = None, workers: int = 1) -> SulaResult:
    """Estimate the uncorrelated DEM error maximising residual coherence.

    Accepts a single series (n,) or a batch (n_cand, n); ``b_perp`` and ``k``
    broadcast against it. Returns per-candidate ``delta_h``, wrapped noise
    series and coherence; when every ``K * B_perp`` is zero the height is
    unidentifiable and reported as 0 with a flag.
    """
    cfg = cfg or ClassicalConfig()
    su = np.asarray(su_series, dtype=np.float64)
    single = su.ndim == 1
    su = np.atleast_2d(su)
    if su.shape[1] < 2:
        raise ValueError("need at least 2 interferograms")
    k_arr = np.asarray(k, dtype=np.float64)
    if k_arr.ndim == 1 and not single:
        k_arr = k_arr[:, None]
    kb = np.broadcast_to(k_arr * np.asarray(b_perp, dtype=np.float64), su.shape)
    grid = dh_grid(cfg.dh_search_max, cfg.dh_search_step)

    blocks = [slice(s, min(s + INVERSION_BLOCK, len(su))) for s in range(0, len(su), INVERSION_BLOCK)]
    run = lambda sl: _invert_block(su[sl], kb[sl], grid)  # noqa: E731
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, blocks))
    else:
        parts = [run(sl) for sl in blocks]
    if parts:
        dh, noise, gam, flag = (np.concatenate(p) for p in zip(*parts))
    else:
        dh = gam = np.zeros(0)
        noise = np.zeros((0, su.shape[1]))
        flag = np.zeros(0, dtype=bool)
    if single:
        return SulaResult(dh[:1].copy(), noise[0], gam[:1].copy(), flag[:1].copy())
    return SulaResult(dh, noise, gam, flag)


def snr_weight(amplitude_series, noise_series) -> np.ndarray | float:
    """Coherent power over twice the residual power, clamped to [0, 1e6].

    ``mu_c = mean(a * cos(noise))``, ``mu_2 = mean(a**2)``,
    ``W = mu_c**2 / (2 * max(mu_2 - mu_c**2, 1e-12))``.
    """
    a = np.asarray(amplitude_series, dtype=np.float64)
    phi = np.asarray(noise_series, dtype=np.float64)
    if a.shape != phi.shape:
        raise ValueError("amplitude and noise series must have equal shape")
    mu_c = (a * np.cos(phi)).mean(axis=-1)
    mu_2 = (a * a).mean(axis=-1)
    w = mu_c ** 2 / (2.0 * np.maximum(mu_2 - mu_c ** 2, SNR_EPS))
    w = np.clip(w, 0.0, WEIGHT_MAX)
    return float(w) if np.ndim(w) == 0 else w


def iterate_classical(stack: InterferogramStack, cfg: ClassicalConfig | None = None,
                      workers: int = 1) -> ClassicalResult:
    cfg = cfg or ClassicalConfig()
    d_a_plane = amplitude_dispersion(stack)
    cand = select_candidates(d_a_plane, cfg.d_a_threshold)
    n_c, n = len(cand), stack.n_ifgs
    if n_c == 0:
        empty = np.zeros(0)
        return ClassicalResult(
            cand, empty, empty, empty, np.zeros((0, n)), empty,
            np.zeros(0, bool), np.zeros(0, bool),
            PixelMask(np.zeros((stack.height, stack.width), bool), "classical"),
        )
    rows, cols = cand[:, 0], cand[:, 1]
    d_a = d_a_plane[rows, cols]
    amp = stack.amplitude[:, rows, cols].astype(np.float64).T
    bperp = stack.perp_baseline[:, rows, cols].astype(np.float64).T
    kx = stack.k_factor[rows, cols].astype(np.float64)
    kb = kx[:, None] * bperp

    nb = neighbour_matrix(cand, cfg.filter_radius)
    weights = np.minimum(1.0 / np.maximum(d_a, 1.0 / WEIGHT_MAX), WEIGHT_MAX)
    gamma_prev = np.zeros(n_c)
    gamma_total, rms_hist = [], []
    for it in range(cfg.max_iters):
        _, su, low = alpf(stack, cand, weights, cfg.filter_radius, neighbours=nb)
        sol = invert_sula(su, kb, 1.0, cfg, workers=workers)
        gamma = sol.gamma
        rms = float(np.sqrt(np.mean((gamma - gamma_prev) ** 2)))
        gamma_total.append(float(gamma.sum()))
        rms_hist.append(rms)
        log.info("iteration %d: gamma_total=%.4f rms_change=%.3g", it + 1, gamma_total[-1], rms)
        weights = snr_weight(amp, sol.noise)
        gamma_prev = gamma
        if rms < cfg.rms_tol:
            break

    labels = np.zeros((stack.height, stack.width), bool)
    sel = gamma >= cfg.gamma_threshold
    labels[rows[sel], cols[sel]] = True
    return ClassicalResult(
        candidates=cand, d_a=d_a, weights=weights, delta_h=sol.delta_h, noise=sol.noise,
        gamma=gamma, low_support=low, unidentifiable=sol.unidentifiable,
        mask=PixelMask(labels, "classical"), gamma_total=gamma_total, rms_change=rms_hist,
    )


def run_classical(stack: InterferogramStack, cfg: ClassicalConfig | None = None,
                  workers: int = 1) -> tuple[list, PixelMask]:
    """Full selection; returns (candidate records, classical mask)."""
    res = iterate_classical(stack, cfg, workers)
    return res.records(), res.mask


def write_candidates_csv(result: ClassicalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "d_a", "w", "delta_h", "gamma"])
        for k, (r, c) in enumerate(result.candidates):
            wr.writerow([int(r), int(c), repr(float(result.d_a[k])), repr(float(result.weights[k])),
                         repr(float(result.delta_h[k])), repr(float(result.gamma[k]))])
