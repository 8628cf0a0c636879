"""Truth-labelled synthetic interferogram stacks.

Each ifg's phase is the wrapped sum of a subsidence bowl, an atmospheric
screen, an orbital ramp, spatially correlated and uncorrelated DEM-error
terms (``K * B_perp * dh``) and per-pixel noise. Pixels whose noise standard
deviation is at most ``ps_noise_std`` are the true persistent scatterers.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from psselect.stack import InterferogramStack, PixelMask, quantize_phase, wrap

LANDCOVER_CLASSES = ("urban", "forest", "water", "uncropped")
URBAN, FOREST, WATER, UNCROPPED = range(4)

COMPONENTS = ("defo", "atm", "orbit", "sc_topo", "sula", "noise")


def _default_fractions():
    return {"urban": 0.3, "forest": 0.25, "water": 0.06}


def _default_density():
    return {"urban": 4.0, "forest": 0.3, "water": 0.05, "uncropped": 0.6}


@dataclass
class SceneConfig:
    """Parameters of a synthetic scene. Phases in radians, heights in metres."""

    width: int = 256
    height: int = 256
    n_ifgs: int = 10
    seed: int = 0
    bowl_center: tuple | None = None  # (row, col); None = image centre
    bowl_radius: float = 60.0
    velocity: float = 0.3  # rad per ifg at the bowl centre
    step_ifg: int | None = None  # ifg index from which a co-seismic step applies
    step_offset: float = 0.0
    atmosphere_std: float = 1.0
    atmosphere_corr_len: float = 25.0
    orbit_ramp_std: float = 1.0
    dem_error_sc_std: float = 5.0
    dem_error_sc_corr_len: float = 40.0
    dem_error_su_std: float = 2.0
    k_factor: float = 4.0e-4
    ps_fraction: float = 0.05
    ps_noise_std: float = 0.35
    nonps_noise_std: float = 1.5
    ps_amp_dispersion: float = 0.1
    baseline_range: tuple = (100.0, 400.0)
    day_spacing: float = 12.0
    landcover_fractions: dict = field(default_factory=_default_fractions)
    landcover_ps_density: dict = field(default_factory=_default_density)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("width", "height", "n_ifgs"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"{name} must be an integer")
        if self.width < 1 or self.height < 1:
            raise ValueError("degenerate scene extent")
        if self.n_ifgs < 2:
            raise ValueError("n_ifgs must be >= 2")
        stds = ("atmosphere_std", "orbit_ramp_std", "dem_error_sc_std", "dem_error_su_std",
                "ps_noise_std", "nonps_noise_std", "ps_amp_dispersion")
        for name in stds:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.ps_noise_std < self.nonps_noise_std
                or self.ps_noise_std == self.nonps_noise_std == 0):
            raise ValueError("ps_noise_std must be below nonps_noise_std")
        if not 0 < self.ps_fraction < 0.5:
            raise ValueError("ps_fraction must lie in (0, 0.5)")
        if self.atmosphere_corr_len < 1 or self.dem_error_sc_corr_len < 1:
            raise ValueError("correlation lengths must be >= 1 pixel")
        lo, hi = self.baseline_range
        if lo > hi:
            raise ValueError("baseline_range must be (min, max)")
        if self.bowl_radius <= 0:
            raise ValueError("bowl_radius must be positive")
        if self.step_ifg is not None and not 0 <= self.step_ifg < self.n_ifgs:
            raise ValueError("step_ifg out of range")
        unknown = set(self.landcover_fractions) - set(LANDCOVER_CLASSES[:3])
        if unknown:
            raise ValueError(f"landcover_fractions accepts urban/forest/water, got {sorted(unknown)}")
        if sum(self.landcover_fractions.values()) >= 1:
            raise ValueError("landcover fractions must leave room for uncropped land")
        dens = {**_default_density(), **self.landcover_ps_density}
        if any(v < 0 for v in dens.values()) or set(dens) - set(LANDCOVER_CLASSES):
            raise ValueError("landcover_ps_density must map known classes to non-negative values")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SceneConfig fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("bowl_center", "baseline_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("bowl_center", "baseline_range"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


@dataclass(eq=False)
class SceneTruth:
    """Per-component phase planes (n_ifgs, H, W) and per-pixel truth."""

    defo: np.ndarray
    atm: np.ndarray
    orbit: np.ndarray
    sc_topo: np.ndarray
    sula: np.ndarray
    noise: np.ndarray
    delta_h_sc: np.ndarray
    delta_h_su: np.ndarray
    noise_std: np.ndarray
    landcover: np.ndarray
    ps_mask: PixelMask

    def total(self) -> np.ndarray:
        return self.defo + self.atm + self.orbit + self.sc_topo + self.sula + self.noise

    @property
    def sc_phase(self) -> np.ndarray:
        """Spatially correlated part of the phase (unwrapped)."""
        return self.defo + self.atm + self.orbit + self.sc_topo

    @property
    def su_phase(self) -> np.ndarray:
        return self.sula + self.noise

    def save(self, path_json, config: SceneConfig | None = None) -> Path:
        """Write the JSON sidecar plus an ``.npz`` holding the planes."""
        path_json = Path(path_json)
        npz = path_json.with_suffix(".npz")
        arrays = {name: getattr(self, name) for name in COMPONENTS}
        arrays.update(delta_h_sc=self.delta_h_sc, delta_h_su=self.delta_h_su,
                      noise_std=self.noise_std, landcover=self.landcover,
                      ps_mask=self.ps_mask.labels)
        _write_npz(npz, arrays)
        meta = {
            "planes": npz.name,
            "components": list(COMPONENTS),
            "landcover_classes": list(LANDCOVER_CLASSES),
            "ps_count": self.ps_mask.count,
            "shape": list(self.noise.shape),
            "config": config.to_dict() if config is not None else None,
        }
        path_json.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return npz

    @classmethod
    def load(cls, path) -> "SceneTruth":
        path = Path(path)
        if path.suffix == ".json":
            meta = json.loads(path.read_text())
            path = path.with_name(meta["planes"])
        with np.load(path) as z:
            kw = {name: z[name] for name in COMPONENTS}
            kw.update(delta_h_sc=z["delta_h_sc"], delta_h_su=z["delta_h_su"],
                      noise_std=z["noise_std"], landcover=z["landcover"])
            kw["ps_mask"] = PixelMask(z["ps_mask"], "truth")
        return cls(**kw)


def _write_npz(path, arrays: dict) -> None:
    """``np.savez`` equivalent with a fixed entry timestamp, so bytes depend only on the data."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def correlated_field(width: int, height: int, std: float, corr_len: float, seed) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to an exact sample std.

    ``corr_len`` is the smoothing kernel's standard deviation in pixels.
    """
    if corr_len < 1:
        raise ValueError("corr_len must be >= 1")
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return np.zeros((height, width))
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((height, width))
    smooth = gaussian_filter(white, sigma=corr_len, mode="reflect")
    smooth -= smooth.mean()
    s = smooth.std()
    if s == 0:
        return np.zeros((height, width))
    return smooth * (std / s)


def make_landcover(width: int, height: int, fractions: dict, seed) -> np.ndarray:
    """Blobby class map: urban and forest blobs from thresholded smooth fields, a river band."""
    rng = np.random.default_rng(seed)
    ss = np.random.SeedSequence(rng.integers(2**63))
    s_urban, s_forest = ss.spawn(2)
    lc = np.full((height, width), UNCROPPED, dtype=np.int8)
    corr = max(min(width, height) / 10.0, 1.0)
    n = width * height

    f_water = fractions.get("water", 0.0)
    if f_water > 0:
        cols = np.arange(width)
        centre = height * rng.uniform(0.3, 0.7)
        amp = height * 0.1
        freq = rng.uniform(1.0, 2.5) * 2 * math.pi / max(width, 1)
        line = centre + amp * np.sin(freq * cols + rng.uniform(0, 2 * math.pi))
        dist = np.abs(np.arange(height)[:, None] - line[None, :])
        k = int(round(f_water * n))
        if k:
            thr = np.sort(dist, axis=None)[k - 1]
            lc[dist <= thr] = WATER

    for cls_id, name, sub in ((URBAN, "urban", s_urban), (FOREST, "forest", s_forest)):
        k = int(round(fractions.get(name, 0.0) * n))
        if k == 0:
            continue
        f = correlated_field(width, height, 1.0, corr, sub)
        f = np.where(lc == UNCROPPED, f, -np.inf)
        free = int((lc == UNCROPPED).sum())
        k = min(k, free)
        if k == 0:
            continue
        order = np.argsort(f, axis=None, kind="stable")[::-1][:k]
        lc.flat[order] = cls_id
    return lc


def generate(config: SceneConfig) -> tuple[InterferogramStack, SceneTruth]:
    """Simulate a stack and its ground truth; a pure function of ``config``."""
    config.validate()
    w, h, n = config.width, config.height, config.n_ifgs
    streams = np.random.SeedSequence(config.seed).spawn(10)
    (s_base, s_land, s_ps, s_noise_std, s_atm, s_orb,
     s_dhsc, s_dhsu, s_noise, s_amp) = streams

    days = config.day_spacing * np.arange(1, n + 1, dtype=np.float64)
    lo, hi = config.baseline_range
    b_ifg = np.random.default_rng(s_base).uniform(lo, hi, size=n)
    bperp = np.broadcast_to(b_ifg[:, None, None], (n, h, w)).astype(np.float64)
    kplane = np.full((h, w), config.k_factor, dtype=np.float64)
    # use the float32-rounded geometry so the truth matches what the stack stores
    bperp = bperp.astype(np.float32).astype(np.float64)
    kplane = kplane.astype(np.float32).astype(np.float64)

    landcover = make_landcover(w, h, config.landcover_fractions, s_land)
    dens_map = {**_default_density(), **config.landcover_ps_density}
    dens = np.array([dens_map[c] for c in LANDCOVER_CLASSES])[landcover]
    mean_dens = dens.mean()
    if mean_dens > 0:
        p_ps = np.clip(config.ps_fraction * dens / mean_dens, 0.0, 1.0)
    else:
        p_ps = np.full((h, w), config.ps_fraction)
    is_ps = np.random.default_rng(s_ps).random((h, w)) < p_ps

    rng = np.random.default_rng(s_noise_std)
    u = rng.uniform(0.0, 1.0, size=(h, w))
    noise_std = np.where(
        is_ps,
        config.ps_noise_std * (0.3 + 0.7 * u),
        config.nonps_noise_std * (1.0 + 0.5 * u),
    )
    ps_labels = noise_std <= config.ps_noise_std

    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    if config.bowl_center is None:
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    else:
        cr, cc = config.bowl_center
    bowl = np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2.0 * config.bowl_radius ** 2))
    t = np.arange(1, n + 1, dtype=np.float64)
    defo = -config.velocity * t[:, None, None] * bowl[None]
    if config.step_ifg is not None and config.step_offset:
        defo[config.step_ifg:] += -config.step_offset * bowl

    atm_seeds = s_atm.spawn(n)
    atm = np.stack([
        correlated_field(w, h, config.atmosphere_std, config.atmosphere_corr_len, atm_seeds[i])
        for i in range(n)
    ])

    ramp = np.random.default_rng(s_orb).normal(0.0, config.orbit_ramp_std, size=(n, 2))
    yy = rows / max(h - 1, 1) - 0.5
    xx = cols / max(w - 1, 1) - 0.5
    orbit = ramp[:, 0, None, None] * xx[None] + ramp[:, 1, None, None] * yy[None]

    dh_sc = correlated_field(w, h, config.dem_error_sc_std, config.dem_error_sc_corr_len, s_dhsc)
    dh_su = np.random.default_rng(s_dhsu).normal(0.0, 1.0, size=(h, w)) * config.dem_error_su_std
    sc_topo = kplane[None] * bperp * dh_sc[None]
    sula = kplane[None] * bperp * dh_su[None]
    noise = np.random.default_rng(s_noise).standard_normal((n, h, w)) * noise_std[None]

    total = defo + atm + orbit + sc_topo + sula + noise
    phase32 = quantize_phase(total)
    # fold the float32 rounding into the noise so wrap(sum) reproduces the stored phase
    noise = noise + wrap(phase32.astype(np.float64) - total)

    rng = np.random.default_rng(s_amp)
    mu = rng.uniform(2.0, 4.0, size=(h, w))
    scale = rng.uniform(0.5, 1.5, size=(h, w))
    ps_amp = mu[None] * (1.0 + config.ps_amp_dispersion * rng.standard_normal((n, h, w)))
    nonps_amp = rng.rayleigh(1.0, size=(n, h, w)) * scale[None]
    amp = np.where(ps_labels[None], np.maximum(ps_amp, 0.0), nonps_amp)

    stack = InterferogramStack(phase32, amp, bperp, kplane, tuple(days))
    truth = SceneTruth(
        defo=defo, atm=atm, orbit=orbit, sc_topo=sc_topo, sula=sula, noise=noise,
        delta_h_sc=dh_sc, delta_h_su=dh_su, noise_std=noise_std,
        landcover=landcover, ps_mask=PixelMask(ps_labels, "truth"),
    )
    return stack, truth


def load_config(path) -> SceneConfig:
    """Read a JSON SceneConfig; JSON syntax errors propagate with their line number."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("scene config must be a JSON object")
    return SceneConfig.from_dict(data)
