"""Interferogram stack data model, phase wrapping, patching and file I/O.

File formats
------------
``IFGSTACK1``
    ASCII magic ``IFGSTACK1`` + newline, a one-line UTF-8 JSON header
    ``{width, height, n_ifgs, acquisition_days, pad_policy}`` + newline, then
    a little-endian float32 payload: all phase planes (ifg-major, row-major),
    all amplitude planes, all perpendicular-baseline planes, one K plane.
``PSMASK1``
    Same layout with header ``{width, height, source}`` and one byte (0/1)
    per pixel.

Probability maps are exported as 16-bit binary PGM (P5, maxval 65535).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

STACK_MAGIC = b"IFGSTACK1"
MASK_MAGIC = b"PSMASK1"
PAD_POLICIES = ("reflect", "zero")
MASK_SOURCES = ("truth", "classical", "cnn_iss", "clstm_iss")

# guards against absurd headers before allocating
_MAX_PIXELS = 1 << 31

TWO_PI = 2.0 * math.pi


class FormatError(ValueError):
    """Raised when a stack, mask or checkpoint file is malformed."""


def wrap(angle):
    """Wrap radians into the half-open interval (-pi, pi].

    Accepts scalars or arrays; ``-pi`` maps to ``+pi``.
    """
    a = np.asarray(angle, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("wrap() requires finite input")
    r = np.mod(a + math.pi, TWO_PI) - math.pi
    r = np.where(r <= -math.pi, math.pi, r)
    if r.ndim == 0:
        return float(r)
    return r


_F32_PI_BELOW = np.nextafter(np.float32(math.pi), np.float32(0.0))


def quantize_phase(phase) -> np.ndarray:
    """Wrap and round to float32 while keeping every value inside (-pi, pi].

    ``float32(pi)`` exceeds pi, so values that round onto it are pulled to
    the largest float32 below pi (and symmetrically at -pi).
    """
    q = np.asarray(wrap(phase), dtype=np.float64).astype(np.float32)
    q = np.where(q.astype(np.float64) > math.pi, _F32_PI_BELOW, q)
    q = np.where(q.astype(np.float64) <= -math.pi, -_F32_PI_BELOW, q)
    return q.astype(np.float32)


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class InterferogramStack:
    """Co-registered wrapped phase, amplitude and baseline planes.

    All per-ifg planes have shape ``(n_ifgs, height, width)``; ``k_factor`` is
    a single ``(height, width)`` plane of the phase-per-height-per-baseline
    proportionality (rad / m^2). Arrays are stored as read-only float32 so
    that a file round trip is bitwise exact.
    """

    phase: np.ndarray
    amplitude: np.ndarray
    perp_baseline: np.ndarray
    k_factor: np.ndarray
    acquisition_days: tuple = ()
    pad_policy: str = "reflect"

    def __post_init__(self):
        phase = _frozen(self.phase, np.float32)
        amp = _frozen(self.amplitude, np.float32)
        bperp = _frozen(self.perp_baseline, np.float32)
        k = _frozen(self.k_factor, np.float32)
        if phase.ndim != 3:
            raise ValueError(f"phase must be (n_ifgs, height, width), got {phase.shape}")
        n, h, w = phase.shape
        if n < 2:
            raise ValueError(f"a stack needs at least 2 interferograms, got {n}")
        if h < 1 or w < 1:
            raise ValueError("degenerate stack extent")
        for name, arr in (("amplitude", amp), ("perp_baseline", bperp)):
            if arr.shape != phase.shape:
                raise ValueError(f"{name} shape {arr.shape} != phase shape {phase.shape}")
        if k.shape != (h, w):
            raise ValueError(f"k_factor shape {k.shape} != {(h, w)}")
        p64 = phase.astype(np.float64)
        if not np.all(np.isfinite(p64)) or np.any(p64 <= -math.pi) or np.any(p64 > math.pi):
            raise ValueError("phase values must lie in (-pi, pi]")
        if not np.all(np.isfinite(amp)) or np.any(amp < 0):
            raise ValueError("amplitude must be finite and non-negative")
        if not (np.all(np.isfinite(bperp)) and np.all(np.isfinite(k))):
            raise ValueError("baseline and K planes must be finite")
        days = tuple(float(d) for d in self.acquisition_days) if len(self.acquisition_days) else tuple(float(i) for i in range(n))
        if len(days) != n:
            raise ValueError(f"acquisition_days has {len(days)} entries for {n} interferograms")
        if self.pad_policy not in PAD_POLICIES:
            raise ValueError(f"pad_policy must be one of {PAD_POLICIES}")
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "perp_baseline", bperp)
        object.__setattr__(self, "k_factor", k)
        object.__setattr__(self, "acquisition_days", days)

    @property
    def n_ifgs(self) -> int:
        return self.phase.shape[0]

    @property
    def height(self) -> int:
        return self.phase.shape[1]

    @property
    def width(self) -> int:
        return self.phase.shape[2]

    @property
    def shape(self) -> tuple:
        return self.phase.shape

    def crop(self, row: int, col: int, height: int, width: int) -> "InterferogramStack":
        sl = (slice(None), slice(row, row + height), slice(col, col + width))
        return InterferogramStack(
            self.phase[sl], self.amplitude[sl], self.perp_baseline[sl],
            self.k_factor[sl[1:]], self.acquisition_days, self.pad_policy,
        )

    def __eq__(self, other):
        if not isinstance(other, InterferogramStack):
            return NotImplemented
        return (
            self.acquisition_days == other.acquisition_days
            and self.pad_policy == other.pad_policy
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("phase", "amplitude", "perp_baseline", "k_factor")
            )
        )


@dataclass(frozen=True, eq=False)
class PixelMask:
    """Binary PS (True) / non-PS (False) label image with its provenance."""

    labels: np.ndarray
    source: str = "truth"

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("mask labels must be 2-D")
        if lab.dtype != bool:
            if not np.all(np.isin(lab, (0, 1))):
                raise ValueError("mask labels must be 0/1")
            lab = lab.astype(bool)
        if self.source not in MASK_SOURCES:
            raise ValueError(f"source must be one of {MASK_SOURCES}")
        object.__setattr__(self, "labels", _frozen(lab, bool))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def count(self) -> int:
        return int(self.labels.sum())

    def matches(self, stack: InterferogramStack) -> bool:
        return self.labels.shape == (stack.height, stack.width)

    def __eq__(self, other):
        if not isinstance(other, PixelMask):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class Patch:
    origin_row: int
    origin_col: int
    valid_rows: int
    valid_cols: int
    stack: InterferogramStack


@dataclass(frozen=True)
class PatchSet:
    """Square tiles covering a stack; edge tiles are padded up to patch_size."""

    patch_size: int
    patches: list
    height: int
    width: int
    pad_policy: str = "reflect"

    @property
    def grid(self) -> tuple:
        return (math.ceil(self.height / self.patch_size), math.ceil(self.width / self.patch_size))

    def __len__(self):
        return len(self.patches)


def _pad_to(a: np.ndarray, height: int, width: int, policy: str) -> np.ndarray:
    """Pad the trailing two axes of ``a`` at the bottom/right."""
    ph, pw = height - a.shape[-2], width - a.shape[-1]
    if ph == 0 and pw == 0:
        return a
    pads = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if policy == "reflect" else "constant"
    return np.pad(a, pads, mode=mode)


def chunk_array(a: np.ndarray, patch_size: int, pad_policy: str = "reflect") -> list:
    """Tile the trailing (rows, cols) axes of ``a``; returns (row, col, tile) triples."""
    h, w = a.shape[-2:]
    gh, gw = math.ceil(h / patch_size), math.ceil(w / patch_size)
    padded = _pad_to(a, gh * patch_size, gw * patch_size, pad_policy)
    out = []
    for i in range(gh):
        for j in range(gw):
            r0, c0 = i * patch_size, j * patch_size
            out.append((r0, c0, padded[..., r0:r0 + patch_size, c0:c0 + patch_size]))
    return out


def chunk(stack: InterferogramStack, patch_size: int = 100, pad_policy: str | None = None) -> PatchSet:
    """Split a stack into ``patch_size`` square sub-stacks in row-major order.

    Edge tiles are padded (reflect by default) and remember how many rows and
    columns are real so that :func:`stitch` can drop the padding.
    """
    if patch_size < 8:
        raise ValueError(f"patch_size must be >= 8, got {patch_size}")
    if patch_size > min(stack.width, stack.height):
        raise ValueError(
            f"patch_size {patch_size} exceeds the stack extent {stack.width}x{stack.height}"
        )
    policy = pad_policy or stack.pad_policy
    if policy not in PAD_POLICIES:
        raise ValueError(f"pad_policy must be one of {PAD_POLICIES}")
    planes = {
        name: chunk_array(getattr(stack, name), patch_size, policy)
        for name in ("phase", "amplitude", "perp_baseline", "k_factor")
    }
    patches = []
    for idx, (r0, c0, ph) in enumerate(planes["phase"]):
        sub = InterferogramStack(
            ph,
            planes["amplitude"][idx][2],
            planes["perp_baseline"][idx][2],
            planes["k_factor"][idx][2],
            stack.acquisition_days,
            policy,
        )
        patches.append(Patch(
            r0, c0,
            min(patch_size, stack.height - r0),
            min(patch_size, stack.width - c0),
            sub,
        ))
    return PatchSet(patch_size, patches, stack.height, stack.width, policy)


def stitch(predictions: Sequence[np.ndarray], patchset: PatchSet) -> np.ndarray:
    """Reassemble per-patch images into the full extent, discarding padding."""
    if len(predictions) != len(patchset.patches):
        raise ValueError(
            f"got {len(predictions)} predictions for {len(patchset.patches)} patches"
        )
    first = np.asarray(predictions[0]) if len(predictions) else np.zeros((0, 0))
    out = np.zeros((patchset.height, patchset.width), dtype=first.dtype)
    p = patchset.patch_size
    for pred, patch in zip(predictions, patchset.patches):
        pred = np.asarray(pred)
        if pred.shape != (p, p):
            raise ValueError(f"prediction shape {pred.shape} != {(p, p)}")
        r, c = patch.origin_row, patch.origin_col
        out[r:r + patch.valid_rows, c:c + patch.valid_cols] = pred[:patch.valid_rows, :patch.valid_cols]
    return out


# ----------------------------------------------------------------------------
# binary I/O

def _write_header(fh, magic: bytes, header: dict):
    fh.write(magic + b"\n")
    fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")


def _read_header(buf: bytes, magic: bytes) -> tuple[dict, int]:
    if not buf.startswith(magic + b"\n"):
        raise FormatError(f"bad magic: expected {magic.decode()}")
    start = len(magic) + 1
    end = buf.find(b"\n", start)
    if end < 0:
        raise FormatError("unterminated JSON header")
    try:
        header = json.loads(buf[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid JSON header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    return header, end + 1


def _dims(header: dict, *keys: str) -> list[int]:
    vals = []
    for k in keys:
        v = header.get(k)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise FormatError(f"header field {k!r} must be a positive integer, got {v!r}")
        vals.append(v)
    if math.prod(vals) > _MAX_PIXELS:
        raise FormatError("declared dimensions overflow the size limit")
    return vals


def write_stack(stack: InterferogramStack, path) -> None:
    header = {
        "width": stack.width,
        "height": stack.height,
        "n_ifgs": stack.n_ifgs,
        "acquisition_days": list(stack.acquisition_days),
        "pad_policy": stack.pad_policy,
    }
    le = np.dtype("<f4")
    with open(path, "wb") as fh:
        _write_header(fh, STACK_MAGIC, header)
        for arr in (stack.phase, stack.amplitude, stack.perp_baseline, stack.k_factor):
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def read_stack(path) -> InterferogramStack:
    buf = Path(path).read_bytes()
    header, off = _read_header(buf, STACK_MAGIC)
    w, h, n = _dims(header, "width", "height", "n_ifgs")
    if n < 2:
        raise FormatError("n_ifgs must be >= 2")
    expected = 4 * (3 * n * h * w + h * w)
    if len(buf) - off != expected:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float32)
    plane = n * h * w
    phase = data[:plane].reshape(n, h, w)
    amp = data[plane:2 * plane].reshape(n, h, w)
    bperp = data[2 * plane:3 * plane].reshape(n, h, w)
    k = data[3 * plane:].reshape(h, w)
    try:
        return InterferogramStack(
            phase, amp, bperp, k,
            tuple(header.get("acquisition_days", ())),
            header.get("pad_policy", "reflect"),
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def write_mask(mask: PixelMask, path) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, MASK_MAGIC, {"width": mask.width, "height": mask.height, "source": mask.source})
        fh.write(mask.labels.astype(np.uint8).tobytes())


def read_mask(path) -> PixelMask:
    buf = Path(path).read_bytes()
    header, off = _read_header(buf, MASK_MAGIC)
    w, h = _dims(header, "width", "height")
    if len(buf) - off != w * h:
        raise FormatError(f"mask payload is {len(buf) - off} bytes, expected {w * h}")
    raw = np.frombuffer(buf, dtype=np.uint8, offset=off)
    if np.any(raw > 1):
        raise FormatError("mask bytes must be 0 or 1")
    try:
        return PixelMask(raw.reshape(h, w).astype(bool), header.get("source", "truth"))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def write_pgm(prob: np.ndarray, path) -> None:
    """Write a probability image as 16-bit binary PGM (big-endian samples)."""
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probability map must be 2-D")
    vals = np.rint(np.clip(p, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = p.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 maxval-65535 PGM written by :func:`write_pgm` into [0, 1] floats."""
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise FormatError("not a 16-bit P5 PGM")
    w, h = (int(v) for v in parts[1].split())
    vals = np.frombuffer(parts[3], dtype=">u2")
    if vals.size != w * h:
        raise FormatError("truncated PGM payload")
    return vals.reshape(h, w).astype(np.float64) / 65535.0
