"""STIP reliability scores and mask comparison reports.

A neighbour ``y`` is a STIP of ``x`` when the coherence of the phase
difference series, ``|mean_i exp(j(phi_x - phi_y))|``, reaches the similarity
threshold. Counts run over a rows x cols window centred on ``x``, clipped at
the image border, excluding ``x`` itself.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from psselect.stack import InterferogramStack, PixelMask
from psselect.synth import LANDCOVER_CLASSES
from psselect.trainer import metrics


@dataclass(frozen=True)
class StipConfig:
    window: tuple = (5, 25)
    similarity_threshold: float = 0.8
    reliable_count: int = 35

    def __post_init__(self):
        rows, cols = self.window
        if rows < 1 or cols < 1 or rows % 2 == 0 or cols % 2 == 0:
            raise ValueError("window dimensions must be positive and odd")
        if not 0 <= self.similarity_threshold <= 1:
            raise ValueError("similarity_threshold must lie in [0, 1]")
        if not 0 <= self.reliable_count < self.area - 1:
            raise ValueError("reliable_count must be below window area - 1")

    @property
    def area(self) -> int:
        return self.window[0] * self.window[1]

    @property
    def n_bins(self) -> int:
        """Histogram bins 0 .. area - 1."""
        return self.area


@dataclass(frozen=True)
class StipResult:
    count: int
    window_pixels: int
    clipped: bool


def _phasors(stack) -> np.ndarray:
    phase = stack.phase if isinstance(stack, InterferogramStack) else np.asarray(stack)
    return np.exp(1j * phase.astype(np.float64))


def window_bounds(pixel, shape, cfg: StipConfig):
    """Clipped (r0, r1, c0, c1) half-open bounds and whether clipping happened."""
    r, c = pixel
    h, w = shape
    hr, hc = cfg.window[0] // 2, cfg.window[1] // 2
    r0, r1 = max(0, r - hr), min(h, r + hr + 1)
    c0, c1 = max(0, c - hc), min(w, c + hc + 1)
    clipped = (r1 - r0, c1 - c0) != tuple(cfg.window)
    return r0, r1, c0, c1, clipped


def stip_count(stack, pixel, cfg: StipConfig | None = None) -> StipResult:
    """STIP count of one pixel."""
    cfg = cfg or StipConfig()
    z = _phasors(stack)
    n, h, w = z.shape
    r, c = pixel
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"pixel {pixel} outside the {h}x{w} extent")
    r0, r1, c0, c1, clipped = window_bounds(pixel, (h, w), cfg)
    win = z[:, r0:r1, c0:c1]
    coh = np.abs((z[:, r, c][:, None, None] * np.conj(win)).sum(axis=0)) / n
    similar = coh >= cfg.similarity_threshold
    similar[r - r0, c - c0] = False
    return StipResult(int(similar.sum()), int(win.shape[1] * win.shape[2]) - 1, clipped)


def stip_counts(stack, cfg: StipConfig | None = None) -> np.ndarray:
    """STIP count for every pixel, one shifted comparison per window offset."""
    cfg = cfg or StipConfig()
    z = _phasors(stack)
    n, h, w = z.shape
    hr, hc = cfg.window[0] // 2, cfg.window[1] // 2
    counts = np.zeros((h, w), dtype=np.int64)
    for dr in range(-hr, hr + 1):
        for dc in range(-hc, hc + 1):
            if dr == 0 and dc == 0:
                continue
            # centre pixels whose neighbour at (dr, dc) lies inside the image
            ra, rb = max(0, -dr), min(h, h - dr)
            ca, cb = max(0, -dc), min(w, w - dc)
            if ra >= rb or ca >= cb:
                continue
            centre = z[:, ra:rb, ca:cb]
            other = z[:, ra + dr:rb + dr, ca + dc:cb + dc]
            coh = np.abs((centre * np.conj(other)).sum(axis=0)) / n
            counts[ra:rb, ca:cb] += coh >= cfg.similarity_threshold
    return counts


@dataclass
class ReliabilitySplit:
    reliable: list
    unreliable: list
    histogram: np.ndarray

    @property
    def reliable_fraction(self) -> float:
        total = len(self.reliable) + len(self.unreliable)
        return len(self.reliable) / total if total else 0.0


def reliability_split(stack, mask: PixelMask, cfg: StipConfig | None = None,
                      counts: np.ndarray | None = None) -> ReliabilitySplit:
    """Partition a mask's PS pixels by ``stip_count > reliable_count``."""
    cfg = cfg or StipConfig()
    labels = mask.labels if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    shape = stack.phase.shape[1:] if isinstance(stack, InterferogramStack) else np.shape(stack)[1:]
    if labels.shape != tuple(shape):
        raise ValueError("mask extent does not match the stack")
    if counts is None:
        counts = stip_counts(stack, cfg)
    pix = np.argwhere(labels)
    vals = counts[labels]
    good = vals > cfg.reliable_count
    hist = np.bincount(vals, minlength=cfg.n_bins)[:cfg.n_bins]
    return ReliabilitySplit(
        [tuple(int(v) for v in p) for p in pix[good]],
        [tuple(int(v) for v in p) for p in pix[~good]],
        hist,
    )


@dataclass
class ComparisonReport:
    names: list
    counts: dict
    pairwise: list = field(default_factory=list)  # (a, b, common, percent of a)
    landcover_share: dict = field(default_factory=dict)  # name -> {class: percent}
    truth_metrics: dict = field(default_factory=dict)
    stip_histograms: dict = field(default_factory=dict)
    reliable_counts: dict = field(default_factory=dict)

    def common(self, a: str, b: str) -> int:
        for x, y, n, _ in self.pairwise:
            if (x, y) == (a, b):
                return n
        raise KeyError((a, b))

    def summary(self) -> dict:
        return {
            "counts": self.counts,
            "pairwise": [{"a": a, "b": b, "common": n, "percent_of_a": p} for a, b, n, p in self.pairwise],
            "landcover_share": self.landcover_share,
            "truth_metrics": self.truth_metrics,
            "reliable_counts": self.reliable_counts,
        }

    def write(self, out_dir) -> list:
        """Write CSV tables and ``summary.json``; returns the written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []

        def table(name, header, rows):
            p = out / name
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            paths.append(p)

        table("counts.csv", ["mask", "ps_count"], [(k, v) for k, v in self.counts.items()])
        table("overlap.csv", ["mask_a", "mask_b", "common", "percent_of_a"],
              [(a, b, n, f"{p:.4f}") for a, b, n, p in self.pairwise])
        if self.landcover_share:
            classes = list(next(iter(self.landcover_share.values())))
            table("landcover.csv", ["mask"] + classes,
                  [[k] + [f"{v[c]:.4f}" for c in classes] for k, v in self.landcover_share.items()])
        if self.truth_metrics:
            table("truth_metrics.csv", ["mask", "accuracy", "precision", "recall", "f1"],
                  [(k, *(f"{m[f]:.6f}" for f in ("accuracy", "precision", "recall", "f1")))
                   for k, m in self.truth_metrics.items()])
        for k, hist in self.stip_histograms.items():
            table(f"stip_hist_{k}.csv", ["bin", "count"], [(i, int(c)) for i, c in enumerate(hist)])
        p = out / "summary.json"
        p.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        paths.append(p)
        return paths


def _unique_names(masks, names):
    if names is None:
        names = [m.source for m in masks]
    seen, out = {}, []
    for n in names:
        if n in seen:
            seen[n] += 1
            out.append(f"{n}_{seen[n]}")
        else:
            seen[n] = 0
            out.append(n)
    return out


def compare_masks(masks, landcover=None, truth=None, names=None, stack=None,
                  stip_cfg: StipConfig | None = None) -> ComparisonReport:
    """Counts, pairwise overlaps, landcover shares, truth metrics and STIP histograms.

    Overlap percentages are relative to the first mask of each ordered pair.
    Landcover shares are percentages of each mask's PS pixels (all zero for an
    empty mask). STIP histograms need ``stack``.
    """
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].labels.shape
    for m in masks:
        if m.labels.shape != shape:
            raise ValueError(f"mask extents differ: {m.labels.shape} vs {shape}")
    for extra, what in ((landcover, "landcover"), (truth, "truth")):
        if extra is not None:
            arr = extra.labels if isinstance(extra, PixelMask) else np.asarray(extra)
            if arr.shape != shape:
                raise ValueError(f"{what} extent {arr.shape} differs from masks {shape}")
    names = _unique_names(masks, names)
    labels = [m.labels for m in masks]
    rep = ComparisonReport(names, {n: int(l.sum()) for n, l in zip(names, labels)})
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if i == j:
                continue
            common = int(np.count_nonzero(labels[i] & labels[j]))
            total = rep.counts[a]
            rep.pairwise.append((a, b, common, 100.0 * common / total if total else 0.0))
    if landcover is not None:
        lc = np.asarray(landcover)
        for n, l in zip(names, labels):
            total = int(l.sum())
            rep.landcover_share[n] = {
                cls: (100.0 * int(np.count_nonzero(l & (lc == k))) / total if total else 0.0)
                for k, cls in enumerate(LANDCOVER_CLASSES)
            }
    if truth is not None:
        t = truth.labels if isinstance(truth, PixelMask) else np.asarray(truth, dtype=bool)
        for n, l in zip(names, labels):
            m = metrics(l, t)
            rep.truth_metrics[n] = {"accuracy": m.accuracy, "precision": m.precision,
                                    "recall": m.recall, "f1": m.f1}
    if stack is not None:
        cfg = stip_cfg or StipConfig()
        counts = stip_counts(stack, cfg)
        for n, m in zip(names, masks):
            split_ = reliability_split(stack, m, cfg, counts=counts)
            rep.stip_histograms[n] = split_.histogram
            rep.reliable_counts[n] = {"reliable": len(split_.reliable),
                                      "unreliable": len(split_.unreliable)}
    return rep
