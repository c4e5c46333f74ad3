"""Dataset-level radiometric and spectral diagnostics.

Per-frame relative mean-intensity change, radially averaged power spectra
and histogram/dynamic-range statistics, with CSV report writers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Frame, Sequence


class DiagnosticsError(Exception):
    pass


@dataclass(frozen=True)
class DriftSeries:
    """Relative change in mean intensity per frame and its spread."""

    delta: np.ndarray       # (N,) dimensionless
    means: np.ndarray       # (N,) frame means, for reporting
    sigma: float            # population standard deviation of delta


@dataclass(frozen=True)
class RadialSpectrum:
    freqs: np.ndarray       # radial bin centers, cycles/image
    power: np.ndarray       # mean power per annulus
    counts: np.ndarray      # samples per annulus


@dataclass(frozen=True)
class RangeReport:
    histogram: np.ndarray   # occupancy per native level
    p01: int                # percentile levels (smallest-level tie-break)
    p99: int
    effective_range: float  # (p99 - p01) normalized
    entropy: float          # Shannon entropy of the level histogram, bits


def mean_intensity_drift(seq: Sequence) -> DriftSeries:
    """delta[t] = (mu_t - mean(mu)) / mean(mu); sigma is its population std."""
    means = np.array([f.mean() for f in seq])
    mu_bar = means.mean()
    if mu_bar <= 0.0:
        raise DiagnosticsError("undefined relative drift: sequence mean is zero")
    delta = (means - mu_bar) / mu_bar
    return DriftSeries(delta, means, float(delta.std()))


def radial_power_spectrum(frame: Frame, subtract_mean: bool = True,
                          window: bool = False) -> RadialSpectrum:
    """Radially averaged power of the 2-D DFT.

    Power |F(u,v)|^2 is binned by the integer-rounded Euclidean radius of the
    frequency vector (cycles/image, measured from DC) and averaged by the
    sample count of each annulus; radii up to min(width, height)/2 are
    reported. The mean is subtracted by default so the DC spike does not
    dominate; an optional Hann taper is available.
    """
    if frame.width < 4 or frame.height < 4:
        raise DiagnosticsError("frame must be at least 4x4 for a spectrum")
    img = frame.pixels - frame.pixels.mean() if subtract_mean else frame.pixels
    if window:
        img = img * np.outer(np.hanning(frame.height), np.hanning(frame.width))
    power = np.abs(np.fft.fft2(img)) ** 2
    ky = np.fft.fftfreq(frame.height) * frame.height
    kx = np.fft.fftfreq(frame.width) * frame.width
    radius = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    bins = np.rint(radius).astype(np.int64)
    fmax = min(frame.width, frame.height) // 2
    keep = bins <= fmax
    counts = np.bincount(bins[keep], minlength=fmax + 1)
    sums = np.bincount(bins[keep], weights=power[keep], minlength=fmax + 1)
    valid = counts >= 1
    return RadialSpectrum(
        np.arange(fmax + 1, dtype=np.float64)[valid],
        sums[valid] / counts[valid],
        counts[valid],
    )


def dynamic_range_report(frame: Frame) -> RangeReport:
    """Level histogram, 1st/99th percentile levels, effective range, entropy."""
    bins = frame.max_level + 1
    hist = np.bincount(frame.levels().ravel(), minlength=bins)
    n = hist.sum()
    cum = np.cumsum(hist)
    p01 = int(np.searchsorted(cum, 0.01 * n, side="left"))
    p99 = int(np.searchsorted(cum, 0.99 * n, side="left"))
    probs = hist[hist > 0] / n
    entropy = float(-(probs * np.log2(probs)).sum())
    return RangeReport(hist, p01, p99, (p99 - p01) / (bins - 1), entropy)


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def write_drift_csv(series: DriftSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean", "delta"])
        for t, (mu, d) in enumerate(zip(series.means, series.delta)):
            w.writerow([t, f"{mu:.17g}", f"{d:.17g}"])


def write_spectrum_csv(spectra: list[RadialSpectrum], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "f", "power", "count"])
        for t, sp in enumerate(spectra):
            for f, p, c in zip(sp.freqs, sp.power, sp.counts):
                w.writerow([t, f"{f:g}", f"{p:.17g}", int(c)])


def write_range_csv(reports: list[RangeReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "p01", "p99", "effective_range", "entropy"])
        for t, r in enumerate(reports):
            w.writerow([t, r.p01, r.p99, f"{r.effective_range:.17g}",
                        f"{r.entropy:.17g}"])
