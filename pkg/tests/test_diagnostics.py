import csv

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from thermsplat.diagnostics import (
    DiagnosticsError,
    dynamic_range_report,
    mean_intensity_drift,
    radial_power_spectrum,
    write_drift_csv,
    write_range_csv,
    write_spectrum_csv,
)
from thermsplat.imaging import Frame, Sequence


class TestDrift:
    def test_constant_sequence(self):
        seq = Sequence([Frame(np.full((4, 4), 0.5)) for _ in range(5)])
        series = mean_intensity_drift(seq)
        assert np.allclose(series.delta, 0.0)
        assert series.sigma == 0.0

    def test_known_values(self):
        seq = Sequence([Frame(np.full((4, 4), 0.1)), Frame(np.full((4, 4), 0.3))])
        series = mean_intensity_drift(seq)
        assert np.allclose(series.delta, [-0.5, 0.5])

    def test_zero_mean_rejected(self):
        seq = Sequence([Frame(np.zeros((4, 4)))])
        with pytest.raises(DiagnosticsError, match="undefined"):
            mean_intensity_drift(seq)


class TestSpectrum:
    def test_pure_cosine_peak(self):
        n = 64
        f0 = 6
        x = np.arange(n)
        img = 0.5 + 0.4 * np.cos(2 * np.pi * f0 * x / n)
        frame = Frame(np.tile(img, (n, 1)))
        sp = radial_power_spectrum(frame)
        assert sp.freqs[np.argmax(sp.power)] == f0

    def test_mean_subtraction_kills_dc(self):
        rng = np.random.default_rng(0)
        frame = Frame(0.5 + 0.1 * rng.standard_normal((32, 32)).clip(-4, 4) / 10)
        sp = radial_power_spectrum(frame, subtract_mean=True)
        assert sp.power[0] == pytest.approx(0.0, abs=1e-18)

    def test_blur_reduces_high_frequencies(self):
        rng = np.random.default_rng(1)
        noise = rng.random((64, 64))
        raw = Frame(noise)
        blurred = Frame(np.clip(gaussian_filter(noise, 1.5), 0, 1))
        sp_raw = radial_power_spectrum(raw)
        sp_blur = radial_power_spectrum(blurred)
        top = sp_raw.freqs >= sp_raw.freqs.max() * 0.75
        assert np.all(sp_blur.power[top] < sp_raw.power[top])

    def test_tiny_frame_rejected(self):
        with pytest.raises(DiagnosticsError):
            radial_power_spectrum(Frame(np.zeros((2, 2)) + 0.5))


class TestRangeReport:
    def test_two_level_frame(self):
        levels = np.where(np.arange(100).reshape(10, 10) < 50, 40, 200)
        rep = dynamic_range_report(Frame(levels / 255.0))
        assert rep.p01 == 40
        assert rep.p99 == 200
        assert rep.effective_range == pytest.approx(160 / 255)
        assert rep.entropy == pytest.approx(1.0)  # 50/50 split: one bit

    def test_constant_frame(self):
        rep = dynamic_range_report(Frame(np.full((8, 8), 100 / 255)))
        assert rep.effective_range == 0.0
        assert rep.entropy == 0.0


class TestCsvWriters:
    def test_drift_csv(self, tmp_path):
        seq = Sequence([Frame(np.full((4, 4), v)) for v in (0.2, 0.4)])
        path = tmp_path / "drift.csv"
        write_drift_csv(mean_intensity_drift(seq), path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["t", "mean", "delta"]
        assert len(rows) == 3
        assert float(rows[1][1]) == pytest.approx(0.2)

    def test_spectrum_csv(self, tmp_path):
        frame = Frame(np.random.default_rng(2).random((16, 16)))
        path = tmp_path / "sp.csv"
        write_spectrum_csv([radial_power_spectrum(frame)], path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["frame", "f", "power", "count"]
        assert all(r[0] == "0" for r in rows[1:])

    def test_range_csv(self, tmp_path):
        frame = Frame(np.random.default_rng(3).random((16, 16)))
        path = tmp_path / "rng.csv"
        write_range_csv([dynamic_range_report(frame)], path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["frame", "p01", "p99", "effective_range", "entropy"]
        assert len(rows) == 2
