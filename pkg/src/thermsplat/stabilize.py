"""Photometric stabilization and contrast enhancement for thermal sequences.

Each frame is aligned to an exponentially averaged reference CDF, then
contrast-enhanced with brightness-preserving bi-histogram equalization.
Both steps are realized as monotone LUTs whose composition is recorded per
frame, so every output frame can be mapped back to the original radiometric
scale up to one quantization level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import (
    Cdf,
    Frame,
    ImagingError,
    MonotoneLut,
    Sequence,
    apply_lut,
    compose_luts,
    compute_cdf,
    invert_lut,
)


@dataclass(frozen=True)
class ReferenceState:
    """Running reference CDF with EMA smoothing coefficient alpha."""

    f_star: Cdf
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class StabilizeConfig:
    """Knobs for sequential alignment and equalization.

    The defaults favor a near-static reference: with faster adaptation the
    reference tracks slow sinusoidal drift and alignment stops removing it.
    """

    alpha: float = 0.01     # EMA coefficient for the reference CDF
    beta: float = 0.9       # blend weight between identity and alignment
    warmup: int = 5         # frames averaged to seed the reference

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")


@dataclass(frozen=True)
class FrameTransform:
    """Per-frame stabilization record: alignment LUT, equalization LUT and
    their composition, plus the histogram split level."""

    align_lut: MonotoneLut
    bbhe_lut: MonotoneLut
    composed: MonotoneLut
    split_level: int


def update_reference(state: ReferenceState, f_t: Cdf) -> ReferenceState:
    """Bin-wise EMA: f_star <- (1 - alpha) * f_star + alpha * f_t."""
    if state.f_star.bins != f_t.bins:
        raise ImagingError(
            f"cdf bin mismatch: reference {state.f_star.bins} vs frame {f_t.bins}"
        )
    a = state.alpha
    return ReferenceState(Cdf((1.0 - a) * state.f_star.values + a * f_t.values), a)


def align_frame(
    frame: Frame, state: ReferenceState, beta: float
) -> tuple[Frame, MonotoneLut]:
    """Blend identity with CDF matching against the reference.

    The LUT realizes x -> (1 - beta) * x + beta * Fstar^-1(F_t(x)), where
    Fstar^-1 is the smallest-preimage pseudo-inverse of the reference CDF.
    """
    bins = frame.max_level + 1
    if state.f_star.bins != bins:
        raise ImagingError(
            f"reference has {state.f_star.bins} bins, frame needs {bins}"
        )
    f_t = compute_cdf(frame)
    matched = np.searchsorted(state.f_star.values, f_t.values, side="left")
    matched = np.minimum(matched, bins - 1) / (bins - 1)
    grid = np.arange(bins, dtype=np.float64) / (bins - 1)
    lut = MonotoneLut((1.0 - beta) * grid + beta * matched)
    return apply_lut(frame, lut), lut


def _midrise_equalize(counts: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Equalize one sub-histogram onto [lo, hi] via the mid-rise CDF.

    Uses (F(i) + F(i-1)) / 2, whose expectation under the sub-histogram is
    exactly 1/2, so each subrange keeps its mass centered.
    """
    total = counts.sum()
    cum = np.cumsum(counts, dtype=np.float64) / total
    mid = cum - counts / (2.0 * total)
    return lo + (hi - lo) * mid


def bbhe(frame: Frame) -> tuple[Frame, MonotoneLut]:
    """Bi-histogram equalization split at the quantized mean level.

    Levels [0, split] are equalized onto [0, split/(bins-1)], levels above
    onto ((split+1)/(bins-1), 1]. A subrange that is empty or occupies a
    single level maps identically.
    """
    bins = frame.max_level + 1
    top = bins - 1
    levels = frame.levels()
    counts = np.bincount(levels.ravel(), minlength=bins).astype(np.float64)
    split = int(np.floor(levels.mean() + 0.5))

    grid = np.arange(bins, dtype=np.float64) / top
    lut_map = grid.copy()

    lower = counts[: split + 1]
    if np.count_nonzero(lower) > 1:
        lut_map[: split + 1] = _midrise_equalize(lower, 0.0, split / top)
    upper = counts[split + 1 :]
    if np.count_nonzero(upper) > 1:
        lut_map[split + 1 :] = _midrise_equalize(upper, (split + 1) / top, 1.0)

    lut = MonotoneLut(lut_map)
    return apply_lut(frame, lut), lut


def stabilize_sequence(
    seq: Sequence, cfg: StabilizeConfig
) -> tuple[Sequence, list[FrameTransform]]:
    """Sequentially align and equalize every frame of a sequence.

    The reference CDF is seeded with the mean CDF of the first `warmup`
    frames, then per frame: EMA update, alignment, BBHE. Strictly sequential
    in t; one FrameTransform is emitted per frame.
    """
    warmup = min(cfg.warmup, len(seq))
    seed = np.mean([compute_cdf(f).values for f in seq.frames[:warmup]], axis=0)
    state = ReferenceState(Cdf(seed), cfg.alpha)

    out_frames = []
    transforms = []
    for frame in seq:
        state = update_reference(state, compute_cdf(frame))
        aligned, align_lut = align_frame(frame, state, cfg.beta)
        enhanced, bbhe_lut = bbhe(aligned)
        split = int(np.floor(aligned.levels().mean() + 0.5))
        composed = compose_luts(align_lut, bbhe_lut)
        out_frames.append(enhanced)
        transforms.append(FrameTransform(align_lut, bbhe_lut, composed, split))
    return Sequence(out_frames), transforms


def invert_frame(frame: Frame, tf: FrameTransform) -> Frame:
    """Map a stabilized frame back through the composed LUT's pseudo-inverse."""
    return apply_lut(frame, invert_lut(tf.composed))
