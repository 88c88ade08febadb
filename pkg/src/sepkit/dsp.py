"""Time-frequency transforms: STFT, inverse STFT, mask application, and the
exact adjoint of the inverse transform.

Conventions
-----------
- Spectrogram arrays are (n_frames, n_bins) with n_bins = n_fft // 2 + 1.
- Analysis and synthesis share one window.  The inverse divides the
  overlap-added synthesis by the per-sample sum of squared windows (floored
  at 1e-12), so ``istft(stft(x)) == x`` to rounding error for every
  window/hop whose overlap envelope stays bounded away from zero, whether
  or not the window is strictly constant-overlap-add.
- Center mode reflect-pads by n_fft // 2; the frame count is then exactly
  ``1 + len(x) // hop``.
- All transforms are pure functions of their inputs and safe to call
  concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Waveform",
    "StftConfig",
    "ComplexSpectrogram",
    "MagPhase",
    "Mask",
    "DESK_STFT",
    "PAPER_STFT",
    "window_array",
    "overlap_envelope",
    "cola_deviation",
    "stft",
    "magphase",
    "istft",
    "apply_mask_reconstruct",
    "istft_adjoint",
]

ENVELOPE_FLOOR = 1e-12

_WINDOW_KINDS = ("hann", "rect")


@dataclass
class Waveform:
    """Mono signal: float64 samples (nominal range [-1, 1]) plus sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a nonempty 1-D sample sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def energy(self) -> float:
        # dot rather than sum-of-squares so colinear metric cases (where the
        # same product is formed twice) cancel exactly in floating point
        return float(np.dot(self.samples, self.samples))


@lru_cache(maxsize=None)
def _window_cached(kind: str, n_fft: int) -> np.ndarray:
    if kind == "hann":
        # periodic form, so shifted copies tile without a repeated endpoint
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    elif kind == "rect":
        w = np.ones(n_fft)
    else:
        raise ValueError(f"unknown window kind {kind!r}; expected one of {_WINDOW_KINDS}")
    w.setflags(write=False)
    return w


def window_array(kind: str, n_fft: int) -> np.ndarray:
    """Return the analysis window (read-only) for the given kind and length."""
    return _window_cached(kind, n_fft)


def _interior_envelope(window: str, n_fft: int, hop: int) -> np.ndarray:
    """Squared-window overlap-add sum over one hop period of the interior."""
    w2 = window_array(window, n_fft) ** 2
    n_frames = 2 * (n_fft // hop + 2)
    total = (n_frames - 1) * hop + n_fft
    acc = np.zeros(total)
    for t in range(n_frames):
        acc[t * hop : t * hop + n_fft] += w2
    return acc[n_fft : n_fft + hop]


@dataclass(frozen=True)
class StftConfig:
    """Transform geometry.  n_fft must be a power of two; 0 < hop <= n_fft.

    Construction fails if the squared-window overlap envelope comes within
    ENVELOPE_FLOOR of zero anywhere in the fully-overlapped region, since the
    inverse transform would then be unable to undo the analysis windowing.
    """

    n_fft: int = 256
    hop: int = 64
    window: str = "hann"
    center_padding: bool = True

    def __post_init__(self):
        n_fft, hop = self.n_fft, self.hop
        if n_fft < 4 or (n_fft & (n_fft - 1)) != 0:
            raise ValueError(f"n_fft must be a power of two >= 4, got {n_fft}")
        if not (0 < hop <= n_fft):
            raise ValueError(f"hop must satisfy 0 < hop <= n_fft, got {hop}")
        if self.window not in _WINDOW_KINDS:
            raise ValueError(f"unknown window kind {self.window!r}; expected one of {_WINDOW_KINDS}")
        interior = _interior_envelope(self.window, n_fft, hop)
        if interior.min() < 1e-10:
            raise ValueError(
                f"window {self.window!r} at hop {hop} is not invertible: the "
                f"overlap-add envelope reaches {interior.min():.3e}"
            )

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def pad(self) -> int:
        return self.n_fft // 2 if self.center_padding else 0

    def frame_count(self, n_samples: int) -> int:
        if self.center_padding:
            return 1 + n_samples // self.hop
        if n_samples < self.n_fft:
            raise ValueError(
                f"signal of {n_samples} samples is shorter than n_fft={self.n_fft} "
                "(required when center_padding is off)"
            )
        return 1 + (n_samples - self.n_fft) // self.hop

    def min_length(self) -> int:
        # reflect padding needs at least pad + 1 samples
        return self.pad + 1 if self.center_padding else self.n_fft


DESK_STFT = StftConfig(n_fft=256, hop=64)
PAPER_STFT = StftConfig(n_fft=1024, hop=320)


def cola_deviation(cfg: StftConfig) -> float:
    """Relative peak-to-peak variation of the interior squared-window envelope.

    Zero (to rounding) means the window/hop pair is strictly constant
    overlap-add; the inverse transform is exact either way because it divides
    by the actual per-sample envelope.
    """
    interior = _interior_envelope(cfg.window, cfg.n_fft, cfg.hop)
    return float((interior.max() - interior.min()) / interior.mean())


@dataclass
class ComplexSpectrogram:
    """Complex STFT values of shape (n_frames, n_bins)."""

    values: np.ndarray
    config: StftConfig
    source_length: int
    sample_rate: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError("spectrogram values must be 2-D (n_frames, n_bins)")
        if self.values.shape[1] != self.config.n_bins:
            raise ValueError(
                f"spectrogram has {self.values.shape[1]} bins but config expects {self.config.n_bins}"
            )

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class MagPhase:
    """Magnitude/phase split of a complex spectrogram.

    magnitude >= 0 elementwise; phase in (-pi, pi] with arg(0) := 0, so the
    product magnitude * exp(1j * phase) reproduces the complex values.
    """

    magnitude: np.ndarray
    phase: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes differ")
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be nonnegative")


@dataclass
class Mask:
    """Real (n_frames, n_bins) gain field with entries in [0, 1].

    Masks predicted by the separator are strictly inside (0, 1); manually
    built masks (band indicators, all-ones) may sit on the boundary.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mask must be 2-D (n_frames, n_bins)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mask contains non-finite entries")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("mask entries must lie in [0, 1]")


def _frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.frame_count(x.size)
    if cfg.center_padding:
        if x.size < cfg.pad + 1:
            raise ValueError(
                f"signal of {x.size} samples is too short for center padding "
                f"(need at least {cfg.pad + 1})"
            )
        x = np.pad(x, cfg.pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop]
    return frames[:n_frames]


def stft(x: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Short-time Fourier transform of a waveform.

    Deterministic and linear in the input samples.
    """
    frames = _frame_signal(x.samples, cfg)
    w = window_array(cfg.window, cfg.n_fft)
    values = np.fft.rfft(frames * w, axis=1)
    return ComplexSpectrogram(values, cfg, len(x), x.sample_rate)


def magphase(spec: ComplexSpectrogram) -> MagPhase:
    """Split a complex spectrogram into magnitude and phase (arg(0) := 0)."""
    return MagPhase(np.abs(spec.values), np.angle(spec.values), spec.sample_rate)


@lru_cache(maxsize=64)
def _ola_envelope(window: str, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    w2 = window_array(window, n_fft) ** 2
    total = (n_frames - 1) * hop + n_fft
    acc = np.zeros(total)
    for t in range(n_frames):
        acc[t * hop : t * hop + n_fft] += w2
    env = np.maximum(acc, ENVELOPE_FLOOR)
    env.setflags(write=False)
    return env


def overlap_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Per-sample sum of squared shifted windows (floored at ENVELOPE_FLOOR)."""
    return _ola_envelope(cfg.window, cfg.n_fft, cfg.hop, n_frames)


def _overlap_add(frames: np.ndarray, hop: int, total: int) -> np.ndarray:
    n_frames, n_fft = frames.shape
    acc = np.zeros(total)
    if n_fft % hop == 0:
        # frames t, t + n_fft/hop, ... are exactly adjacent, so each residue
        # class overlap-adds as one contiguous ravel
        step = n_fft // hop
        for k in range(min(step, n_frames)):
            sub = frames[k::step]
            start = k * hop
            acc[start : start + sub.size] += sub.ravel()
    else:
        idx = (np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]).ravel()
        np.add.at(acc, idx, frames.ravel())
    return acc


def _check_crop(cfg: StftConfig, out_length: int, total: int) -> None:
    if cfg.pad + out_length > total:
        raise ValueError(
            f"out_length {out_length} is incompatible with hop={cfg.hop}, "
            f"n_fft={cfg.n_fft}: the final samples are not covered by any frame"
        )


def istft(spec: ComplexSpectrogram, cfg: StftConfig, out_length: int) -> Waveform:
    """Inverse STFT by normalized weighted overlap-add, cropped to out_length.

    Exact left inverse of :func:`stft` (relative L2 error at rounding level)
    whenever out_length matches the original signal length.
    """
    if spec.config != cfg:
        raise ValueError("spectrogram was produced under a different StftConfig")
    values = spec.values
    expected = cfg.frame_count(out_length)
    if values.shape[0] != expected:
        raise ValueError(
            f"spectrogram has {values.shape[0]} frames but out_length {out_length} "
            f"requires {expected}"
        )
    w = window_array(cfg.window, cfg.n_fft)
    frames = np.fft.irfft(values, cfg.n_fft, axis=1) * w
    n_frames = values.shape[0]
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    _check_crop(cfg, out_length, total)
    acc = _overlap_add(frames, cfg.hop, total)
    y = acc / overlap_envelope(cfg, n_frames)
    return Waveform(y[cfg.pad : cfg.pad + out_length], spec.sample_rate)


def apply_mask_reconstruct(mp: MagPhase, mask: Mask, cfg: StftConfig, out_length: int) -> Waveform:
    """Reconstruct a waveform from mask * magnitude with the mixture phase."""
    if mask.values.shape != mp.magnitude.shape:
        raise ValueError(
            f"mask shape {mask.values.shape} does not match spectrogram shape {mp.magnitude.shape}"
        )
    values = mask.values * mp.magnitude * np.exp(1j * mp.phase)
    spec = ComplexSpectrogram(values, cfg, out_length, mp.sample_rate)
    return istft(spec, cfg, out_length)


def istft_adjoint(g: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Adjoint of the linear map spectrogram -> istft(spectrogram, cfg, len(g)).

    Uses the real inner product sum(Re u Re v + Im u Im v) on spectrograms and
    the plain dot product on waveforms, so for all S and g:
    dot(istft(S), g) == innerprod(S, istft_adjoint(g)).
    """
    out_length = len(g)
    n_frames = cfg.frame_count(out_length)
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    _check_crop(cfg, out_length, total)
    u = np.zeros(total)
    u[cfg.pad : cfg.pad + out_length] = g.samples
    u /= overlap_envelope(cfg, n_frames)
    w = window_array(cfg.window, cfg.n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(u, cfg.n_fft)[:: cfg.hop][:n_frames] * w
    values = np.fft.rfft(frames, axis=1)
    # adjoint of irfft under the real inner product: interior bins appear
    # twice in the hermitian extension, DC and Nyquist once
    scale = np.full(cfg.n_bins, 2.0 / cfg.n_fft)
    scale[0] = 1.0 / cfg.n_fft
    scale[-1] = 1.0 / cfg.n_fft
    values *= scale
    return ComplexSpectrogram(values, cfg, out_length, g.sample_rate)
