"""Signal-to-distortion metrics in dB: SDR, SI-SDR, their improvement
variants, silence-purity metrics, and remix-based unsupervised metrics.

Epsilon convention (shared by every metric here): each log-ratio is computed
as 10*log10((num + eps) / (den + eps)) with

    eps = 1e-12 * max(num, 1e-12),

where ``num`` is the energy of the reference-side signal of that ratio (the
reference itself for SDR, the projection for the scale-invariant variants).
This keeps every output finite, puts identity cases at the ~120 dB ceiling
instead of +inf, and leaves the scale-invariant metrics exactly
scale-invariant because eps scales with the projection energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import Waveform

__all__ = [
    "MetricPair",
    "sdr",
    "sisdr",
    "sdri",
    "sisdri",
    "silence_sdr",
    "silence_sisdr",
    "re_sdr",
    "re_sisdr",
]

_EPS_REL = 1e-12


@dataclass(frozen=True)
class MetricPair:
    """An SDR-style and an SI-SDR-style score computed from the same pair."""

    sdr_like: float
    sisdr_like: float


def _eps(reference_energy: float) -> float:
    return _EPS_REL * max(reference_energy, _EPS_REL)


def _ratio_db(num_energy: float, den_energy: float) -> float:
    eps = _eps(num_energy)
    return 10.0 * math.log10((num_energy + eps) / (den_energy + eps))


def _check_pair(est: Waveform, ref: Waveform) -> None:
    if len(est) != len(ref):
        raise ValueError(f"length mismatch: estimate has {len(est)} samples, reference {len(ref)}")
    if est.sample_rate != ref.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: estimate at {est.sample_rate} Hz, reference at {ref.sample_rate} Hz"
        )


def sdr(est: Waveform, ref: Waveform) -> float:
    """Signal-to-distortion ratio of an estimate against a reference, in dB."""
    _check_pair(est, ref)
    ref_energy = ref.energy
    err = ref.samples - est.samples
    return _ratio_db(ref_energy, float(np.dot(err, err)))


def sisdr(est: Waveform, ref: Waveform) -> float:
    """Scale-invariant SDR: the estimate is first projected onto the reference.

    Rejects zero-energy references; score silence predictions with
    :func:`silence_sdr` / :func:`silence_sisdr` instead.
    """
    _check_pair(est, ref)
    ref_energy = ref.energy
    if ref_energy <= 0.0:
        raise ValueError("zero-energy reference: use the silence metrics for absent targets")
    alpha = float(np.dot(est.samples, ref.samples)) / ref_energy
    target = alpha * ref.samples
    residual = est.samples - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(residual, residual)))


def sdri(est: Waveform, ref: Waveform, mixture: Waveform) -> float:
    """SDR improvement of the estimate over using the raw mixture."""
    return sdr(est, ref) - sdr(mixture, ref)


def sisdri(est: Waveform, ref: Waveform, mixture: Waveform) -> float:
    """SI-SDR improvement of the estimate over using the raw mixture."""
    return sisdr(est, ref) - sisdr(mixture, ref)


def silence_sdr(pred_silent: Waveform, mixture: Waveform) -> float:
    """Mixture-to-leakage energy ratio for a prediction that should be silent.

    Higher is better; a perfectly silent prediction hits the epsilon ceiling.
    """
    _check_pair(pred_silent, mixture)
    mix_energy = mixture.energy
    if mix_energy <= 0.0:
        raise ValueError("zero-energy mixture")
    return _ratio_db(mix_energy, pred_silent.energy)


def silence_sisdr(pred_silent: Waveform, mixture: Waveform) -> float:
    """Scale-invariant silence purity: the residual mixture - prediction is
    projected onto the mixture and the off-projection part is penalized."""
    _check_pair(pred_silent, mixture)
    mix_energy = mixture.energy
    if mix_energy <= 0.0:
        raise ValueError("zero-energy mixture")
    kept = mixture.samples - pred_silent.samples
    alpha = float(np.dot(kept, mixture.samples)) / mix_energy
    target = alpha * mixture.samples
    residual = kept - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(residual, residual)))


def _remix(tracks: list[Waveform], original: Waveform) -> Waveform:
    if not tracks:
        raise ValueError("empty track list")
    for t in tracks:
        _check_pair(t, original)
    summed = np.sum(np.stack([t.samples for t in tracks]), axis=0)
    return Waveform(summed, original.sample_rate)


def re_sdr(tracks: list[Waveform], original: Waveform) -> float:
    """SDR between the unweighted sum of separated tracks and the original.

    An unsupervised quality signal: a mutually exclusive, collectively
    exhaustive separation remixes back to the original exactly.
    """
    return sdr(_remix(tracks, original), original)


def re_sisdr(tracks: list[Waveform], original: Waveform) -> float:
    """Scale-invariant counterpart of :func:`re_sdr`."""
    return sisdr(_remix(tracks, original), original)
