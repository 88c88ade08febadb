"""Deterministic synthetic corpus: labeled single-source tracks, mixtures
with controlled SNR, and WAV/manifest persistence.

Six generator kinds cover tonal, noisy, and transient content.  Every
generator is a pure function of (class spec, seed): regenerating with the
same arguments is bit-exact, and at least 95% of each track's spectral
energy lies inside the class's declared band.

Directory layout written by :func:`synthesize_corpus`:

    <corpus_dir>/
      clips/    mixture WAVs (train / val / eval3 / natural splits)
      stems/    clean per-stem WAVs, including the single-source tracks
      singles.jsonl train.jsonl val.jsonl eval3.jsonl
      natural.jsonl              natural-style clips, stems omitted
      natural_stems_audit.jsonl  same clips with stem paths and gains;
                                 read only by audits and tests, never by
                                 the training or engine paths
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform

__all__ = [
    "SourceClass",
    "CleanTrack",
    "MixtureClip",
    "ManifestRecord",
    "GENERATOR_KINDS",
    "desk_classes",
    "disjoint_classes",
    "validate_class_set",
    "generate_source",
    "build_mixture",
    "write_wav",
    "read_wav",
    "write_manifest",
    "read_manifest",
    "synthesize_corpus",
]

GENERATOR_KINDS = ("tone", "harmonic", "chirp", "band_noise", "am_noise", "click_train")


@dataclass(frozen=True)
class SourceClass:
    """A sound-event category: a generator kind plus its parameter ranges.

    ``band_hz`` is the declared spectral support (lo, hi); ``params`` holds
    kind-specific numeric ranges (fundamental range, AM rate, click rate...).
    """

    id: int
    name: str
    kind: str
    band_hz: tuple[float, float]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        lo, hi = self.band_hz
        if not (0.0 <= lo < hi):
            raise ValueError(f"invalid band {self.band_hz} for class {self.name!r}")


@dataclass
class CleanTrack:
    """A single-source waveform with its label and generation provenance."""

    waveform: Waveform
    label: int
    seed: int
    params: dict = field(default_factory=dict)


@dataclass
class MixtureClip:
    """A multi-label mixture.  When stems are retained,
    ``waveform == sum(gains[i] * stems[i].waveform.samples)`` exactly
    (summed in stem order)."""

    waveform: Waveform
    labels: tuple[int, ...]
    stems: list[CleanTrack] | None = None
    gains: list[float] | None = None
    clip_id: str | None = None


def validate_class_set(classes: list[SourceClass]) -> None:
    """Reject duplicate ids and nested bands.

    Bands may overlap pairwise, but no band may contain another: nested
    bands would make one class inseparable from the other by any mask.
    """
    ids = [c.id for c in classes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate class ids")
    for a in classes:
        for b in classes:
            if a.id == b.id:
                continue
            if a.band_hz[0] <= b.band_hz[0] and b.band_hz[1] <= a.band_hz[1]:
                raise ValueError(
                    f"band of class {b.name!r} {b.band_hz} is nested inside "
                    f"class {a.name!r} {a.band_hz}"
                )


def desk_classes() -> list[SourceClass]:
    """Six classes with chained, never-nested band overlaps, 8 kHz-safe.

    The four noise-like classes overlap their neighbors by several hundred
    Hz of spectrally dense content, so a sizable share of random mixtures is
    genuinely contested; the tonal and transient classes are easier.
    """
    classes = [
        SourceClass(0, "low_noise", "band_noise", (300.0, 1400.0), {}),
        SourceClass(1, "mid_am", "am_noise", (900.0, 2100.0),
                    {"am_rate": (2.0, 8.0), "am_depth": (0.4, 0.7)}),
        SourceClass(2, "high_noise", "band_noise", (1600.0, 2900.0), {}),
        SourceClass(3, "top_am", "am_noise", (2400.0, 3600.0),
                    {"am_rate": (2.0, 8.0), "am_depth": (0.4, 0.7)}),
        SourceClass(4, "tone", "tone", (150.0, 900.0), {"freq": (180.0, 860.0)}),
        SourceClass(5, "click_train", "click_train", (3100.0, 3950.0),
                    {"rate": (3.0, 8.0), "burst_ms": (6.0, 10.0)}),
    ]
    validate_class_set(classes)
    return classes


def disjoint_classes() -> list[SourceClass]:
    """Three spectrally dense classes with mutually disjoint bands.

    Dense (noise-like) content fills the whole band whenever the class is
    present, so a plain band mask separates the mixture and per-bin energy
    is a reliable presence cue.
    """
    classes = [
        SourceClass(0, "low_noise", "band_noise", (250.0, 950.0), {}),
        SourceClass(1, "mid_am", "am_noise", (1450.0, 2150.0),
                    {"am_rate": (2.0, 6.0), "am_depth": (0.4, 0.6)}),
        SourceClass(2, "high_noise", "band_noise", (2650.0, 3350.0), {}),
    ]
    validate_class_set(classes)
    return classes


def _uniform(rng: np.random.Generator, lohi: tuple[float, float]) -> float:
    lo, hi = lohi
    return float(rng.uniform(lo, hi))


def _fade(x: np.ndarray, sr: int, ms: float = 5.0) -> np.ndarray:
    n = min(int(sr * ms / 1000.0), x.size // 2)
    if n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n)
        x[:n] *= ramp
        x[-n:] *= ramp[::-1]
    return x


def _brickwall(x: np.ndarray, sr: int, band: tuple[float, float]) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / sr)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    return np.fft.irfft(spec, x.size)


def _gen_tone(rng, n, sr, cls):
    f0 = _uniform(rng, cls.params.get("freq", cls.band_hz))
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n) / sr
    x = np.sin(2 * np.pi * f0 * t + phase)
    return _fade(x, sr), {"freq": f0}


def _gen_harmonic(rng, n, sr, cls):
    lo, hi = cls.band_hz
    f0 = _uniform(rng, cls.params.get("fundamental", (lo, hi / 3.0)))
    k_lo, k_hi = cls.params.get("n_partials", (3, 3))
    n_partials = int(rng.integers(int(k_lo), int(k_hi) + 1))
    decay = _uniform(rng, cls.params.get("decay", (0.5, 0.8)))
    t = np.arange(n) / sr
    x = np.zeros(n)
    used = []
    for k in range(1, n_partials + 1):
        fk = k * f0
        if fk > hi:
            break
        x += decay ** (k - 1) * np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
        used.append(fk)
    return _fade(x, sr), {"fundamental": f0, "partials": used, "decay": decay}


def _gen_chirp(rng, n, sr, cls):
    lo, hi = cls.params.get("sweep", cls.band_hz)
    f_a = rng.uniform(lo, hi)
    f_b = rng.uniform(lo, hi)
    t = np.arange(n) / sr
    dur = n / sr
    # linear sweep: phase is the integral of the instantaneous frequency
    phase = 2 * np.pi * (f_a * t + (f_b - f_a) * t * t / (2 * dur)) + rng.uniform(0, 2 * np.pi)
    return _fade(np.sin(phase), sr), {"f_start": float(f_a), "f_end": float(f_b)}


def _gen_band_noise(rng, n, sr, cls):
    x = _brickwall(rng.standard_normal(n), sr, cls.band_hz)
    # fade after filtering: full-amplitude clip edges would otherwise splash
    # broadband energy into analysis frames that straddle them
    return _fade(x, sr, ms=30.0), {}


def _gen_am_noise(rng, n, sr, cls):
    rate = _uniform(rng, cls.params.get("am_rate", (2.0, 8.0)))
    depth = _uniform(rng, cls.params.get("am_depth", (0.6, 0.9)))
    t = np.arange(n) / sr
    envelope = 1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    x = rng.standard_normal(n) * envelope
    # modulation sidebands can spill past the band edges; filter afterwards
    x = _brickwall(x, sr, cls.band_hz)
    return _fade(x, sr, ms=30.0), {"am_rate": rate, "am_depth": depth}


def _gen_click_train(rng, n, sr, cls):
    rate = _uniform(rng, cls.params.get("rate", (3.0, 8.0)))
    burst_ms = _uniform(rng, cls.params.get("burst_ms", (6.0, 10.0)))
    fc = 0.5 * (cls.band_hz[0] + cls.band_hz[1])
    period = sr / rate
    offset = rng.uniform(0, period)
    burst_half = max(int(sr * burst_ms / 2000.0), 2)
    k = np.arange(-burst_half, burst_half + 1)
    envelope = 0.5 + 0.5 * np.cos(np.pi * k / burst_half)
    burst = envelope * np.cos(2 * np.pi * fc * k / sr)
    x = np.zeros(n)
    centers = []
    pos = offset
    while pos < n:
        c = int(round(pos))
        lo = max(c - burst_half, 0)
        hi = min(c + burst_half + 1, n)
        if lo < hi:
            x[lo:hi] += burst[lo - (c - burst_half) : hi - (c - burst_half)]
            centers.append(c)
        pos += period
    return x, {"rate": rate, "centers": centers, "carrier": fc}


_GENERATORS = {
    "tone": _gen_tone,
    "harmonic": _gen_harmonic,
    "chirp": _gen_chirp,
    "band_noise": _gen_band_noise,
    "am_noise": _gen_am_noise,
    "click_train": _gen_click_train,
}


def generate_source(cls: SourceClass, duration: float, sr: int, seed: int) -> CleanTrack:
    """Synthesize one single-source track, bit-reproducible from (cls, seed)."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if cls.band_hz[1] >= sr / 2:
        raise ValueError(
            f"class {cls.name!r} band {cls.band_hz} exceeds the Nyquist limit {sr / 2} Hz"
        )
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    x, realized = _GENERATORS[cls.kind](rng, n, sr, cls)
    peak_target = rng.uniform(0.4, 0.9)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (peak_target / peak)
    realized["peak"] = peak_target
    return CleanTrack(Waveform(x, sr), cls.id, seed, realized)


def build_mixture(
    stems: list[CleanTrack],
    snr_range_db: tuple[float, float],
    seed: int,
    keep_stems: bool = True,
) -> MixtureClip:
    """Mix stems with per-stem SNR (relative to the first stem) drawn
    uniformly from ``snr_range_db``, then rescale the sum to peak <= 0.99.

    The first stem is the 0 dB reference; the common peak rescale is folded
    into the recorded gains so the additivity invariant stays exact.
    """
    if len(stems) < 2:
        raise ValueError("a mixture needs at least 2 stems")
    labels = [s.label for s in stems]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate labels in mixture: {labels}")
    length = len(stems[0].waveform)
    sr = stems[0].waveform.sample_rate
    for s in stems[1:]:
        if len(s.waveform) != length or s.waveform.sample_rate != sr:
            raise ValueError("stems must share length and sample rate")
    rng = np.random.default_rng(seed)
    lo, hi = snr_range_db
    ref_energy = stems[0].waveform.energy
    gains = [1.0]
    for s in stems[1:]:
        snr = rng.uniform(lo, hi)
        gains.append(float(np.sqrt(ref_energy / (s.waveform.energy * 10.0 ** (snr / 10.0)))))
    mix = np.zeros(length)
    for g, s in zip(gains, stems):
        mix += g * s.waveform.samples
    peak = np.max(np.abs(mix))
    if peak > 0.99:
        # small margin so the recomputed sum stays under the cap after rounding
        scale = (0.99 - 1e-9) / peak
        gains = [g * scale for g in gains]
        mix = np.zeros(length)
        for g, s in zip(gains, stems):
            mix += g * s.waveform.samples
    return MixtureClip(
        waveform=Waveform(mix, sr),
        labels=tuple(labels),
        stems=list(stems) if keep_stems else None,
        gains=gains,
    )


# ---------------------------------------------------------------------------
# WAV persistence (RIFF, PCM16 mono, little-endian)
# ---------------------------------------------------------------------------

def write_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono; amplitudes are clamped to [-1, 1)."""
    q = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(q.tobytes())


def read_wav(path) -> Waveform:
    """Read a PCM16 mono WAV written by :func:`write_wav`."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, sr)


# ---------------------------------------------------------------------------
# Manifests (line-delimited JSON)
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("clip_id", "path", "labels", "sample_rate", "duration")


@dataclass
class ManifestRecord:
    """One clip entry: id, relative WAV path, labels, format and provenance.

    ``extras`` keeps any fields this version does not model, so manifests
    round-trip without loss.
    """

    clip_id: str
    path: str
    labels: list[int]
    sample_rate: int
    duration: float
    stems: list[str] | None = None
    provenance: str = "synthesized"
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "clip_id": self.clip_id,
            "path": self.path,
            "labels": list(self.labels),
            "sample_rate": self.sample_rate,
            "duration": self.duration,
            "provenance": self.provenance,
        }
        if self.stems is not None:
            d["stems"] = list(self.stems)
        d.update(self.extras)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        missing = [k for k in _REQUIRED_FIELDS if k not in d]
        if missing:
            raise ValueError(f"missing required field(s) {missing}")
        if not d["labels"]:
            raise ValueError("labels must be nonempty")
        known = {"clip_id", "path", "labels", "sample_rate", "duration", "stems", "provenance"}
        return cls(
            clip_id=d["clip_id"],
            path=d["path"],
            labels=[int(v) for v in d["labels"]],
            sample_rate=int(d["sample_rate"]),
            duration=float(d["duration"]),
            stems=list(d["stems"]) if d.get("stems") is not None else None,
            provenance=d.get("provenance", "synthesized"),
            extras={k: v for k, v in d.items() if k not in known},
        )


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                records.append(ManifestRecord.from_dict(d))
            except (json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# Corpus synthesis
# ---------------------------------------------------------------------------

def _clip_seed(master_seed: int, split_tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, split_tag, index]))


def _derive_seed(master_seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([master_seed, *tags]).generate_state(1)[0])


_SPLIT_TAGS = {"singles": 1, "train": 2, "val": 3, "eval3": 4, "natural": 5}


def _draw_labels(rng: np.random.Generator, n_classes: int, m: int) -> list[int]:
    return sorted(int(v) for v in rng.choice(n_classes, size=m, replace=False))


def _synthesize_clip(
    classes: list[SourceClass],
    labels: list[int],
    duration: float,
    sr: int,
    snr_range: tuple[float, float],
    master_seed: int,
    split_tag: int,
    index: int,
) -> MixtureClip:
    by_id = {c.id: c for c in classes}
    stems = [
        generate_source(by_id[lab], duration, sr, _derive_seed(master_seed, split_tag, index, lab))
        for lab in labels
    ]
    clip = build_mixture(stems, snr_range, _derive_seed(master_seed, split_tag, index, 1000))
    return clip


def synthesize_corpus(
    out_dir,
    classes: list[SourceClass],
    master_seed: int,
    sr: int = 8000,
    duration: float = 2.0,
    snr_range: tuple[float, float] = (-5.0, 5.0),
    singles_per_class: int = 10,
    n_train: int = 200,
    n_val: int = 40,
    n_eval3: int = 0,
    n_natural: int = 300,
    m_range: tuple[int, int] = (2, 3),
) -> dict[str, Path]:
    """Write a full desk corpus; returns the manifest paths by split name.

    Mixture splits: ``train``/``val`` keep stems on the manifest, ``eval3``
    holds 3-label clips, ``natural`` drops stems (its hidden sibling
    ``natural_stems_audit`` retains them for audits only).
    """
    validate_class_set(classes)
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    stems_dir = out_dir / "stems"
    clips_dir.mkdir(parents=True, exist_ok=True)
    stems_dir.mkdir(parents=True, exist_ok=True)
    n_classes = len(classes)
    m_lo = max(2, m_range[0])
    m_hi = min(m_range[1], n_classes)
    manifests: dict[str, Path] = {}

    # single-source tracks: the untouched originals pool
    singles = []
    for c in classes:
        for j in range(singles_per_class):
            seed = _derive_seed(master_seed, _SPLIT_TAGS["singles"], c.id, j)
            track = generate_source(c, duration, sr, seed)
            name = f"single_{c.id}_{j:03d}.wav"
            write_wav(track.waveform, stems_dir / name)
            singles.append(
                ManifestRecord(
                    clip_id=f"single_{c.id}_{j:03d}",
                    path=f"stems/{name}",
                    labels=[c.id],
                    sample_rate=sr,
                    duration=len(track.waveform) / sr,
                    provenance="synthesized",
                    extras={"seed": seed},
                )
            )
    manifests["singles"] = out_dir / "singles.jsonl"
    write_manifest(singles, manifests["singles"])

    def make_split(split: str, count: int, m_fixed: int | None, with_stems: bool):
        tag = _SPLIT_TAGS[split]
        records_public = []
        records_audit = []
        rng = _clip_seed(master_seed, tag, 0)
        for i in range(count):
            m = m_fixed if m_fixed is not None else int(rng.integers(m_lo, m_hi + 1))
            labels = _draw_labels(rng, n_classes, m)
            clip = _synthesize_clip(classes, labels, duration, sr, snr_range, master_seed, tag, i)
            clip_id = f"{split}_{i:04d}"
            wav_name = f"{clip_id}.wav"
            write_wav(clip.waveform, clips_dir / wav_name)
            stem_paths = []
            for stem in clip.stems:
                stem_name = f"{clip_id}_stem{stem.label}.wav"
                write_wav(stem.waveform, stems_dir / stem_name)
                stem_paths.append(f"stems/{stem_name}")
            base = dict(
                clip_id=clip_id,
                path=f"clips/{wav_name}",
                labels=list(clip.labels),
                sample_rate=sr,
                duration=len(clip.waveform) / sr,
                provenance="synthesized",
            )
            full = ManifestRecord(**base, stems=stem_paths, extras={"gains": clip.gains})
            if with_stems:
                records_public.append(full)
            else:
                records_public.append(ManifestRecord(**base))
                records_audit.append(full)
        manifests[split] = out_dir / f"{split}.jsonl"
        write_manifest(records_public, manifests[split])
        if records_audit:
            manifests[f"{split}_stems_audit"] = out_dir / f"{split}_stems_audit.jsonl"
            write_manifest(records_audit, manifests[f"{split}_stems_audit"])

    make_split("train", n_train, None, with_stems=True)
    if n_classes < 3:
        n_eval3 = 0
    make_split("val", n_val, None, with_stems=True)
    if n_eval3:
        make_split("eval3", n_eval3, 3, with_stems=True)
    make_split("natural", n_natural, None, with_stems=False)
    return manifests


def load_clip(record: ManifestRecord, corpus_dir) -> MixtureClip:
    """Materialize a manifest record: mixture waveform plus stems if listed."""
    corpus_dir = Path(corpus_dir)
    waveform = read_wav(corpus_dir / record.path)
    stems = None
    gains = record.extras.get("gains")
    if record.stems is not None:
        stems = [
            CleanTrack(read_wav(corpus_dir / p), label, seed=-1)
            for p, label in zip(record.stems, record.labels)
        ]
    return MixtureClip(
        waveform=waveform,
        labels=tuple(record.labels),
        stems=stems,
        gains=list(gains) if gains is not None else None,
        clip_id=record.clip_id,
    )
