"""Iterative data engine: separate natural multi-label clips with mutually
exclusive label queries, keep only clips whose tracks remix back to the
original above dB thresholds, and retrain the separator on the grown pool.

Two acceptance tiers gate the pool (both remix metrics must strictly exceed
the threshold, conjunctively):

- the lower tier admits a clip's tracks as single-source material for fresh
  artificial mixtures (independent track training, kind ``itt``);
- the higher tier additionally admits (clip, track) pairs where the original
  recording itself is the training mixture and the separated track is the
  target (self-separate training, kind ``sst``).

Accepted clips are never re-scored; rejected clips are re-scored on every
later iteration with the improved model, so the pool only grows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CleanTrack, MixtureClip, build_mixture, write_wav
from .dsp import StftConfig, Waveform
from .metrics import MetricPair, re_sdr, re_sisdr
from .separator import (
    SeparatorParams,
    TrainExample,
    encode_query,
    segment_examples,
    separate,
    train,
)

__all__ = [
    "TrackCandidate",
    "FilterThresholds",
    "EnginePools",
    "IterationReport",
    "EngineSchedule",
    "separate_all_labels",
    "remix_and_score",
    "filter_candidate_clip",
    "build_itt_example",
    "build_sst_example",
    "run_engine_iteration",
    "save_pools",
]

TIERS = ("rejected", "itt", "sst")


@dataclass
class TrackCandidate:
    """A separated stem with its provenance and the clip-level scores it
    was filtered under."""

    label: int
    waveform: Waveform
    source_clip: str
    iteration: int = 0
    scores: MetricPair | None = None


@dataclass(frozen=True)
class FilterThresholds:
    """Strict dB thresholds; a clip passes a tier only if BOTH remix metrics
    exceed it."""

    itt_db: float = 10.0
    sst_db: float = 15.0

    def __post_init__(self):
        if self.sst_db < self.itt_db:
            raise ValueError(
                f"sst threshold ({self.sst_db} dB) must be >= itt threshold ({self.itt_db} dB)"
            )


@dataclass(frozen=True)
class EngineSchedule:
    """Epoch counts per engine iteration: the first trains longest, later
    iterations fine-tune from the previous parameters."""

    first_epochs: int = 80
    later_epochs: int = 20

    def epochs_for(self, iteration: int) -> int:
        return self.first_epochs if iteration <= 1 else self.later_epochs


@dataclass
class ClipScore:
    """Stored stage-1 outcome of one natural clip."""

    scores: MetricPair
    tier: str
    iteration: int


@dataclass
class EnginePools:
    """Append-only state across engine iterations."""

    originals: list[CleanTrack] = field(default_factory=list)
    single_source_pool: list[TrackCandidate] = field(default_factory=list)
    sst_pool: list[tuple[str, TrackCandidate]] = field(default_factory=list)
    clip_scores: dict[str, ClipScore] = field(default_factory=dict)
    accepted_clips: set[str] = field(default_factory=set)
    iterations_run: int = 0

    def pool_hours(self) -> float:
        seconds = sum(t.waveform.duration for t in self.single_source_pool)
        seconds += sum(t.waveform.duration for t in self.originals)
        return seconds / 3600.0


@dataclass
class IterationReport:
    """Per-iteration accounting plus the post-iteration validation metrics."""

    iteration: int
    clips_processed: int
    accepted_itt: int
    accepted_sst: int
    cumulative_accepted: int
    pool_hours_before: float
    pool_hours_after: float
    val_sdri: float
    val_sisdri: float
    starved: bool
    wall_clock_s: float

    def csv_row(self) -> dict:
        # wall clock is reported separately: it would break byte-identical
        # reruns of otherwise deterministic runs
        return {
            "iteration": self.iteration,
            "clips_processed": self.clips_processed,
            "accepted_itt": self.accepted_itt,
            "accepted_sst": self.accepted_sst,
            "cumulative_accepted": self.cumulative_accepted,
            "pool_hours_before": f"{self.pool_hours_before:.6f}",
            "pool_hours_after": f"{self.pool_hours_after:.6f}",
            "val_sdri": f"{self.val_sdri:.6f}",
            "val_sisdri": f"{self.val_sisdri:.6f}",
            "starved": int(self.starved),
        }


def separate_all_labels(
    clip: MixtureClip, p: SeparatorParams, cfg: StftConfig
) -> list[TrackCandidate]:
    """One candidate per label, in ascending label order; each label is the
    positive query and the remaining labels are its negative queries."""
    labels = sorted(clip.labels)
    if len(labels) < 2:
        raise ValueError("a single-label clip has nothing to separate")
    out = []
    for lab in labels:
        q = encode_query(lab, [l for l in labels if l != lab], p.n_classes, "pos_neg")
        est, _ = separate(clip.waveform, q, p, cfg)
        out.append(TrackCandidate(label=lab, waveform=est, source_clip=clip.clip_id or ""))
    return out


def remix_and_score(candidates: list[TrackCandidate], original: Waveform) -> MetricPair:
    """Remix metrics of the unweighted candidate sum against the original."""
    tracks = [c.waveform for c in candidates]
    return MetricPair(re_sdr(tracks, original), re_sisdr(tracks, original))


def filter_candidate_clip(scores: MetricPair, th: FilterThresholds) -> str:
    """Tier for a whole clip: 'sst', 'itt', or 'rejected' (strict, conjunctive)."""
    if scores.sdr_like > th.sst_db and scores.sisdr_like > th.sst_db:
        return "sst"
    if scores.sdr_like > th.itt_db and scores.sisdr_like > th.itt_db:
        return "itt"
    return "rejected"


def _partner_pool(pool: list, label: int) -> dict[int, list]:
    by_label: dict[int, list] = {}
    for entry in pool:
        if entry.label != label:
            by_label.setdefault(entry.label, []).append(entry)
    return by_label


def _as_clean_track(entry) -> CleanTrack:
    if isinstance(entry, CleanTrack):
        return entry
    return CleanTrack(entry.waveform, entry.label, seed=-1)


def build_itt_example(
    track,
    pool: list,
    snr_range: tuple[float, float],
    rng: np.random.Generator,
    n_classes: int,
    kind: str = "itt",
) -> TrainExample:
    """Mix a single-source track with 1-2 different-label pool tracks and
    supervise with the track's own (unscaled) waveform."""
    by_label = _partner_pool(pool, track.label)
    if not by_label:
        raise ValueError(f"no pool track with a label different from {track.label}")
    n_partners = int(rng.integers(1, 3))
    labels = sorted(by_label)
    chosen = rng.choice(len(labels), size=min(n_partners, len(labels)), replace=False)
    partners = []
    for i in sorted(int(c) for c in chosen):
        group = by_label[labels[i]]
        partners.append(group[int(rng.integers(len(group)))])
    stems = [_as_clean_track(track)] + [_as_clean_track(x) for x in partners]
    clip = build_mixture(stems, snr_range, seed=int(rng.integers(2**32)), keep_stems=False)
    neg = [s.label for s in stems[1:]]
    query = encode_query(track.label, neg, n_classes, "pos_neg")
    return TrainExample(
        clip.waveform,
        track.waveform,
        query,
        kind=kind,
        labels=tuple(sorted([track.label] + neg)),
    )


def build_sst_example(clip: MixtureClip, track: TrackCandidate, n_classes: int) -> TrainExample:
    """Use the original natural clip as the mixture and an accepted separated
    track as the target."""
    if clip.clip_id != track.source_clip:
        raise ValueError(
            f"provenance mismatch: track came from {track.source_clip!r}, clip is {clip.clip_id!r}"
        )
    neg = [l for l in clip.labels if l != track.label]
    query = encode_query(track.label, neg, n_classes, "pos_neg")
    return TrainExample(clip.waveform, track.waveform, query, kind="sst", labels=tuple(clip.labels))


def _score_clip(clip, params, cfg, thresholds):
    candidates = separate_all_labels(clip, params, cfg)
    scores = remix_and_score(candidates, clip.waveform)
    tier = filter_candidate_clip(scores, thresholds)
    return clip, candidates, scores, tier


def run_engine_iteration(
    state: EnginePools,
    natural_clips: list[MixtureClip],
    params: SeparatorParams,
    cfg: StftConfig,
    thresholds: FilterThresholds,
    schedule: EngineSchedule,
    rng: np.random.Generator,
    snr_range: tuple[float, float] = (-5.0, 5.0),
    silence_rate: float = 0.05,
    segment_samples: int = 0,
    originals_repeats: int = 4,
    val_metrics_fn=None,
    n_threads: int = 1,
) -> tuple[EnginePools, SeparatorParams, IterationReport]:
    """One engine pass: score and filter every not-yet-accepted natural clip,
    grow the pools, then train on originals + itt + sst examples.

    With zero acceptances the iteration still trains on the originals and the
    report is flagged as starved.
    """
    if not natural_clips:
        raise ValueError("no natural clips to process")
    t0 = time.monotonic()
    iteration = state.iterations_run + 1
    hours_before = state.pool_hours()

    ordered = sorted(natural_clips, key=lambda c: c.clip_id or "")
    pending = [c for c in ordered if (c.clip_id or "") not in state.accepted_clips]
    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            results = list(ex.map(lambda c: _score_clip(c, params, cfg, thresholds), pending))
    else:
        results = [_score_clip(c, params, cfg, thresholds) for c in pending]

    accepted_itt = 0
    accepted_sst = 0
    for clip, candidates, scores, tier in results:
        cid = clip.clip_id or ""
        state.clip_scores[cid] = ClipScore(scores, tier, iteration)
        if tier == "rejected":
            continue
        state.accepted_clips.add(cid)
        for cand in candidates:
            cand.scores = scores
            cand.iteration = iteration
            state.single_source_pool.append(cand)
            if tier == "sst":
                state.sst_pool.append((cid, cand))
        if tier == "sst":
            accepted_sst += 1
        else:
            accepted_itt += 1
    starved = (accepted_itt + accepted_sst) == 0

    n_classes = params.n_classes
    partner_pool = list(state.originals) + list(state.single_source_pool)
    examples: list[TrainExample] = []
    # several fresh remixes per original anchor the training mix to clean
    # supervision even when accepted tracks dominate the pool
    for _ in range(max(1, originals_repeats)):
        for track in state.originals:
            examples.append(
                build_itt_example(track, state.originals, snr_range, rng, n_classes, kind="artificial")
            )
    for track in state.single_source_pool:
        examples.append(build_itt_example(track, partner_pool, snr_range, rng, n_classes))
    clips_by_id = {c.clip_id: c for c in ordered}
    for cid, track in state.sst_pool:
        examples.append(build_sst_example(clips_by_id[cid], track, n_classes))

    epochs = schedule.epochs_for(iteration)
    draws = segment_examples(examples, segment_samples)
    new_params, _trace = train(draws, params, epochs, silence_rate, rng, cfg)

    val_sdri = float("nan")
    val_sisdri = float("nan")
    if val_metrics_fn is not None:
        val_sdri, val_sisdri = val_metrics_fn(new_params)

    state.iterations_run = iteration
    report = IterationReport(
        iteration=iteration,
        clips_processed=len(pending),
        accepted_itt=accepted_itt,
        accepted_sst=accepted_sst,
        cumulative_accepted=len(state.accepted_clips),
        pool_hours_before=hours_before,
        pool_hours_after=state.pool_hours(),
        val_sdri=val_sdri,
        val_sisdri=val_sisdri,
        starved=starved,
        wall_clock_s=time.monotonic() - t0,
    )
    return state, new_params, report


def save_pools(state: EnginePools, out_dir) -> Path:
    """Persist accepted tracks as WAVs under pool/iterK/ plus a JSONL listing.

    Returns the listing path.  Re-running over the same state rewrites
    identical bytes.
    """
    import json

    out_dir = Path(out_dir)
    listing = out_dir / "pool.jsonl"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for track in state.single_source_pool:
        sub = out_dir / f"iter{track.iteration}"
        sub.mkdir(exist_ok=True)
        name = f"{track.source_clip}_label{track.label}.wav"
        write_wav(track.waveform, sub / name)
        tier = state.clip_scores[track.source_clip].tier
        rows.append(
            {
                "clip_id": track.source_clip,
                "label": track.label,
                "iteration": track.iteration,
                "path": f"iter{track.iteration}/{name}",
                "re_sdr": f"{track.scores.sdr_like:.6f}",
                "re_sisdr": f"{track.scores.sisdr_like:.6f}",
                "tier": tier,
            }
        )
    rows.sort(key=lambda r: (r["iteration"], r["clip_id"], r["label"]))
    with open(listing, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return listing
