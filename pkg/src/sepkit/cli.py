"""Command-line pipeline: synth | train | engine | eval | report.

Every command takes an optional JSON config (--config); explicit flags
override config values.  A resolved copy of the configuration is persisted
into the run directory, and a full pipeline re-run with the same config and
seed reproduces every manifest, checkpoint, pool listing, and report CSV
byte for byte (wall-clock timings live in a separate sidecar file).

Exit codes: 0 success, 2 validation error, 3 training divergence,
4 engine finished with zero accepted clips (starvation warning).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import engine as engine_mod
from . import metrics
from .config import (
    RunConfig,
    load_config,
    resolve_out_dir,
    save_config,
)
from .corpus import CleanTrack, read_manifest
from .dsp import StftConfig
from .separator import (
    DivergenceError,
    encode_query,
    init_params,
    load_checkpoint,
    query_with_mode,
    save_checkpoint,
    segment_examples,
    separate,
    supervised_examples,
    train,
)

TRAIN_SEED_TAG = 2001
ENGINE_SEED_TAG = 3001

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_STARVED = 4


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _db(value: float) -> str:
    return f"{value:.6f}"


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "epochs", None) is not None:
        cfg.separator.epochs = args.epochs
    if getattr(args, "silence_rate", None) is not None:
        cfg.separator.silence_rate = args.silence_rate
    if getattr(args, "step_size", None) is not None:
        cfg.separator.step_size = args.step_size
    if getattr(args, "iterations", None) is not None:
        cfg.engine.iterations = args.iterations
    if getattr(args, "itt_db", None) is not None:
        cfg.engine.itt_db = args.itt_db
    if getattr(args, "sst_db", None) is not None:
        cfg.engine.sst_db = args.sst_db
    return cfg


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = resolve_out_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    return run_dir


def _corpus_dir(args, run_dir: Path) -> Path:
    if getattr(args, "corpus", None):
        return Path(args.corpus)
    return run_dir / "corpus"


def _load_split(corpus_dir: Path, split: str, required: bool = True):
    path = corpus_dir / f"{split}.jsonl"
    if not path.exists():
        if required:
            raise ValueError(f"missing manifest {path}")
        return []
    return [corpus_mod.load_clip(rec, corpus_dir) for rec in read_manifest(path)]


def _load_singles(corpus_dir: Path) -> list[CleanTrack]:
    path = corpus_dir / "singles.jsonl"
    if not path.exists():
        raise ValueError(f"missing manifest {path}")
    tracks = []
    for rec in read_manifest(path):
        wav = corpus_mod.read_wav(corpus_dir / rec.path)
        tracks.append(CleanTrack(wav, rec.labels[0], seed=int(rec.extras.get("seed", -1))))
    return tracks


def _val_metrics(val_clips, params, cfg_stft: StftConfig) -> tuple[float, float]:
    """Mean SDRi / SI-SDRi over every retained stem, full pos+neg queries."""
    sdris, sisdris = [], []
    for clip in val_clips:
        labels = list(clip.labels)
        for i, stem in enumerate(clip.stems):
            gain = clip.gains[i] if clip.gains else 1.0
            ref = corpus_mod.Waveform(gain * stem.waveform.samples, stem.waveform.sample_rate)
            q = encode_query(stem.label, [l for l in labels if l != stem.label],
                             params.n_classes, "pos_neg")
            est, _ = separate(clip.waveform, q, params, cfg_stft)
            sdris.append(metrics.sdri(est, ref, clip.waveform))
            sisdris.append(metrics.sisdri(est, ref, clip.waveform))
    return float(np.mean(sdris)), float(np.mean(sisdris))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _prepare_run_dir(cfg)
    classes = cfg.corpus.resolve_classes()
    c = cfg.corpus
    manifests = corpus_mod.synthesize_corpus(
        run_dir / "corpus",
        classes,
        cfg.master_seed,
        sr=c.sample_rate,
        duration=c.duration_s,
        snr_range=tuple(c.snr_range_db),
        singles_per_class=c.singles_per_class,
        n_train=c.n_train,
        n_val=c.n_val,
        n_eval3=c.n_eval3,
        n_natural=c.n_natural,
        m_range=tuple(c.m_range),
    )
    for split in sorted(manifests):
        n = len(read_manifest(manifests[split]))
        print(f"synth: {split}: {n} clips -> {manifests[split]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _prepare_run_dir(cfg)
    corpus_dir = _corpus_dir(args, run_dir)
    classes = cfg.corpus.resolve_classes()
    n_classes = len(classes)
    stft_cfg = cfg.stft.resolve()

    train_clips = _load_split(corpus_dir, "train")
    val_clips = _load_split(corpus_dir, "val")
    examples = []
    for clip in train_clips:
        examples.extend(supervised_examples(clip, n_classes))
    seg = int(round(cfg.separator.train_segment_s * cfg.corpus.sample_rate))
    examples = segment_examples(examples, seg)

    params = init_params(stft_cfg.n_bins, n_classes, step_size=cfg.separator.step_size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, TRAIN_SEED_TAG]))

    log_rows: list[dict] = []

    def on_epoch(epoch, p, mean_loss):
        val_sdri, val_sisdri = _val_metrics(val_clips, p, stft_cfg)
        log_rows.append(
            {
                "epoch": epoch,
                "mean_loss": _db(mean_loss),
                "val_sdri": _db(val_sdri),
                "val_sisdri": _db(val_sisdri),
            }
        )
        print(f"train: epoch {epoch}: loss {mean_loss:.3f}  val SDRi {val_sdri:.3f} dB")

    params, _trace = train(
        examples,
        params,
        cfg.separator.epochs,
        cfg.separator.silence_rate,
        rng,
        stft_cfg,
        lam=cfg.separator.loss_lambda,
        mode_proportions=tuple(cfg.separator.mode_proportions),
        on_epoch=on_epoch,
    )

    ckpt = run_dir / (args.checkpoint_name or "checkpoint.json")
    save_checkpoint(ckpt, params, stft_cfg, n_classes, cfg.master_seed)
    _write_csv(run_dir / (args.log_name or "train_log.csv"),
               ["epoch", "mean_loss", "val_sdri", "val_sisdri"], log_rows)
    print(f"train: wrote {ckpt}")
    return EXIT_OK


def cmd_engine(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _prepare_run_dir(cfg)
    corpus_dir = _corpus_dir(args, run_dir)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoint.json"
    if not ckpt_path.exists():
        raise ValueError(f"missing checkpoint {ckpt_path}")
    params, stft_cfg, n_classes, _seed = load_checkpoint(ckpt_path)

    natural_clips = _load_split(corpus_dir, "natural")
    val_clips = _load_split(corpus_dir, "val")
    originals = _load_singles(corpus_dir)

    thresholds = engine_mod.FilterThresholds(cfg.engine.itt_db, cfg.engine.sst_db)
    schedule = engine_mod.EngineSchedule(cfg.engine.first_epochs, cfg.engine.later_epochs)
    state = engine_mod.EnginePools(originals=originals)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, ENGINE_SEED_TAG]))

    reports = []
    for _ in range(cfg.engine.iterations):
        state, params, report = engine_mod.run_engine_iteration(
            state,
            natural_clips,
            params,
            stft_cfg,
            thresholds,
            schedule,
            rng,
            snr_range=tuple(cfg.corpus.snr_range_db),
            silence_rate=cfg.separator.silence_rate,
            segment_samples=int(round(cfg.separator.train_segment_s * cfg.corpus.sample_rate)),
            val_metrics_fn=lambda p: _val_metrics(val_clips, p, stft_cfg),
            n_threads=args.threads or 1,
        )
        reports.append(report)
        save_checkpoint(run_dir / f"checkpoint_iter{report.iteration}.json",
                        params, stft_cfg, n_classes, cfg.master_seed)
        print(
            f"engine: iter {report.iteration}: +itt {report.accepted_itt} +sst {report.accepted_sst} "
            f"(cumulative {report.cumulative_accepted})  val SDRi {report.val_sdri:.3f} dB"
        )

    if reports:
        _write_csv(
            run_dir / "reports" / "iterations.csv",
            list(reports[0].csv_row().keys()),
            [r.csv_row() for r in reports],
        )
        _write_csv(
            run_dir / "reports" / "timing.csv",
            ["iteration", "wall_clock_s"],
            [{"iteration": r.iteration, "wall_clock_s": f"{r.wall_clock_s:.3f}"} for r in reports],
        )
        engine_mod.save_pools(state, run_dir / "pool")
    save_checkpoint(run_dir / "checkpoint_engine.json", params, stft_cfg, n_classes, cfg.master_seed)
    print(f"engine: wrote {run_dir / 'checkpoint_engine.json'}")
    if reports and all(r.starved for r in reports):
        print("engine: warning: no clip passed the filter in any iteration", file=sys.stderr)
        return EXIT_STARVED
    return EXIT_OK


def _eval_supervised_rows(clips, split, params, stft_cfg):
    rows = []
    agg: dict[str, list] = {"pos_neg": [], "pos_only": []}
    for clip in clips:
        if clip.stems is None:
            raise ValueError(f"clip {clip.clip_id}: supervised evaluation needs stems")
        labels = list(clip.labels)
        for i, stem in enumerate(clip.stems):
            gain = clip.gains[i] if clip.gains else 1.0
            ref = corpus_mod.Waveform(gain * stem.waveform.samples, stem.waveform.sample_rate)
            full = encode_query(stem.label, [l for l in labels if l != stem.label],
                                params.n_classes, "pos_neg")
            for mode in ("pos_neg", "pos_only"):
                est, _ = separate(clip.waveform, query_with_mode(full, mode), params, stft_cfg)
                vals = (
                    metrics.sdr(est, ref),
                    metrics.sdri(est, ref, clip.waveform),
                    metrics.sisdr(est, ref),
                    metrics.sisdri(est, ref, clip.waveform),
                )
                rows.append(
                    {
                        "split": split,
                        "clip_id": clip.clip_id,
                        "label": stem.label,
                        "query_mode": mode,
                        "sdr_db": _db(vals[0]),
                        "sdri_db": _db(vals[1]),
                        "sisdr_db": _db(vals[2]),
                        "sisdri_db": _db(vals[3]),
                    }
                )
                agg[mode].append(vals)
    for mode in ("pos_neg", "pos_only"):
        if agg[mode]:
            means = np.mean(np.asarray(agg[mode]), axis=0)
            rows.append(
                {
                    "split": split,
                    "clip_id": "AGGREGATE",
                    "label": -1,
                    "query_mode": mode,
                    "sdr_db": _db(means[0]),
                    "sdri_db": _db(means[1]),
                    "sisdr_db": _db(means[2]),
                    "sisdri_db": _db(means[3]),
                }
            )
    return rows


def _eval_silence_rows(clips, split, params, stft_cfg):
    rows = []
    agg: dict[str, list] = {"pos_neg": [], "pos_only": []}
    for clip in clips:
        absent = sorted(set(range(params.n_classes)) - set(clip.labels))
        if not absent:
            continue
        probe_class = absent[0]  # deterministic probe choice
        for mode in ("pos_neg", "pos_only"):
            neg = list(clip.labels) if mode == "pos_neg" else None
            q = encode_query(probe_class, neg, params.n_classes, mode if mode == "pos_only" else "pos_neg")
            est, _ = separate(clip.waveform, q, params, stft_cfg)
            s_sdr = metrics.silence_sdr(est, clip.waveform)
            s_sisdr = metrics.silence_sisdr(est, clip.waveform)
            rows.append(
                {
                    "split": split,
                    "clip_id": clip.clip_id,
                    "absent_class": probe_class,
                    "query_mode": mode,
                    "silence_sdr_db": _db(s_sdr),
                    "silence_sisdr_db": _db(s_sisdr),
                }
            )
            agg[mode].append((s_sdr, s_sisdr))
    for mode in ("pos_neg", "pos_only"):
        if agg[mode]:
            means = np.mean(np.asarray(agg[mode]), axis=0)
            rows.append(
                {
                    "split": split,
                    "clip_id": "AGGREGATE",
                    "absent_class": -1,
                    "query_mode": mode,
                    "silence_sdr_db": _db(means[0]),
                    "silence_sisdr_db": _db(means[1]),
                }
            )
    return rows


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _prepare_run_dir(cfg)
    corpus_dir = _corpus_dir(args, run_dir)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoint.json"
    if not ckpt_path.exists():
        raise ValueError(f"missing checkpoint {ckpt_path}")
    params, stft_cfg, _n_classes, _seed = load_checkpoint(ckpt_path)
    eval_dir = run_dir / "eval"

    sup_rows = []
    sil_rows = []
    for split in ("val", "eval3"):
        clips = _load_split(corpus_dir, split, required=(split == "val"))
        if clips:
            sup_rows.extend(_eval_supervised_rows(clips, split, params, stft_cfg))
            sil_rows.extend(_eval_silence_rows(clips, split, params, stft_cfg))
    _write_csv(
        eval_dir / "eval_supervised.csv",
        ["split", "clip_id", "label", "query_mode", "sdr_db", "sdri_db", "sisdr_db", "sisdri_db"],
        sup_rows,
    )
    _write_csv(
        eval_dir / "eval_silence.csv",
        ["split", "clip_id", "absent_class", "query_mode", "silence_sdr_db", "silence_sisdr_db"],
        sil_rows,
    )

    natural_clips = _load_split(corpus_dir, "natural")
    remix_rows = []
    re_pairs = []
    for clip in natural_clips:
        cands = engine_mod.separate_all_labels(clip, params, stft_cfg)
        pair = engine_mod.remix_and_score(cands, clip.waveform)
        re_pairs.append((pair.sdr_like, pair.sisdr_like))
        remix_rows.append(
            {
                "clip_id": clip.clip_id,
                "n_labels": len(clip.labels),
                "re_sdr_db": _db(pair.sdr_like),
                "re_sisdr_db": _db(pair.sisdr_like),
            }
        )
    _write_csv(eval_dir / "eval_remix.csv",
               ["clip_id", "n_labels", "re_sdr_db", "re_sisdr_db"], remix_rows)
    arr = np.asarray(re_pairs) if re_pairs else np.zeros((0, 2))
    _write_csv(
        eval_dir / "eval_remix_aggregate.csv",
        ["mean_re_sdr_db", "prop_re_sdr_gt_15db", "mean_re_sisdr_db", "prop_re_sisdr_gt_15db", "n_clips"],
        [
            {
                "mean_re_sdr_db": _db(float(arr[:, 0].mean())) if len(arr) else "",
                "prop_re_sdr_gt_15db": f"{float((arr[:, 0] > 15.0).mean()):.6f}" if len(arr) else "",
                "mean_re_sisdr_db": _db(float(arr[:, 1].mean())) if len(arr) else "",
                "prop_re_sisdr_gt_15db": f"{float((arr[:, 1] > 15.0).mean()):.6f}" if len(arr) else "",
                "n_clips": len(arr),
            }
        ],
    )
    print(f"eval: wrote CSVs under {eval_dir}")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ValueError(f"missing file {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise ValueError(f"missing run directory {run_dir}")
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    lines = []

    sup = _read_csv(run_dir / "eval" / "eval_supervised.csv")
    sil = _read_csv(run_dir / "eval" / "eval_silence.csv")
    remix_agg = _read_csv(run_dir / "eval" / "eval_remix_aggregate.csv")

    sup_agg = [r for r in sup if r["clip_id"] == "AGGREGATE"]
    _write_csv(report_dir / "table_supervised.csv", list(sup_agg[0].keys()) if sup_agg else
               ["split", "clip_id", "label", "query_mode", "sdr_db", "sdri_db", "sisdr_db", "sisdri_db"],
               sup_agg)
    lines.append("== separation quality (supervised aggregates) ==")
    for r in sup_agg:
        lines.append(
            f"  {r['split']:>6} {r['query_mode']:>8}: SDRi {r['sdri_db']} dB, SI-SDRi {r['sisdri_db']} dB"
        )

    sil_agg = [r for r in sil if r["clip_id"] == "AGGREGATE"]
    _write_csv(report_dir / "table_silence.csv", list(sil_agg[0].keys()) if sil_agg else
               ["split", "clip_id", "absent_class", "query_mode", "silence_sdr_db", "silence_sisdr_db"],
               sil_agg)
    lines.append("== silence purity (absent-query aggregates) ==")
    for r in sil_agg:
        lines.append(
            f"  {r['split']:>6} {r['query_mode']:>8}: Silence-SDR {r['silence_sdr_db']} dB, "
            f"Silence-SISDR {r['silence_sisdr_db']} dB"
        )

    _write_csv(report_dir / "table_remix.csv",
               list(remix_agg[0].keys()) if remix_agg else ["mean_re_sdr_db"], remix_agg)
    lines.append("== remix quality on natural-style clips (unsupervised) ==")
    for r in remix_agg:
        lines.append(
            f"  mean Re-SDR {r['mean_re_sdr_db']} dB (> 15 dB on {r['prop_re_sdr_gt_15db']} of clips), "
            f"mean Re-SISDR {r['mean_re_sisdr_db']} dB (> 15 dB on {r['prop_re_sisdr_gt_15db']})"
        )

    iter_path = run_dir / "reports" / "iterations.csv"
    if iter_path.exists():
        iters = _read_csv(iter_path)
        _write_csv(report_dir / "table_iterations.csv",
                   list(iters[0].keys()) if iters else ["iteration"], iters)
        lines.append("== engine iterations ==")
        lines.append("  iter  processed  +itt  +sst  cumulative  pool_h_after  val_SDRi")
        for r in iters:
            lines.append(
                f"  {r['iteration']:>4}  {r['clips_processed']:>9}  {r['accepted_itt']:>4}  "
                f"{r['accepted_sst']:>4}  {r['cumulative_accepted']:>10}  {r['pool_hours_after']:>12}  "
                f"{r['val_sdri']:>8}"
            )

    text = "\n".join(lines) + "\n"
    (report_dir / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"report: wrote {report_dir / 'summary.txt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepkit",
        description="Spectral-mask sound separation pipeline: synthesize a corpus, "
        "train the separator, run the self-training data engine, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus_flag=True):
        p.add_argument("--config", help="JSON run config; flags override file values")
        p.add_argument("--out", help="run directory (default from config; "
                                     "relative paths root at $SEPKIT_OUT_ROOT)")
        p.add_argument("--seed", type=int, help="master seed override")
        if corpus_flag:
            p.add_argument("--corpus", help="corpus directory (default <out>/corpus)")

    p = sub.add_parser("synth", help="synthesize the labeled corpus")
    common(p, corpus_flag=False)
    p.add_argument("--threads", type=int, default=1, help="worker cap (synthesis is serial)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the separator on artificial mixtures")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--silence-rate", dest="silence_rate", type=float)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--checkpoint-name", dest="checkpoint_name", help="default checkpoint.json")
    p.add_argument("--log-name", dest="log_name", help="default train_log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("engine", help="run data-engine iterations from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="starting checkpoint (default <out>/checkpoint.json)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--itt-db", dest="itt_db", type=float)
    p.add_argument("--sst-db", dest="sst_db", type=float)
    p.add_argument("--threads", type=int, default=1, help="parallel clip scoring cap")
    p.set_defaults(func=cmd_engine)

    p = sub.add_parser("eval", help="score a checkpoint on the evaluation splits")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to score (default <out>/checkpoint.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render summary tables from stored CSVs")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"sepkit: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, FileNotFoundError) as exc:
        print(f"sepkit: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
