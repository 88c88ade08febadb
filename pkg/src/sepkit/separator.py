"""Query-conditioned spectral-mask separator with hand-derived gradients.

The model is deliberately small: per-frequency-bin logits that are linear in
the concatenated positive/negative query vector plus a log-magnitude gate,

    logit[t, f] = weights[f] . q + bias[f] + mix_gate[f] * log(mag[t, f] + 1e-8)
    mask = sigmoid(logit),   strictly inside (0, 1)

applied to the mixture magnitude and inverted with the mixture phase.  The
training objective blends SDR and SI-SDR (0.9 / 0.1 by default); targets that
are exactly silent are scored by the mean energy of the estimate in dB, which
shares the units and the optimum (silence) of the main objective while
keeping a smooth gradient.

Every gradient here is analytic; the test suite checks each one against
central finite differences.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .dsp import (
    ComplexSpectrogram,
    MagPhase,
    Mask,
    StftConfig,
    Waveform,
    apply_mask_reconstruct,
    istft,
    istft_adjoint,
    magphase,
    stft,
)

__all__ = [
    "QUERY_MODES",
    "DEFAULT_MODE_PROPORTIONS",
    "LOSS_LAMBDA",
    "SILENCE_RATE",
    "QueryEmbedding",
    "SeparatorParams",
    "TrainExample",
    "ParamGrad",
    "DivergenceError",
    "encode_query",
    "query_with_mode",
    "sample_query_mode",
    "init_params",
    "predict_mask",
    "separate",
    "loss",
    "grad_loss_wrt_estimate",
    "grad_loss_wrt_params",
    "sample_silence_example",
    "supervised_examples",
    "segment_examples",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

QUERY_MODES = ("pos_only", "neg_only", "pos_neg")
DEFAULT_MODE_PROPORTIONS = (0.25, 0.25, 0.5)
LOSS_LAMBDA = 0.9
SILENCE_RATE = 0.05

_LOG_FLOOR = 1e-8          # magnitude floor inside the log feature
_SILENCE_EPS = 1e-12       # mean-power floor of the silence objective
_DB_FACTOR = 10.0 / math.log(10.0)
_MASK_LO = np.nextafter(0.0, 1.0)
_MASK_HI = np.nextafter(1.0, 0.0)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class QueryEmbedding:
    """Concatenated positive/negative class vectors, zero-filled when absent.

    ``pos`` is one-hot or all-zeros; ``neg`` is the mean of the negative
    classes' one-hots (mean, not sum, so multi-negative queries keep unit
    scale) or all-zeros.  At least one half must be nonzero.
    """

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.neg = np.asarray(self.neg, dtype=np.float64)
        if self.pos.shape != self.neg.shape or self.pos.ndim != 1:
            raise ValueError("pos and neg halves must be 1-D and equally sized")
        if not (np.any(self.pos) or np.any(self.neg)):
            raise ValueError("empty query: both halves are zero")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.pos, self.neg])

    @property
    def n_classes(self) -> int:
        return self.pos.size


def encode_query(
    pos_class: int | None,
    neg_classes,
    n_classes: int,
    mode: str = "pos_neg",
) -> QueryEmbedding:
    """Build a query embedding for the given mode, zeroing the unused half."""
    if mode not in QUERY_MODES:
        raise ValueError(f"unknown query mode {mode!r}")
    pos = np.zeros(n_classes)
    neg = np.zeros(n_classes)
    if mode in ("pos_only", "pos_neg"):
        if pos_class is None:
            raise ValueError(f"mode {mode!r} requires a positive class")
        if not (0 <= pos_class < n_classes):
            raise ValueError(f"positive class {pos_class} out of range [0, {n_classes})")
        pos[pos_class] = 1.0
    if mode in ("neg_only", "pos_neg") and neg_classes:
        neg_list = sorted(set(int(c) for c in neg_classes))
        for c in neg_list:
            if not (0 <= c < n_classes):
                raise ValueError(f"negative class {c} out of range [0, {n_classes})")
            neg[c] = 1.0 / len(neg_list)
    return QueryEmbedding(pos, neg)


def query_with_mode(q: QueryEmbedding, mode: str) -> QueryEmbedding:
    """Zero out halves of a full query per the sampled mode.

    Falls back to the full embedding when the kept half would be all-zero.
    """
    if mode == "pos_only" and np.any(q.pos):
        return QueryEmbedding(q.pos.copy(), np.zeros_like(q.neg))
    if mode == "neg_only" and np.any(q.neg):
        return QueryEmbedding(np.zeros_like(q.pos), q.neg.copy())
    return q


def sample_query_mode(
    rng: np.random.Generator,
    proportions: tuple[float, float, float] = DEFAULT_MODE_PROPORTIONS,
) -> str:
    """Draw pos_only / neg_only / pos_neg with the given proportions."""
    return QUERY_MODES[int(rng.choice(3, p=np.asarray(proportions, dtype=np.float64)))]


@dataclass
class SeparatorParams:
    """Model parameters plus the optimizer hyperparameters used to train them."""

    weights: np.ndarray    # (n_bins, 2 * n_classes): per-bin query projection
    bias: np.ndarray       # (n_bins,)
    mix_gate: np.ndarray   # (n_bins,): coefficient on the log-magnitude feature
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.mix_gate = np.asarray(self.mix_gate, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] % 2 != 0:
            raise ValueError("weights must be (n_bins, 2 * n_classes)")
        n_bins = self.weights.shape[0]
        if self.bias.shape != (n_bins,) or self.mix_gate.shape != (n_bins,):
            raise ValueError("bias and mix_gate must be (n_bins,)")
        for arr in (self.weights, self.bias, self.mix_gate):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters contain non-finite values")

    @property
    def n_bins(self) -> int:
        return self.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1] // 2

    def copy(self) -> "SeparatorParams":
        return SeparatorParams(
            self.weights.copy(), self.bias.copy(), self.mix_gate.copy(),
            self.step_size, self.beta1, self.beta2,
        )


def init_params(n_bins: int, n_classes: int, step_size: float = 0.05) -> SeparatorParams:
    """Zero initialization: every mask starts at 0.5."""
    return SeparatorParams(
        weights=np.zeros((n_bins, 2 * n_classes)),
        bias=np.zeros(n_bins),
        mix_gate=np.zeros(n_bins),
        step_size=step_size,
    )


@dataclass
class TrainExample:
    """One supervised pair: mixture in, target out, under a query.

    ``labels`` is the mixture's label set (needed to draw absent classes for
    silence augmentation); ``kind`` is one of artificial / itt / sst /
    silence.  Silence examples carry exactly-zero targets.
    """

    mixture: Waveform
    target: Waveform
    query: QueryEmbedding
    kind: str = "artificial"
    labels: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.mixture) != len(self.target):
            raise ValueError("mixture and target lengths differ")
        if self.kind == "silence" and np.any(self.target.samples):
            raise ValueError("silence examples must have exactly-zero targets")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logits(mp: MagPhase, q: QueryEmbedding, p: SeparatorParams) -> tuple[np.ndarray, np.ndarray]:
    if mp.magnitude.shape[1] != p.n_bins:
        raise ValueError(
            f"spectrogram has {mp.magnitude.shape[1]} bins, parameters expect {p.n_bins}"
        )
    qv = q.vector
    if qv.size != p.weights.shape[1]:
        raise ValueError(
            f"query vector has {qv.size} entries, parameters expect {p.weights.shape[1]}"
        )
    feat = np.log(mp.magnitude + _LOG_FLOOR)
    z = (p.weights @ qv)[None, :] + p.bias[None, :] + feat * p.mix_gate[None, :]
    return z, feat


def predict_mask(mp: MagPhase, q: QueryEmbedding, p: SeparatorParams) -> Mask:
    """Sigmoid mask from per-bin linear logits; entries strictly in (0, 1)."""
    z, _ = _logits(mp, q, p)
    return Mask(np.clip(_sigmoid(z), _MASK_LO, _MASK_HI))


def separate(
    mixture: Waveform, q: QueryEmbedding, p: SeparatorParams, cfg: StftConfig
) -> tuple[Waveform, Mask]:
    """Extract the queried source: stft -> mask -> masked inverse stft."""
    mp = magphase(stft(mixture, cfg))
    mask = predict_mask(mp, q, p)
    est = apply_mask_reconstruct(mp, mask, cfg, len(mixture))
    return est, mask


# ---------------------------------------------------------------------------
# Objective and analytic gradients
# ---------------------------------------------------------------------------

def loss(est: Waveform, target: Waveform, lam: float = LOSS_LAMBDA) -> float:
    """Separation objective, lower is better.

    Nonzero target: -lam * SDR - (1 - lam) * SI-SDR.
    Exactly-zero target: mean estimate power in dB, floored at 1e-12.
    """
    if len(est) != len(target):
        raise ValueError("length mismatch between estimate and target")
    if not np.any(target.samples):
        n = len(est)
        return 10.0 * math.log10(_SILENCE_EPS + est.energy / n)
    return -lam * metrics.sdr(est, target) - (1.0 - lam) * metrics.sisdr(est, target)


def grad_loss_wrt_estimate(est: Waveform, target: Waveform, lam: float = LOSS_LAMBDA) -> np.ndarray:
    """d loss / d est[i], analytically (same shape as the estimate samples)."""
    if len(est) != len(target):
        raise ValueError("length mismatch between estimate and target")
    x = est.samples
    t = target.samples
    if not np.any(t):
        n = x.size
        return (2.0 * _DB_FACTOR) * x / (n * _SILENCE_EPS + float(np.dot(x, x)))

    # SDR branch: only the denominator ||t - x||^2 depends on x
    diff = t - x
    den_sdr = float(np.dot(diff, diff)) + metrics._eps(target.energy)
    g_sdr = (2.0 * _DB_FACTOR) * diff / den_sdr

    # SI-SDR branch: project x onto t; note the epsilon scales with the
    # projection energy, so its derivative enters too
    b = target.energy
    alpha = float(np.dot(x, t)) / b
    proj = alpha * t
    u = float(np.dot(proj, proj))
    resid = x - proj
    if u > metrics._EPS_REL:
        den = float(np.dot(resid, resid)) + metrics._EPS_REL * u
        g_sisdr = (2.0 * _DB_FACTOR) * (
            (alpha / u) * t - (resid + metrics._EPS_REL * alpha * t) / den
        )
    else:
        eps0 = metrics._EPS_REL * metrics._EPS_REL
        den = float(np.dot(resid, resid)) + eps0
        g_sisdr = (2.0 * _DB_FACTOR) * ((alpha / (u + eps0)) * t - resid / den)

    return -lam * g_sdr - (1.0 - lam) * g_sisdr


@dataclass
class ParamGrad:
    """Gradient arrays with the same shapes as SeparatorParams."""

    weights: np.ndarray
    bias: np.ndarray
    mix_gate: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias, self.mix_gate])


def _forward_backward(
    example: TrainExample, p: SeparatorParams, cfg: StftConfig, lam: float = LOSS_LAMBDA
) -> tuple[float, ParamGrad]:
    mixture = example.mixture
    mp = magphase(stft(mixture, cfg))
    z, feat = _logits(mp, example.query, p)
    mask = np.clip(_sigmoid(z), _MASK_LO, _MASK_HI)
    base = mp.magnitude * np.exp(1j * mp.phase)
    spec = ComplexSpectrogram(mask * base, cfg, len(mixture), mixture.sample_rate)
    est = istft(spec, cfg, len(mixture))
    value = loss(est, example.target, lam)

    g_est = grad_loss_wrt_estimate(est, example.target, lam)
    g_spec = istft_adjoint(Waveform(g_est, mixture.sample_rate), cfg).values
    g_mask = np.real(np.conj(base) * g_spec)
    g_logit = g_mask * mask * (1.0 - mask)
    g_bias = g_logit.sum(axis=0)
    g_weights = g_bias[:, None] * example.query.vector[None, :]
    g_gate = (g_logit * feat).sum(axis=0)
    return value, ParamGrad(g_weights, g_bias, g_gate)


def grad_loss_wrt_params(
    example: TrainExample, p: SeparatorParams, cfg: StftConfig, lam: float = LOSS_LAMBDA
) -> ParamGrad:
    """Full analytic gradient of the objective w.r.t. every model parameter."""
    _, grad = _forward_backward(example, p, cfg, lam)
    return grad


# ---------------------------------------------------------------------------
# Silence augmentation and training
# ---------------------------------------------------------------------------

def _silence_query(labels, n_classes: int, rng: np.random.Generator) -> QueryEmbedding:
    absent = sorted(set(range(n_classes)) - set(labels))
    if not absent:
        raise ValueError("all classes are present in the mixture; no absent class to query")
    pos = int(rng.choice(np.asarray(absent)))
    return encode_query(pos, None, n_classes, "pos_only")


def sample_silence_example(clip, n_classes: int, rng: np.random.Generator) -> TrainExample:
    """Silence example from a mixture clip: query a uniformly chosen absent
    class and supervise with exact zeros."""
    query = _silence_query(clip.labels, n_classes, rng)
    zeros = Waveform(np.zeros(len(clip.waveform)), clip.waveform.sample_rate)
    return TrainExample(clip.waveform, zeros, query, kind="silence", labels=tuple(clip.labels))


def supervised_examples(clip, n_classes: int) -> list[TrainExample]:
    """One example per retained stem: target is the stem at its mixed gain,
    positive query its label, negative queries the other labels."""
    if clip.stems is None:
        raise ValueError("clip has no retained stems")
    out = []
    labels = list(clip.labels)
    for i, stem in enumerate(clip.stems):
        gain = clip.gains[i] if clip.gains is not None else 1.0
        target = Waveform(gain * stem.waveform.samples, stem.waveform.sample_rate)
        query = encode_query(stem.label, [l for l in labels if l != stem.label], n_classes, "pos_neg")
        out.append(TrainExample(clip.waveform, target, query, kind="artificial", labels=tuple(labels)))
    return out


def segment_examples(examples: list[TrainExample], segment_samples: int) -> list[TrainExample]:
    """Chop each example into aligned fixed-length windows for training.

    Shorter windows mean more optimizer draws per epoch at the same total
    sample count, which in particular feeds silence augmentation more often.
    Examples shorter than one window are kept whole.
    """
    if segment_samples <= 0:
        return list(examples)
    out = []
    for ex in examples:
        n = len(ex.mixture)
        if n < segment_samples:
            out.append(ex)
            continue
        sr = ex.mixture.sample_rate
        for s in range(0, n - segment_samples + 1, segment_samples):
            out.append(
                TrainExample(
                    Waveform(ex.mixture.samples[s : s + segment_samples], sr),
                    Waveform(ex.target.samples[s : s + segment_samples], sr),
                    ex.query,
                    kind=ex.kind,
                    labels=ex.labels,
                )
            )
    return out


def train(
    examples: list[TrainExample],
    p0: SeparatorParams,
    epochs: int,
    silence_rate: float,
    rng: np.random.Generator,
    cfg: StftConfig,
    lam: float = LOSS_LAMBDA,
    mode_proportions: tuple[float, float, float] = DEFAULT_MODE_PROPORTIONS,
    on_epoch=None,
) -> tuple[SeparatorParams, list[float]]:
    """Adam-style moment descent over shuffled example draws.

    Each non-silence draw re-samples its query mode; with probability
    ``silence_rate`` the draw is replaced by a silence example whose query
    class is absent from that mixture (skipped when every class is present).
    Returns the trained parameters and the per-epoch mean loss trace.
    Raises :class:`DivergenceError` as soon as the loss goes non-finite.
    """
    if not examples:
        raise ValueError("empty training set")
    if not (0.0 <= silence_rate < 1.0):
        raise ValueError("silence_rate must be in [0, 1)")
    p = p0.copy()
    n_classes = p.n_classes
    m_w = np.zeros_like(p.weights)
    v_w = np.zeros_like(p.weights)
    m_b = np.zeros_like(p.bias)
    v_b = np.zeros_like(p.bias)
    m_g = np.zeros_like(p.mix_gate)
    v_g = np.zeros_like(p.mix_gate)
    b1, b2 = p.beta1, p.beta2
    lr = p.step_size
    adam_eps = 1e-8
    step = 0
    trace: list[float] = []

    for epoch in range(epochs):
        for arr in (p.weights, p.bias, p.mix_gate):
            if not np.all(np.isfinite(arr)):
                raise DivergenceError(f"parameters became non-finite entering epoch {epoch}")
        order = rng.permutation(len(examples))
        epoch_losses = []
        for idx in order:
            ex = examples[int(idx)]
            if silence_rate > 0.0 and rng.random() < silence_rate:
                absent = set(range(n_classes)) - set(ex.labels)
                if absent:
                    query = _silence_query(ex.labels, n_classes, rng)
                    zeros = Waveform(np.zeros(len(ex.mixture)), ex.mixture.sample_rate)
                    ex = TrainExample(ex.mixture, zeros, query, kind="silence", labels=ex.labels)
            if ex.kind != "silence":
                mode = sample_query_mode(rng, mode_proportions)
                ex = TrainExample(ex.mixture, ex.target, query_with_mode(ex.query, mode),
                                  kind=ex.kind, labels=ex.labels)
            value, grad = _forward_backward(ex, p, cfg, lam)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, example {int(idx)} (kind={ex.kind})"
                )
            epoch_losses.append(value)
            step += 1
            corr1 = 1.0 - b1 ** step
            corr2 = 1.0 - b2 ** step
            for m, v, g, arr in (
                (m_w, v_w, grad.weights, p.weights),
                (m_b, v_b, grad.bias, p.bias),
                (m_g, v_g, grad.mix_gate, p.mix_gate),
            ):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                arr -= lr * (m / corr1) / (np.sqrt(v / corr2) + adam_eps)
        mean_loss = float(np.mean(epoch_losses))
        trace.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, p, mean_loss)
    return p, trace


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "sepkit-checkpoint-v1"


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).astype(np.float64)


def save_checkpoint(path, params: SeparatorParams, cfg: StftConfig, n_classes: int, seed: int) -> None:
    """Self-describing JSON checkpoint; identical inputs give identical bytes."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stft": {
            "n_fft": cfg.n_fft,
            "hop": cfg.hop,
            "window": cfg.window,
            "center_padding": cfg.center_padding,
        },
        "n_classes": n_classes,
        "n_bins": params.n_bins,
        "seed": seed,
        "hyper": {"step_size": params.step_size, "beta1": params.beta1, "beta2": params.beta2},
        "arrays": {
            "weights": _encode_array(params.weights),
            "bias": _encode_array(params.bias),
            "mix_gate": _encode_array(params.mix_gate),
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def load_checkpoint(path) -> tuple[SeparatorParams, StftConfig, int, int]:
    """Returns (params, stft config, n_classes, seed)."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    s = payload["stft"]
    cfg = StftConfig(s["n_fft"], s["hop"], s["window"], s["center_padding"])
    h = payload["hyper"]
    params = SeparatorParams(
        weights=_decode_array(payload["arrays"]["weights"]),
        bias=_decode_array(payload["arrays"]["bias"]),
        mix_gate=_decode_array(payload["arrays"]["mix_gate"]),
        step_size=h["step_size"],
        beta1=h["beta1"],
        beta2=h["beta2"],
    )
    if params.n_classes != payload["n_classes"]:
        raise ValueError("checkpoint n_classes disagrees with weight shape")
    return params, cfg, int(payload["n_classes"]), int(payload["seed"])
