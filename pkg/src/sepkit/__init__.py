"""sepkit: query-conditioned spectral-mask sound separation with a
remix-gated self-training data engine.

Submodules
----------
dsp        STFT / inverse STFT / mask application and the exact adjoint
metrics    SDR, SI-SDR, improvement, silence-purity, and remix metrics
corpus     deterministic synthetic corpus, WAV and manifest persistence
separator  query-conditioned mask model, objective, analytic gradients,
           silence augmentation, training
engine     label-exhaustive separation, remix filtering, pool management
config     JSON run configuration
cli        synth | train | engine | eval | report
"""

from .dsp import (
    DESK_STFT,
    PAPER_STFT,
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
from .metrics import (
    MetricPair,
    re_sdr,
    re_sisdr,
    sdr,
    sdri,
    silence_sdr,
    silence_sisdr,
    sisdr,
    sisdri,
)
from .corpus import (
    CleanTrack,
    ManifestRecord,
    MixtureClip,
    SourceClass,
    build_mixture,
    generate_source,
    read_manifest,
    read_wav,
    write_manifest,
    write_wav,
)
from .separator import (
    QueryEmbedding,
    SeparatorParams,
    TrainExample,
    encode_query,
    grad_loss_wrt_estimate,
    grad_loss_wrt_params,
    init_params,
    loss,
    predict_mask,
    sample_query_mode,
    sample_silence_example,
    separate,
    train,
)
from .engine import (
    EnginePools,
    EngineSchedule,
    FilterThresholds,
    IterationReport,
    TrackCandidate,
    build_itt_example,
    build_sst_example,
    filter_candidate_clip,
    remix_and_score,
    run_engine_iteration,
    separate_all_labels,
)

__version__ = "0.1.0"
