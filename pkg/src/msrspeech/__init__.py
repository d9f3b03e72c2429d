"""Multi-sampling-rate adaptive self-supervised speech pre-training, desk scale.

Rate-specific strided-conv frontends map raw audio at 16/22.05/24/48 kHz onto
a shared 20 ms frame grid; a small transformer encoder is pre-trained with a
masked-prediction objective over a single shared k-means codebook; probes
quantify what happens when the frame grid assumption is violated.
"""

from .errors import (
    AlignmentError,
    CheckpointError,
    DuplicateRateError,
    EmptyRateError,
    FormatError,
    MsrSpeechError,
    PlanError,
    TooShortError,
    TrainingError,
    UnsupportedRateError,
)
from .plan import (
    CANONICAL_RATES,
    DownsamplePlan,
    canonical_plan,
    derive_plan,
    frame_count,
    receptive_field,
    validate_plan,
)
from .dsp import (
    CorpusSpec,
    ManifestEntry,
    SpectralFrames,
    UtteranceLabelTrack,
    Waveform,
    decimate,
    generate_corpus,
    generate_utterance,
    mfcc,
    read_manifest,
    read_wav,
    write_manifest,
    write_wav,
)
from .frontend import ConvBranch, FrameFeatures, MultiRateFrontend
from .encoder import EncoderConfig, encode, encoder_backward, init_encoder_params
from .objective import (
    Codebook,
    MaskSpec,
    ProjectionHead,
    align_lengths,
    apply_mask,
    assign_labels,
    kmeans_fit,
    make_mask,
    masked_prediction_loss,
)
from .model import ModelConfig, PretrainModel
from .trainer import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    overhead_report,
    save_checkpoint,
    schedule_batches,
)
from .probe import (
    LayerWeightProfile,
    MismatchReport,
    layer_weight_report,
    mismatch_report,
    probe_train,
    rate_invariance,
)

__version__ = "0.1.0"
