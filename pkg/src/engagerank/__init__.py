"""Ordinal engagement scoring with a momentum-queue ranking loss.

Feature plumbing lives in ``featurepipe``, the scoring network with exact
numpy gradients in ``model``, the ranking mechanism and baseline losses in
``mocorank``, evaluation quantities in ``metrics``, and the training loop,
checkpointing, and gradient checks in ``harness``.
"""

from .featurepipe import (
    AUDIO_META_DIM,
    DEFAULT_CHANNELS,
    DEFAULT_CHUNKS,
    DEFAULT_GLOBAL_DIM,
    DEFAULT_MIN_FRAMES,
    N_CLASSES,
    REFERENCE_PROPORTIONS,
    SPEECH_DIM,
    ChunkedFeatures,
    Dataset,
    EngagementLevel,
    FrameSequence,
    SampleRecord,
    apportion,
    chunk_summarize,
    class_balanced_sampler,
    latent_band,
    load_records,
    prepare_record,
    repeat_pad,
    save_records,
    sequential_batches,
    split_dataset,
    synth_dataset,
)
from .harness import (
    TrainConfig,
    TrainState,
    adamw_step,
    bench_losses,
    cosine_lr,
    evaluate,
    grad_check,
    grad_check_loss,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    train,
    train_epochs,
    train_two_stage,
)
from .metrics import (
    MetricsReport,
    RatingMatrix,
    accuracy_metrics,
    confusion_matrix,
    icc_2_1,
    write_recall_csv,
)
from .mocorank import (
    ClassCenters,
    MomentumEncoder,
    ScorePool,
    ScorePoolEntry,
    cb_focal_loss,
    ce_loss,
    center_loss,
    margin,
    momentum_update,
    mse_loss,
    multi_margin_loss,
    pairwise_matrix,
    pairwise_term,
    pool_init,
    pool_push,
)
from .model import (
    ModelConfig,
    ModelParams,
    Trace,
    attention_fuse,
    audio_fuse,
    backward,
    classify,
    concat_fuse,
    forward,
    forward_batch,
    init_params,
    prepare_batch,
    score_head,
    temporal_encoder,
)

__version__ = "0.1.0"
