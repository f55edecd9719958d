"""Desk-scale laboratory for continual relation learning under label noise.

The package builds contaminated task streams, selects pseudo-clean
samples with a rebooted task-local classifier, converts pseudo-noisy
samples into extra positives or hard negatives via a targeted embedding
attack, trains a projector-headed encoder with temperature-scaled
contrastive objectives, replays a small exemplar memory and answers
queries by nearest class mean.
"""

from .attack import (
    AttackConfig,
    CentroidStats,
    ContrastivePool,
    attack_success_rate,
    build_pool,
    centroid_stats,
    kl_divergence,
    noise_guided_attack,
)
from .contrastive import ContrastBatch, make_batches, nacl_loss, scl_loss
from .datastream import (
    Example,
    InputRep,
    NoiseSpec,
    TaskStream,
    generate_synthetic,
    ingest_jsonl,
    inject_noise,
    noise_type,
    partition_tasks,
    synthetic_stream,
)
from .denoise import (
    SelectionConfig,
    SelectionResult,
    select_clean,
    selection_quality,
    train_auxiliary,
)
from .harness import (
    RunConfig,
    RunReport,
    ablate,
    buffer_purity,
    last_accuracy,
    normalized_forgetting,
    run_stream,
    run_task,
    standard_fixture,
)
from .memory import (
    MemoryBuffer,
    PrototypeSet,
    compute_prototypes,
    kmeans,
    ncm_predict,
    select_exemplars,
    update_buffer,
)
from .models import (
    EncoderConfig,
    GradientReport,
    ModelState,
    embed_input,
    forward_aux,
    forward_main,
    init_model,
    optimizer_step,
)
from .reporting import emit_report, human_table, load_report

__version__ = "0.1.0"
