"""Prompt-supervised OOD detection engine over precomputed embeddings."""

from .adapter import (
    AdapterBatch,
    AdapterState,
    LossWeights,
    PromptReps,
    adapter_gradients,
    optimize_adapters,
    total_adapter_loss,
    transform,
)
from .config import RunConfig, load_config, parse_config
from .detect import (
    MetricReport,
    ScoreRecord,
    auroc,
    aupr,
    compute_report,
    export_scores,
    fpr95,
    id_accuracy,
    mcm_score,
    ood_score,
    predict_category,
)
from .graph import MultiModalGraph, NodeKind, NodeRef, TopKConfig, build_graph
from .prompts import (
    FeatureBank,
    PromptBank,
    SuperClassPartition,
    build_prompts,
    emit_query,
    ingest_features,
    prompt_index,
    validate_partition,
)
from .store import (
    EmbeddingRecord,
    EmbeddingTable,
    Modality,
    SynthSpec,
    l2_normalize,
    load_table,
    read_table,
    save_table,
    synth_dataset,
    write_table,
)
from .vig import (
    EnergyConfig,
    ViGModel,
    energy,
    grapher_forward,
    pool_patches,
    train_vig,
    vig_forward,
    vig_gradients,
    vig_loss,
)

__version__ = "0.1.0"
