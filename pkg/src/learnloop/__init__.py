"""Closed-loop personalized learning engine: cognitive diagnosis, adaptive
item selection, and evidence-grounded feedback."""

from .diagnosis import (
    DivergenceError,
    Metrics,
    NcdModel,
    TrainConfig,
    bce_loss,
    evaluate,
    fit,
    grad_check,
    interaction,
    mastery_table,
    predict,
    train_epoch,
)
from .ingest import (
    DataBundle,
    IdMaps,
    IngestError,
    KnowledgeGraph,
    QMatrix,
    ResponseDataset,
    ResponseRecord,
    build_q_matrix,
    load_canonical,
    parse_logs,
    split_dataset,
)
from .selection import (
    SelectionState,
    WeightMatrix,
    expected_model_change,
    filter_candidates,
    info_score,
    marginal_gain,
    select_next,
    update_ability,
    weight_matrix,
)

__version__ = "0.1.0"
