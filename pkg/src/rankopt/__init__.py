"""Metric learning by direct optimization of mean Average Precision.

Trains an embedding model so that per-query rankings of a batch score
well under AP, using either the margin-rescaled structured hinge update
or the direct loss gradient (positive/negative) update, both built on
exact loss-augmented inference over ranking interleavings.
"""

from .data_episodes import (
    Dataset,
    EpisodeSpec,
    evaluate,
    generate_synthetic,
    load_dataset,
    run_episode,
    sample_batch,
    save_dataset,
    split_by_class,
)
from .inference import (
    AugmentedObjective,
    Interleaving,
    brute_force_augmented,
    loss_augmented_inference,
    standard_inference,
)
from .learner import GradientRule, TrainConfig, batch_gradient, score_gradient, train
from .ranking_metrics import (
    LabeledBatch,
    RankOrder,
    RelevanceMask,
    ap_task_loss,
    average_precision,
    mean_average_precision,
    precision_at,
)
from .scoring import (
    EmbeddingModel,
    PairwiseRanking,
    QueryDecomposition,
    consistency_check,
    decompose_batch,
    embed,
    load_model,
    save_model,
    score,
    similarity,
)

__version__ = "0.1.0"
