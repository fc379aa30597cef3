"""Geometric probing of neural-network activations.

Trains linear probes that map activations into low-dimensional spaces
where Euclidean geometry mirrors linguistic structure: articulatory
feature counts between phonemes, path lengths in a hypernymy graph, and
path lengths in dependency trees.  Includes the dataset builders, the
evaluation metrics, and the longitudinal analyses needed to track how
such subspaces emerge over a model's training run.
"""

__version__ = "0.1.0"

from .analysis import (
    CHILD_WORDS_PER_YEAR,
    AnalysisError,
    DegenerateCurveError,
    EmergenceCurve,
    EncodingResult,
    RidgeCVResult,
    data_gap,
    emergence_point,
    fit_emergence,
    incremental_r2,
    joint_outliers,
    probe_unit_norms,
    relative_scores,
    ridge_nested_cv,
    select_layers,
    subspace_alignment,
    variance_partition,
)
from .dataset import (
    Lexicon,
    LexiconError,
    SplitAssignment,
    carve_validation,
    filter_vocabulary,
    load_lexicon,
    load_split,
    sa_split,
    split_cost,
    unisemic_wordlist,
)
from .gold import (
    ConlluError,
    DependencySentence,
    PhonemeFeatureTable,
    SemanticGraph,
    bundled_vowel_features,
    category_members,
    graph_distances,
    linear_tree_distances,
    load_edge_tsv,
    load_feature_csv,
    parse_conllu,
    phoneme_dissimilarity,
    phoneme_distance_matrix,
    tree_distance_matrix,
)
from .metrics import (
    ConstantInputError,
    EvalGrouping,
    EvalReport,
    MetricError,
    average_ranks,
    category_centroids,
    decode_uuas,
    eval_distance_probe,
    knn_f1,
    large_categories,
    linear_tree_control,
    mst,
    pairwise_sq_distances,
    projected_sq_distances,
    rank_score,
    spearman,
    spearman_null,
    uuas,
)
from .probe import (
    GraphGold,
    GridResult,
    OptimizerState,
    PhonemeGold,
    Probe,
    ProbeError,
    SentenceGold,
    TrainConfig,
    amsgrad_step,
    contrastive_loss,
    contrastive_loss_gradient,
    distance_loss,
    distance_loss_gradient,
    grid_search,
    init_probe,
    learning_rate_grid,
    load_probe,
    parse_batch_spec,
    save_probe,
    train_probe,
)
from .tensor_io import (
    ActivationMatrix,
    BadMagicError,
    HeaderMismatchError,
    NonFiniteError,
    Span,
    SpanTable,
    TensorFormatError,
    TruncatedPayloadError,
    load_spans,
    pool_spans,
    read_tensor,
    save_spans,
    write_tensor,
)

__all__ = [name for name in dir() if not name.startswith("_")]
