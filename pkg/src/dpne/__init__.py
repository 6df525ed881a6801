"""Distribution preserving network embedding.

A deep autoencoder with non-negative weight pressure learns a low
dimensional embedding while a KL penalty keeps the embedding's local
neighbourhood distribution close to the input space's, estimated by
k-NN kernel density.  Includes baselines (plain and non-negative sparse
autoencoders) and clustering evaluation (accuracy under optimal label
matching, adjusted mutual information).
"""

__version__ = "0.1.0"

from .cluster_eval import (
    adjusted_mutual_info,
    cluster_accuracy,
    evaluate_clustering,
    kmeans_pp,
)
from .data_io import (
    DataMatrix,
    SyntheticSpec,
    gen_synthetic,
    load_delimited,
    load_embedding,
    load_idx,
    load_params,
    save_embedding,
    save_params,
    save_receptive_fields,
    subsample,
)
from .density import (
    calibrate_bandwidth,
    calibrate_bandwidths,
    dp_gradient,
    dp_objective,
    high_conditionals,
    knn_bandwidths,
    low_conditionals,
)
from .network import NetworkParams, backprop, forward, mirrored_sizes, random_params
from .trainer import TrainConfig, TrainLog, embed, train, train_baseline, train_dpne

__all__ = [
    "__version__",
    "DataMatrix",
    "NetworkParams",
    "SyntheticSpec",
    "TrainConfig",
    "TrainLog",
    "adjusted_mutual_info",
    "backprop",
    "calibrate_bandwidth",
    "calibrate_bandwidths",
    "cluster_accuracy",
    "dp_gradient",
    "dp_objective",
    "embed",
    "evaluate_clustering",
    "forward",
    "gen_synthetic",
    "high_conditionals",
    "kmeans_pp",
    "knn_bandwidths",
    "load_delimited",
    "load_embedding",
    "load_idx",
    "load_params",
    "low_conditionals",
    "mirrored_sizes",
    "random_params",
    "save_embedding",
    "save_params",
    "save_receptive_fields",
    "subsample",
    "train",
    "train_baseline",
    "train_dpne",
]
