"""Differentiable decision forests through Gaussian input perturbation.

A forest of axis-aligned trees is replaced during training by its expected
output under Gaussian noise on the input. That expectation has a closed
form (products of normal CDF differences per leaf region), so gradients flow
to an embedding network placed in front of the forest and to the leaf
values, while the deployed model still routes with hard comparisons.
"""

from .boosting import BoostingConfig, train_boosted_forest
from .datasets import Dataset, SyntheticSpec, generate, load_csv, split, write_csv
from .exceptions import DimensionError, DivergenceError, ForestFormatError, MalformedTreeError
from .forest import (
    Forest,
    Leaf,
    SplitNode,
    Tree,
    evaluate_forest,
    evaluate_forest_batch,
    evaluate_tree,
    extract_leaf_regions,
    generate_random_forest,
    generate_random_tree,
)
from .neural import EmbeddingNet, Layer
from .serialization import (
    export_forest,
    import_forest,
    load_embedding,
    load_forest,
    load_model,
    save_embedding,
    save_forest,
    save_model,
)
from .smoothing import (
    PerturbationSpec,
    SmoothedForest,
    smoothed_evaluate,
    smoothed_gradient_input,
    smoothed_gradient_leaves,
)
from .training import Model, TrainConfig, fit, predict, train_step

__version__ = "0.1.0"
