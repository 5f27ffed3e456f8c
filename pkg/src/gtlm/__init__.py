"""Language modelling over text-attributed graphs with structural attention biases."""
from .bias import BiasConfig, BiasParameters, assemble_node_bias, count_parameters, init_bias_params
from .features import StructuralFeatures, compute_features, hermitian_eigendecomposition
from .graph import (
    GraphError,
    TextAttributedGraph,
    append_question,
    load_graphs,
    make_graph,
    sample_ego_subgraph,
    save_graphs,
    to_incidence,
    validate_graph,
)
from .model import (
    GtlmModel,
    ModelConfig,
    Trainer,
    fit,
    forward,
    generate,
    init_model,
    load_checkpoint,
    make_example,
    save_checkpoint,
)

__all__ = [
    "BiasConfig", "BiasParameters", "assemble_node_bias", "count_parameters", "init_bias_params",
    "StructuralFeatures", "compute_features", "hermitian_eigendecomposition",
    "GraphError", "TextAttributedGraph", "append_question", "load_graphs", "make_graph",
    "sample_ego_subgraph", "save_graphs", "to_incidence", "validate_graph",
    "GtlmModel", "ModelConfig", "Trainer", "fit", "forward", "generate", "init_model",
    "load_checkpoint", "make_example", "save_checkpoint",
]
