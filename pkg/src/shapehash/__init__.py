"""Shape-descriptor hashing and Hamming retrieval for centered grayscale sources.

The pipeline: sigma-clip the image, describe it with a bank of trainable
keypoint-constellation filters over DoG responses, map the descriptor to
code activations with a small MLP trained on a pairwise loss, binarize into
a compact bit code, and retrieve by exact Hamming distance.
"""

__version__ = "0.1.0"

from .cosfire import (
    CosfireFilter,
    CosfireHyperparams,
    CosfireKeypoint,
    FilterBank,
    compute_descriptor,
    configure_filter,
    filter_response_map,
    rotate_filter,
    rotation_tolerant_response,
)
from .dog import DogParams, dog_response_map, gaussian_kernel_1d, threshold_map
from .errors import (
    DataError,
    DivergenceError,
    NumericalError,
    ShapeHashError,
    ZeroVectorError,
)
from .evaluation import (
    ClassDistanceMatrix,
    QueryResult,
    ap_at_k,
    class_distance_matrix,
    map_at_k,
    map_at_r,
    mlp_flops,
    separability_ratio,
)
from .hashnet import (
    DshLossParams,
    MlpParams,
    TrainConfig,
    dsh_loss,
    dsh_loss_grad,
    forward,
    pair_batch,
    train,
)
from .imaging import load_image, read_manifest, sigma_clip, write_manifest
from .retrieval import (
    HashCode,
    RetrievalIndex,
    binarize,
    hamming,
    query,
    threshold_sweep,
)

__all__ = [
    "__version__",
    "CosfireFilter",
    "CosfireHyperparams",
    "CosfireKeypoint",
    "FilterBank",
    "compute_descriptor",
    "configure_filter",
    "filter_response_map",
    "rotate_filter",
    "rotation_tolerant_response",
    "DogParams",
    "dog_response_map",
    "gaussian_kernel_1d",
    "threshold_map",
    "DataError",
    "DivergenceError",
    "NumericalError",
    "ShapeHashError",
    "ZeroVectorError",
    "ClassDistanceMatrix",
    "QueryResult",
    "ap_at_k",
    "class_distance_matrix",
    "map_at_k",
    "map_at_r",
    "mlp_flops",
    "separability_ratio",
    "DshLossParams",
    "MlpParams",
    "TrainConfig",
    "dsh_loss",
    "dsh_loss_grad",
    "forward",
    "pair_batch",
    "train",
    "load_image",
    "read_manifest",
    "sigma_clip",
    "write_manifest",
    "HashCode",
    "RetrievalIndex",
    "binarize",
    "hamming",
    "query",
    "threshold_sweep",
]
