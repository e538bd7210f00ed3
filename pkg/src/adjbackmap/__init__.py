"""Effective-hypersurface reconstruction of CNN unit activations."""

from .adjoint import (
    DEFAULT_K,
    MODES,
    EvalPoint,
    HypersurfacePair,
    JacobianPair,
    Linearization,
    hypersurface_shape,
    jacobian_extended,
    mode_sum_check,
    reconstruct,
    reconstruct_many,
)
from .errors import (
    AdjointError,
    BlobError,
    DimensionError,
    LayoutError,
    ModeError,
    ModelError,
    NonFiniteError,
    OracleSizeError,
    SchemaError,
)
from .fold import BatchNormParams, extended_input, extract_bias_vector, fold_batch_norm, merge_multiplier
from .graph import Activation, ActivationTrace, Layer, ModelGraph, forward, forward_raw, unit_linear_activation
from .modelio import gen_inputs, gen_random_model, load_model, load_template, save_model
from .tensor import BiasSlice, ExtendedInput, inner_product

__version__ = "0.1.0"
