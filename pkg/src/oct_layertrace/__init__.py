"""Retinal layer boundary tracing for OCT B-scans: CNN side outputs plus a BLSTM tracer."""

from .augment import AugmentSpec, Sample, apply_augmentations, column_roll
from .data import (
    BOUNDARY_NAMES,
    MIXED_BOUNDARIES,
    PhantomSpec,
    Volume,
    decode_regions,
    encode_gt,
    generate_dataset,
    generate_phantom,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .estimator import LayerSegmenter, infer_scans
from .exceptions import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    EncodeError,
    InputTooWideError,
    LayerTraceError,
    SpecInfeasibleError,
    SplitError,
)
from .metrics import MetricsReport, boundary_mae, evaluate, inter_marker_error, ordering_violation_rate
from .model import LayerTraceNet, ModelConfig, load_model, save_model
from .preprocess import BScanStandardizer, standardize
from .tensor import Tensor, no_grad
from .training import Adadelta, EmphasisState, TrainConfig, train

__version__ = "0.1.0"
