"""blendtrack: half-face blend-shape regression pipeline.

Library + CLI covering the full loop: synthetic two-camera capture, blink-based
stream synchronization, weighted-L1 training of a small convolutional
regressor, user calibration, millimeter mesh-vertex evaluation, and a latency
benchmark.
"""

from .blendshapes import (
    ALL_NAMES,
    CENTER_NAMES,
    HalfFacePrediction,
    LEFT_NAMES,
    RIGHT_NAMES,
    Side,
    extract_half_target,
    merge_half_predictions,
    mirror_center,
    partition,
)
from .mesh import FaceMesh, MmScale, canthal_scale, default_face_mesh, deform, load_mesh, save_mesh
from .metrics import (
    CorrelationReport,
    VertexErrorReport,
    aggregate_errors,
    improvement_ratio,
    pearson_per_blendshape,
    vertex_error,
)
from .net import RegressorModel, load_weights, save_weights, train_step, weighted_l1_loss
from .schemes import (
    SplitPlan,
    TrainConfig,
    calibrate,
    calibration_curve,
    evaluate_model,
    make_split,
    predict_full_face,
    train_user_independent,
)

__version__ = "0.1.0"
