"""Multilinear tongue-shape modelling, EMA registration, and trajectory synthesis."""

from .ema import (
    EmaRecording,
    PhoneClass,
    Segment,
    Segmentation,
    align_to_reference,
    interpolate_invalid,
    load_recording,
    parse_labels,
    phone_class,
    select_channels,
)
from .fitting import (
    Correspondence,
    FitOptions,
    FitResult,
    PoseTrajectory,
    estimate_correspondence,
    estimate_speaker,
    eval_energy,
    fit_frame,
    fit_sequence,
    virtual_ema,
)
from .mesh import Mesh, MeshCorpus, center, load_obj, nearest_vertex, save_obj
from .model import (
    ModelParams,
    MultilinearModel,
    build_model,
    generate,
    load_model,
    save_model,
    truncate,
)
from .synthesis import (
    StatModel,
    StreamSpec,
    compute_deltas,
    mlpg,
    synthesize,
    train,
)
from .tensor import Tensor3, hosvd, mode_multiply, mode_unfold, svd

__version__ = "0.1.0"
