"""Cascaded liver/lesion CT segmentation toolkit.

Volumetric data types and MetaImage I/O, slice-wise preprocessing, a small
trainable unary network with class-weighted loss, dense 3D CRF refinement
with linear-time Gaussian filtering, two-stage cascade orchestration,
grand-challenge quality metrics, a random-search CRF tuner and synthetic
phantoms for end-to-end testing.
"""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    BoundingBox,
    LabelVolume,
    ProbVolume,
    QDistribution,
    Volume3D,
    crop,
    load_volume,
    resample,
    save_volume,
)
from .crf import CrfParams, brute_force_map, energy, infer, meanfield_step  # noqa: F401
from .cascade import CascadeConfig, fuse_labels, liver_roi, run_cascade  # noqa: F401
from .metrics import MetricsReport, evaluate  # noqa: F401
from .phantom import PhantomSpec, generate, oracle_unary  # noqa: F401
