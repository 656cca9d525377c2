"""Structure-guided deformable registration of image pairs.

Pipeline: hand-designed multi-scale features, a shared k-means codebook with
the gap statistic choosing k, and Adam over a dense displacement field under
a similarity + smoothness + label-consistency loss.
"""

from .clustering import LabelMap, SoftLabelMap
from .errors import NonFiniteLoss, SrnetError
from .imaging import Image, LandmarkSet, load_image, load_landmarks, save_image
from .losses import LossReport, LossWeights, loss_total
from .optimize import RegConfig, register_pair
from .warp import DisplacementField, warp_image

__version__ = "0.1.0"

__all__ = [
    "DisplacementField",
    "Image",
    "LabelMap",
    "LandmarkSet",
    "LossReport",
    "LossWeights",
    "NonFiniteLoss",
    "RegConfig",
    "SoftLabelMap",
    "SrnetError",
    "load_image",
    "load_landmarks",
    "loss_total",
    "register_pair",
    "save_image",
    "warp_image",
]
