"""Texture-aware wafer defect enhancement and evaluation toolkit.

Numeric operators for decoupling low-contrast defects from periodic wafer
textures (high-resolution fusion branch, context-gated channel attention,
frequency-domain periodic-disturbance enhancement), a seeded synthetic
benchmark generator with exact ground truth, and the matching detection /
segmentation metric suite.  See README.md for the CLI and file formats.
"""

__version__ = "0.1.0"

from wafertex.backend import backend_name
from wafertex.fusion import FusionConfig, NyquistReport, nyquist_min_scale, p2_fuse, tri_domain_fuse
from wafertex.metrics import Detection, MetricsReport, evaluate_detections
from wafertex.mptce import MptceConfig, disturbance_map, mptce_enhance
from wafertex.muse import MuseBlock, effective_se, muse_forward
from wafertex.synthgen import AnomalySpec, GratingSpec, SceneSpec, gen_scene, standard_suite
from wafertex.tensor import ConvSpec, Tensor, conv2d, grad_check

__all__ = [
    "AnomalySpec",
    "ConvSpec",
    "Detection",
    "FusionConfig",
    "GratingSpec",
    "MetricsReport",
    "MptceConfig",
    "MuseBlock",
    "NyquistReport",
    "SceneSpec",
    "Tensor",
    "__version__",
    "backend_name",
    "conv2d",
    "disturbance_map",
    "effective_se",
    "evaluate_detections",
    "gen_scene",
    "grad_check",
    "mptce_enhance",
    "muse_forward",
    "nyquist_min_scale",
    "p2_fuse",
    "standard_suite",
    "tri_domain_fuse",
]
