"""3D-aided pose-invariant face recognition in a shared UV texture space."""

from .datamodel import DataRecord, ImageBuffer, PipelineConfig, Sigset, load_config, read_sigset
from .errors import UVFaceError
from .geometry import AnnotatedFaceModel, ProjectionMatrix, estimate_pose, refine_pose_lm
from .lifting import MaskState, lift_texture, rasterize_geometry_image, zbuffer_visibility
from .matching import aggregate_template, identify, match_signatures
from .signature import Preset, Signature, extract_signature, make_layout

__version__ = "0.1.0"

__all__ = [
    "AnnotatedFaceModel",
    "DataRecord",
    "ImageBuffer",
    "MaskState",
    "PipelineConfig",
    "Preset",
    "ProjectionMatrix",
    "Signature",
    "Sigset",
    "UVFaceError",
    "aggregate_template",
    "estimate_pose",
    "extract_signature",
    "identify",
    "lift_texture",
    "load_config",
    "make_layout",
    "match_signatures",
    "rasterize_geometry_image",
    "read_sigset",
    "refine_pose_lm",
    "zbuffer_visibility",
]
