"""Stereo X-ray feature localization: phantoms, projection, detection, matching, 3D mapping."""

__version__ = "0.1.0"

from .detector import DetectorParams, FeatureMask, calibrate, detect, stitch, tile  # noqa: E402
from .evaluation import ConfusionCounts, confusion, localization_error, roc  # noqa: E402
from .geometry import (  # noqa: E402
    GridSpec, Ray, StereoRig, ViewGeometry, closest_approach, default_rig, epipolar_curve,
    pixel_ray, project_point,
)
from .mapper import Feature3D, reconstruct_line, triangulate, volumetric_map  # noqa: E402
from .matcher import FeatureCandidate, Match, extract_candidates, match_lines, match_points  # noqa: E402
from .phantom import (  # noqa: E402
    FeatureSetTruth, PhantomRecipe, Volume3D, dataset, generate_phantom, stamp_features,
)
from .projector import ProjectionImage, backproject, fbp_sum, forward_project, ramp_filter  # noqa: E402
