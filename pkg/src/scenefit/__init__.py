"""scenefit: recover a 3D arrangement of known objects from 2D keypoint
correspondences against a single layout image.

The pipeline is classic PnP with RANSAC per object for initialization,
followed by a joint refinement of all object poses (and a shared floor plane)
that balances reprojection accuracy against two scene priors: all objects
resting on one floor, and no two objects interpenetrating.
"""

from .errors import (
    AllObjectsNeglected,
    DegenerateGeometry,
    DepthNonPositive,
    DimensionMismatch,
    EmptyInput,
    MissingTransform,
    NoConsensus,
    NonFiniteLoss,
    NoSolution,
    PlacementFailure,
    SceneFitError,
    SchemaError,
    TooFewCorrespondences,
)
from .geom import (
    CameraIntrinsics,
    Plane,
    RigidTransform,
    Tolerances,
    fit_plane,
    plane_residual,
    project,
    quat_to_matrix,
    matrix_to_quat,
)
from .pnp import Correspondence, RansacConfig, RansacResult, ransac_pnp, solve_minimal
from .joint import (
    LossBreakdown,
    RefineConfig,
    SceneObject,
    SceneSolution,
    bbox_iou_3d,
    collision_loss,
    loss_gradient,
    optimize,
    reprojection_loss,
    surface_loss,
    total_loss,
)
from .matching import DescriptorMap, MatchReport, filter_neglect, match_descriptors, matching_score
from .arrange import (
    CompoundObject,
    SceneSpec,
    arrange_iterative,
    arrange_scene,
    baseline_circular,
    baseline_uniform,
    merge_objects,
)
from .synth import GroundTruthScene, SynthConfig, generate_scene, pose_error

__version__ = "0.1.0"

__all__ = [
    "AllObjectsNeglected",
    "CameraIntrinsics",
    "CompoundObject",
    "Correspondence",
    "DegenerateGeometry",
    "DepthNonPositive",
    "DescriptorMap",
    "DimensionMismatch",
    "EmptyInput",
    "GroundTruthScene",
    "LossBreakdown",
    "MatchReport",
    "MissingTransform",
    "NoConsensus",
    "NonFiniteLoss",
    "NoSolution",
    "PlacementFailure",
    "Plane",
    "RansacConfig",
    "RansacResult",
    "RefineConfig",
    "RigidTransform",
    "SceneFitError",
    "SceneObject",
    "SceneSolution",
    "SceneSpec",
    "SchemaError",
    "SynthConfig",
    "Tolerances",
    "TooFewCorrespondences",
    "arrange_iterative",
    "arrange_scene",
    "baseline_circular",
    "baseline_uniform",
    "bbox_iou_3d",
    "collision_loss",
    "filter_neglect",
    "fit_plane",
    "generate_scene",
    "loss_gradient",
    "match_descriptors",
    "matching_score",
    "matrix_to_quat",
    "merge_objects",
    "optimize",
    "plane_residual",
    "pose_error",
    "project",
    "quat_to_matrix",
    "ransac_pnp",
    "reprojection_loss",
    "solve_minimal",
    "surface_loss",
    "total_loss",
]
