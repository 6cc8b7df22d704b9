"""Closed-form kinematic-tree refinement of 3D body pose from 2D keypoints."""

from .camera import (CameraIntrinsics, cast_ray, project, solve_translation,
                     update_translation)
from .depth_solver import BoneSolutionPair, classify_facing, solve_child
from .errors import (AmbiguousAxisError, DegenerateConfigurationError, KitroError,
                     NonProjectableError, NumericalDegradationError)
from .hypothesis import (HypothesisTree, PathSelection, apply_pose_update,
                         build_tree, greedy_select, score_edges, select_path)
from .refiner import RefineConfig, RefinementTrace, refine, refine_batch
from .rotation import (SwingTwist, best_rotation_multi, rodrigues, rotation_cosine,
                       swing_between, swing_twist_decompose, update_joint_rotation)
from .shape_opt import (AdamState, bone_length_2d, projected_bone_length,
                        refine_shape, shape_gradient, shape_loss)
from .skeleton import (BodyState, KinematicTree, SkeletonModel, bone_length_3d,
                       default_skeleton, forward_kinematics, load_skeleton,
                       rest_joints, save_skeleton)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AmbiguousAxisError", "BodyState", "BoneSolutionPair",
    "CameraIntrinsics", "DegenerateConfigurationError", "HypothesisTree",
    "KinematicTree", "KitroError", "NonProjectableError",
    "NumericalDegradationError", "PathSelection", "RefineConfig",
    "RefinementTrace", "SkeletonModel", "SwingTwist", "apply_pose_update",
    "best_rotation_multi", "bone_length_2d", "bone_length_3d", "build_tree",
    "cast_ray", "classify_facing", "default_skeleton", "forward_kinematics",
    "greedy_select", "load_skeleton", "project", "projected_bone_length",
    "refine", "refine_batch", "refine_shape", "rest_joints", "rodrigues",
    "rotation_cosine", "save_skeleton", "score_edges", "select_path",
    "shape_gradient", "shape_loss", "solve_child", "solve_translation",
    "swing_between", "swing_twist_decompose", "update_joint_rotation",
    "update_translation",
]
