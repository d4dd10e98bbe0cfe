"""Numerical toolkit for quasi-conformal blenders: covering certificates, conformal
orbit branches, image-ball geometry, an explicit affine blender and the
projective sphere action."""

__version__ = "0.1.0"

from .blender import Blender, build_affine_blender, verify_blender_assumptions
from .branch import Branch, greedy_conformal_branch, random_branch
from .covering import (CoveringCertificate, SimplexRegion, auto_tune_parameters, build_simplex_generators,
                       region_membership, verify_covering_frames, verify_covering_group)
from .frames import FramePoint, push_frame
from .linalg import conformality, co_norm, mat_exp, mat_log, normalized, operator_norm, svd
from .maps import AffineMap, Ball, GeneratorFamily, ProjectiveMap

__all__ = ["Blender", "Branch", "Ball", "AffineMap", "CoveringCertificate", "FramePoint", "GeneratorFamily",
           "ProjectiveMap", "SimplexRegion", "auto_tune_parameters", "build_affine_blender",
           "build_simplex_generators", "co_norm", "conformality", "greedy_conformal_branch", "mat_exp", "mat_log",
           "normalized", "operator_norm", "push_frame", "random_branch", "region_membership", "svd",
           "verify_blender_assumptions", "verify_covering_frames", "verify_covering_group"]
