"""Globally consistent LiDAR mapping with voxelized GICP matching-cost factors."""

from .config import PipelineConfig, load_config
from .evaluation import Trajectory, ablation_swap, compute_mme, compute_rte
from .factors import MatchingCostFactor, RelativePoseFactor, RobustKernel, gicp_align
from .mapping import GlobalMapper, LocalWindow, MappingPipeline, Submap, local_insert
from .optimizer import LMSettings, MappingGraph, optimize
from .pointcloud import PointCloud, estimate_covariances
from .se3 import Pose
from .synthetic import SyntheticSceneSpec, generate_synthetic_sequence
from .voxelmap import GaussianVoxelMap, build_voxelmap, overlap_rate

__version__ = "0.1.0"

__all__ = [
    "GaussianVoxelMap",
    "GlobalMapper",
    "LMSettings",
    "LocalWindow",
    "MappingGraph",
    "MappingPipeline",
    "MatchingCostFactor",
    "PipelineConfig",
    "PointCloud",
    "Pose",
    "RelativePoseFactor",
    "RobustKernel",
    "Submap",
    "SyntheticSceneSpec",
    "Trajectory",
    "ablation_swap",
    "build_voxelmap",
    "compute_mme",
    "compute_rte",
    "estimate_covariances",
    "generate_synthetic_sequence",
    "gicp_align",
    "load_config",
    "local_insert",
    "optimize",
    "overlap_rate",
]
