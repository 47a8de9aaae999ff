"""Zero-shot pairwise point cloud registration."""

__version__ = "0.1.0"

from .cloud import PointCloud, SpatialIndex, farthest_point_sampling, pca, voxel_downsample  # noqa: E402
from .config import PipelineConfig, load_config  # noqa: E402
from .pipeline import RegistrationReport, register  # noqa: E402
from .solver import Pose  # noqa: E402

__all__ = [
    "PointCloud",
    "SpatialIndex",
    "farthest_point_sampling",
    "pca",
    "voxel_downsample",
    "PipelineConfig",
    "load_config",
    "RegistrationReport",
    "register",
    "Pose",
]
