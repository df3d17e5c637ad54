"""poseforge: pose estimation of arbitrary objects relative to their own 3D model."""
from .rotcore import (
    AngleBinning,
    BinnedPose,
    EulerPose,
    decode_bins,
    encode_bins,
    euler_to_matrix,
    geodesic_distance,
    matrix_to_euler,
    shift_azimuth,
)
from .shapecore import PointCloud, TriangleMesh, load_obj, normalize, sample_surface

__all__ = [
    "AngleBinning", "BinnedPose", "EulerPose", "PointCloud", "TriangleMesh", "decode_bins",
    "encode_bins", "euler_to_matrix", "geodesic_distance", "load_obj", "matrix_to_euler",
    "normalize", "sample_surface", "shift_azimuth",
]
__version__ = "0.1.0"
