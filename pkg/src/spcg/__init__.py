"""Learned multiscale point cloud geometry codec on a numpy sparse-conv engine."""
from .codec import CodecConfig, Mode, decode, encode
from .pointcloud import PointCloud, read_ply, write_ply

__version__ = "0.1.0"

__all__ = ["CodecConfig", "Mode", "PointCloud", "decode", "encode", "read_ply", "write_ply"]
