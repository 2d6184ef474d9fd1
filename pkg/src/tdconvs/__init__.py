"""Twin deformable point convolutions for ALS point cloud segmentation."""

from .geom import (CylinderMap, GridSpec2D, GridSpec3D, PointSet, SphereVolume,
                   cylindricize, fps, grid_sample_2d, grid_sample_3d, group,
                   interpolate_3nn, knn, spheroidize)
from .net import (MultiScaleOutput, NetworkConfig, NetworkState, Trainer,
                  build_network, decoder_forward, encoder_forward, forward,
                  predict, seg_loss)
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "CylinderMap", "GridSpec2D", "GridSpec3D", "MultiScaleOutput",
    "NetworkConfig", "NetworkState", "PointSet", "SphereVolume", "Tensor",
    "Trainer", "backward", "build_network", "cylindricize", "decoder_forward",
    "encoder_forward", "forward", "fps", "grid_sample_2d", "grid_sample_3d",
    "group", "interpolate_3nn", "knn", "predict", "seg_loss", "spheroidize",
]
