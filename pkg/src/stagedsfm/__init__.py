"""Staged self-supervised training for monocular depth, ego-motion and
camera-intrinsics estimation, with a synthetic-scene generator for
ground-truth verification."""

__version__ = "0.1.0"

from .geometry import (EgoMotion, Intrinsics, SampleGrid, disparity_to_depth,
                       flow_to_grid, rigid_reproject, scale_pyramid,
                       visibility_from_backward_flow, warp_bilinear)
from .losses import LossReport, LossWeights
from .trainer import StepPlan, TrainConfig, Trainer
