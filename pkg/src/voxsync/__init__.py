"""Coupled multiview/voxel generative modelling at desk scale."""

CONVENTION_VERSION = "voxsync-conv-1"

__version__ = "0.1.0"
