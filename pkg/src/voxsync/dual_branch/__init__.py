"""Coupled multiview-image and voxel-latent flow models (stage 1)."""
from .flow import FlowSample, euler_integrate, flow_matching_loss, guided_velocity, make_noisy_sample
from .joint import JointModel, joint_denoise_step
from .networks import ConditionEmbedding, ConditionEncoder
from .structure import StructureAutoencoder, decode_structure
from .training import (
    JointSample,
    Stage1Batch,
    Stage1Trainer,
    build_joint_model,
    draw_null_mask,
    load_stage1,
    sample_joint,
    train_joint_step,
)

__all__ = [
    "ConditionEmbedding",
    "ConditionEncoder",
    "FlowSample",
    "JointModel",
    "JointSample",
    "Stage1Batch",
    "Stage1Trainer",
    "StructureAutoencoder",
    "build_joint_model",
    "decode_structure",
    "draw_null_mask",
    "euler_integrate",
    "flow_matching_loss",
    "guided_velocity",
    "joint_denoise_step",
    "load_stage1",
    "make_noisy_sample",
    "sample_joint",
    "train_joint_step",
]
