"""Structured latents, multiview feature injection and decoding to splats and meshes (stage 2)."""
from .decoders import GaussianDecoder, MeshDecoder, MeshDecoding, decode_gaussians, decode_mesh, occupancy_from_field
from .features import FeatureExtractor, InjectionModule, extract_view_features, gather_pixel_features, inject_features
from .gaussians import GaussianSet, activate, read_gaussians, render_gaussians, write_gaussians
from .latents import (
    LatentFlowModel,
    SLatEncoder,
    StructuredLatentSet,
    active_coords,
    generate_structured_latents,
    latent_flow_loss,
)
from .mesh import (
    TriMesh,
    euler_characteristic,
    extract_isosurface,
    occupancy_to_box_mesh,
    occupancy_to_field,
    occupancy_to_mesh,
    read_obj,
    render_mesh_views,
    write_obj,
)
from .training import DecoderTargets, DecoderTrainer, LatentTrainer, generated_latents, load_decoders

__all__ = [
    "DecoderTargets",
    "DecoderTrainer",
    "FeatureExtractor",
    "GaussianDecoder",
    "GaussianSet",
    "InjectionModule",
    "LatentFlowModel",
    "LatentTrainer",
    "MeshDecoder",
    "MeshDecoding",
    "SLatEncoder",
    "StructuredLatentSet",
    "TriMesh",
    "activate",
    "active_coords",
    "decode_gaussians",
    "decode_mesh",
    "euler_characteristic",
    "extract_isosurface",
    "extract_view_features",
    "gather_pixel_features",
    "generate_structured_latents",
    "generated_latents",
    "inject_features",
    "latent_flow_loss",
    "load_decoders",
    "occupancy_from_field",
    "occupancy_to_box_mesh",
    "occupancy_to_field",
    "occupancy_to_mesh",
    "read_gaussians",
    "read_obj",
    "render_gaussians",
    "render_mesh_views",
    "write_gaussians",
    "write_obj",
]
