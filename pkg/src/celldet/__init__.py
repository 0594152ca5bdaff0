"""Point-based cell detection with deformable, multi-scale point proposals."""

from .geometry import ProposalSet, PyramidLevel, bilinear_sample, generate_grid_proposals
from .model import BackboneConfig, HeadConfig, ModelConfig, ModelOutput, PointProposalNet

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "HeadConfig",
    "ModelConfig",
    "ModelOutput",
    "PointProposalNet",
    "ProposalSet",
    "PyramidLevel",
    "bilinear_sample",
    "generate_grid_proposals",
]
