"""Temporal instance-query alignment and motion-aware context enhancement on numpy."""

from .assignment import align_sequence, cosine_cost, hungarian_min
from .metrics import boundary_f, query_consistency, region_j
from .model import MtcmConfig, aligner_forward, init_mtcm, mce_forward
from .pipeline import Model, ModelConfig

__version__ = "0.1.0"
