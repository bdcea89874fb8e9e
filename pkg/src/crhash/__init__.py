"""Deep hashing with hash centers that are reassigned from a fixed codebook during training."""

from .assignment import (
    CenterAssignment,
    CostMatrix,
    build_cost_matrix,
    fullspace_reassign,
    greedy_assign,
    hungarian_assign,
    initial_assignment,
    reassign_centers,
)
from .data import Dataset, SynthSpec, generate_synthetic, read_dataset, write_dataset
from .errors import (
    ConfigError,
    CRHError,
    DataFormatError,
    EmptyClassError,
    InfeasibleAssignmentError,
)
from .evaluation import map_at_k, pcc, semantic_alignment_report
from .hamming import (
    BinaryCode,
    Codebook,
    HeadLayout,
    codebook_distance_stats,
    hamming_distance,
    sample_codebook,
)
from .model import HashModel, LossConfig, backward, encode, forward, scale_factor
from .trainer import TrainConfig, UpdateSchedule, train, write_run

__all__ = [
    "BinaryCode", "Codebook", "HeadLayout", "hamming_distance", "sample_codebook",
    "codebook_distance_stats", "CostMatrix", "CenterAssignment", "build_cost_matrix",
    "hungarian_assign", "greedy_assign", "reassign_centers", "initial_assignment",
    "fullspace_reassign", "HashModel", "LossConfig", "forward", "backward", "encode",
    "scale_factor", "TrainConfig", "UpdateSchedule", "train", "write_run", "Dataset",
    "SynthSpec", "generate_synthetic", "read_dataset", "write_dataset", "map_at_k", "pcc",
    "semantic_alignment_report", "CRHError", "ConfigError", "DataFormatError",
    "EmptyClassError", "InfeasibleAssignmentError",
]
__version__ = "0.1.0"
