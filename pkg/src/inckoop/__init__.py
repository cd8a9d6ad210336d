"""Incremental Koopman lifting: learned lifted linear models, box-constrained MPC,
dataset/dimension growth and EDMD convergence experiments."""

from .dataset import Dataset, Normalizer, ReferenceRepository, Segment
from .koopman import KoopmanModel, TrainConfig, edmd_fit, train_koopman
from .mpc import MpcConfig, mpc_step, solve_box_qp, track_reference
from .plants import PlantId, PlantSpec, default_spec

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Normalizer", "ReferenceRepository", "Segment",
    "KoopmanModel", "TrainConfig", "edmd_fit", "train_koopman",
    "MpcConfig", "mpc_step", "solve_box_qp", "track_reference",
    "PlantId", "PlantSpec", "default_spec",
]
