"""Stage regression on point clouds of embryonic cell centroids.

Modules: ``core`` (domain types), ``spatial`` (exact kNN/radius queries),
``reference`` and ``simulation`` (synthetic training embryos), ``autodiff``
and ``pointnet`` (the network), ``training``, ``storage`` and ``cli``.
"""
from .core import Embryo4D, Frame, StageLabelMap, StageRangeError, frame_to_hpf, validate_embryo
from .pointnet import PointNetRegressor, predict_ensemble
from .reference import ReferenceConfig, generate_reference
from .simulation import SimConfig, simulate
from .spatial import SpatialIndex
from .storage import load_checkpoint, load_embryo_csv, save_checkpoint, save_embryo_csv
from .training import TrainConfig, cross_validate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Embryo4D", "Frame", "StageLabelMap", "StageRangeError", "frame_to_hpf", "validate_embryo",
    "PointNetRegressor", "predict_ensemble", "ReferenceConfig", "generate_reference", "SimConfig", "simulate",
    "SpatialIndex", "load_checkpoint", "load_embryo_csv", "save_checkpoint", "save_embryo_csv",
    "TrainConfig", "cross_validate", "evaluate", "train",
]
