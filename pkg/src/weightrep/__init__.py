"""Coordinate-based neural representations of CNN weights."""
from .estimators import TargetClassifier, WeightPredictor
from .permutation import PermutationMap, compute_permutation
from .predictor import EncodingConfig, PredictorNet, compression_ratio, init_predictor
from .target_net import (BlobTask, ConvSpec, LabeledDataset, TargetNetwork, WeightAtlas, build_target,
                         evaluate, extract_weights, inject_weights, preset_spec, train_target)
from .training import (TrainConfig, distill_phase, fit_baseline, fit_recon_only, loss_fmd, loss_kd,
                       loss_recon, progressive_reconstruct)

__version__ = "0.1.0"

__all__ = [
    "BlobTask", "ConvSpec", "EncodingConfig", "LabeledDataset", "PermutationMap", "PredictorNet",
    "TargetClassifier", "TargetNetwork", "TrainConfig", "WeightAtlas", "WeightPredictor",
    "build_target", "compression_ratio", "compute_permutation", "distill_phase", "evaluate",
    "extract_weights", "fit_baseline", "fit_recon_only", "init_predictor", "inject_weights",
    "loss_fmd", "loss_kd", "loss_recon", "preset_spec", "progressive_reconstruct", "train_target",
]
