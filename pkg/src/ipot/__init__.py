"""Inverse partial optimal transport for music-guided movie trailer editing.

Learns a two-tower attention encoder whose Euclidean cost, fed through an
entropic partial OT solver, reproduces observed movie/trailer shot
alignments; then selects, orders and duration-fits movie shots against a
new piece of music.
"""

from .ot import SinkhornConfig, ot_oracle, partial_sinkhorn, plan_entropy, sinkhorn
from .model import ModelParams, encode, init_params, load_checkpoint, save_checkpoint
from .dataio import TrainPair, load_dataset, synth_gen, write_dataset
from .trainer import TrainConfig, train
from .inference import InferConfig, generate
from .metrics import alignment_kl, shot_stats, topk_prf

__version__ = "0.1.0"

__all__ = [
    "SinkhornConfig",
    "sinkhorn",
    "partial_sinkhorn",
    "ot_oracle",
    "plan_entropy",
    "ModelParams",
    "init_params",
    "encode",
    "save_checkpoint",
    "load_checkpoint",
    "TrainPair",
    "load_dataset",
    "write_dataset",
    "synth_gen",
    "TrainConfig",
    "train",
    "InferConfig",
    "generate",
    "topk_prf",
    "alignment_kl",
    "shot_stats",
]
