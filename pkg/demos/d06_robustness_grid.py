"""
Sensitivity to the BCE weight and the entropic weight
=====================================================

Train one model per (delta, lambda) cell, then score the full generation
pipeline. Every cell must finish with a finite loss.
"""

import warnings

from ipot.dataio import synth_dataset
from ipot.sweep import format_sweep, robustness_sweep
from ipot.trainer import TrainConfig

warnings.simplefilter("ignore")
data = synth_dataset(3, 12, 3, 8, 0.05, seed=21)
cells = robustness_sweep(data, TrainConfig(lr=1e-3, epochs=5))
print(format_sweep(cells))
