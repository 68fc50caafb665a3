"""Hyperparameter robustness grid over the BCE weight and the entropic weight.

Each cell trains from the same initialization and scores the trained model
with the full generation pipeline on the training pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataio import TrainPair
from .inference import InferConfig, generate
from .metrics import topk_prf
from .model import ModelParams
from .trainer import TrainConfig, train

__all__ = ["SweepCell", "pipeline_scores", "robustness_sweep", "format_sweep"]


@dataclass
class SweepCell:
    delta: float
    lam: float
    f1: dict[int, float]
    final_loss: float
    finite: bool


def pipeline_scores(
    pairs: list[TrainPair],
    params: ModelParams,
    ks=(1, 3, 5),
    cfg: InferConfig = InferConfig(),
    true_selection: bool = False,
):
    """Mean F1@K of ``generate`` against each pair's ground-truth sequence.

    With ``true_selection`` the selector is bypassed and the annotated movie
    shots are aligned directly, which scores the aligner alone.
    """
    scores = {k: [] for k in ks}
    for p in pairs:
        sel = np.unique(p.alignment[:, 0]) if true_selection else None
        edl = generate(p.movie, p.music, p.movie_durations, p.music_durations, params, cfg, selected=sel)
        pred = edl.primary_sequence()
        for k in ks:
            scores[k].append(topk_prf(p.truth_sequence(), pred, k)[2])
    return {k: float(np.mean(v)) for k, v in scores.items()}


def robustness_sweep(
    pairs: list[TrainPair],
    base: TrainConfig,
    deltas=(0.1, 1.0, 10.0),
    lams=(0.1, 1.0, 10.0),
    ks=(1, 3, 5),
    infer: InferConfig = InferConfig(),
) -> list[SweepCell]:
    cells = []
    for delta in deltas:
        for lam in lams:
            res = train(pairs, replace(base, delta=delta, lam=lam))
            losses = [r.loss for r in res.history]
            finite = all(math.isfinite(x) for x in losses)
            f1 = pipeline_scores(pairs, res.params, ks, replace(infer, lam=lam)) if finite else {}
            cells.append(SweepCell(delta, lam, f1, losses[-1] if losses else float("nan"), finite))
    return cells


def format_sweep(cells: list[SweepCell]) -> str:
    ks = sorted(cells[0].f1) if cells and cells[0].f1 else []
    head = f"{'delta':>7} {'lambda':>7} {'loss':>10}" + "".join(f"{'F1@' + str(k):>9}" for k in ks)
    lines = [head]
    for c in cells:
        vals = "".join(f"{c.f1.get(k, float('nan')):>9.4f}" for k in ks)
        lines.append(f"{c.delta:>7g} {c.lam:>7g} {c.final_loss:>10.5f}{vals}")
    return "\n".join(lines) + "\n"
