"""Bi-level training: partial entropic OT below, KL + weighted BCE above.

For each pair the encoder produces a Euclidean cost between fused movie and
music rows. The rows of the movie shots that appear in the ground truth are
solved as an entropic OT problem (row marginal = normalized selection
counts, column marginal uniform) with Sinkhorn sweeps recorded on the
autodiff tape, so the gradient of the upper-level loss reaches the encoder
through every executed iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import TrainPair
from .model import ModelParams, cost_matrix, encode, init_params, save_checkpoint
from .ot import SinkhornConfig, anneal_schedule, log_sweeps, as_marginal

__all__ = [
    "KL_DIRECTIONS",
    "TrainConfig",
    "AdamState",
    "EpochRecord",
    "TrainResult",
    "aligner_loss",
    "selector_loss",
    "unrolled_sinkhorn",
    "pair_loss",
    "batch_gradients",
    "ipot_step",
    "train",
    "format_history",
]

log = logging.getLogger(__name__)

KL_DIRECTIONS = ("ref_to_pred", "pred_to_ref")


@dataclass
class TrainConfig:
    delta: float = 1.0
    lam: float = 1.0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 500
    batch_size: int = 4
    seed: int = 0
    kl_eps: float = 1e-12
    kl_direction: str = "ref_to_pred"
    heads: int = 2
    self_residual: bool = True
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 500
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        for name in ("lam", "lr", "adam_eps", "kl_eps", "sinkhorn_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.sinkhorn_max_iter < 1 or self.heads < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, heads >= 1 and sinkhorn_max_iter >= 1 required")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(lam=self.lam, tol=self.sinkhorn_tol, max_iter=self.sinkhorn_max_iter)


class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def update(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
        self.step += 1
        bc1 = 1.0 - self.beta1**self.step
        bc2 = 1.0 - self.beta2**self.step
        new = {}
        for name in params.names:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            new[name] = params.arrays[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return ModelParams(params.dim, params.heads, new, dict(params.meta), params.self_residual)


# --- losses -----------------------------------------------------------------


def aligner_loss(pred, truth, eps: float = 1e-12, direction: str = "ref_to_pred") -> ad.Tensor2:
    """KL divergence between a predicted plan and the reference plan.

    ``ref_to_pred``: ``sum truth * (log truth - log(pred + eps))``, with
    ``0 log 0 = 0``. ``pred_to_ref``: ``sum pred * (log pred - log(truth + eps))``.
    """
    pred = ad.const(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"plan shapes differ: {pred.shape} vs {truth.shape}")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if direction == "ref_to_pred":
        pos = truth > 0
        const_part = float((truth[pos] * np.log(truth[pos])).sum())
        cross = ad.sum(ad.mul(truth, ad.log(ad.add(pred, eps))))
        return ad.add(ad.neg(cross), const_part)
    if direction == "pred_to_ref":
        log_pred = ad.log(ad.clip(pred, 1e-300, np.inf))
        return ad.sum(ad.mul(pred, ad.sub(log_pred, np.log(truth + eps))))
    raise ValueError(f"unknown KL direction {direction!r}")


def selector_loss(pred, truth) -> ad.Tensor2:
    """Mean binary cross-entropy; counts above 1 count as positives."""
    pred = ad.const(pred)
    y = np.minimum(np.asarray(truth, dtype=np.float64).reshape(-1, 1), 1.0)
    if pred.shape != y.shape:
        pred_n = pred.shape[0] * pred.shape[1]
        raise ValueError(f"selection lengths differ: {pred_n} vs {y.shape[0]}")
    p = ad.clip(pred, 1e-12, 1.0 - 1e-12)
    ll = ad.add(ad.mul(y, ad.log(p)), ad.mul(1.0 - y, ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.mean(ll))


# --- differentiable lower level ---------------------------------------------


@dataclass
class UnrolledResult:
    plan: ad.Tensor2
    n_iter: int
    violation: float
    converged: bool


def unrolled_sinkhorn(cost, mu, gamma, cfg: SinkhornConfig) -> UnrolledResult:
    """Log-domain Sinkhorn with every sweep recorded on the cost's tape.

    Matches :func:`ipot.ot.sinkhorn` sweep for sweep. When ``cfg.eps_scaling``
    is on, the annealing ladder runs on plain arrays and only the final
    fixed-lambda stage is differentiated.
    """
    cost = ad.const(cost)
    mu = as_marginal(mu)
    gamma = as_marginal(gamma)
    if cost.shape != (mu.size, gamma.size):
        raise ValueError(f"cost shape {cost.shape} does not match marginals ({mu.size}, {gamma.size})")
    f = np.zeros((mu.size, 1))
    for lam in anneal_schedule(cost.value, cfg):
        _, f, _ = log_sweeps(cost.value, mu, gamma, lam, cfg.tol, cfg.max_iter, f)

    log_k = ad.scale(cost, -1.0 / cfg.lam)
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)[:, None]
        log_gamma = np.log(gamma)[None, :]
    log_a = ad.const(f / cfg.lam)
    for it in range(1, cfg.max_iter + 1):
        log_b = ad.sub(log_gamma, ad.logsumexp(ad.add(log_k, log_a), axis=0))
        lse_r = ad.logsumexp(ad.add(log_k, log_b), axis=1)
        viol = float(np.abs(np.exp(log_a.value + lse_r.value) - mu[:, None]).max())
        if viol < cfg.tol:
            break
        log_a = ad.sub(log_mu, lse_r)
    plan = ad.exp(ad.add(ad.add(log_a, log_k), log_b))
    return UnrolledResult(plan, it, viol, viol < cfg.tol)


@dataclass
class PairLoss:
    total: ad.Tensor2
    aligner: float
    selector: float
    converged: bool


def pair_loss(pair: TrainPair, params: ModelParams, cfg: TrainConfig, tape: ad.Tape | None = None, bound=None) -> PairLoss:
    """Upper-level loss of one pair: ``KL + delta * BCE``.

    Only the ground-truth-selected movie rows enter the OT solve, so the
    other rows of the cost matrix get no aligner gradient.
    """
    trace = encode(pair.movie, pair.music, params, tape=tape, bound=bound)
    counts = pair.selection_counts()
    rows = np.flatnonzero(counts > 0)
    cost = ad.take_rows(cost_matrix(trace), rows)
    sol = unrolled_sinkhorn(cost, counts[rows], np.ones(pair.n_music), cfg.sinkhorn())
    if not sol.converged:
        log.debug("pair %s: Sinkhorn stopped at violation %.2e", pair.pair_id, sol.violation)
    truth = pair.target_plan()[rows]
    kl = aligner_loss(sol.plan, truth, cfg.kl_eps, cfg.kl_direction)
    if cfg.delta == 0:
        # selector head stays off the graph so its gradient is exactly zero
        return PairLoss(kl, kl.item(), 0.0, sol.converged)
    bce = selector_loss(trace.mu_hat, counts)
    total = ad.add(kl, ad.scale(bce, cfg.delta))
    return PairLoss(total, kl.item(), bce.item(), sol.converged)


def pair_value(pair: TrainPair, arrays: dict[str, np.ndarray], params: ModelParams, cfg: TrainConfig) -> float:
    """Plain forward evaluation of the pair loss at arbitrary parameter values."""
    p = ModelParams(params.dim, params.heads, arrays, self_residual=params.self_residual)
    return pair_loss(pair, p, cfg).total.item()


def batch_gradients(batch: list[TrainPair], params: ModelParams, cfg: TrainConfig):
    """Mean loss and mean gradient over ``batch``, accumulated in list order.

    Returns ``(grads, loss, aligner, selector)``.
    """
    if not batch:
        raise ValueError("empty batch")
    acc = {name: np.zeros_like(v) for name, v in params.arrays.items()}
    loss = aligner = selector = 0.0
    for pair in batch:
        if pair.dim != params.dim:
            raise ValueError(f"pair {pair.pair_id!r} has dim {pair.dim}, model has {params.dim}")
        tape = ad.Tape()
        res = pair_loss(pair, params, cfg, tape=tape)
        value = res.total.item()
        if not math.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss on pair {pair.pair_id!r}: aligner={res.aligner}, selector={res.selector}"
            )
        grads = ad.backward(tape, res.total)
        for name in acc:
            acc[name] += grads[name]
        loss += value
        aligner += res.aligner
        selector += res.selector
    n = len(batch)
    return {k: v / n for k, v in acc.items()}, loss / n, aligner / n, selector / n


def ipot_step(batch: list[TrainPair], params: ModelParams, cfg: TrainConfig, adam: AdamState):
    """One Adam update on the batch-averaged gradient.

    Returns ``(new_params, batch_loss)`` where the loss is measured before
    the update.
    """
    grads, loss, _, _ = batch_gradients(batch, params, cfg)
    return adam.update(params, grads, cfg.lr), loss


# --- training loop ----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    aligner: float
    selector: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)
    adam: AdamState | None = None


def train(
    dataset: list[TrainPair],
    cfg: TrainConfig,
    init: ModelParams | None = None,
    checkpoint_path=None,
    epoch_callback=None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch Adam.

    ``init`` warm-starts from existing parameters (pretrain, then finetune by
    calling ``train`` again on the second dataset). Shuffling draws from a
    generator seeded with ``cfg.seed``, so equal inputs give equal histories.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    dim = dataset[0].dim
    params = init.copy() if init is not None else init_params(dim, cfg.heads, cfg.seed, cfg.self_residual)
    if params.dim != dim:
        raise ValueError(f"initial params have dim {params.dim}, data has {dim}")
    adam = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []
    n = len(dataset)
    start_epoch = int(params.meta.get("epoch", 0)) if init is not None else 0
    hp = {f"hp.{k}": v for k, v in asdict(cfg).items()}

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        tot = ali = sel = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = [dataset[k] for k in order[lo : lo + cfg.batch_size]]
            grads, loss, a_term, s_term = batch_gradients(batch, params, cfg)
            params = adam.update(params, grads, cfg.lr)
            w = len(batch)
            tot += loss * w
            ali += a_term * w
            sel += s_term * w
        rec = EpochRecord(epoch, tot / n, ali / n, sel / n)
        history.append(rec)
        log.info("epoch %d loss %.6f (aligner %.6f, selector %.6f)", epoch, rec.loss, rec.aligner, rec.selector)
        if epoch_callback is not None:
            epoch_callback(rec, params)
        if checkpoint_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_path), params, {"epoch": start_epoch + epoch, **hp})

    params.meta["epoch"] = str(start_epoch + cfg.epochs)
    if checkpoint_path is not None:
        save_checkpoint(Path(checkpoint_path), params, hp)
    return TrainResult(params, history, adam)


def format_history(history: list[EpochRecord]) -> str:
    lines = [f"{'epoch':>6} {'loss':>14} {'aligner':>14} {'selector':>14}"]
    for r in history:
        lines.append(f"{r.epoch:>6d} {r.loss:>14.8f} {r.aligner:>14.8f} {r.selector:>14.8f}")
    return "\n".join(lines) + "\n"
