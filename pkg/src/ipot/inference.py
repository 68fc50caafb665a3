"""Music-guided shot selection, alignment and duration fitting.

``generate`` chains the stages::

    select_shots -> encode(selected, music) -> infer_cost -> assign -> duration_fit

and returns an :class:`EditDecisionList`, serializable with :func:`edl_to_dict`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, encode, select_probs
from .ot import SinkhornConfig, sinkhorn

__all__ = [
    "EDL_FORMAT",
    "FRAME_TOL",
    "InferConfig",
    "Segment",
    "EdlEntry",
    "EditDecisionList",
    "select_shots",
    "infer_cost",
    "assign",
    "greedy_decode",
    "duration_fit",
    "generate",
    "edl_to_dict",
    "edl_from_dict",
    "dumps_edl",
]

EDL_FORMAT = "ipot-edl/1"
FRAME_TOL = 1.0 / 30.0


@dataclass(frozen=True)
class InferConfig:
    eta: float = 1.0
    lam: float = 1.0
    spoiler_fraction: float = 0.9
    seed: int = 0
    tol: float = 1e-9
    max_iter: int = 2000
    # True: encode the selected movie shots again on their own before the
    # cost; False: reuse their rows from the full-movie encoding
    reencode: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if not 0 < self.spoiler_fraction <= 1:
            raise ValueError("spoiler_fraction must lie in (0, 1]")

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(lam=self.lam, tol=self.tol, max_iter=self.max_iter, eps_scaling=True)


@dataclass
class Segment:
    movie_shot: int
    start: float  # seconds from the start of the movie
    length: float
    kind: str = "shot"  # "shot" or "hold" (frozen last frame)


@dataclass
class EdlEntry:
    music_shot: int
    movie_shot: int
    duration: float
    segments: list[Segment]
    padded: bool = False

    @property
    def total(self) -> float:
        return float(sum(s.length for s in self.segments))


@dataclass
class EditDecisionList:
    entries: list[EdlEntry]
    n_movie: int
    diagnostics: dict = field(default_factory=dict)

    def primary_sequence(self) -> np.ndarray:
        return np.array([e.movie_shot for e in self.entries], dtype=np.int64)

    def durations(self) -> np.ndarray:
        return np.array([e.total for e in self.entries])


# --- stages -----------------------------------------------------------------


def spoiler_cutoff(n_movie: int, fraction: float) -> int:
    return math.floor(fraction * n_movie)


def select_shots(mu_hat, n_select: int, cfg: InferConfig = InferConfig()) -> np.ndarray:
    """Top-``n_select`` probabilities among shots before the spoiler cutoff.

    Ties go to the lower index; the result is in movie order.
    """
    mu = np.asarray(mu_hat, dtype=np.float64).reshape(-1)
    cutoff = spoiler_cutoff(mu.size, cfg.spoiler_fraction)
    if n_select < 1 or n_select > cutoff:
        raise ValueError(f"cannot select {n_select} shots from {cutoff} candidates")
    cand = np.arange(cutoff)
    order = np.lexsort((cand, -mu[:cutoff]))
    return np.sort(cand[order[:n_select]])


def infer_cost(v_bar, a_bar, movie_durations, music_durations, eta: float) -> np.ndarray:
    """``||v_i - a_j||^2 + eta * |tau_i - tau_j|`` for selected movie rows vs music rows."""
    v = np.asarray(v_bar, dtype=np.float64)
    a = np.asarray(a_bar, dtype=np.float64)
    diff = v[:, None, :] - a[None, :, :]
    sem = np.einsum("ijk,ijk->ij", diff, diff)
    tm = np.asarray(movie_durations, dtype=np.float64).reshape(-1, 1)
    ta = np.asarray(music_durations, dtype=np.float64).reshape(1, -1)
    if eta == 0:
        return sem
    return sem + eta * np.abs(tm - ta)


def greedy_decode(plan) -> np.ndarray:
    """Conflict-free extraction of a one-to-one map from a square plan.

    Repeatedly takes the largest entry whose row and column are both free
    (ties: smaller row, then smaller column). Returns ``rows[j]`` for each
    column ``j``.
    """
    t = np.asarray(plan, dtype=np.float64)
    n = t.shape[0]
    r, c = np.indices(t.shape)
    order = np.lexsort((c.ravel(), r.ravel(), -t.ravel()))
    row_used = np.zeros(n, bool)
    col_of = np.full(t.shape[1], -1, dtype=np.int64)
    taken = 0
    for k in order:
        i, j = divmod(int(k), t.shape[1])
        if row_used[i] or col_of[j] >= 0:
            continue
        row_used[i] = True
        col_of[j] = i
        taken += 1
        if taken == min(t.shape):
            break
    return col_of


def assign(cost, cfg: InferConfig = InferConfig()):
    """Uniform-marginal entropic OT on a square cost, decoded greedily.

    Returns ``(rows_for_music, plan)``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"assign needs a square cost, got {c.shape}")
    n = c.shape[0]
    res = sinkhorn(c, np.ones(n), np.ones(n), cfg.sinkhorn())
    return greedy_decode(res.plan), res.plan


def duration_fit(assignment, movie_durations, music_durations, mu_hat) -> EditDecisionList:
    """Cut or extend each matched movie shot to its music shot's length.

    ``assignment[j]`` is the movie shot for music shot ``j``. A long shot is
    trimmed from its end. A short one grows by appending neighbours of the
    block used so far, picking whichever side has the higher selection
    probability (ties: right); shots that are another entry's primary are
    skipped. If the movie runs out, the last frame is held and the entry is
    flagged ``padded``.
    """
    assignment = np.asarray(assignment, dtype=np.int64).reshape(-1)
    tm = np.asarray(movie_durations, dtype=np.float64).reshape(-1)
    ta = np.asarray(music_durations, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu_hat, dtype=np.float64).reshape(-1)
    if assignment.size != ta.size:
        raise ValueError("assignment and music durations differ in length")
    if len(set(assignment.tolist())) != assignment.size:
        raise ValueError("assignment is not one-to-one")
    n = tm.size
    starts = np.concatenate([[0.0], np.cumsum(tm)[:-1]])
    primaries = set(assignment.tolist())

    entries = []
    for j, i in enumerate(assignment):
        need = float(ta[j])
        if tm[i] >= need:
            entries.append(EdlEntry(j, int(i), need, [Segment(int(i), float(starts[i]), need)]))
            continue
        segs = [Segment(int(i), float(starts[i]), float(tm[i]))]
        have = float(tm[i])
        left, right = i - 1, i + 1
        last = int(i)
        while have < need:
            while left >= 0 and left in primaries:
                left -= 1
            while right < n and right in primaries:
                right += 1
            if left < 0 and right >= n:
                break
            if right >= n or (left >= 0 and mu[left] > mu[right]):
                pick, left = left, left - 1
            else:
                pick, right = right, right + 1
            take = min(float(tm[pick]), need - have)
            segs.append(Segment(int(pick), float(starts[pick]), take))
            have += take
            last = pick
        padded = have < need
        if padded:
            tail = segs[-1]
            segs.append(Segment(last, tail.start + tail.length, need - have, kind="hold"))
        entries.append(EdlEntry(j, int(i), need, segs, padded))
    return EditDecisionList(entries, n)


def generate(
    movie,
    music,
    movie_durations,
    music_durations,
    params: ModelParams,
    cfg: InferConfig = InferConfig(),
    selected=None,
):
    """Full inference pipeline from shot embeddings to an edit decision list.

    ``selected`` replaces the selector's choice with given movie shots (one
    per music shot, not limited by the spoiler cutoff), which isolates the
    aligner for diagnostics.
    """
    movie = np.asarray(movie, dtype=np.float64)
    music = np.asarray(music, dtype=np.float64)
    tm = np.asarray(movie_durations, dtype=np.float64).reshape(-1)
    ta = np.asarray(music_durations, dtype=np.float64).reshape(-1)
    if tm.size != movie.shape[0] or ta.size != music.shape[0]:
        raise ValueError("durations do not match the number of shots")
    if np.any(tm <= 0) or np.any(ta <= 0) or not (np.all(np.isfinite(tm)) and np.all(np.isfinite(ta))):
        raise ValueError("durations must be finite and strictly positive")

    trace = encode(movie, music, params)
    mu = select_probs(trace)
    n_music = music.shape[0]
    if selected is None:
        chosen = select_shots(mu, n_music, cfg)
    else:
        chosen = np.sort(np.asarray(selected, dtype=np.int64).reshape(-1))
        if chosen.size != n_music or np.unique(chosen).size != n_music:
            raise ValueError("selected must name one distinct movie shot per music shot")
        if chosen[0] < 0 or chosen[-1] >= movie.shape[0]:
            raise ValueError("selected movie shot out of range")
    if cfg.reencode:
        sub = encode(movie[chosen], music, params)
        v_bar, a_bar = sub.m_bar.value, sub.a_bar.value
    else:
        v_bar, a_bar = trace.m_bar.value[chosen], trace.a_bar.value
    cost = infer_cost(v_bar, a_bar, tm[chosen], ta, cfg.eta)
    rows, plan = assign(cost, cfg)
    edl = duration_fit(chosen[rows], tm, ta, mu)
    edl.diagnostics = {
        "selected": chosen.tolist(),
        "column_argmax": chosen[np.argmax(plan, axis=0)].tolist(),
        "selection_probs": mu.tolist(),
        "plan": plan.tolist(),
    }
    return edl


# --- serialization ----------------------------------------------------------


def edl_to_dict(edl: EditDecisionList) -> dict:
    return {
        "format": EDL_FORMAT,
        "movie_shots": edl.n_movie,
        "music_shots": len(edl.entries),
        "entries": [
            {
                "music_shot": e.music_shot,
                "movie_shot": e.movie_shot,
                "duration": e.duration,
                "padded": e.padded,
                "segments": [
                    {"movie_shot": s.movie_shot, "start": s.start, "length": s.length, "kind": s.kind}
                    for s in e.segments
                ],
            }
            for e in edl.entries
        ],
        "diagnostics": edl.diagnostics,
    }


def edl_from_dict(doc: dict) -> EditDecisionList:
    if doc.get("format") != EDL_FORMAT:
        raise ValueError(f"unsupported EDL format {doc.get('format')!r}")
    entries = [
        EdlEntry(
            int(e["music_shot"]),
            int(e["movie_shot"]),
            float(e["duration"]),
            [Segment(int(s["movie_shot"]), float(s["start"]), float(s["length"]), s.get("kind", "shot")) for s in e["segments"]],
            bool(e.get("padded", False)),
        )
        for e in doc["entries"]
    ]
    return EditDecisionList(entries, int(doc["movie_shots"]), doc.get("diagnostics", {}))


def dumps_edl(edl: EditDecisionList) -> str:
    return json.dumps(edl_to_dict(edl), indent=2) + "\n"
