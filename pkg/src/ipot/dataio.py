"""Datasets on disk, ground-truth alignments, the frame-vote annotator and a synthetic generator.

On-disk layout (all paths in the manifest are relative to the manifest)::

    manifest.json       {"format": "ipot-dataset/1", "dim": D, "pairs": [...]}
    <pair>_movie.f32    I*D float32 little-endian, row-major
    <pair>_music.f32    J*D float32 little-endian, row-major

See ``docs/formats.md`` for the full schema.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileutil import atomic_write_bytes, atomic_write_json

__all__ = [
    "DATASET_FORMAT",
    "DatasetError",
    "TrainPair",
    "SynthTruth",
    "read_blob",
    "blob_bytes",
    "write_dataset",
    "load_dataset",
    "annotate_alignment",
    "synth_gen",
    "synth_dataset",
]

DATASET_FORMAT = "ipot-dataset/1"


class DatasetError(ValueError):
    """A manifest or blob failed validation."""


@dataclass
class TrainPair:
    """One movie/trailer pair with its shot-level alignment.

    ``alignment`` has one ``(movie_index, music_index)`` row per music shot.
    """

    pair_id: str
    movie: np.ndarray
    music: np.ndarray
    alignment: np.ndarray
    movie_durations: np.ndarray
    music_durations: np.ndarray

    def __post_init__(self):
        self.movie = np.asarray(self.movie, dtype=np.float64)
        self.music = np.asarray(self.music, dtype=np.float64)
        self.alignment = np.asarray(self.alignment, dtype=np.int64).reshape(-1, 2)
        self.movie_durations = np.asarray(self.movie_durations, dtype=np.float64).reshape(-1)
        self.music_durations = np.asarray(self.music_durations, dtype=np.float64).reshape(-1)
        problem = validate_pair(self)
        if problem:
            raise DatasetError(f"pair {self.pair_id!r}: {problem}")

    @property
    def n_movie(self) -> int:
        return self.movie.shape[0]

    @property
    def n_music(self) -> int:
        return self.music.shape[0]

    @property
    def dim(self) -> int:
        return self.movie.shape[1]

    def selection_counts(self) -> np.ndarray:
        """``T_n 1``: how many music shots each movie shot serves."""
        return np.bincount(self.alignment[:, 0], minlength=self.n_movie).astype(np.float64)

    def alignment_matrix(self) -> np.ndarray:
        t = np.zeros((self.n_movie, self.n_music))
        t[self.alignment[:, 0], self.alignment[:, 1]] = 1.0
        return t

    def target_plan(self) -> np.ndarray:
        """The alignment matrix scaled to unit mass."""
        return self.alignment_matrix() / self.n_music

    def truth_sequence(self) -> np.ndarray:
        """Movie shot index for each music shot, in music order."""
        seq = np.empty(self.n_music, dtype=np.int64)
        seq[self.alignment[:, 1]] = self.alignment[:, 0]
        return seq

    def equals(self, other: "TrainPair") -> bool:
        return (
            self.pair_id == other.pair_id
            and np.array_equal(self.movie, other.movie)
            and np.array_equal(self.music, other.music)
            and np.array_equal(self.alignment, other.alignment)
            and np.array_equal(self.movie_durations, other.movie_durations)
            and np.array_equal(self.music_durations, other.music_durations)
        )


def validate_pair(p: TrainPair) -> str | None:
    if p.movie.ndim != 2 or p.music.ndim != 2:
        return "embeddings must be 2-D"
    if p.movie.shape[0] < 1 or p.music.shape[0] < 1:
        return "empty embeddings"
    if p.movie.shape[1] != p.music.shape[1]:
        return f"movie dim {p.movie.shape[1]} != music dim {p.music.shape[1]}"
    for label, arr in (("movie", p.movie), ("music", p.music)):
        if not np.all(np.isfinite(arr)):
            return f"{label} embeddings contain non-finite values"
    if p.movie_durations.size != p.n_movie:
        return f"movie_durations has {p.movie_durations.size} entries, expected {p.n_movie}"
    if p.music_durations.size != p.n_music:
        return f"music_durations has {p.music_durations.size} entries, expected {p.n_music}"
    for label, d in (("movie_durations", p.movie_durations), ("music_durations", p.music_durations)):
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            return f"{label} must be finite and strictly positive"
    i, j = p.alignment[:, 0], p.alignment[:, 1]
    if np.any(i < 0) or np.any(i >= p.n_movie):
        return f"alignment movie index out of range [0, {p.n_movie})"
    if np.any(j < 0) or np.any(j >= p.n_music):
        return f"alignment music index out of range [0, {p.n_music})"
    counts = np.bincount(j, minlength=p.n_music)
    if np.any(counts > 1):
        return f"alignment has duplicate music index {int(np.flatnonzero(counts > 1)[0])}"
    if np.any(counts == 0):
        return f"alignment misses music index {int(np.flatnonzero(counts == 0)[0])}"
    return None


# --- blobs and manifests ----------------------------------------------------


def blob_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_blob(path, dim: int, rows: int | None = None) -> np.ndarray:
    """Read a float32 row-major blob, widened to float64."""
    raw = Path(path).read_bytes()
    row_bytes = dim * 4
    if rows is None:
        if len(raw) % row_bytes:
            raise DatasetError(f"{path}: {len(raw)} bytes is not a whole number of {dim}-dim rows")
        rows = len(raw) // row_bytes
    if len(raw) != rows * row_bytes:
        raise DatasetError(f"{path}: size mismatch, {len(raw)} bytes for {rows}x{dim} float32 ({rows * row_bytes})")
    arr = np.frombuffer(raw, dtype="<f4").reshape(rows, dim).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{path}: non-finite value")
    return arr


def write_dataset(directory, pairs: list[TrainPair], manifest_name: str = "manifest.json") -> Path:
    """Write blobs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not pairs:
        raise DatasetError("no pairs to write")
    dim = pairs[0].dim
    records = []
    for p in pairs:
        if p.dim != dim:
            raise DatasetError(f"pair {p.pair_id!r} has dim {p.dim}, expected {dim}")
        movie_file, music_file = f"{p.pair_id}_movie.f32", f"{p.pair_id}_music.f32"
        atomic_write_bytes(directory / movie_file, blob_bytes(p.movie))
        atomic_write_bytes(directory / music_file, blob_bytes(p.music))
        records.append(
            {
                "id": p.pair_id,
                "movie": movie_file,
                "music": music_file,
                "movie_shots": p.n_movie,
                "music_shots": p.n_music,
                "movie_durations": [float(x) for x in p.movie_durations],
                "music_durations": [float(x) for x in p.music_durations],
                "alignment": [[int(i), int(j)] for i, j in p.alignment],
            }
        )
    path = directory / manifest_name
    atomic_write_json(path, {"format": DATASET_FORMAT, "dim": dim, "pairs": records})
    return path


def load_dataset(manifest_path) -> list[TrainPair]:
    """Load and fully validate every pair named in a manifest."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if doc.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{manifest_path}: unsupported format tag {doc.get('format')!r}")
    dim = doc.get("dim")
    if not isinstance(dim, int) or dim < 1:
        raise DatasetError(f"{manifest_path}: 'dim' must be a positive integer")
    base = manifest_path.parent
    pairs = []
    seen = set()
    for n, rec in enumerate(doc.get("pairs", [])):
        pid = str(rec.get("id", n))
        if pid in seen:
            raise DatasetError(f"pair {pid!r}: duplicate pair id")
        seen.add(pid)
        try:
            rows_m, rows_a = int(rec["movie_shots"]), int(rec["music_shots"])
            blobs = {}
            for key, rows in (("movie", rows_m), ("music", rows_a)):
                path = base / rec[key]
                if not path.is_file():
                    raise DatasetError(f"{key} blob {path} does not exist")
                blobs[key] = read_blob(path, dim, rows)
            pair = TrainPair(
                pid,
                blobs["movie"],
                blobs["music"],
                np.asarray(rec["alignment"], dtype=np.int64).reshape(-1, 2),
                rec["movie_durations"],
                rec["music_durations"],
            )
        except KeyError as exc:
            raise DatasetError(f"pair {pid!r}: missing field {exc.args[0]!r}") from exc
        except DatasetError as exc:
            msg = str(exc)
            raise DatasetError(msg if msg.startswith("pair ") else f"pair {pid!r}: {msg}") from exc
        pairs.append(pair)
    if not pairs:
        raise DatasetError(f"{manifest_path}: manifest lists no pairs")
    return pairs


# --- annotation -------------------------------------------------------------


def _shot_of_frame(bounds: np.ndarray, n_frames: int) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=np.int64).reshape(-1, 2)
    owner = np.full(n_frames, -1, dtype=np.int64)
    for s, (lo, hi) in enumerate(bounds):
        owner[lo:hi] = s
    return owner


def annotate_alignment(movie_frames, movie_bounds, trailer_frames, trailer_bounds, top_k: int = 4) -> np.ndarray:
    """Vote each trailer shot onto the movie shot its frames most resemble.

    Every trailer frame retrieves its ``top_k`` nearest movie frames (exact
    Euclidean search, ties to the lower frame index); each hit votes for the
    movie shot containing it. A trailer shot takes the movie shot with the
    most votes, ties to the smaller shot index. Shot bounds are half-open
    ``[start, end)`` frame ranges.

    Returns an array of ``(movie_shot, trailer_shot)`` rows, one per trailer shot.
    """
    mf = np.asarray(movie_frames, dtype=np.float64)
    tf = np.asarray(trailer_frames, dtype=np.float64)
    if mf.shape[1] != tf.shape[1]:
        raise ValueError(f"frame dims differ: {mf.shape[1]} vs {tf.shape[1]}")
    m_owner = _shot_of_frame(movie_bounds, len(mf))
    t_bounds = np.asarray(trailer_bounds, dtype=np.int64).reshape(-1, 2)
    n_movie_shots = int(np.asarray(movie_bounds).reshape(-1, 2).shape[0])
    k = min(top_k, len(mf))

    nearest = np.empty((len(tf), k), dtype=np.int64)
    step = max(1, 2**22 // max(1, mf.size))
    for lo in range(0, len(tf), step):
        diff = tf[lo : lo + step, None, :] - mf[None, :, :]
        sq = np.einsum("tmd,tmd->tm", diff, diff)
        nearest[lo : lo + step] = np.argsort(sq, axis=1, kind="stable")[:, :k]

    pairs = []
    for t, (lo, hi) in enumerate(t_bounds):
        hits = m_owner[nearest[lo:hi].reshape(-1)]
        hits = hits[hits >= 0]
        votes = np.bincount(hits, minlength=n_movie_shots)
        pairs.append((int(np.argmax(votes)), t))  # argmax keeps the first maximum
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


# --- synthetic data ---------------------------------------------------------


@dataclass
class SynthTruth:
    planted: np.ndarray  # movie index for each music shot
    sigma: float
    seed: int
    extra: dict = field(default_factory=dict)


def _f32(x: np.ndarray) -> np.ndarray:
    # keep values float32-representable so blob round trips are exact
    return x.astype(np.float32).astype(np.float64)


def synth_gen(
    n_movie: int, n_music: int, dim: int, sigma: float, seed: int, pair_id: str | None = None
) -> tuple[TrainPair, SynthTruth]:
    """A planted movie/trailer pair.

    Movie rows are unit-normalized Gaussians; music row ``j`` is a noisy,
    re-normalized copy of movie row ``planted[j]``, where the planted rows
    are distinct and drawn from the first 90% of the movie. Aligned shots
    share a duration; all other durations are uniform on [1, 6] seconds.
    """
    cutoff = math.floor(0.9 * n_movie)
    if n_music < 1 or n_music > cutoff:
        raise ValueError(f"need 1 <= J <= floor(0.9*I) = {cutoff}, got J={n_music}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    movie = rng.standard_normal((n_movie, dim))
    movie = _f32(movie / np.linalg.norm(movie, axis=1, keepdims=True))
    planted = rng.choice(cutoff, size=n_music, replace=False).astype(np.int64)
    noise = rng.standard_normal((n_music, dim))
    if sigma == 0:
        music = movie[planted].copy()
    else:
        music = movie[planted] + sigma * noise
        music = _f32(music / np.linalg.norm(music, axis=1, keepdims=True))
    movie_dur = _f32(rng.uniform(1.0, 6.0, size=n_movie))
    music_dur = movie_dur[planted].copy()
    alignment = np.stack([planted, np.arange(n_music)], axis=1)
    pair = TrainPair(pair_id or f"synth{seed}", movie, music, alignment, movie_dur, music_dur)
    return pair, SynthTruth(planted, float(sigma), int(seed))


def synth_dataset(n_pairs: int, n_movie: int, n_music: int, dim: int, sigma: float, seed: int) -> list[TrainPair]:
    """``n_pairs`` planted pairs with seeds ``seed, seed+1, ...``."""
    return [synth_gen(n_movie, n_music, dim, sigma, seed + k, pair_id=f"pair{k:03d}")[0] for k in range(n_pairs)]
