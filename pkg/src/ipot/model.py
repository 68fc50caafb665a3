"""Two-tower attention encoder, cross-attention fusion and the selector head.

Layout of one forward pass (movie tower shown, music is symmetric)::

    M'  = MLP_M(M)                                # D -> D (relu) -> D
    Ms  = M' + post(MHA(pre(M'), pre(M')))        # self-attention, residual
    Mb  = Ms + post(MHA(pre(Ms), As))             # cross-attention, residual
    mu  = sigmoid(MLP_sel(Mb))                    # D -> D (relu) -> 1

``pre``/``post`` are D x D affine maps wrapped around every attention
block. Each block owns its own query/key/value projections.

The self-attention residual is on by default, as in a one-layer Transformer
encoder. ``self_residual=False`` gives the residual-free form
``Ms = post(MHA(pre(M'), pre(M')))``. Without the skip the attention output
is close to a row average at init, the cross-attention queries lose their
row identity and the selector cannot learn which shots to keep.
"""

from __future__ import annotations

import io
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fileutil import atomic_write_bytes

__all__ = [
    "ModelParams",
    "ForwardTrace",
    "ATTENTION_BLOCKS",
    "init_params",
    "encode",
    "select_probs",
    "cost_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

ATTENTION_BLOCKS = ("sa_m", "sa_a", "ca_m", "ca_a")
CHECKPOINT_FORMAT = "ipot-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _param_shapes(dim: int) -> dict[str, tuple[int, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    for tower in ("mlp_m", "mlp_a"):
        shapes[f"{tower}.w1"] = (dim, dim)
        shapes[f"{tower}.b1"] = (1, dim)
        shapes[f"{tower}.w2"] = (dim, dim)
        shapes[f"{tower}.b2"] = (1, dim)
    for block in ATTENTION_BLOCKS:
        shapes[f"{block}.pre.w"] = (dim, dim)
        shapes[f"{block}.pre.b"] = (1, dim)
        for proj in ("wq", "wk", "wv"):
            shapes[f"{block}.{proj}"] = (dim, dim)
        shapes[f"{block}.post.w"] = (dim, dim)
        shapes[f"{block}.post.b"] = (1, dim)
    shapes["sel.w1"] = (dim, dim)
    shapes["sel.b1"] = (1, dim)
    shapes["sel.w2"] = (dim, 1)
    shapes["sel.b2"] = (1, 1)
    return shapes


@dataclass
class ModelParams:
    """All learnable weights, keyed by dotted name, plus the architecture."""

    dim: int
    heads: int
    arrays: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    self_residual: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        expected = _param_shapes(self.dim)
        if set(self.arrays) != set(expected):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter names mismatch (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")
            self.arrays[name] = arr

    @property
    def names(self) -> list[str]:
        return list(_param_shapes(self.dim))

    def copy(self) -> "ModelParams":
        arrays = {k: v.copy() for k, v in self.arrays.items()}
        return ModelParams(self.dim, self.heads, arrays, dict(self.meta), self.self_residual)

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.dim == other.dim
            and self.heads == other.heads
            and self.self_residual == other.self_residual
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.names)
        )

    def bind(self, tape: ad.Tape | None = None) -> dict[str, ad.Tensor2]:
        """Wrap arrays as tensors, registering them on ``tape`` if given."""
        if tape is None:
            return {k: ad.Tensor2(v) for k, v in self.arrays.items()}
        return {k: tape.param(k, v) for k, v in self.arrays.items()}

    def n_values(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def init_params(dim: int, heads: int = 2, seed: int = 0, self_residual: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    if dim < 1 or heads < 1 or dim % heads:
        raise ValueError(f"dim {dim} must be a positive multiple of heads {heads}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (fan_in, fan_out) in _param_shapes(dim).items():
        if name.split(".")[-1].startswith("b"):
            arrays[name] = np.zeros((fan_in, fan_out))
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return ModelParams(dim, heads, arrays, {"seed": str(seed)}, self_residual)


@dataclass
class ForwardTrace:
    m_mlp: ad.Tensor2
    a_mlp: ad.Tensor2
    m_self: ad.Tensor2
    a_self: ad.Tensor2
    m_bar: ad.Tensor2
    a_bar: ad.Tensor2
    mu_hat: ad.Tensor2  # (I, 1)
    attention: dict[str, list[np.ndarray]] = field(default_factory=dict)


def _affine(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def _mlp(x, p, prefix):
    h = ad.relu(_affine(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _affine(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _attend(query_in, kv_in, p, block, heads, weights_out):
    """Multi-head scaled dot-product attention wrapped in pre/post affine maps.

    ``kv_in=None`` means self-attention: keys and values come from the
    pre-mapped query sequence.
    """
    x = _affine(query_in, p[f"{block}.pre.w"], p[f"{block}.pre.b"])
    src = x if kv_in is None else kv_in
    q = ad.split_cols(ad.matmul(x, p[f"{block}.wq"]), heads)
    k = ad.split_cols(ad.matmul(src, p[f"{block}.wk"]), heads)
    v = ad.split_cols(ad.matmul(src, p[f"{block}.wv"]), heads)
    inv_sqrt = 1.0 / math.sqrt(x.shape[1] // heads)
    outs = []
    for qh, kh, vh in zip(q, k, v):
        w = ad.rowsoftmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt))
        weights_out.append(w.value)
        outs.append(ad.matmul(w, vh))
    return _affine(ad.concat_cols(outs), p[f"{block}.post.w"], p[f"{block}.post.b"])


def selector_head(m_bar, p) -> ad.Tensor2:
    return ad.sigmoid(_mlp(m_bar, p, "sel"))


def encode(movie, music, params: ModelParams, tape: ad.Tape | None = None, bound=None) -> ForwardTrace:
    """Run both towers, cross-attention and the selector.

    ``movie`` is I x D, ``music`` is J x D. With a ``tape`` the parameters are
    registered on it so the result can be differentiated; ``bound`` lets a
    caller pass already-registered parameter tensors instead.
    """
    m = ad.const(movie)
    a = ad.const(music)
    for label, x in (("movie", m), ("music", a)):
        if x.shape[1] != params.dim:
            raise ValueError(f"{label} embeddings have dim {x.shape[1]}, model expects {params.dim}")
        if x.shape[0] < 1:
            raise ValueError(f"{label} embeddings are empty")
    p = bound if bound is not None else params.bind(tape)
    h = params.heads
    att = {b: [] for b in ATTENTION_BLOCKS}

    m1 = _mlp(m, p, "mlp_m")
    a1 = _mlp(a, p, "mlp_a")
    ms = _attend(m1, None, p, "sa_m", h, att["sa_m"])
    as_ = _attend(a1, None, p, "sa_a", h, att["sa_a"])
    if params.self_residual:
        ms = ad.add(m1, ms)
        as_ = ad.add(a1, as_)
    mb = ad.add(ms, _attend(ms, as_, p, "ca_m", h, att["ca_m"]))
    ab = ad.add(as_, _attend(as_, ms, p, "ca_a", h, att["ca_a"]))
    mu = selector_head(mb, p)
    return ForwardTrace(m1, a1, ms, as_, mb, ab, mu, att)


def select_probs(trace: ForwardTrace) -> np.ndarray:
    """Per-movie-shot selection probabilities as a 1-D array."""
    return trace.mu_hat.value[:, 0].copy()


def cost_matrix(trace: ForwardTrace) -> ad.Tensor2:
    """Euclidean distances between fused movie and music rows (I x J)."""
    return ad.sqrt(ad.pairwise_sqdist(trace.m_bar, trace.a_bar))


# --- checkpoints ------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def checkpoint_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    """Serialize to a zip archive: ``header.txt`` plus one raw ``<f8`` record per parameter."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "dim": str(params.dim),
        "heads": str(params.heads),
        "self_residual": str(int(params.self_residual)),
    }
    merged = {**params.meta, **(meta or {})}
    for key in sorted(merged):
        if key in header:
            continue
        header[key] = str(merged[key]).replace("\n", " ")
    lines = [f"{k}={v}" for k, v in header.items()]
    lines += [f"param.{n}={params.arrays[n].shape[0]},{params.arrays[n].shape[1]}" for n in params.names]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "header.txt", ("\n".join(lines) + "\n").encode("utf-8"))
        for name in params.names:
            data = np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes()
            _zip_write(zf, f"params/{name}.f64", data)
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, meta: dict | None = None):
    atomic_write_bytes(path, checkpoint_bytes(params, meta))


def load_checkpoint(path) -> ModelParams:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            text = zf.read("header.txt").decode("utf-8")
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing header.txt") from exc
        header = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
        try:
            dim, heads = int(header["dim"]), int(header["heads"])
            self_residual = {"1": True, "0": False}[header.get("self_residual", "1")]
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad header field {exc}") from exc
        arrays = {}
        for key, val in header.items():
            if not key.startswith("param."):
                continue
            name = key[len("param.") :]
            rows, cols = (int(x) for x in val.split(","))
            raw = zf.read(f"params/{name}.f64")
            if len(raw) != rows * cols * 8:
                raise CheckpointError(f"{path}: record {name} has {len(raw)} bytes, expected {rows * cols * 8}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    reserved = ("format", "dim", "heads", "self_residual")
    meta = {k: v for k, v in header.items() if not k.startswith("param.") and k not in reserved}
    try:
        return ModelParams(dim, heads, arrays, meta, self_residual)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
