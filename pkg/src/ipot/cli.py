"""Command-line entry points: ``ipot train|infer|eval|synth|sinkhorn|annotate``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime. The log level comes
from ``IPOT_LOG_LEVEL`` (default ``WARNING``) unless ``-v`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import dataio, inference, metrics, model, ot, trainer
from .fileutil import atomic_write_json, atomic_write_text

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("ipot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return value

    return parse


def _nonneg(kind):
    def parse(text):
        value = kind(text)
        if value < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return value

    return parse


def _fraction(text):
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return value


def _klist(text):
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipot", description="Inverse partial optimal transport for music-guided trailer editing.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the encoder on a dataset manifest")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--epochs", type=_nonneg(int), default=500)
    t.add_argument("--lr", type=_positive(float), default=1e-5)
    t.add_argument("--delta", type=_nonneg(float), default=1.0)
    t.add_argument("--lambda", dest="lam", type=_positive(float), default=1.0)
    t.add_argument("--batch", type=_positive(int), default=4)
    t.add_argument("--heads", type=_positive(int), default=2)
    t.add_argument(
        "--no-self-residual",
        dest="self_residual",
        action="store_false",
        help="drop the skip connection around self-attention",
    )
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init", type=Path, help="warm-start checkpoint (pretrain, then finetune)")
    t.add_argument("--kl-direction", choices=trainer.KL_DIRECTIONS, default="ref_to_pred")
    t.add_argument("--kl-eps", type=_positive(float), default=1e-12)
    t.add_argument("--tol", type=_positive(float), default=1e-9)
    t.add_argument("--max-iter", type=_positive(int), default=500)
    t.add_argument("--checkpoint-every", type=_nonneg(int), default=0)
    t.add_argument("--history", type=Path, help="loss table path (default: <out>.history.txt)")

    i = sub.add_parser("infer", help="generate an edit decision list")
    i.add_argument("--ckpt", required=True, type=Path)
    i.add_argument("--movie", required=True, type=Path, help="movie shot embeddings (float32 blob)")
    i.add_argument("--music", required=True, type=Path, help="music shot embeddings (float32 blob)")
    i.add_argument("--durations", required=True, type=Path, help='JSON {"movie": [...], "music": [...]}')
    i.add_argument("--eta", type=_nonneg(float), default=1.0)
    i.add_argument("--lambda", dest="lam", type=_positive(float), default=1.0)
    i.add_argument("--spoiler", type=_fraction, default=0.9)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument(
        "--context",
        choices=("selected", "full"),
        default="selected",
        help="encode only the selected shots before alignment, or reuse rows of the full-movie encoding",
    )
    i.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("eval", help="score a predicted EDL or index sequence against the truth")
    e.add_argument("--pred", required=True, type=Path)
    e.add_argument("--truth", required=True, type=Path)
    e.add_argument("--k", type=_klist, default=[1, 3, 5])
    e.add_argument("--kl-eps", type=_positive(float), default=1e-12)
    e.add_argument("--json", type=Path, help="also write the report as JSON")

    s = sub.add_parser("synth", help="write a planted synthetic dataset")
    s.add_argument("--shots", required=True, type=_positive(int))
    s.add_argument("--music", required=True, type=_positive(int))
    s.add_argument("--dim", required=True, type=_positive(int))
    s.add_argument("--noise", type=_nonneg(float), default=0.05)
    s.add_argument("--pairs", type=_positive(int), default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)

    k = sub.add_parser("sinkhorn", help="solve one entropic OT problem")
    k.add_argument("--cost", required=True, type=Path, help="whitespace-separated matrix")
    k.add_argument("--mu", required=True, type=Path)
    k.add_argument("--gamma", required=True, type=Path)
    k.add_argument("--lambda", dest="lam", type=_positive(float), default=1.0)
    k.add_argument("--tol", type=_positive(float), default=1e-9)
    k.add_argument("--max-iter", type=_positive(int), default=500)
    k.add_argument("--multiplicative", action="store_true", help="use the scaling form instead of log domain")
    k.add_argument("--out", required=True, type=Path)

    a = sub.add_parser("annotate", help="annotate trailer shots with source movie shots")
    a.add_argument("--movie-frames", required=True, type=Path)
    a.add_argument("--trailer-frames", required=True, type=Path)
    a.add_argument("--top-k", type=_positive(int), default=4)
    a.add_argument("--out", required=True, type=Path)
    return p


# --- subcommands ------------------------------------------------------------


def cmd_train(args) -> int:
    data = dataio.load_dataset(args.data)
    cfg = trainer.TrainConfig(
        delta=args.delta,
        lam=args.lam,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        kl_eps=args.kl_eps,
        kl_direction=args.kl_direction,
        heads=args.heads,
        self_residual=args.self_residual,
        sinkhorn_tol=args.tol,
        sinkhorn_max_iter=args.max_iter,
        checkpoint_every=args.checkpoint_every,
    )
    init = model.load_checkpoint(args.init) if args.init else None
    if init is not None and init.dim != data[0].dim:
        raise ValueError(f"--init checkpoint has dim {init.dim}, data has {data[0].dim}")
    result = trainer.train(data, cfg, init=init, checkpoint_path=args.out)
    history = args.history or args.out.with_name(args.out.name + ".history.txt")
    atomic_write_text(history, trainer.format_history(result.history))
    if result.history:
        print(f"final loss {result.history[-1].loss:.6f} after {len(result.history)} epochs")
    return EXIT_OK


def _read_durations(path: Path):
    doc = json.loads(path.read_text())
    return np.asarray(doc["movie"], dtype=np.float64), np.asarray(doc["music"], dtype=np.float64)


def cmd_infer(args) -> int:
    params = model.load_checkpoint(args.ckpt)
    movie = dataio.read_blob(args.movie, params.dim)
    music = dataio.read_blob(args.music, params.dim)
    tm, ta = _read_durations(args.durations)
    cfg = inference.InferConfig(
        eta=args.eta,
        lam=args.lam,
        spoiler_fraction=args.spoiler,
        seed=args.seed,
        reencode=args.context == "selected",
    )
    edl = inference.generate(movie, music, tm, ta, params, cfg)
    atomic_write_text(args.out, inference.dumps_edl(edl))
    return EXIT_OK


def _load_prediction(path: Path):
    """An EDL document, a JSON index list, or whitespace-separated indices."""
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return np.asarray(text.split(), dtype=np.int64), None
    if isinstance(doc, dict) and doc.get("format") == inference.EDL_FORMAT:
        return None, inference.edl_from_dict(doc)
    return np.asarray(doc, dtype=np.int64).reshape(-1), None


def _load_truth(path: Path):
    """Alignment pairs ``[[movie, music], ...]`` or a plain index sequence."""
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return np.asarray(text.split(), dtype=np.int64), None
    if isinstance(doc, dict):
        doc = doc["alignment"]
    arr = np.asarray(doc, dtype=np.int64)
    if arr.ndim == 2:
        seq = np.empty(arr.shape[0], dtype=np.int64)
        seq[arr[:, 1]] = arr[:, 0]
        return seq, arr
    return arr.reshape(-1), None


def cmd_eval(args) -> int:
    pred_seq, edl = _load_prediction(args.pred)
    truth_seq, pairs = _load_truth(args.truth)
    if edl is not None:
        pred_seq = edl.primary_sequence()
    report = metrics.evaluate_sequences(truth_seq, pred_seq, args.k)
    if edl is not None:
        report.shot_count, report.duration_mean, report.duration_std = metrics.shot_stats(edl)
        plan = edl.diagnostics.get("plan")
        if pairs is not None and plan is not None:
            plan = np.asarray(plan)
            full = np.zeros((edl.n_movie, len(edl.entries)))
            full[np.asarray(edl.diagnostics["selected"])] = plan
            truth = np.zeros_like(full)
            truth[pairs[:, 0], pairs[:, 1]] = 1.0 / len(pairs)
            report.kl = metrics.alignment_kl(full, truth, args.kl_eps)
    sys.stdout.write(report.to_table())
    if args.json:
        atomic_write_text(args.json, report.to_json())
    return EXIT_OK


def cmd_synth(args) -> int:
    pairs = []
    planted = {}
    for n in range(args.pairs):
        pair, truth = dataio.synth_gen(args.shots, args.music, args.dim, args.noise, args.seed + n, pair_id=f"pair{n:03d}")
        pairs.append(pair)
        planted[pair.pair_id] = truth.planted.tolist()
    manifest = dataio.write_dataset(args.out, pairs)
    atomic_write_json(args.out / "planted.json", {"sigma": args.noise, "seed": args.seed, "planted": planted})
    print(manifest)
    return EXIT_OK


def _fmt_matrix(m: np.ndarray) -> str:
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in np.atleast_2d(m)) + "\n"


def cmd_sinkhorn(args) -> int:
    cost = np.loadtxt(args.cost, ndmin=2)
    mu = np.loadtxt(args.mu, ndmin=1)
    gamma = np.loadtxt(args.gamma, ndmin=1)
    cfg = ot.SinkhornConfig(lam=args.lam, tol=args.tol, max_iter=args.max_iter, log_domain=not args.multiplicative)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ot.ConvergenceWarning)
        res = ot.sinkhorn(cost, mu, gamma, cfg)
    for w in caught:
        log.warning("%s", w.message)
    atomic_write_text(args.out, _fmt_matrix(res.plan))
    print(f"iterations {res.n_iter} violation {res.violation:.3e} converged {res.converged}")
    return EXIT_OK


def _read_frames(path: Path):
    """Frame file: JSON ``{"dim": D, "blob": "<file>", "shots": [[start, end], ...]}``."""
    doc = json.loads(path.read_text())
    frames = dataio.read_blob(path.parent / doc["blob"], int(doc["dim"]))
    return frames, np.asarray(doc["shots"], dtype=np.int64).reshape(-1, 2)


def cmd_annotate(args) -> int:
    mf, mb = _read_frames(args.movie_frames)
    tf, tb = _read_frames(args.trailer_frames)
    pairs = dataio.annotate_alignment(mf, mb, tf, tb, top_k=args.top_k)
    atomic_write_json(args.out, {"alignment": pairs.tolist()})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "sinkhorn": cmd_sinkhorn,
    "annotate": cmd_annotate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    level = os.environ.get("IPOT_LOG_LEVEL", "WARNING").upper()
    if args.verbose:
        level = "DEBUG" if args.verbose > 1 else "INFO"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (dataio.DatasetError, model.CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"ipot {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"ipot {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
