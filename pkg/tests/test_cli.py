import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ipot.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from ipot.dataio import blob_bytes, load_dataset
from ipot.model import init_params, load_checkpoint, save_checkpoint


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--shots", "10", "--music", "3", "--dim", "8", "--pairs", "2", "--seed", "5", "--out", str(out)]) == EXIT_OK
    return out


def write_infer_inputs(tmp_path, pair):
    (tmp_path / "movie.f32").write_bytes(blob_bytes(pair.movie))
    (tmp_path / "music.f32").write_bytes(blob_bytes(pair.music))
    (tmp_path / "dur.json").write_text(
        json.dumps({"movie": pair.movie_durations.tolist(), "music": pair.music_durations.tolist()})
    )


def infer_args(tmp_path, ckpt, out="edl.json", extra=()):
    return [
        "infer", "--ckpt", str(ckpt), "--movie", str(tmp_path / "movie.f32"), "--music", str(tmp_path / "music.f32"),
        "--durations", str(tmp_path / "dur.json"), "--out", str(tmp_path / out), *extra,
    ]


# --- synth ------------------------------------------------------------------------------


def test_synth_writes_loadable_manifest(synth_dir):
    data = load_dataset(synth_dir / "manifest.json")
    assert len(data) == 2 and data[0].n_movie == 10 and data[0].n_music == 3
    planted = json.loads((synth_dir / "planted.json").read_text())
    assert planted["planted"]["pair000"] == data[0].truth_sequence().tolist()


def test_synth_deterministic(tmp_path, synth_dir):
    again = tmp_path / "again"
    main(["synth", "--shots", "10", "--music", "3", "--dim", "8", "--pairs", "2", "--seed", "5", "--out", str(again)])
    assert tree_bytes(synth_dir) == tree_bytes(again)


def test_synth_rejects_too_many_music_shots(tmp_path):
    assert main(["synth", "--shots", "4", "--music", "4", "--dim", "2", "--out", str(tmp_path / "x")]) == EXIT_VALIDATION


# --- train ------------------------------------------------------------------------------


def test_train_epochs_zero_gives_initial_params(tmp_path, synth_dir):
    ckpt = tmp_path / "m.ckpt"
    rc = main(["train", "--data", str(synth_dir / "manifest.json"), "--out", str(ckpt), "--epochs", "0", "--seed", "3"])
    assert rc == EXIT_OK
    assert load_checkpoint(ckpt).equals(init_params(8, 2, 3))
    assert (tmp_path / "m.ckpt.history.txt").read_text().split() == ["epoch", "loss", "aligner", "selector"]


def test_train_writes_history(tmp_path, synth_dir):
    ckpt = tmp_path / "m.ckpt"
    hist = tmp_path / "h.txt"
    rc = main(["train", "--data", str(synth_dir / "manifest.json"), "--out", str(ckpt), "--epochs", "2",
               "--lr", "1e-3", "--history", str(hist)])
    assert rc == EXIT_OK
    rows = hist.read_text().splitlines()[1:]
    assert len(rows) == 2 and all(math.isfinite(float(r.split()[1])) for r in rows)
    header = load_checkpoint(ckpt).meta
    assert header["epoch"] == "2" and header["hp.lr"] == "0.001"


def test_train_warm_start(tmp_path, synth_dir):
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    man = str(synth_dir / "manifest.json")
    main(["train", "--data", man, "--out", str(first), "--epochs", "1", "--lr", "1e-3"])
    assert main(["train", "--data", man, "--out", str(second), "--epochs", "1", "--lr", "1e-3", "--init", str(first)]) == EXIT_OK
    assert load_checkpoint(second).meta["epoch"] == "2"


def test_train_missing_data_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "m.ckpt")]) == EXIT_USAGE
    assert "--data" in capsys.readouterr().err


def test_train_bad_manifest_is_validation_error(tmp_path, capsys):
    (tmp_path / "m.json").write_text('{"format": "ipot-dataset/1", "dim": 4, "pairs": []}')
    assert main(["train", "--data", str(tmp_path / "m.json"), "--out", str(tmp_path / "c")]) == EXIT_VALIDATION
    assert "no pairs" in capsys.readouterr().err


def test_out_of_range_flag_is_usage_error(tmp_path):
    assert main(["train", "--data", "x", "--out", "y", "--lr", "-1"]) == EXIT_USAGE


def _train_losses(tmp_path, *extra):
    data = tmp_path / "d"
    main(["synth", "--shots", "8", "--music", "3", "--dim", "8", "--pairs", "2", "--seed", "0", "--out", str(data)])
    hist = tmp_path / "h.txt"
    args = ["train", "--data", str(data / "manifest.json"), "--out", str(tmp_path / "c"), "--history", str(hist)]
    assert main(args + list(extra)) == EXIT_OK
    losses = [float(r.split()[1]) for r in hist.read_text().splitlines()[1:]]
    assert len(losses) == 500 and all(math.isfinite(x) for x in losses)
    return losses


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="500 Adam steps at the default lr 1e-5 move each weight by at most 5e-3; "
    "the loss ratio stays near 0.98 (0.96 even with 16x more steps)",
)
def test_train_defaults_halve_the_loss(tmp_path):
    losses = _train_losses(tmp_path)
    assert losses[-1] <= 0.5 * losses[0]


@pytest.mark.slow
def test_train_halves_the_loss_at_test_lr(tmp_path):
    losses = _train_losses(tmp_path, "--lr", "1e-3")
    assert losses[-1] <= 0.5 * losses[0]


# --- infer ------------------------------------------------------------------------------


def test_infer_and_eval(tmp_path, synth_dir, capsys):
    pair = load_dataset(synth_dir / "manifest.json")[0]
    write_infer_inputs(tmp_path, pair)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, init_params(8, 2, 0))
    assert main(infer_args(tmp_path, ckpt)) == EXIT_OK
    doc = json.loads((tmp_path / "edl.json").read_text())
    assert doc["format"] == "ipot-edl/1" and len(doc["entries"]) == 3
    assert main(infer_args(tmp_path, ckpt, "edl2.json")) == EXIT_OK
    assert (tmp_path / "edl.json").read_bytes() == (tmp_path / "edl2.json").read_bytes()
    assert main(infer_args(tmp_path, ckpt, "edl3.json", ["--context", "full"])) == EXIT_OK

    truth = tmp_path / "truth.json"
    truth.write_text(json.dumps({"alignment": pair.alignment.tolist()}))
    capsys.readouterr()
    rep = tmp_path / "rep.json"
    assert main(["eval", "--pred", str(tmp_path / "edl.json"), "--truth", str(truth), "--json", str(rep)]) == EXIT_OK
    out = json.loads(rep.read_text())
    assert out["shot_count"] == 3 and out["kl"] is not None and math.isfinite(out["kl"])
    assert "F1" in capsys.readouterr().out


def test_infer_single_music_shot(tmp_path):
    r = np.random.default_rng(0)
    (tmp_path / "movie.f32").write_bytes(blob_bytes(r.standard_normal((4, 8))))
    (tmp_path / "music.f32").write_bytes(blob_bytes(r.standard_normal((1, 8))))
    (tmp_path / "dur.json").write_text(json.dumps({"movie": [2, 2, 2, 2], "music": [3]}))
    save_checkpoint(tmp_path / "m.ckpt", init_params(8, 2, 0))
    assert main(infer_args(tmp_path, tmp_path / "m.ckpt")) == EXIT_OK
    assert len(json.loads((tmp_path / "edl.json").read_text())["entries"]) == 1


def test_infer_dim_mismatch(tmp_path, synth_dir):
    write_infer_inputs(tmp_path, load_dataset(synth_dir / "manifest.json")[0])
    save_checkpoint(tmp_path / "m.ckpt", init_params(6, 2, 0))
    assert main(infer_args(tmp_path, tmp_path / "m.ckpt")) == EXIT_VALIDATION
    assert not (tmp_path / "edl.json").exists()


def test_infer_bad_checkpoint(tmp_path, synth_dir):
    write_infer_inputs(tmp_path, load_dataset(synth_dir / "manifest.json")[0])
    (tmp_path / "m.ckpt").write_bytes(b"junk")
    assert main(infer_args(tmp_path, tmp_path / "m.ckpt")) == EXIT_VALIDATION


# --- eval -------------------------------------------------------------------------------


def test_eval_identical_sequences(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("4 1 7 2")
    (tmp_path / "t.json").write_text("[4, 1, 7, 2]")
    rep = tmp_path / "r.json"
    assert main(["eval", "--pred", str(tmp_path / "p.txt"), "--truth", str(tmp_path / "t.json"), "--json", str(rep)]) == EXIT_OK
    doc = json.loads(rep.read_text())
    for key in ("precision", "recall", "f1"):
        assert set(doc[key].values()) == {1.0}
    assert capsys.readouterr().out.count("1.0000") == 9


def test_eval_missing_file(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "nope"), "--truth", str(tmp_path / "nope")]) == EXIT_VALIDATION


# --- sinkhorn ---------------------------------------------------------------------------


def test_sinkhorn_closed_form(tmp_path):
    (tmp_path / "c.txt").write_text("0 1\n1 0\n")
    (tmp_path / "mu.txt").write_text("0.5 0.5\n")
    (tmp_path / "g.txt").write_text("0.5 0.5\n")
    for extra in ([], ["--multiplicative"]):
        out = tmp_path / "plan.txt"
        rc = main(["sinkhorn", "--cost", str(tmp_path / "c.txt"), "--mu", str(tmp_path / "mu.txt"),
                   "--gamma", str(tmp_path / "g.txt"), "--lambda", "1", "--out", str(out), *extra])
        assert rc == EXIT_OK
        plan = np.loadtxt(out)
        d = 0.5 / (1 + math.e)
        np.testing.assert_allclose(plan, [[0.5 - d, d], [d, 0.5 - d]], atol=1e-9)


def test_sinkhorn_shape_mismatch(tmp_path):
    (tmp_path / "c.txt").write_text("0 1\n1 0\n")
    (tmp_path / "mu.txt").write_text("1 1 1\n")
    rc = main(["sinkhorn", "--cost", str(tmp_path / "c.txt"), "--mu", str(tmp_path / "mu.txt"),
               "--gamma", str(tmp_path / "mu.txt"), "--out", str(tmp_path / "p")])
    assert rc == EXIT_VALIDATION


# --- annotate ---------------------------------------------------------------------------


def test_annotate(tmp_path):
    r = np.random.default_rng(0)
    centers = r.standard_normal((4, 6))
    movie = np.repeat(centers, 5, axis=0) + 0.01 * r.standard_normal((20, 6))
    trailer = np.concatenate([movie[11:14], movie[1:4]])
    (tmp_path / "m.f32").write_bytes(blob_bytes(movie))
    (tmp_path / "t.f32").write_bytes(blob_bytes(trailer))
    (tmp_path / "m.json").write_text(json.dumps({"dim": 6, "blob": "m.f32", "shots": [[5 * s, 5 * s + 5] for s in range(4)]}))
    (tmp_path / "t.json").write_text(json.dumps({"dim": 6, "blob": "t.f32", "shots": [[0, 3], [3, 6]]}))
    out = tmp_path / "pairs.json"
    assert main(["annotate", "--movie-frames", str(tmp_path / "m.json"), "--trailer-frames", str(tmp_path / "t.json"), "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["alignment"] == [[2, 0], [0, 1]]


# --- process level ----------------------------------------------------------------------


def test_runtime_failure_maps_to_exit_3(monkeypatch, tmp_path):
    from ipot import cli

    def boom(args):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert main(["synth", "--shots", "4", "--music", "1", "--dim", "2", "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ipot.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sinkhorn" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "ipot.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
