"""End-to-end command-line coverage: every subcommand plus the exit-code
taxonomy (0 ok, 1 usage, 2 runtime, 3 failed gradient check)."""

import pytest

from bcnn.cli import main
from bcnn.data import CLASS_NAMES
from bcnn.train import load_checkpoint

SIZE = 32
PER_CLASS = 6


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(d), "--per-class", str(PER_CLASS),
                 "--size", str(SIZE), "--seed", "5"]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_dir):
    d = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(corpus_dir), "--size", str(SIZE),
               "--epochs", "2", "--batch", "8", "--seed", "3",
               "--checkpoint", str(d / "model.bcnn"), "--log", str(d / "log.csv")])
    assert rc == 0
    return d


# ---------------------------------------------------------------------------
# synth


def test_synth_layout(corpus_dir):
    for cls in CLASS_NAMES:
        files = sorted(p.name for p in (corpus_dir / cls).iterdir())
        assert files == [f"{cls}_{i:04d}.pgm" for i in range(PER_CLASS)]
    manifest = (corpus_dir / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "path,label,class"
    assert len(manifest) == 1 + 3 * PER_CLASS


def test_synth_is_byte_deterministic(tmp_path):
    args = ["synth", "--per-class", "4", "--size", "32", "--seed", "2", "--out"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + [str(a)]) == 0
    assert main(args + [str(b)]) == 0
    rels = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert rels == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in rels:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_synth_reports_what_it_wrote(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "c"), "--per-class", "4",
                 "--size", "32"]) == 0
    out = capsys.readouterr().out
    assert "wrote 12 images across 3 classes" in out


# ---------------------------------------------------------------------------
# augment


def test_augment_expands_corpus(tmp_path, corpus_dir, capsys):
    out = tmp_path / "aug"
    assert main(["augment", "--in", str(corpus_dir), "--out", str(out),
                 "--variants", "2", "--seed", "9"]) == 0
    stdout = capsys.readouterr().out
    assert "wrote 54 images (18 originals, 2 variants each)" in stdout
    for cls in CLASS_NAMES:
        assert len(list((out / cls).glob("*.pgm"))) == 3 * PER_CLASS
    assert len((out / "manifest.csv").read_text().splitlines()) == 55


def test_augment_rejects_bad_factor_list(tmp_path, corpus_dir):
    assert main(["augment", "--in", str(corpus_dir), "--out", str(tmp_path / "x"),
                 "--scales", "abc"]) == 1


# ---------------------------------------------------------------------------
# train / eval / predict round trip


def test_train_outputs(run_dir, capsys):
    capsys.readouterr()  # fixture prints arrive with the first requesting test
    ckpt = load_checkpoint(run_dir / "model.bcnn")
    assert ckpt.config.input_size == SIZE
    log = (run_dir / "log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    assert len(log) == 3


def test_train_prints_epoch_lines(tmp_path, corpus_dir, capsys):
    assert main(["train", "--data", str(corpus_dir), "--size", str(SIZE),
                 "--epochs", "1", "--batch", "8", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "config: command=train" in out.splitlines()[0]
    assert "epoch 1/1: train_loss=" in out
    assert "val_acc=" in out


def test_eval_prints_report(corpus_dir, run_dir, tmp_path, capsys):
    report = tmp_path / "report.csv"
    assert main(["eval", "--data", str(corpus_dir),
                 "--checkpoint", str(run_dir / "model.bcnn"),
                 "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert "accuracy:" in out
    for cls in CLASS_NAMES:
        assert cls in out
    lines = report.read_text().splitlines()
    assert lines[0] == "class,precision,recall,f1,support"
    assert lines[-1].startswith("accuracy,,,,")


def test_predict_prints_class_and_probabilities(corpus_dir, run_dir, capsys):
    image = corpus_dir / "fatigue" / "fatigue_0000.pgm"
    assert main(["predict", "--image", str(image),
                 "--checkpoint", str(run_dir / "model.bcnn")]) == 0
    out = capsys.readouterr().out
    class_line = next(l for l in out.splitlines() if l.startswith("class: "))
    assert class_line.removeprefix("class: ") in CLASS_NAMES
    prob_line = next(l for l in out.splitlines() if l.startswith("probabilities: "))
    pairs = prob_line.removeprefix("probabilities: ").split()
    assert [p.split("=")[0] for p in pairs] == list(CLASS_NAMES)
    values = [float(p.split("=")[1]) for p in pairs]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert abs(sum(values) - 1.0) < 1e-3  # 4-decimal rendering


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes_at_default_tolerance(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "config: command=gradcheck seed=0 tol=0.0001"
    assert "fwd1_w:" in out
    assert "max relative error:" in out
    assert "gradient check passed" in out


def test_gradcheck_fails_at_tiny_tolerance(capsys):
    assert main(["gradcheck", "--tol", "1e-12"]) == 3
    captured = capsys.readouterr()
    assert "gradient check FAILED" in captured.err
    assert "gradient check passed" not in captured.out


def test_gradcheck_rejects_nonpositive_tolerance():
    assert main(["gradcheck", "--tol", "0"]) == 1


# ---------------------------------------------------------------------------
# exit-code taxonomy


def test_usage_errors_exit_1(tmp_path, capsys):
    cases = [
        [],                                                  # no subcommand
        ["shrink"],                                          # unknown subcommand
        ["synth", "--per-class", "3"],                       # missing required
        ["synth", "--out", str(tmp_path), "--per-class", "x"],   # bad int
        ["synth", "--out", str(tmp_path), "--per-class", "3", "--bogus"],
        ["train", "--data", str(tmp_path), "--optimizer", "adagrad"],
    ]
    for argv in cases:
        assert main(argv) == 1, argv
        assert "usage error:" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "c"), "--per-class", "0"]) == 1
    assert "usage error:" in capsys.readouterr().err
    # exclusivity is checked before the data directory is ever touched
    assert main(["train", "--data", str(tmp_path / "missing"),
                 "--val-ratio", "0.3", "--split-ratio-alt"]) == 1
    assert "usage error:" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, corpus_dir, run_dir, capsys):
    assert main(["train", "--data", str(tmp_path / "nope")]) == 2
    assert "error:" in capsys.readouterr().err

    junk = tmp_path / "junk.bcnn"
    junk.write_bytes(b"JUNK" + bytes(64))
    assert main(["eval", "--data", str(corpus_dir), "--checkpoint", str(junk)]) == 2

    assert main(["predict", "--image", str(tmp_path / "missing.pgm"),
                 "--checkpoint", str(run_dir / "model.bcnn")]) == 2
