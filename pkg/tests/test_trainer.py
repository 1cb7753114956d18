"""Training loop, evaluation self-consistency, checkpoint wire format, logs."""

import numpy as np
import pytest

from bcnn.data import DatasetManifest, stratified_split, synth_generate, to_batches
from bcnn.errors import (
    ConfigError,
    ConsistencyError,
    CorpusError,
    FormatError,
    IntegrityError,
    TrainingError,
    VersionError,
)
from bcnn.model import ModelConfig, build_model, forward
from bcnn.tensor import Tensor
from bcnn.train import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

CLASSES = ("fatigue", "linear", "potholes")
MODEL = ModelConfig(input_size=32, stages=2, channels=(4, 6), classes=3, seed=0)


def small_corpus(per_class=8, seed_base=0):
    items = [synth_generate(name, 32, seed_base + i)
             for name in CLASSES for i in range(per_class)]
    return DatasetManifest(list(CLASSES), items, provenance="synthetic")


@pytest.fixture(scope="module")
def corpus():
    return small_corpus()


@pytest.fixture(scope="module")
def trained(corpus):
    config = TrainConfig(epochs=2, batch_size=8, val_ratio=0.25, seed=1)
    params, records = train(corpus, MODEL, config)
    return config, params, records


# ---------------------------------------------------------------------------
# TrainConfig


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(val_ratio=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(val_ratio=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(seed=-1)


# ---------------------------------------------------------------------------
# train


def test_train_returns_one_record_per_epoch(trained):
    _, _, records = trained
    assert len(records) == 2
    assert [r.epoch for r in records] == [1, 2]
    for r in records:
        assert r.train_loss >= 0.0 and np.isfinite(r.train_loss)
        assert r.val_loss >= 0.0 and np.isfinite(r.val_loss)
        assert 0.0 <= r.train_acc <= 1.0
        assert 0.0 <= r.val_acc <= 1.0


def test_train_is_deterministic(corpus):
    config = TrainConfig(epochs=1, batch_size=8, seed=4)
    params_a, records_a = train(corpus, MODEL, config)
    params_b, records_b = train(corpus, MODEL, config)
    assert records_a == records_b
    for name in params_a:
        assert np.array_equal(params_a[name].data, params_b[name].data)


def test_train_rejects_class_count_mismatch(corpus):
    with pytest.raises(ConsistencyError):
        train(corpus, ModelConfig(input_size=32, stages=2, channels=(4, 6), classes=4),
              TrainConfig(epochs=1))


def test_train_rejects_empty_split_side():
    # 6 items at train_ratio 0.05 -> round(0.3) = 0 taken, train side empty
    manifest = small_corpus(per_class=2)
    with pytest.raises(CorpusError):
        train(manifest, MODEL, TrainConfig(epochs=1, val_ratio=0.95, seed=0))


def test_train_divergence_abort_names_epoch_and_batch(corpus):
    config = TrainConfig(epochs=1, batch_size=8, lr=1e28, optimizer="sgd", seed=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as err:
        train(corpus, MODEL, config)
    message = str(err.value)
    assert "epoch 1" in message and "batch" in message


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_reproduces_final_train_accuracy(corpus, trained):
    config, params, records = trained
    train_m, _ = stratified_split(corpus, 1.0 - config.val_ratio, config.seed)
    cm, report = evaluate(params, train_m, batch_size=config.batch_size,
                          input_size=MODEL.input_size)
    assert report.aggregates.accuracy == records[-1].train_acc
    assert cm.total == len(train_m)


def test_evaluate_is_deterministic(corpus, trained):
    _, params, _ = trained
    cm_a, report_a = evaluate(params, corpus, input_size=32)
    cm_b, report_b = evaluate(params, corpus, input_size=32)
    assert np.array_equal(cm_a.matrix, cm_b.matrix)
    assert report_a == report_b
    assert cm_a.total == len(corpus)


def test_evaluate_validation(trained):
    _, params, _ = trained
    with pytest.raises(CorpusError):
        evaluate(params, DatasetManifest(["a", "b"], []), input_size=32)
    two_class = DatasetManifest(["a", "b"], small_corpus(per_class=2).items[:4])
    with pytest.raises(ConsistencyError):
        evaluate(params, two_class, input_size=32)


# ---------------------------------------------------------------------------
# checkpoints


def expected_file_length(params, config):
    header = 4 + 4 + 4 + 4 + 4 * len(config.channels) + 4 + 4 + 4
    body = sum(4 + len(name) + 4 + 4 * p.rank + 4 * p.size
               for name, p in params.items())
    return header + body


def test_checkpoint_roundtrip_bitwise(tmp_path, trained):
    _, params, _ = trained
    path = tmp_path / "model.bcnn"
    save_checkpoint(path, Checkpoint(1, MODEL, params, train_seed=1, epoch=2))
    assert path.stat().st_size == expected_file_length(params, MODEL)

    loaded = load_checkpoint(path)
    assert loaded.config == MODEL
    assert loaded.version == 1
    assert loaded.train_seed is None and loaded.epoch is None
    assert set(loaded.params) == set(params)
    for name in params:
        assert np.array_equal(loaded.params[name].data, params[name].data)


def test_checkpoint_behavioral_roundtrip(tmp_path, trained):
    _, params, _ = trained
    path = tmp_path / "model.bcnn"
    save_checkpoint(path, Checkpoint(1, MODEL, params))
    loaded = load_checkpoint(path)
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32))
    before, _ = forward(params, x)
    after, _ = forward(loaded.params, x)
    assert np.array_equal(before.data, after.data)


def test_checkpoint_save_is_byte_deterministic(tmp_path):
    params = build_model(MODEL)
    a, b = tmp_path / "a.bcnn", tmp_path / "b.bcnn"
    save_checkpoint(a, Checkpoint(1, MODEL, params))
    save_checkpoint(b, Checkpoint(1, MODEL, params))
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    params = build_model(MODEL)
    path = tmp_path / "model.bcnn"
    save_checkpoint(path, Checkpoint(1, MODEL, params))
    good = path.read_bytes()
    assert good[:4] == CHECKPOINT_MAGIC

    bad_magic = tmp_path / "magic.bcnn"
    bad_magic.write_bytes(b"XCNN" + good[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.bcnn"
    bad_version.write_bytes(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(VersionError):
        load_checkpoint(bad_version)

    truncated = tmp_path / "short.bcnn"
    truncated.write_bytes(good[:len(good) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.bcnn"
    trailing.write_bytes(good + b"junk")
    with pytest.raises(IntegrityError):
        load_checkpoint(trailing)


def test_checkpoint_save_validation(tmp_path):
    params = build_model(MODEL)
    incomplete = dict(params)
    incomplete.pop("head_b")
    with pytest.raises(ConsistencyError):
        save_checkpoint(tmp_path / "x.bcnn", Checkpoint(1, MODEL, incomplete))
    rgb = ModelConfig(input_size=32, input_channels=3, stages=2, channels=(4, 6))
    with pytest.raises(ConsistencyError):
        save_checkpoint(tmp_path / "y.bcnn", Checkpoint(1, rgb, build_model(rgb)))


# ---------------------------------------------------------------------------
# logs


def test_write_log_layout(tmp_path, trained):
    _, _, records = trained
    path = tmp_path / "log.csv"
    write_log(path, records)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    assert len(lines) == 1 + len(records)
    for lineno, record in enumerate(records, start=1):
        fields = lines[lineno].split(",")
        assert fields[0] == str(record.epoch)
        assert fields[1] == f"{record.train_loss:.6f}"
        assert fields[4] == f"{record.val_acc:.6f}"
        assert all(np.isfinite(float(f)) for f in fields[1:])


def test_write_log_rejects_empty(tmp_path):
    with pytest.raises(ConfigError):
        write_log(tmp_path / "log.csv", [])


# ---------------------------------------------------------------------------
# split/batch interplay the loop depends on


def test_epoch_shuffles_differ_between_epochs(corpus):
    a = to_batches(corpus, 8, shuffle_seed=(3, 1), size=32)
    b = to_batches(corpus, 8, shuffle_seed=(3, 2), size=32)
    labels = lambda bs: [int(v) for _, y in bs for v in y]
    assert labels(a) != labels(b)
