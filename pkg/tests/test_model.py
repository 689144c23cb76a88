import struct

import numpy as np
import pytest

from _oracles import rel_err
from pconet import data
from pconet.metrics import CSV_HEADER
from pconet.model import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    LayerRow,
    Model,
    ModelSpec,
    TrainConfig,
    TrainState,
    TrainingDivergedError,
    build_model,
    build_pconet,
    evaluate,
    load_checkpoint,
    pconet_spec,
    save_checkpoint,
    steps_per_epoch,
    summary,
    train,
)
from pconet.optim import Adam, bce_loss
from pconet.tensor import ShapeError

TABLE_SHAPES = [
    (222, 222, 32), (111, 111, 32), (109, 109, 32), (54, 54, 32),
    (52, 52, 64), (26, 26, 64), (24, 24, 64), (12, 12, 64),
    (10, 10, 128), (5, 5, 128), (3200,), (128,), (256,), (2,),
]

MICRO_ROWS = (
    LayerRow("Conv_1", "conv_1", "conv", filters=3, activation="relu"),
    LayerRow("Max_pool_1", "max_pool_1", "pool"),
    LayerRow("Flattening Layer", "flatten", "flatten"),
    LayerRow("Output Layer", "output", "dense", units=2, activation="sigmoid"),
)


def micro_model(seed=0, dtype=np.float32):
    return build_model(ModelSpec(MICRO_ROWS, input_shape=(8, 8, 2)), seed=seed, dtype=dtype)


def scores_model():
    """Layer-free model: forward is the identity, so predict() sees the
    raw scores we feed it."""
    return Model(ModelSpec((), input_shape=(2,)), [], [], [])


# ------------------------------------------------------------- assembly

def test_parameter_count():
    assert build_pconet().param_count() == 582_690


def test_shape_trace_matches_architecture_table():
    assert build_pconet().shape_trace() == TABLE_SHAPES


def test_summary_reproduces_table():
    text = summary(build_pconet())
    squashed = [line.replace(" ", "") for line in text.splitlines()]
    assert "Conv_1|32(3,3),s=1|(222,222,32)" in squashed
    assert "Max_pool_5|(2,2),s=2|(5,5,128)" in squashed
    assert "FlatteningLayer||(None,3200)" in squashed
    assert "DenseLayer1|128,ReLu|(None,128)" in squashed
    assert "OutputLayer|2,Sigmoid|(None,2)" in squashed
    assert text.splitlines()[-1] == "Total params: 582,690"
    assert "Trainable params: 582,690" in text


def test_forward_shape_and_range():
    model = build_pconet(seed=1)
    x = np.random.default_rng(0).random((2, 224, 224, 3), dtype=np.float32)
    out = model.forward(x, training=False)
    assert out.shape == (2, 2)
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_zero_input_gives_half_scores():
    model = build_pconet(seed=2)
    out = model.forward(np.zeros((3, 224, 224, 3), dtype=np.float32))
    assert np.array_equal(out, np.full((3, 2), 0.5, dtype=np.float32))


def test_eval_forward_deterministic():
    model = build_pconet(seed=3)
    x = np.random.default_rng(1).random((2, 224, 224, 3), dtype=np.float32)
    assert np.array_equal(model.forward(x), model.forward(x))


def test_same_seed_same_model():
    a, b = build_pconet(seed=11), build_pconet(seed=11)
    for (name, pa), pb in zip(a.named_params().items(), b.named_params().values()):
        assert np.array_equal(pa, pb), name


def test_forward_error_names_layer_index():
    model = build_pconet()
    with pytest.raises(ShapeError, match="layer 0"):
        model.forward(np.zeros((1, 224, 224, 4), dtype=np.float32))


def test_dropout_only_active_in_training():
    model = micro_model(seed=4)
    x = np.random.default_rng(2).random((4, 8, 8, 2), dtype=np.float32)
    assert np.array_equal(model.forward(x), model.forward(x))


# -------------------------------------------------------------- predict

def test_predict_argmax_and_tiebreak():
    model = scores_model()
    assert model.predict(np.array([0.9, 0.2], np.float32))[0] == "infected"
    assert model.predict(np.array([0.1, 0.7], np.float32))[0] == "not infected"
    label, scores = model.predict(np.array([0.5, 0.5], np.float32))
    assert label == "infected"  # documented tie-break
    assert scores == (0.5, 0.5)


def test_predict_validates_shape():
    with pytest.raises(ShapeError, match="shape"):
        build_pconet().predict(np.zeros((10, 10, 3), dtype=np.float32))


# ------------------------------------------------------------- training

def test_steps_per_epoch_ceiling():
    assert steps_per_epoch(1346, 16) == 85
    assert steps_per_epoch(16, 16) == 1
    assert steps_per_epoch(17, 16) == 2


def test_train_writes_log_rows(tmp_path, synth_items):
    model = build_pconet(seed=5)
    config = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=5,
                         augment=False, log_path=tmp_path / "log.csv")
    result = train(model, synth_items, synth_items, config)
    assert len(result.log) == 2
    assert [row.epoch for row in result.log] == [1, 2]
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 3
    assert result.state.step == 2
    assert set(result.state.m) == set(model.named_params())


def test_train_with_augmentation_is_deterministic(synth_items):
    logs = []
    for _ in range(2):
        model = build_pconet(seed=6)
        config = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3,
                             seed=6, augment=True)
        logs.append(train(model, synth_items, synth_items, config).log)
    assert logs[0] == logs[1]


def test_train_rejects_empty_sets(synth_items):
    with pytest.raises(ValueError, match="non-empty"):
        train(build_pconet(), [], synth_items, TrainConfig(epochs=1))


def test_train_aborts_on_non_finite_loss(synth_items):
    model = build_pconet(seed=7)
    model.named_params()["output/bias"][...] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train(model, synth_items, synth_items,
              TrainConfig(epochs=1, learning_rate=1e-3, augment=False))
    assert err.value.epoch == 1 and err.value.step == 1


def test_single_step_decreases_frozen_batch_loss(synth_items):
    model = build_pconet(seed=8)
    batch = next(data.batches(synth_items, 16))
    probs = model.forward(batch.images, training=False)
    before, grad = bce_loss(probs, batch.labels)
    model.zero_grads()
    model.backward(grad)
    Adam(lr=1e-5).step(model.named_params(), model.named_grads())
    after, _ = bce_loss(model.forward(batch.images, training=False), batch.labels)
    assert after < before


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="batch"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="learning rate"):
        TrainConfig(learning_rate=0.0)


def test_evaluate_reports_confusion(synth_items):
    result = evaluate(build_pconet(seed=9), synth_items, batch_size=16)
    assert result.n == 8
    assert result.confusion.total == 8
    assert 0.0 <= result.accuracy <= 1.0
    assert result.loss > 0.0


# ----------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = micro_model(seed=10)
    path = tmp_path / "m.pcon"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path, spec=model.spec)
    for (name, a), b in zip(model.named_params().items(), loaded.named_params().values()):
        assert np.array_equal(a, b), name
    x = np.random.default_rng(3).random((2, 8, 8, 2), dtype=np.float32)
    assert np.array_equal(model.forward(x), loaded.forward(x))


def test_checkpoint_magic_bytes(tmp_path):
    path = tmp_path / "m.pcon"
    save_checkpoint(micro_model(), path)
    assert path.read_bytes()[:4] == b"PCON"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.pcon"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "m.pcon"
    save_checkpoint(micro_model(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 2"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.pcon"
    save_checkpoint(micro_model(), path)
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path, spec=ModelSpec(MICRO_ROWS, input_shape=(8, 8, 2)))


def test_checkpoint_shape_table_mismatch(tmp_path):
    path = tmp_path / "m.pcon"
    save_checkpoint(micro_model(), path)  # micro table, loaded as full PCONet
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_trailing_garbage(tmp_path):
    path = tmp_path / "m.pcon"
    save_checkpoint(micro_model(), path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path, spec=ModelSpec(MICRO_ROWS, input_shape=(8, 8, 2)))


def test_checkpoint_optimizer_trailer_roundtrip(tmp_path):
    model = micro_model(seed=12)
    params = model.named_params()
    rng = np.random.default_rng(4)
    state = TrainState(
        epoch=17, step=85,
        m={k: rng.random(v.shape).astype(np.float32) for k, v in params.items()},
        v={k: rng.random(v.shape).astype(np.float32) for k, v in params.items()},
    )
    path = tmp_path / "m.pcon"
    save_checkpoint(model, path, train_state=state)
    loaded = load_checkpoint(path, spec=model.spec)
    assert loaded.train_state is not None
    assert loaded.train_state.epoch == 17 and loaded.train_state.step == 85
    for k in params:
        assert np.array_equal(loaded.train_state.m[k], state.m[k])
        assert np.array_equal(loaded.train_state.v[k], state.v[k])


def test_checkpoint_float64_model_saved_as_float32(tmp_path):
    model = micro_model(seed=13).astype(np.float64)
    path = tmp_path / "m.pcon"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path, spec=model.spec)
    for (name, a), b in zip(model.named_params().items(), loaded.named_params().values()):
        assert rel_err(a.astype(np.float32), b) == 0.0, name
