"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest -s tests/test_acceptance.py` to see them
as they complete)."""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from _oracles import finite_difference, rel_err
from pconet import data
from pconet.cli import main as cli_main
from pconet.metrics import ConfusionMatrix, confusion, report
from pconet.model import (
    LayerRow,
    ModelSpec,
    TrainConfig,
    build_model,
    build_pconet,
    load_checkpoint,
    save_checkpoint,
    train,
)
from pconet.nn import (
    Activation,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    InitPolicy,
    MaxPool2D,
    dropout_forward,
    init_weights,
)
from pconet.optim import Adam, bce_loss


def criterion(num: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {num}] {status}: {description}{suffix}")
    assert ok, f"criterion {num}: {description}{suffix}"


# 1 ---------------------------------------------------------------------

def test_criterion_1_parameter_count():
    count = build_pconet().param_count()
    criterion(1, "build_pconet() has exactly 582,690 trainable parameters",
              count == 582_690, f"got {count:,}")


# 2 ---------------------------------------------------------------------

def test_criterion_2_shape_conformance():
    expected = [
        (222, 222, 32), (111, 111, 32), (109, 109, 32), (54, 54, 32),
        (52, 52, 64), (26, 26, 64), (24, 24, 64), (12, 12, 64),
        (10, 10, 128), (5, 5, 128), (3200,), (128,), (256,), (2,),
    ]
    trace = build_pconet().shape_trace()
    criterion(2, "forward shape trace equals every architecture-table row",
              trace == expected, f"got {trace}")


# 3 ---------------------------------------------------------------------

def _fd_layer_ok(layer, x, tol=1e-4, seed=0):
    weights = np.random.default_rng(seed).standard_normal(
        layer.forward(x, training=False).shape
    )

    def loss():
        return float((layer.forward(x, training=False) * weights).sum())

    layer.zero_grads()
    layer.forward(x, training=False)
    gin = layer.backward(weights)
    errs = [rel_err(gin, finite_difference(loss, x))]
    errs += [
        rel_err(layer.grads[name], finite_difference(loss, param))
        for name, param in layer.params.items()
    ]
    return max(errs) < tol, max(errs)


def test_criterion_3_gradient_correctness():
    rng = np.random.default_rng(42)
    results = []

    conv = Conv2D(2, 3, dtype=np.float64)
    init_weights(conv, InitPolicy(seed=1))
    results.append(_fd_layer_ok(conv, rng.standard_normal((2, 8, 8, 2))))
    results.append(_fd_layer_ok(MaxPool2D(), rng.standard_normal((2, 8, 8, 2))))
    dense = Dense(6, 4, dtype=np.float64)
    init_weights(dense, InitPolicy(seed=2))
    results.append(_fd_layer_ok(dense, rng.standard_normal((3, 6))))
    results.append(_fd_layer_ok(Flatten(), rng.standard_normal((2, 4, 4, 2))))
    results.append(_fd_layer_ok(Activation("relu"), rng.standard_normal((3, 7)) + 0.05))
    results.append(_fd_layer_ok(Activation("sigmoid"), rng.standard_normal((3, 7))))

    # dropout with a frozen mask (fresh identically-seeded rng per evaluation)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((4, 5))

    def drop_loss():
        out, _ = dropout_forward(x, 0.5, np.random.default_rng(99))
        return float((out * w).sum())

    _, mask = dropout_forward(x, 0.5, np.random.default_rng(99))
    err = rel_err(w * mask, finite_difference(drop_loss, x))
    results.append((err < 1e-4, err))

    # full micro-network: one conv block + dense head on random 8x8 inputs
    rows = (
        LayerRow("Conv_1", "conv_1", "conv", filters=3, activation="relu"),
        LayerRow("Max_pool_1", "max_pool_1", "pool"),
        LayerRow("Flattening Layer", "flatten", "flatten"),
        LayerRow("Output Layer", "output", "dense", units=2, activation="sigmoid"),
    )
    net = build_model(ModelSpec(rows, input_shape=(8, 8, 2)), seed=5).astype(np.float64)
    net.layers[0].need_input_grad = True
    x = rng.standard_normal((4, 8, 8, 2))
    targets = np.eye(2)[np.array([0, 1, 0, 1])]

    def net_loss():
        return bce_loss(net.forward(x, training=False), targets)[0]

    net.zero_grads()
    _, dprobs = bce_loss(net.forward(x, training=False), targets)
    gin = net.backward(dprobs)
    errs = [rel_err(gin, finite_difference(net_loss, x))]
    grads = net.named_grads()
    for name, param in net.named_params().items():
        errs.append(rel_err(grads[name], finite_difference(net_loss, param)))
    results.append((max(errs) < 1e-4, max(errs)))

    worst = max(detail for _, detail in results)
    criterion(3, "analytic gradients match central finite differences "
                 "(each layer kind + conv-block micro-network, 64-bit, rel err < 1e-4)",
              all(ok for ok, _ in results), f"worst rel err {worst:.2e}")


# 4 ---------------------------------------------------------------------

def test_criterion_4_optimizer_oracle():
    p, m, v = 0.0, 0.0, 0.0
    b1, b2, eps, lr, g = 0.9, 0.999, 1e-7, 1e-5, 1.0
    reference = []
    for t in range(1, 11):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        reference.append(p)

    params = {"p": np.zeros(1, dtype=np.float64)}
    adam = Adam(lr=lr)
    worst = 0.0
    for expected in reference:
        adam.step(params, {"p": np.ones(1)})
        worst = max(worst, abs(params["p"][0] - expected))
    criterion(4, "10 Adam steps on a scalar match the scripted recurrence to 1e-12",
              worst <= 1e-12, f"worst abs diff {worst:.2e}")


# 5 ---------------------------------------------------------------------

def test_criterion_5_loss_oracle():
    loss, _ = bce_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    ln2_ok = abs(loss - math.log(2.0)) < 1e-6

    rng = np.random.default_rng(0)
    probs = rng.uniform(0.05, 0.95, size=(5, 2))
    targets = np.eye(2)[rng.integers(0, 2, size=5)]
    _, grad = bce_loss(probs, targets)
    err = rel_err(grad, finite_difference(lambda: bce_loss(probs, targets)[0], probs))
    criterion(5, "bce_loss((0.5,0.5),(1,0)) = ln 2 and gradient passes finite differences",
              ln2_ok and err < 1e-5, f"loss {loss:.9f}, grad rel err {err:.2e}")


# 6 ---------------------------------------------------------------------

def test_criterion_6_overfit_capability(synth_items):
    started = time.monotonic()
    model = build_pconet(seed=3)
    adam = Adam(lr=1e-3)
    reached = None
    for epoch in range(1, 301):
        for batch in data.batches(synth_items, 16, shuffle_seed=3, epoch=epoch):
            probs = model.forward(batch.images, training=True)
            _, dprobs = bce_loss(probs, batch.labels)
            model.zero_grads()
            model.backward(dprobs)
            adam.step(model.named_params(), model.named_grads())
        evalbatch = next(data.batches(synth_items, 16))
        probs = model.forward(evalbatch.images, training=False)
        preds = np.where(probs[:, 1] > probs[:, 0], 1, 0)
        if np.array_equal(preds, evalbatch.labels.argmax(axis=1)):
            reached = epoch
            break
    elapsed = time.monotonic() - started
    criterion(6, "100% training accuracy on the 8-image synthetic set "
                 "within 300 epochs at lr 1e-3",
              reached is not None, f"epoch {reached}, {elapsed:.0f}s")


# 7 ---------------------------------------------------------------------

def _exact_report(counts):
    counts = [[Fraction(v) for v in row] for row in counts]
    total = sum(sum(row) for row in counts)
    out = {"accuracy": (counts[0][0] + counts[1][1]) / total}
    for c in (0, 1):
        pred = counts[0][c] + counts[1][c]
        act = counts[c][0] + counts[c][1]
        p = counts[c][c] / pred if pred else Fraction(0)
        r = counts[c][c] / act if act else Fraction(0)
        out[c] = (p, r, 2 * p * r / (p + r) if p + r else Fraction(0))
    return out


def test_criterion_7_metric_oracles():
    worst = 0.0
    for counts in ([[189, 0], [13, 137]], [[184, 5], [7, 143]]):
        rep = report(ConfusionMatrix(np.array(counts)))
        exact = _exact_report(counts)
        worst = max(worst, abs(rep.accuracy - float(exact["accuracy"])))
        for c in (0, 1):
            p, r, f1 = exact[c]
            got = rep.per_class[c]
            worst = max(worst, abs(got.precision - float(p)),
                        abs(got.recall - float(r)), abs(got.f1 - float(f1)))
    oracle_ok = worst < 1e-9

    rng = np.random.default_rng(7)
    identities_ok = True
    for _ in range(100):
        cm = ConfusionMatrix(rng.integers(0, 60, size=(2, 2)) + np.eye(2, dtype=np.int64))
        rep = report(cm)
        weighted = sum(c.recall * c.support for c in rep.per_class) / cm.total
        identities_ok &= abs(rep.accuracy - weighted) < 1e-12
        flipped = report(ConfusionMatrix(cm.counts[::-1, ::-1], cm.class_names[::-1]))
        for a, b in zip(rep.per_class, flipped.per_class[::-1]):
            identities_ok &= (
                abs(a.precision - b.precision) < 1e-12
                and abs(a.recall - b.recall) < 1e-12
                and abs(a.f1 - b.f1) < 1e-12
            )
    criterion(7, "report() matches exact arithmetic to 1e-9; relabel-equivariance "
                 "and weighted-recall identity hold on 100 random matrices",
              oracle_ok and identities_ok, f"worst oracle diff {worst:.2e}")


# 8 ---------------------------------------------------------------------

def test_criterion_8_determinism_and_persistence(tmp_path, synth_items):
    logs = []
    last_model = None
    for run in (0, 1):
        model = build_pconet(seed=21)
        config = TrainConfig(epochs=3, batch_size=16, learning_rate=1e-3, seed=21,
                             augment=True, log_path=tmp_path / f"log{run}.csv")
        train(model, synth_items, synth_items, config)
        logs.append((tmp_path / f"log{run}.csv").read_bytes())
        last_model = model
    logs_identical = logs[0] == logs[1]

    path = tmp_path / "model.pcon"
    save_checkpoint(last_model, path)
    loaded = load_checkpoint(path)
    params_identical = all(
        np.array_equal(a, b)
        for a, b in zip(last_model.named_params().values(), loaded.named_params().values())
    )
    x = next(data.batches(synth_items, 16)).images
    forward_identical = np.array_equal(
        last_model.forward(x, training=False), loaded.forward(x, training=False)
    )
    criterion(8, "two seeded runs produce byte-identical CSV logs; "
                 "checkpoint save/load/forward is bitwise-identical",
              logs_identical and params_identical and forward_identical)


# 9 ---------------------------------------------------------------------

def test_criterion_9_cli_end_to_end(tmp_path, synth_root, capsys):
    out = tmp_path / "model.pcon"
    log = tmp_path / "training.csv"
    code = cli_main([
        "train", "--data", str(synth_root), "--epochs", "30", "--batch", "16",
        "--lr", "0.001", "--seed", "3", "--augment", "off",
        "--out", str(out), "--log", str(log),
    ])
    log_lines = log.read_text().splitlines() if log.exists() else []
    train_ok = code == 0 and len(log_lines) == 31
    loaded = load_checkpoint(out)
    checkpoint_ok = loaded.param_count() == 582_690
    capsys.readouterr()

    code = cli_main(["eval", "--checkpoint", str(out), "--data", str(synth_root)])
    eval_out = capsys.readouterr().out
    eval_ok = (
        code == 0
        and "Accuracy: 1.00" in eval_out  # overfit fixture evaluates clean
        and "infected" in eval_out
        and "Confusion matrix" in eval_out
    )

    code = cli_main(["summary"])
    summary_out = capsys.readouterr().out
    squashed = [line.replace(" ", "") for line in summary_out.splitlines()]
    summary_ok = (
        code == 0
        and "Conv_1|32(3,3),s=1|(222,222,32)" in squashed
        and "Max_pool_2|(2,2),s=2|(54,54,32)" in squashed
        and "OutputLayer|2,Sigmoid|(None,2)" in squashed
        and summary_out.strip().splitlines()[-1] == "Total params: 582,690"
    )
    criterion(9, "CLI train emits a 30-row log and loadable checkpoint; "
                 "eval prints the report block; summary reproduces the table",
              train_ok and checkpoint_ok and eval_ok and summary_ok,
              f"train_ok={train_ok} eval_ok={eval_ok} summary_ok={summary_ok}")
