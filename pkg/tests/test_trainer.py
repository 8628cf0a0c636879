import csv

import numpy as np
import pytest

from psselect.autodiff import Adam, Tensor, soft_f1_loss
from psselect.networks import NetworkSpec, build_network
from psselect.synth import SceneConfig, generate
from psselect.trainer import (
    LabeledPatches, TrainConfig, make_dataset, metrics, split, train,
)


def _toy(n=10, t=4, p=8, seed=0, frac=0.2):
    rng = np.random.default_rng(seed)
    labels = rng.random((n, p, p)) < frac
    # PS pixels carry a stable phase, the rest is uniform noise
    phase = np.where(labels[:, None], 0.3, rng.uniform(-np.pi, np.pi, size=(n, t, p, p)))
    return LabeledPatches(phase, labels)


def _small_net(kind="cnn_iss", t=4, seed=0, dropout=0.25):
    return build_network(NetworkSpec(kind=kind, filter_plan=(4, 4), n_timesteps=t, input_patch=8,
                                     dropout_rate=dropout), seed=seed)


# ---------------------------------------------------------------- config

def test_config_defaults_by_kind():
    c = TrainConfig.for_kind("cnn_iss")
    assert (c.epochs, c.lr, c.patience, c.class_weights, c.batch_size, c.val_fraction) == \
        (400, 0.01, 20, (200.0, 1.0), 8, 0.2)
    c = TrainConfig.for_kind("clstm_iss", lr=None, epochs=12, patience=3)
    assert (c.epochs, c.lr) == (12, 0.001)


def test_config_validation():
    for bad in (dict(patience=300), dict(batch_size=0), dict(val_fraction=1.0),
                dict(class_weights=(1.0,)), dict(lr=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- metrics

def test_metrics_examples():
    t = np.array([1, 1, 1, 0, 0, 0], bool)
    m = metrics(t, t)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    m = metrics(~t, t)
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    pred = np.array([1, 1, 0, 1, 0, 0], bool)  # TP=2, FP=1, FN=1
    m = metrics(pred, t)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 / 3) and m.undefined == ()


def test_metrics_zero_denominators_flagged():
    m = metrics(np.zeros(4, bool), np.zeros(4, bool))
    assert m.precision == m.recall == m.f1 == 0.0 and m.accuracy == 1.0
    assert set(m.undefined) == {"precision", "recall", "f1"}
    with pytest.raises(ValueError):
        metrics(np.zeros(3, bool), np.zeros(4, bool))


# ---------------------------------------------------------------- datasets

def test_split_examples():
    ds = _toy(10)
    tr, va = split(ds, 0.2, seed=1)
    assert (len(tr), len(va)) == (8, 2)
    rows = {r.tobytes() for r in np.concatenate([tr.phase, va.phase])}
    assert rows == {r.tobytes() for r in ds.phase}
    tr2, va2 = split(ds, 0.2, seed=1)
    assert np.array_equal(va.phase, va2.phase)
    with pytest.raises(ValueError):
        split(_toy(2), 0.1)
    with pytest.raises(ValueError):
        split(ds, 0.0)


def test_make_dataset_tiles_stack():
    stack, truth = generate(SceneConfig(width=40, height=24, n_ifgs=4, seed=0))
    ds = make_dataset(stack, truth.ps_mask, 16)
    assert ds.phase.shape == (6, 4, 16, 16) and ds.labels.shape == (6, 16, 16)
    assert np.array_equal(ds.labels[0], truth.ps_mask.labels[:16, :16])
    assert np.array_equal(ds.phase[1, 2], stack.phase[2, :16, 16:32])
    with pytest.raises(ValueError):
        make_dataset(stack, truth.ps_mask.labels[:-1], 16)


def test_labeled_patches_shape_check():
    with pytest.raises(ValueError):
        LabeledPatches(np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 5)))


# ---------------------------------------------------------------- loss properties

def test_soft_f1_gradient_antisymmetry():
    # classes (1, 1), balanced labels, reflection p -> 1 - p with labels flipped
    rng = np.random.default_rng(0)
    y = np.zeros(20)
    y[rng.permutation(20)[:10]] = 1.0
    for p in (np.full(20, 0.5), rng.uniform(0.05, 0.95, 20)):
        a = Tensor(p, requires_grad=True)
        soft_f1_loss(a, y, (1.0, 1.0)).backward()
        b = Tensor(1 - p, requires_grad=True)
        soft_f1_loss(b, 1 - y, (1.0, 1.0)).backward()
        assert np.abs(a.grad + b.grad).max() <= 1e-9


@pytest.mark.parametrize("kind", ["cnn_iss", "clstm_iss"])
def test_single_patch_overfit_is_monotone(kind):
    ds = _toy(1, seed=3)
    net = _small_net(kind, dropout=0.0, seed=1)
    opt = Adam(net.parameters(), lr=1e-3)
    x = net.encode(ds.phase)
    losses = []
    for _ in range(12):
        opt.zero_grad()
        loss = soft_f1_loss(net.forward(x, mode="train"), ds.labels, (1.0, 1.0))
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert np.all(np.diff(losses) < 0), losses


# ---------------------------------------------------------------- train

def test_train_refuses_single_class():
    ds = LabeledPatches(np.zeros((5, 4, 8, 8)), np.zeros((5, 8, 8)))
    with pytest.raises(ValueError, match="single class"):
        train(_small_net(), ds, TrainConfig(epochs=3, patience=1))
    with pytest.raises(ValueError):
        train(_small_net(), _toy(1), TrainConfig(epochs=3, patience=1))


def test_train_patience_one_stops_early():
    ds = _toy(10, seed=1)
    net = _small_net(seed=2)
    best, hist = train(net, ds, TrainConfig(epochs=60, patience=1, lr=0.05, class_weights=(1, 1)))
    assert hist.stopped_epoch < 60
    assert 1 <= hist.best_epoch <= hist.stopped_epoch
    assert len(hist.val_loss) == hist.stopped_epoch
    # the final epoch is the first that failed to beat the running reference by the tolerance
    ref = np.inf
    for v in hist.val_loss[:-1]:
        assert v < ref - 1e-6
        ref = v
    assert hist.val_loss[-1] >= ref - 1e-6


def test_train_restores_best_and_is_deterministic(tmp_path):
    ds = _toy(10, seed=2)
    cfg = TrainConfig(epochs=6, patience=5, lr=0.01, class_weights=(1.0, 1.0), batch_size=4, seed=7)
    net_a, net_b = _small_net(seed=4), _small_net(seed=4)
    best_a, ha = train(net_a, ds, cfg)
    best_b, hb = train(net_b, ds, cfg)
    assert ha.val_loss == hb.val_loss and ha.train_loss == hb.train_loss and ha.f1 == hb.f1
    for k in best_a:
        assert best_a[k].tobytes() == best_b[k].tobytes()
        assert np.array_equal(net_a.state_dict()[k], best_a[k])
    assert ha.best_val_loss == min(ha.val_loss)
    assert ha.best_epoch <= ha.stopped_epoch
    path = tmp_path / "h.csv"
    ha.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "acc", "prec", "rec", "f1"]
    assert len(rows) == ha.stopped_epoch + 1


def test_train_improves_on_easy_set():
    ds = _toy(16, seed=5)
    net = _small_net("cnn_iss", seed=0)
    _, hist = train(net, ds, TrainConfig(epochs=15, patience=10, lr=0.01, class_weights=(1, 1),
                                         batch_size=4, seed=1))
    assert hist.best_f1 > hist.initial["f1"]
    assert hist.best_val_loss < hist.initial["val_loss"]
