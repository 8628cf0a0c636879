"""Mini-batch training with soft-F1 loss, Adam and validation early stopping."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from psselect.autodiff import Adam, soft_f1_loss
from psselect.networks import Network
from psselect.stack import InterferogramStack, PixelMask, chunk_array

IMPROVEMENT_TOL = 1e-6
KIND_DEFAULTS = {
    "cnn_iss": {"epochs": 400, "lr": 0.01},
    "clstm_iss": {"epochs": 300, "lr": 0.001},
}
EVAL_BATCH = 8


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 0.001
    patience: int = 20
    class_weights: tuple = (200.0, 1.0)
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 1 <= self.patience < self.epochs:
            raise ValueError("patience must satisfy 1 <= patience < epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if len(self.class_weights) != 2 or min(self.class_weights) < 0:
            raise ValueError("class_weights must be two non-negative numbers (PS, non-PS)")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "TrainConfig":
        """Defaults for a network kind; ``None`` overrides are ignored."""
        if kind not in KIND_DEFAULTS:
            raise ValueError(f"unknown network kind {kind!r}")
        kw = dict(KIND_DEFAULTS[kind])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d


@dataclass
class LabeledPatches:
    """Phase patches ``(M, T, P, P)`` with binary labels ``(M, P, P)``."""

    phase: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.phase.ndim != 4 or self.labels.shape != (self.phase.shape[0],) + self.phase.shape[2:]:
            raise ValueError(f"phase {self.phase.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return self.phase.shape[0]

    def subset(self, idx) -> "LabeledPatches":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledPatches(self.phase[idx], self.labels[idx])


def make_dataset(stack: InterferogramStack, mask: PixelMask | np.ndarray, patch_size: int,
                 pad_policy: str | None = None) -> LabeledPatches:
    """Tile a stack and its label mask into training patches."""
    labels = mask.labels if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if labels.shape != (stack.height, stack.width):
        raise ValueError("mask extent does not match the stack")
    policy = pad_policy or stack.pad_policy
    tiles = [t for _, _, t in chunk_array(stack.phase.astype(np.float64), patch_size, policy)]
    lab = [t for _, _, t in chunk_array(labels.astype(np.float64), patch_size, policy)]
    return LabeledPatches(np.stack(tiles), np.stack(lab))


def split(dataset: LabeledPatches, val_fraction: float, seed=0):
    """Seeded random split; ``round(M * val_fraction)`` patches go to validation."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    m = len(dataset)
    n_val = int(round(m * val_fraction))
    if n_val == 0 or n_val == m:
        raise ValueError(f"{m} patches with val_fraction {val_fraction} leave an empty split")
    perm = np.random.default_rng(seed).permutation(m)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple = ()


def metrics(pred_mask, truth_mask) -> Metrics:
    """Hard-count metrics; zero-denominator entries are 0 and named in ``undefined``."""
    pred = np.asarray(pred_mask.labels if isinstance(pred_mask, PixelMask) else pred_mask, dtype=bool)
    truth = np.asarray(truth_mask.labels if isinstance(truth_mask, PixelMask) else truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    undefined = []
    acc = float(np.count_nonzero(pred == truth)) / pred.size if pred.size else 0.0
    if tp + fp:
        prec = tp / (tp + fp)
    else:
        prec = 0.0
        undefined.append("precision")
    if tp + fn:
        rec = tp / (tp + fn)
    else:
        rec = 0.0
        undefined.append("recall")
    if 2 * tp + fp + fn and tp:
        f1 = 2 * tp / (2 * tp + fp + fn)
    else:
        f1 = 0.0
        if not tp:
            undefined.append("f1")
    return Metrics(acc, prec, rec, f1, tuple(undefined))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    f1: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    initial: dict = field(default_factory=dict)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    @property
    def best_f1(self) -> float:
        return self.f1[self.best_epoch - 1]

    def rows(self):
        for e in range(len(self.val_loss)):
            yield (e + 1, self.train_loss[e], self.val_loss[e], self.accuracy[e],
                   self.precision[e], self.recall[e], self.f1[e])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "acc", "prec", "rec", "f1"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def evaluate(network: Network, data: LabeledPatches, class_weights) -> tuple[float, Metrics]:
    """Infer-mode soft-F1 loss over the whole set plus hard metrics at p >= 0.5."""
    probs = []
    for s in range(0, len(data), EVAL_BATCH):
        probs.append(network.predict_proba(data.phase[s:s + EVAL_BATCH]))
    p = np.concatenate(probs)
    loss = float(soft_f1_loss(p, data.labels, class_weights).data)
    return loss, metrics(p >= 0.5, data.labels.astype(bool))


def train(network: Network, dataset: LabeledPatches, cfg: TrainConfig, log=None):
    """Fit ``network`` in place and return ``(best_state, history)``.

    Patience resets only when the validation loss drops by more than
    ``IMPROVEMENT_TOL`` below the last reference value; the returned state is
    the exact validation-loss minimum, which is also loaded into the network.
    """
    cfg.validate()
    if len(dataset) < 2:
        raise ValueError("training needs at least 2 patches")
    train_set, val_set = split(dataset, cfg.val_fraction, cfg.seed)
    n_pos = int(train_set.labels.sum())
    if n_pos == 0 or n_pos == train_set.labels.size:
        raise ValueError(
            "training split contains a single class; soft-F1 is degenerate "
            f"({n_pos} PS of {train_set.labels.size} pixels)"
        )
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    opt = Adam(network.parameters(), lr=cfg.lr)
    hist = TrainHistory()
    loss0, m0 = evaluate(network, val_set, cfg.class_weights)
    hist.initial = {"val_loss": loss0, **dataclasses.asdict(m0)}
    best_loss, ref_loss, wait = np.inf, np.inf, 0
    best_state = network.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        batch_losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            x = network.encode(train_set.phase[idx])
            opt.zero_grad()
            prob = network.forward(x, mode="train", rng=drop_rng)
            loss = soft_f1_loss(prob, train_set.labels[idx], cfg.class_weights)
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.data))
        val_loss, m = evaluate(network, val_set, cfg.class_weights)
        hist.train_loss.append(float(np.mean(batch_losses)))
        hist.val_loss.append(val_loss)
        hist.accuracy.append(m.accuracy)
        hist.precision.append(m.precision)
        hist.recall.append(m.recall)
        hist.f1.append(m.f1)
        hist.stopped_epoch = epoch
        if val_loss < best_loss:
            best_loss = val_loss
            hist.best_epoch = epoch
            best_state = network.state_dict()
        if val_loss < ref_loss - IMPROVEMENT_TOL:
            ref_loss, wait = val_loss, 0
        else:
            wait += 1
        if log is not None:
            log(f"epoch {epoch}: train {hist.train_loss[-1]:.5f} val {val_loss:.5f} f1 {m.f1:.4f}")
        if wait >= cfg.patience:
            break
    network.load_state_dict(best_state)
    return best_state, hist
