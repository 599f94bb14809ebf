"""Optimization, evaluation, few-shot finetuning and ensembling."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigError, ContractError, DataError, TrainingError
from .model import Model
from .nn import Linear
from .tensor import Tensor


@dataclass
class TrainSchedule:
    base_lr: float = 0.01
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_drop_epochs: tuple = (15, 25)
    total_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError(f"lr drop epochs must be strictly increasing, got {drops}")
        if drops and drops[-1] >= self.total_epochs:
            raise ConfigError(f"lr drop at epoch {drops[-1]} is not before total_epochs={self.total_epochs}")
        if self.batch_size < 1 or self.total_epochs < 1 or self.base_lr <= 0:
            raise ConfigError("batch_size, total_epochs and base_lr must be positive")

    @classmethod
    def preset(cls, name: str = "toy", **overrides) -> "TrainSchedule":
        if name == "toy":
            base = dict(base_lr=0.01, batch_size=16, lr_drop_epochs=(15, 25), total_epochs=30)
        elif name == "paper":
            base = dict(base_lr=0.01, batch_size=64, lr_drop_epochs=(20, 40), total_epochs=50)
        else:
            raise ConfigError(f"unknown schedule preset {name!r}")
        base.update(overrides)
        return cls(**base)

    def lr(self, epoch: int) -> float:
        drops = sum(1 for d in self.lr_drop_epochs if d <= epoch)
        return self.base_lr * 10.0 ** (-drops)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


def sgd_step(params: dict, grads: dict, state: dict, sched: TrainSchedule, epoch: int) -> None:
    """In-place momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr(epoch) * v``.

    ``params``/``grads``/``state`` are dicts keyed by parameter name.
    """
    lr = sched.lr(epoch)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DataError(f"gradient shape {g.shape} for {name} does not match {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = sched.momentum * v + g + sched.weight_decay * p.data
        state[name] = v
        p.data = (p.data - lr * v).astype(p.data.dtype)


@dataclass
class MetricsReport:
    epoch_loss: list = field(default_factory=list)
    epoch_train_top1: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    steps: int = 0
    top1: float | None = None
    top5: float | None = None
    per_verb: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    count: int = 0
    wall_clock: float = 0.0

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        d["per_verb"] = {str(k): v for k, v in self.per_verb.items()}
        if not include_time:
            d.pop("wall_clock")
        return d

    def to_json(self, path=None, include_time: bool = True) -> str:
        text = json.dumps(self.to_dict(include_time), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_top1"])
        for e, (lr, loss, acc) in enumerate(zip(self.epoch_lr, self.epoch_loss, self.epoch_train_top1)):
            w.writerow([e, repr(lr), repr(loss), repr(acc)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_verb"] = {int(k): v for k, v in d.get("per_verb", {}).items()}
        return cls(**d)


def _label_index(classes, verbs) -> np.ndarray:
    lookup = {int(c): i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[int(v)] for v in verbs], dtype=np.int64)
    except KeyError as e:
        raise DataError(f"verb {e.args[0]} is not among the model classes {list(classes)}") from None


def _batches(n: int, batch: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n - batch + 1, batch)]


def train(
    model: Model,
    dataset,
    ids,
    sched: TrainSchedule,
    classes=None,
    out_dir=None,
    log=None,
) -> tuple[Checkpoint, MetricsReport]:
    """Train ``model`` on the clips ``ids`` with cross-entropy over ``classes``.

    ``classes`` lists the verb ids in label order (default: all verbs the model
    can emit, ``0..K-1``). A checkpoint is written to ``out_dir`` at every lr
    drop (``epoch_XXX``) and at the end (``final``).
    """
    ids = np.asarray(list(ids), dtype=np.int64)
    classes = list(range(model.cfg.num_classes)) if classes is None else [int(c) for c in classes]
    if len(classes) != model.cfg.num_classes:
        raise ConfigError(f"{len(classes)} classes but the head has {model.cfg.num_classes} outputs")
    dataset.rows(ids)
    labels = _label_index(classes, dataset.labels(ids))
    if len(ids) < sched.batch_size:
        raise DataError(f"{len(ids)} training clips cannot fill one batch of {sched.batch_size}")
    rng = np.random.default_rng(sched.seed)
    params = model.trainable()
    state: dict = {}
    report = MetricsReport(classes=classes)
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(sched.total_epochs):
        if out_dir is not None and epoch in sched.lr_drop_epochs:
            Checkpoint.from_model(model, classes, sched.seed).save(out_dir / f"epoch_{epoch:03d}")
        losses, correct, seen = [], 0, 0
        for idx in _batches(len(ids), sched.batch_size, rng):
            batch_ids = ids[idx]
            frames, z = dataset.frames(batch_ids), dataset.structured(batch_ids)
            model.zero_grad()
            with T.Graph() as g:
                logits = model(frames, z)
                loss = T.cross_entropy(logits, labels[idx])
            T.backward(g, loss, list(params.values()))
            sgd_step(params, {n: p.grad for n, p in params.items()}, state, sched, epoch)
            losses.append(float(loss.item()))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
            seen += len(idx)
            report.steps += 1
        report.epoch_loss.append(float(np.mean(losses)))
        report.epoch_train_top1.append(correct / seen)
        report.epoch_lr.append(sched.lr(epoch))
        if log is not None:
            log(f"epoch {epoch:3d} lr {sched.lr(epoch):.0e} loss {report.epoch_loss[-1]:.4f} top1 {correct / seen:.3f}")
    model.zero_grad()
    report.wall_clock = time.perf_counter() - start
    ckpt = Checkpoint.from_model(model, classes, sched.seed)
    if out_dir is not None:
        ckpt.save(out_dir / "final")
        report.to_json(out_dir / "metrics.json")
        report.to_csv(out_dir / "metrics.csv")
    return ckpt, report


def predict(model: Model, dataset, ids, batch: int = 32) -> np.ndarray:
    """Class probabilities ``[n, K]`` (softmax of logits), no graph recorded."""
    ids = list(ids)
    out = []
    with T.no_grad():
        for i in range(0, len(ids), batch):
            chunk = ids[i : i + batch]
            logits = model(dataset.frames(chunk), dataset.structured(chunk))
            out.append(T.softmax(logits).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def topk_correct(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-row hit flags; ties rank the lower class index first."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.any(order == np.asarray(labels)[:, None], axis=1)


def metrics_from_scores(scores: np.ndarray, verbs, classes) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    classes = [int(c) for c in classes]
    if scores.ndim != 2 or scores.shape[1] != len(classes):
        raise ConfigError(f"scores have {scores.shape[-1]} classes, expected {len(classes)}")
    labels = _label_index(classes, verbs)
    top1 = topk_correct(scores, labels, 1)
    top5 = topk_correct(scores, labels, min(5, len(classes)))
    pred = np.argsort(-scores, axis=1, kind="stable")[:, 0]
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    per_verb = {c: float(top1[labels == i].mean()) for i, c in enumerate(classes) if np.any(labels == i)}
    return MetricsReport(
        top1=float(top1.mean()),
        top5=float(top5.mean()),
        per_verb=per_verb,
        confusion=confusion.tolist(),
        classes=classes,
        count=int(len(labels)),
    )


def evaluate(checkpoint, dataset, ids, classes=None) -> MetricsReport:
    """Top-1/top-5, per-verb accuracy and confusion on ``ids``.

    ``checkpoint`` is a :class:`Checkpoint`, a checkpoint directory, or a live model.
    """
    start = time.perf_counter()
    if isinstance(checkpoint, Model):
        model = checkpoint
        classes = list(range(model.cfg.num_classes)) if classes is None else classes
    else:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
        model = ckpt.build()
        classes = ckpt.classes if classes is None else classes
    if len(classes) != model.cfg.num_classes:
        raise ConfigError(f"{len(classes)} classes requested, model head has {model.cfg.num_classes}")
    report = metrics_from_scores(predict(model, dataset, ids), dataset.labels(ids), classes)
    report.wall_clock = time.perf_counter() - start
    return report


def _param_bytes(model: Model, skip: str) -> dict:
    return {n: p.data.tobytes() for n, p in model.named_parameters() if not n.startswith(skip)}


def fewshot_finetune(
    pretrained,
    dataset,
    finetune_ids,
    novel_verbs,
    k: int,
    sched: TrainSchedule | None = None,
    out_dir=None,
) -> tuple[Checkpoint, MetricsReport]:
    """Freeze every pretrained parameter and fit a fresh head over ``novel_verbs``.

    The frozen backbone is deterministic, so its pooled features are computed
    once and the head is trained on them directly.
    """
    sched = sched or TrainSchedule(base_lr=0.01, batch_size=16, lr_drop_epochs=(), total_epochs=20)
    ckpt = pretrained if isinstance(pretrained, Checkpoint) else Checkpoint.load(pretrained)
    model = ckpt.build()
    novel = [int(v) for v in novel_verbs]
    ids = np.asarray(list(finetune_ids), dtype=np.int64)
    labels = _label_index(novel, dataset.labels(ids))
    counts = np.bincount(labels, minlength=len(novel))
    if np.any(counts != k):
        raise DataError(f"finetune set must hold exactly k={k} clips per novel verb, got {counts.tolist()}")
    model.freeze()
    before = _param_bytes(model, "head.")
    model.replace_head(len(novel), np.random.default_rng(sched.seed))
    head: Linear = model.head
    with T.no_grad():
        feats = np.concatenate(
            [
                model.features(dataset.frames(ids[i : i + 32]), dataset.structured(ids[i : i + 32])).data
                for i in range(0, len(ids), 32)
            ]
        )
    rng = np.random.default_rng(sched.seed)
    params = head.trainable()
    state: dict = {}
    report = MetricsReport(classes=novel)
    batch = min(sched.batch_size, len(ids))
    start = time.perf_counter()
    for epoch in range(sched.total_epochs):
        losses, correct, seen = [], 0, 0
        for idx in _batches(len(ids), batch, rng):
            head.zero_grad()
            with T.Graph() as g:
                logits = head(Tensor(feats[idx]))
                loss = T.cross_entropy(logits, labels[idx])
            T.backward(g, loss, list(params.values()))
            sgd_step(params, {n: p.grad for n, p in params.items()}, state, sched, epoch)
            losses.append(float(loss.item()))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
            seen += len(idx)
            report.steps += 1
        report.epoch_loss.append(float(np.mean(losses)))
        report.epoch_train_top1.append(correct / seen)
        report.epoch_lr.append(sched.lr(epoch))
    head.zero_grad()
    report.wall_clock = time.perf_counter() - start
    after = _param_bytes(model, "head.")
    drifted = [n for n in before if before[n] != after[n]]
    if drifted:
        raise ContractError(f"frozen parameters changed during finetuning: {drifted[:5]}")
    out = Checkpoint.from_model(model, novel, sched.seed, extra={"frozen": sorted(before), "k": k})
    if out_dir is not None:
        out.save(Path(out_dir) / "final")
        report.to_json(Path(out_dir) / "metrics.json")
        report.to_csv(Path(out_dir) / "metrics.csv")
    return out, report


def ensemble(prob_lists) -> np.ndarray:
    """Arithmetic mean of per-model probability arrays ``[n, K]`` (or vectors ``[K]``)."""
    arrays = [np.asarray(p, dtype=np.float64) for p in prob_lists]
    if not arrays:
        raise ConfigError("ensemble needs at least one member")
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ConfigError(f"ensemble members disagree in shape: {a.shape} vs {shape}")
        if np.any(np.abs(a.sum(axis=-1) - 1.0) > 1e-6):
            raise ConfigError("ensemble member rows must sum to 1")
    return np.mean(np.stack(arrays), axis=0)
