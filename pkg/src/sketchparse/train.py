"""Training loop, greedy inference, and model persistence."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .data import Example, Vocabs, build_vocabs, sql_gold_ok
from .errors import CorruptCheckpoint, EmptyDataset
from .evaluation import exact_match
from .model import Parser, Prediction
from .nn.optim import RMSProp
from .nn.params import read_checkpoint, save_checkpoint
from .nn.tensor import Tape, Tensor

log = logging.getLogger(__name__)


def compute_loss(example: Example | Sequence[Example], model: Parser) -> Tensor:
    """Teacher-forced -[log p(y|x,a) + log p(a|x)], averaged over a batch."""
    batch = [example] if isinstance(example, Example) else list(example)
    return model.loss(batch)


def length_batches(examples: Sequence[Example], size: int, rng: np.random.Generator) -> list[list[Example]]:
    """Shuffle, stable-sort by input length, cut into chunks, shuffle the chunks."""
    order = rng.permutation(len(examples))
    order = sorted(order, key=lambda i: len(examples[i].src))
    chunks = [[examples[i] for i in order[k:k + size]] for k in range(0, len(order), size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def infer(examples: Sequence[Example], model: Parser, *, oracle: bool = False,
          batch_size: int | None = None) -> list[Prediction]:
    """Greedy two-stage decoding in batches; ``oracle`` uses the gold sketches."""
    size = batch_size or model.cfg.batch_size
    out: list[Prediction] = []
    for k in range(0, len(examples), size):
        out.extend(model.predict(examples[k:k + size], oracle=oracle))
    return out


def dev_accuracy(examples: Sequence[Example], model: Parser) -> float:
    preds = infer(examples, model)
    return exact_match([p.y for p in preds], [ex.y for ex in examples])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_acc: float
    seconds: float


@dataclass
class TrainResult:
    model: Parser
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: float = -1.0
    skipped: int = 0
    optimizer: RMSProp | None = None


def train(train_set: Sequence[Example], dev_set: Sequence[Example] | None, config: TrainConfig, *,
          vocabs: Vocabs | None = None, dtype=np.float32,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Mini-batch RMSProp over seeded shuffled epochs.  After each epoch the
    dev exact match decides the best parameters; training stops after
    ``patience`` epochs without improvement or once ``target_acc`` is met.
    The returned model holds the best parameters."""
    if not train_set:
        raise EmptyDataset("training set is empty")
    cfg = config.resolved()
    data = [ex for ex in train_set if sql_gold_ok(ex)]
    skipped = len(train_set) - len(data)
    if skipped:
        log.warning("skipping %d examples whose condition values are not question spans", skipped)
    if not data:
        raise EmptyDataset("no trainable examples")
    dev = list(dev_set) if dev_set else list(data)
    if vocabs is None:
        vocabs = build_vocabs(data, cfg.min_freq, cfg.tgt_min_freq)
    model = Parser(cfg, vocabs, dtype)
    opt = RMSProp(model.params, cfg.lr, cfg.rho, cfg.rms_eps, cfg.clip)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, skipped=skipped, optimizer=opt)
    best = None
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in length_batches(data, cfg.batch_size, rng):
            with Tape() as tape:
                loss = model.loss(batch, train=True, rng=rng)
            tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        acc = dev_accuracy(dev, model)
        rec = EpochRecord(epoch, total / count, acc, time.perf_counter() - t0)
        result.history.append(rec)
        log.info("epoch %d loss %.4f dev %.4f (%.1fs)", epoch, rec.train_loss, acc, rec.seconds)
        if on_epoch:
            on_epoch(rec)
        if acc > result.best_dev:
            result.best_dev, result.best_epoch = acc, epoch
            best = {k: v.copy() for k, v in model.params.arrays().items()}
            stale = 0
        else:
            stale += 1
        if acc >= cfg.target_acc:
            break
        if cfg.patience is not None and stale >= cfg.patience:
            break
    if best is not None:
        model.params.load_arrays(best)
    return result


def grid(**axes: Sequence) -> list[dict]:
    """Every combination of the given hyperparameter values."""
    keys = list(axes)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(axes[k] for k in keys))]


# -- persistence ---------------------------------------------------------------

def save_model(path, model: Parser, optimizer: RMSProp | None = None, extra: dict | None = None) -> None:
    payload = {"vocabs": model.vocabs.to_json(), **(extra or {})}
    save_checkpoint(path, model.params, optimizer.state() if optimizer else None,
                    config=model.cfg.to_dict(), extra=payload)


def load_model(path, dtype=np.float32) -> Parser:
    header, arrays, _ = read_checkpoint(path)
    try:
        cfg = TrainConfig.from_dict(header["config"])
        vocabs = Vocabs.from_json(header["extra"]["vocabs"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"checkpoint lacks a usable config or vocabulary: {exc}") from exc
    model = Parser(cfg, vocabs, dtype)
    unexpected = set(arrays) - set(model.params.names())
    if unexpected:
        raise CorruptCheckpoint(f"unexpected tensor {sorted(unexpected)[0]}")
    model.params.load_arrays(arrays)
    return model

