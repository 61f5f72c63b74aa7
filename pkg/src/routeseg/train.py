"""Training loop: seeded shuffling, hybrid loss, checkpoints, eval cadence.

Determinism layout: the run seed never mutates shared state. Epoch
shuffles use ``derive_seed(seed, SHUFFLE_TAG, epoch)`` and per-sample
augmentation uses ``derive_seed(seed, AUGMENT_TAG, epoch, sample_index)``
where sample_index is the position in the sorted id universe. Every
random decision is therefore a pure function of (seed, epoch, identity),
which is what makes resume-from-checkpoint bit-exact: restoring
parameters, optimizer slots, and the epoch counter is sufficient.

Batches are canonicalized by sorting ids ascending before stacking, so
the gradient reduction order, and hence the update, is independent of
the order samples arrived in.

Logs are line-delimited JSON. Step records carry kind/epoch/step/lr/
loss/dice/ce; epoch records kind/epoch/mean_loss; val records
kind/epoch/foreground dsc and iou.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np

from .data import AugmentConfig, SegSample, SplitMix64, augment, derive_seed, stack_batch
from .losses import cross_entropy_loss, dice_loss, one_hot
from .metrics import MetricsReport, evaluate_predictions
from .model import Model, load_into_model, read_records, save_model
from .optim import Optimizer, OptimConfig, cosine_lr
from .params import walk_tensors
from .tensor import Tape, Tensor, add, backward, mul, softmax_lastdim

SHUFFLE_TAG = 101
AUGMENT_TAG = 202


class NumericAbort(RuntimeError):
    """Loss became non-finite; the CLI maps this to exit code 4."""

    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.value = value


@dataclass
class TrainState:
    epoch: int = 0              # epochs completed
    step: int = 0               # optimizer steps taken
    best_dsc: float = -1.0


def _batches(order: Sequence[str], batch_size: int) -> List[List[str]]:
    return [sorted(order[i:i + batch_size])
            for i in range(0, len(order), batch_size)]


def _state_records(state: TrainState) -> Dict[str, np.ndarray]:
    return {"state.epoch": np.array(float(state.epoch)),
            "state.step": np.array(float(state.step)),
            "state.best_dsc": np.array(float(state.best_dsc))}


def predict_batches(model: Model, samples: Sequence[SegSample],
                    batch_size: int = 8) -> List[np.ndarray]:
    """Argmax class maps, one [H, W] int array per sample, in input order."""
    preds: List[np.ndarray] = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack_batch(samples[i:i + batch_size])
        logits = model.forward(Tensor(x), training=False)
        preds.extend(np.argmax(logits.data, axis=-1).astype(np.int64))
    return preds


def evaluate(model: Model, samples: Sequence[SegSample], batch_size: int = 8,
             with_hausdorff: bool = False) -> MetricsReport:
    preds = predict_batches(model, samples, batch_size)
    targets = [s.mask for s in samples]
    return evaluate_predictions(preds, targets, model.cfg.num_classes,
                                with_hausdorff=with_hausdorff)


def train_loop(model: Model, train_samples: Sequence[SegSample],
               val_samples: Sequence[SegSample], ocfg: OptimConfig,
               loss_lambda: float = 0.6, seed: int = 0,
               out_dir: Optional[str] = None, eval_every: int = 25,
               aug: Optional[AugmentConfig] = None,
               log_stream: Optional[TextIO] = None,
               config_text: str = "",
               resume_from: Optional[str] = None,
               stop_after_epochs: Optional[int] = None) -> TrainState:
    """Run Algorithm-1-style epochs; returns the final state.

    When ``val_samples`` is empty, validation falls back to the training
    split so the best checkpoint is still defined. With ``out_dir`` set,
    best.ckpt / last.ckpt and train_log.jsonl are written there.
    ``stop_after_epochs`` interrupts the run early without altering the
    schedule, so resuming from its last.ckpt continues bit-exactly.
    """
    ocfg.validate()
    if not 0.0 <= loss_lambda <= 1.0:
        raise ValueError(f"loss_lambda must sit in [0, 1], got {loss_lambda}")
    if not train_samples:
        raise ValueError("no training samples")
    by_id = {s.id: s for s in train_samples}
    if len(by_id) != len(train_samples):
        raise ValueError("duplicate sample ids in the training split")
    universe = sorted(by_id)
    index_of = {sid: i for i, sid in enumerate(universe)}
    eval_set = val_samples if val_samples else train_samples

    opt = Optimizer(ocfg, walk_tensors(model.params))
    state = TrainState()
    if resume_from is not None:
        _, records = read_records(resume_from)
        extras = load_into_model(model, records)
        opt.load_state_records(extras)
        for field_name, key in (("epoch", "state.epoch"), ("step", "state.step"),
                                ("best_dsc", "state.best_dsc")):
            if key not in extras:
                raise ValueError(f"{resume_from}: not a training checkpoint, "
                                 f"missing {key}")
            setattr(state, field_name,
                    int(extras[key]) if field_name != "best_dsc"
                    else float(extras[key]))

    own_stream = None
    if log_stream is None and out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume_from else "w"
        own_stream = open(os.path.join(out_dir, "train_log.jsonl"), mode,
                          encoding="utf-8")
        log_stream = own_stream

    def emit(record: dict):
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            log_stream.flush()

    def checkpoint(name: str):
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        extras = dict(opt.state_records())
        extras.update(_state_records(state))
        save_model(os.path.join(out_dir, name), model, config_text, extras)

    num_classes = model.cfg.num_classes
    end_epoch = ocfg.epochs if stop_after_epochs is None \
        else min(ocfg.epochs, stop_after_epochs)
    try:
        for epoch in range(state.epoch, end_epoch):
            lr = (cosine_lr(epoch, ocfg.epochs, ocfg.lr)
                  if ocfg.schedule == "cosine" else ocfg.lr)
            order = list(universe)
            SplitMix64(derive_seed(seed, SHUFFLE_TAG, epoch)).shuffle(order)
            epoch_losses = []
            for batch_ids in _batches(order, ocfg.batch_size):
                batch = []
                for sid in batch_ids:
                    s = by_id[sid]
                    if aug is not None:
                        rng = SplitMix64(
                            derive_seed(seed, AUGMENT_TAG, epoch, index_of[sid]))
                        s = augment(s, aug, rng)
                    batch.append(s)
                x, y = stack_batch(batch)
                target = one_hot(y, num_classes, dtype=x.dtype)

                tape = Tape()
                bound = model.bind(tape)
                logits = bound.forward(Tensor(x), training=True)
                probs = softmax_lastdim(logits)
                d = dice_loss(probs, Tensor(target))
                c = cross_entropy_loss(probs, Tensor(target))
                loss = add(mul(d, loss_lambda), mul(c, 1.0 - loss_lambda))

                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise NumericAbort(epoch, state.step, loss_val)
                grads = backward(loss)
                gdict = {name: grads[t] for name, t in walk_tensors(bound.params)}
                opt.step(gdict, lr)
                state.step += 1
                epoch_losses.append(loss_val)
                emit({"kind": "step", "epoch": epoch, "step": state.step,
                      "lr": lr, "loss": loss_val, "dice": float(d.data),
                      "ce": float(c.data)})
            state.epoch = epoch + 1
            emit({"kind": "epoch", "epoch": epoch,
                  "mean_loss": float(np.mean(epoch_losses))})

            last_epoch = state.epoch == ocfg.epochs
            if (eval_every and state.epoch % eval_every == 0) or last_epoch:
                report = evaluate(model, eval_set)
                fg = report.foreground_means.get("dsc")
                score = -1.0 if fg is None else float(fg)
                emit({"kind": "val", "epoch": epoch, "fg_dsc": fg,
                      "fg_iou": report.foreground_means.get("iou")})
                if score >= state.best_dsc:
                    state.best_dsc = score
                    checkpoint("best.ckpt")
        checkpoint("last.ckpt")
    finally:
        if own_stream is not None:
            own_stream.close()
    return state
