"""Pretraining of the toy model on the synthetic task, with an accuracy gate.

The attack assumes a competent frozen model; training that fails to reach
the held-out accuracy floor raises TrainingFailure instead of silently
producing a useless attack target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, TrainingFailure
from .model import ModelConfig, ToyMllm, forward_batch, predict_answer
from .optim import AdamW, lr_schedule

ACCURACY_FLOOR = 0.90


def layout_key(sample) -> tuple:
    return tuple((k, p if k == "image" else len(p)) for k, p in sample.layout)


def layout_batches(samples, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index lists of same-layout samples, optionally shuffled."""
    order = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(order)
    groups: dict = {}
    for i in order:
        groups.setdefault(layout_key(samples[int(i)]), []).append(int(i))
    batches = []
    for key in sorted(groups):
        idxs = groups[key]
        for start in range(0, len(idxs), batch_size):
            batches.append(idxs[start : start + batch_size])
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[int(p)] for p in perm]
    return batches


def answer_cross_entropy(trace, samples) -> ad.Tensor:
    """Mean -log P(answer token) at the shared answer position."""
    pos = samples[0].answer_position
    b, v = trace.logits.shape[0], trace.logits.shape[2]
    probs = ad.softmax(ad.index(trace.logits, (slice(None), pos, slice(None))))
    targets = np.asarray([s.target_tokens[0] for s in samples], dtype=np.intp)
    flat = ad.reshape(probs, (b * v,))
    picked = ad.take(flat, np.arange(b) * v + targets, axis=0)
    return ad.mul(ad.mean(ad.log(ad.clamp(picked, 1e-300, None))), -1.0)


def predict_batch(model: ToyMllm, samples, options_list) -> list:
    """Batched multiple-choice readout over same-layout samples."""
    trace = forward_batch(model, samples)
    return [
        predict_answer(trace.sample(i), samples[i].answer_position, options_list[i])
        for i in range(len(samples))
    ]


def heldout_accuracy(model: ToyMllm, dataset, config: ModelConfig, batch_size: int = 128) -> float:
    samples = [inst.to_sample(config) for inst in dataset]
    options = [inst.options for inst in dataset]
    answers = [inst.answer for inst in dataset]
    hits = 0
    for idxs in layout_batches(samples, batch_size):
        preds = predict_batch(model, [samples[i] for i in idxs], [options[i] for i in idxs])
        hits += sum(1 for p, i in zip(preds, idxs) if p == answers[i])
    return hits / len(samples)


@dataclass
class PretrainReport:
    epochs: int
    final_loss: float
    heldout_accuracy: float
    loss_trace: list
    best_epoch: int = -1


def pretrain_model(
    model: ToyMllm,
    dataset,
    heldout=None,
    epochs: int = 30,
    lr: float = 5e-3,
    batch_size: int = 32,
    weight_decay: float = 0.02,
    lr_final_factor: float = 0.05,
    accuracy_floor: float = ACCURACY_FLOOR,
    seed: int = 0,
) -> PretrainReport:
    """Minimize answer cross-entropy, then freeze; gate on held-out accuracy.

    Weight decay carries the held-out accuracy: without it the model
    memorizes the position-question instances instead of learning the
    index binding.
    """
    if model.frozen:
        raise ContractError("model is already frozen")
    if len(dataset) == 0:
        raise ContractError("pretraining dataset is empty")

    config = model.config
    samples = [inst.to_sample(config) for inst in dataset]
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)

    steps_per_epoch = max(1, len(layout_batches(samples, batch_size)))
    total_steps = max(1, epochs * steps_per_epoch)
    loss_trace: list = []
    step = 0
    final_loss = float("nan")
    # endpoint accuracy is noisy on a model this small: track the best
    # held-out checkpoint over the last stretch of training and keep it
    check_from = int(epochs * 0.6)
    best_acc, best_epoch, best_weights = -1.0, -1, None
    for epoch in range(epochs):
        for idxs in layout_batches(samples, batch_size, rng):
            batch = [samples[i] for i in idxs]
            trace = forward_batch(model, batch)
            loss = answer_cross_entropy(trace, batch)
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr_schedule(step, total_steps, lr, lr_final_factor))
            step += 1
            final_loss = loss.item()
            loss_trace.append(final_loss)
        if heldout is not None and epoch + 1 > check_from and (epoch + 1) % 2 == 0:
            acc = heldout_accuracy(model, heldout, config)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch + 1
                best_weights = {n: w.data.copy() for n, w in model.weights.items()}

    if best_weights is not None:
        final = heldout_accuracy(model, heldout, config)
        if final > best_acc:
            best_acc, best_epoch = final, epochs
        else:
            for name, data in best_weights.items():
                model.weights[name].data = data
    model.freeze()
    if heldout is not None:
        acc = best_acc if best_weights is not None else heldout_accuracy(model, heldout, config)
    else:
        acc = float("nan")
    report = PretrainReport(
        epochs=epochs,
        final_loss=final_loss,
        heldout_accuracy=acc,
        loss_trace=loss_trace,
        best_epoch=best_epoch,
    )
    if heldout is not None and acc < accuracy_floor:
        raise TrainingFailure(acc, accuracy_floor)
    return report
