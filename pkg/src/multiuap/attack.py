"""Universal perturbation training against the frozen model.

A fixed set of pixel perturbations is optimized with AdamW under a cosine
schedule; after every step each perturbation is projected back into the
l-infinity ball. The frozen model never receives gradients.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .interleave import InterleavedSample, role_index
from .losses import (
    LOSS_NAMES,
    LossBreakdown,
    LossWeights,
    PhdConfig,
    contagious_loss,
    hidden_state_loss,
    ias_loss,
    lm_loss,
    phd_loss,
    total_loss,
)
from .model import ToyMllm, forward_batch
from .optim import AdamW, lr_schedule
from .pretrain import layout_batches

DEFAULT_EPSILON = 12.0 / 255.0

UAP_MAGIC = "multiuap-uaps 1"

SLOT_CHOICES = ("first", "last", "first-last")


@dataclass
class UapSet:
    """The learnable perturbations delta_1..delta_k and their budget."""

    deltas: list
    epsilon: float = DEFAULT_EPSILON
    k: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("at least one perturbation required")
        if len(self.deltas) != self.k:
            raise ContractError(f"expected {self.k} deltas, got {len(self.deltas)}")

    def project(self) -> None:
        """Clip every perturbation into the l-infinity ball, in place."""
        for d in self.deltas:
            np.clip(d.data, -self.epsilon, self.epsilon, out=d.data)

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(d.data))) for d in self.deltas)

    def checksum(self) -> float:
        return float(sum(np.sum(d.data * d.data) for d in self.deltas))

    def copy(self) -> "UapSet":
        return UapSet(
            deltas=[Tensor(d.data.copy(), requires_grad=True) for d in self.deltas],
            epsilon=self.epsilon,
            k=self.k,
        )


def init_uaps(
    image_side: int,
    epsilon: float = DEFAULT_EPSILON,
    k: int = 2,
    seed: int = 0,
    channels: int = 3,
) -> UapSet:
    """Seeded uniform start inside the budget ball."""
    rng = np.random.default_rng(seed)
    deltas = [
        Tensor(rng.uniform(-epsilon, epsilon, size=(image_side, image_side, channels)),
               requires_grad=True)
        for _ in range(k)
    ]
    return UapSet(deltas=deltas, epsilon=epsilon, k=k)


def random_uaps(image_side: int, epsilon: float, k: int, seed: int, channels: int = 3) -> UapSet:
    """Random-noise baseline at the same budget: uniform in [-eps, eps]."""
    return init_uaps(image_side, epsilon, k, seed, channels)


@dataclass(frozen=True)
class AttackConfig:
    epochs: int = 20
    batch_size: int = 64
    lr0: float = 1e-4
    lr_final_factor: float = 0.2
    weight_decay: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    k: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    mask: tuple = LOSS_NAMES  # active loss components
    phd: PhdConfig = field(default_factory=PhdConfig)
    perturbed_slots: str | tuple = "first"
    seed: int = 0
    ias_normalize_by_pairs: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not 0.0 < self.lr_final_factor <= 1.0:
            raise ContractError("lr_final_factor must be in (0, 1]")
        unknown = set(self.mask) - set(LOSS_NAMES)
        if unknown:
            raise ContractError(f"unknown loss components {sorted(unknown)}")
        if isinstance(self.perturbed_slots, str) and self.perturbed_slots not in SLOT_CHOICES:
            raise ContractError(f"perturbed_slots must be one of {SLOT_CHOICES} or explicit ids")

    def masked_weights(self) -> LossWeights:
        vals = self.weights.as_dict()
        return LossWeights(**{n: (vals[n] if n in self.mask else 0.0) for n in LOSS_NAMES})


def resolve_slots(spec, m: int, k: int) -> list:
    """Map a symbolic slot choice to 1-based image ids for an m-image sample."""
    if isinstance(spec, str):
        if spec == "first":
            ids = list(range(1, min(k, m) + 1))
        elif spec == "last":
            ids = list(range(max(1, m - k + 1), m + 1))
        elif spec == "first-last":
            ids = [1, m] if m > 1 else [1]
            ids = ids[:k]
        else:
            raise ContractError(f"unknown slot spec {spec!r}")
        return ids
    ids = sorted(int(s) for s in spec)
    if len(ids) > k:
        raise ContractError(f"{len(ids)} slots exceed {k} perturbations")
    bad = [s for s in ids if not 1 <= s <= m]
    if bad:
        raise ContractError(f"slot ids {bad} outside 1..{m}")
    return ids


def apply_uaps(images, uaps: UapSet, slots) -> list:
    """Return x' = clamp(x + delta, 0, 1) on the chosen slots, others untouched.

    ``slots`` holds 1-based image ids; delta_j goes to the j-th slot in order.
    """
    slots = [int(s) for s in slots]
    if len(slots) > uaps.k:
        raise ContractError(f"{len(slots)} slots exceed {uaps.k} perturbations")
    bad = [s for s in slots if not 1 <= s <= len(images)]
    if bad:
        raise ContractError(f"slot ids {bad} outside 1..{len(images)}")
    out = list(images)
    for j, slot in enumerate(slots):
        base = images[slot - 1]
        base_t = base if isinstance(base, Tensor) else Tensor(np.asarray(base, dtype=np.float64))
        if base_t.shape != uaps.deltas[j].shape:
            raise ShapeError(
                "apply_uaps", f"image shape {base_t.shape} vs delta {uaps.deltas[j].shape}"
            )
        out[slot - 1] = ad.clamp(ad.add(base_t, uaps.deltas[j]), 0.0, 1.0)
    return out


def perturbed_batch(samples, uaps: UapSet, slot_spec) -> tuple:
    """Apply the perturbation set to every sample; returns (adv samples, roles).

    Samples must share a layout so one RoleIndex covers the batch.
    """
    m = samples[0].n_images
    slot_ids = resolve_slots(slot_spec, m, uaps.k)
    adv = [
        replace(s, images=tuple(apply_uaps(list(s.images), uaps, slot_ids))) for s in samples
    ]
    roles = role_index(samples[0], slot_ids)
    return adv, roles


@dataclass
class StepRecord:
    step: int
    lm: float
    dec: float
    h: float
    ctg: float
    ias: float
    total: float
    lr: float


def batch_loss(model: ToyMllm, samples, uaps: UapSet, cfg: AttackConfig) -> LossBreakdown:
    """Batch-mean loss breakdown; clean traces are computed without a tape."""
    adv_samples, roles = perturbed_batch(samples, uaps, cfg.perturbed_slots)
    adv_trace = forward_batch(model, adv_samples)
    need_clean = "dec" in cfg.mask or "h" in cfg.mask
    clean_trace = forward_batch(model, samples) if need_clean else None

    zero = Tensor(0.0)
    parts = {name: [] for name in LOSS_NAMES}
    for b, sample in enumerate(samples):
        tr = adv_trace.sample(b)
        cl = clean_trace.sample(b) if clean_trace is not None else None
        parts["lm"].append(
            lm_loss(tr, roles, sample.target_tokens) if "lm" in cfg.mask else zero
        )
        parts["dec"].append(hidden_state_loss(tr, cl) if "dec" in cfg.mask else zero)
        parts["h"].append(phd_loss(tr, cl, cfg.phd) if "h" in cfg.mask else zero)
        parts["ctg"].append(contagious_loss(tr, roles) if "ctg" in cfg.mask else zero)
        parts["ias"].append(
            ias_loss(tr, roles, cfg.ias_normalize_by_pairs) if "ias" in cfg.mask else zero
        )

    def batch_mean(terms):
        if all(t is zero for t in terms):
            return zero
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / len(terms))

    means = {name: batch_mean(parts[name]) for name in LOSS_NAMES}
    return total_loss(
        means["lm"], means["dec"], means["h"], means["ctg"], means["ias"],
        weights=cfg.masked_weights(),
    )


def attack_step(
    model: ToyMllm,
    samples,
    uaps: UapSet,
    opt: AdamW,
    cfg: AttackConfig,
    lr: float,
) -> LossBreakdown:
    """One optimization step: forward, backward to the deltas, AdamW, project."""
    if not model.frozen:
        raise ContractError("attack requires a frozen model")
    breakdown = batch_loss(model, samples, uaps, cfg)
    vals = breakdown.values()
    bad = [name for name, v in vals.items() if not np.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite loss component(s): {', '.join(bad)}")
    opt.zero_grad()
    ad.backward(breakdown.total)
    opt.step(lr)
    uaps.project()
    return breakdown


def train_uaps(
    model: ToyMllm,
    dataset,
    cfg: AttackConfig = AttackConfig(),
    epoch_eval=None,
) -> tuple:
    """Optimize the perturbation set over the dataset.

    Returns (uaps, step records, per-epoch eval values). ``epoch_eval``,
    when given, is called with (epoch, uaps) after each epoch and its result
    recorded (the harness wires held-out ASR through this).
    """
    if not model.frozen:
        raise ContractError("attack requires a frozen model")
    if len(dataset) == 0:
        raise ContractError("attack dataset is empty")

    config = model.config
    samples = [
        inst.to_sample(config) if not isinstance(inst, InterleavedSample) else inst
        for inst in dataset
    ]
    uaps = init_uaps(config.image_side, cfg.epsilon, cfg.k, cfg.seed, config.channels)
    uaps.project()
    opt = AdamW(uaps.deltas, lr=cfg.lr0, weight_decay=cfg.weight_decay)

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = len(layout_batches(samples, cfg.batch_size))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    records: list = []
    epoch_trace: list = []
    step = 0
    for epoch in range(cfg.epochs):
        for idxs in layout_batches(samples, cfg.batch_size, rng):
            lr = lr_schedule(step, total_steps, cfg.lr0, cfg.lr_final_factor)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)  # m == k batches have empty C
                breakdown = attack_step(model, [samples[i] for i in idxs], uaps, opt, cfg, lr)
            vals = breakdown.values()
            records.append(StepRecord(step=step, lr=lr, **vals))
            step += 1
        if epoch_eval is not None:
            epoch_trace.append(epoch_eval(epoch, uaps))
    return uaps, records, epoch_trace


# ---------------------------------------------------------------------------
# traces and checkpoints


def write_loss_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *LOSS_NAMES, "total", "lr"])
        for r in records:
            writer.writerow(
                [r.step, r.lm, r.dec, r.h, r.ctg, r.ias, r.total, r.lr]
            )


def save_uaps(uaps: UapSet, path) -> None:
    with open(path, "wb") as fh:
        header = io.StringIO()
        header.write(f"{UAP_MAGIC}\n")
        side = uaps.deltas[0].shape[0]
        header.write(f"k {uaps.k} image_side {side} epsilon {uaps.epsilon!r}\n")
        header.write("data\n")
        fh.write(header.getvalue().encode("ascii"))
        for d in uaps.deltas:
            fh.write(d.data.astype("<f8").tobytes())


def load_uaps(path, channels: int = 3) -> UapSet:
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii").strip() != UAP_MAGIC:
            raise ContractError(f"{path}: not a perturbation checkpoint")
        parts = fh.readline().decode("ascii").split()
        k, side, epsilon = int(parts[1]), int(parts[3]), float(parts[5])
        if fh.readline().decode("ascii").strip() != "data":
            raise ContractError(f"{path}: malformed header")
        deltas = []
        count = side * side * channels
        for _ in range(k):
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ContractError(f"{path}: truncated payload")
            deltas.append(
                Tensor(
                    np.frombuffer(buf, dtype="<f8").reshape(side, side, channels).copy(),
                    requires_grad=True,
                )
            )
    return UapSet(deltas=deltas, epsilon=epsilon, k=k)
