"""Attack evaluation: success rates, transfer, ablations, sweeps, attention
analysis, and the contamination/interference diagnostics.

Desk-scale reproductions are directional: the harness checks orderings and
monotone trends, never absolute full-scale numbers.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attack import (
    AttackConfig,
    UapSet,
    apply_uaps,
    batch_loss,
    random_uaps,
    resolve_slots,
    train_uaps,
)
from .errors import ContractError
from .interleave import role_index
from .losses import LOSS_NAMES
from .model import ToyMllm, forward_batch
from .pretrain import layout_batches
from .synthtask import SynthDataset

SCOPES = ("flipped-of-correct", "incorrect-of-all")


@dataclass(frozen=True)
class EvalPolicy:
    """How ASR is counted and how samples are prepared before scoring."""

    scope: str = "flipped-of-correct"
    perturbed_slots: str | tuple = "first"
    permutation: str | tuple | None = None  # None, "reverse", or explicit 1-based perm

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ContractError(f"scope must be one of {SCOPES}")


@dataclass
class AsrResult:
    asr: float | None  # None when the denominator is empty
    n_eval: int
    n_hits: int

    @property
    def defined(self) -> bool:
        return self.asr is not None


def _permute_instance_sample(inst, config, permutation):
    """Build the sample for an instance under the policy's permutation."""
    sample = inst.to_sample(config)
    if permutation is None:
        return sample, None
    m = inst.n_images
    perm = tuple(range(m, 0, -1)) if permutation == "reverse" else tuple(permutation)
    from .interleave import permute_images

    return permute_images(sample, perm, remap=inst.remap), perm


def eval_predictions(model: ToyMllm, dataset, uaps: UapSet | None, policy: EvalPolicy):
    """Predict each instance clean and perturbed; returns parallel lists."""
    config = model.config
    prepared = []
    for inst in dataset:
        sample, _ = _permute_instance_sample(inst, config, policy.permutation)
        prepared.append(sample)

    from .model import predict_answer

    clean_preds = [None] * len(prepared)
    adv_preds = [None] * len(prepared)
    for idxs in layout_batches(prepared, 128):
        batch = [prepared[i] for i in idxs]
        options = [dataset.instances[i].options for i in idxs]
        trace = forward_batch(model, batch)
        for j, i in enumerate(idxs):
            clean_preds[i] = predict_answer(trace.sample(j), batch[j].answer_position, options[j])
        if uaps is not None:
            m = batch[0].n_images
            slot_ids = resolve_slots(policy.perturbed_slots, m, uaps.k)
            adv_batch = [
                replace(s, images=tuple(apply_uaps(list(s.images), uaps, slot_ids)))
                for s in batch
            ]
            adv_trace = forward_batch(model, adv_batch)
            for j, i in enumerate(idxs):
                adv_preds[i] = predict_answer(
                    adv_trace.sample(j), batch[j].answer_position, options[j]
                )
        else:
            for i in idxs:
                adv_preds[i] = clean_preds[i]
    truths = [s.target_tokens[0] for s in prepared]
    return clean_preds, adv_preds, truths


def eval_asr(model: ToyMllm, dataset, uaps: UapSet | None, policy: EvalPolicy = EvalPolicy()) -> AsrResult:
    """Attack success rate under the policy's scope.

    flipped-of-correct: fraction of clean-correct samples whose prediction
    changes under the perturbations. incorrect-of-all: fraction of all
    samples answered incorrectly under the perturbations.
    """
    if not model.frozen:
        raise ContractError("evaluation requires a frozen model")
    clean_preds, adv_preds, truths = eval_predictions(model, dataset, uaps, policy)
    if policy.scope == "flipped-of-correct":
        eligible = [i for i, (p, t) in enumerate(zip(clean_preds, truths)) if p == t]
        hits = sum(1 for i in eligible if adv_preds[i] != clean_preds[i])
        n = len(eligible)
    else:
        hits = sum(1 for p, t in zip(adv_preds, truths) if p != t)
        n = len(truths)
    return AsrResult(asr=(hits / n if n else None), n_eval=n, n_hits=hits)


def transfer_eval(
    uaps: UapSet, target_model: ToyMllm, dataset, policy: EvalPolicy = EvalPolicy()
) -> AsrResult:
    """Apply perturbations trained elsewhere to a different frozen model."""
    side = target_model.config.image_side
    for d in uaps.deltas:
        if d.shape != (side, side, target_model.config.channels):
            raise ContractError(
                f"delta shape {d.shape} incompatible with target image geometry {side}"
            )
    return eval_asr(target_model, dataset, uaps, policy)


# ---------------------------------------------------------------------------
# ablations and sweeps

# loss-combination rows mirrored by the ablation table
ABLATION_MASKS = {
    "full": ("lm", "dec", "h", "ctg", "ias"),
    "no_ctg": ("lm", "dec", "h", "ias"),
    "no_lm": ("dec", "h", "ctg"),
    "no_dec": ("lm", "h", "ctg"),
    "no_h": ("lm", "dec", "ctg"),
    "no_ctg_no_ias": ("lm", "dec", "h"),
}


def run_ablation(
    model: ToyMllm,
    train_set,
    heldout,
    cfg: AttackConfig,
    masks: dict = None,
    policy: EvalPolicy = EvalPolicy(),
) -> list:
    """Train one perturbation set per mask (same seed/budget) and score each.

    Returns [(mask name, asr)] sorted by descending asr.
    """
    masks = ABLATION_MASKS if masks is None else masks
    rows = []
    for name, mask in masks.items():
        mask_cfg = replace(cfg, mask=tuple(mask))
        uaps, _, _ = train_uaps(model, train_set, mask_cfg)
        result = eval_asr(model, heldout, uaps, policy)
        rows.append((name, result.asr if result.defined else float("nan")))
    rows.sort(key=lambda r: -(r[1] if not math.isnan(r[1]) else -1.0))
    return rows


BUDGET_GRID = tuple(b / 255.0 for b in (4, 8, 12, 16, 20))
COUNT_GRID = (1, 2, 3)
POSITION_GRID = ("first", "last", "first-last")


def run_sweep(
    kind: str,
    model: ToyMllm,
    train_set,
    heldout,
    cfg: AttackConfig,
    grid=None,
    policy: EvalPolicy = EvalPolicy(),
) -> list:
    """Train a fresh perturbation set per grid point and score it.

    kinds: budget (epsilon grid), count (number of perturbations),
    position (which slots carry them), count-vs-budget (count x epsilon).
    Returns [(x, asr)] in grid order; curves for numeric grids are sorted.
    """
    if kind == "budget":
        grid = BUDGET_GRID if grid is None else tuple(grid)
        points = [(eps, replace(cfg, epsilon=eps)) for eps in sorted(grid)]
    elif kind == "count":
        grid = COUNT_GRID if grid is None else tuple(grid)
        points = [(k, replace(cfg, k=k)) for k in sorted(grid)]
    elif kind == "position":
        grid = POSITION_GRID if grid is None else tuple(grid)
        points = [(slots, replace(cfg, perturbed_slots=slots)) for slots in grid]
    elif kind == "count-vs-budget":
        counts = (1, 2) if grid is None else tuple(grid[0])
        budgets = BUDGET_GRID if grid is None else tuple(grid[1])
        points = [
            ((k, eps), replace(cfg, k=k, epsilon=eps))
            for k in sorted(counts)
            for eps in sorted(budgets)
        ]
    else:
        raise ContractError(f"unknown sweep kind {kind!r}")
    if not points:
        raise ContractError("sweep grid is empty")

    curve = []
    for x, point_cfg in points:
        uaps, _, _ = train_uaps(model, train_set, point_cfg)
        eval_policy = (
            replace_policy_slots(policy, point_cfg.perturbed_slots)
            if kind == "position"
            else policy
        )
        result = eval_asr(model, heldout, uaps, eval_policy)
        curve.append((x, result.asr if result.defined else float("nan")))
    return curve


def replace_policy_slots(policy: EvalPolicy, slots) -> EvalPolicy:
    return EvalPolicy(scope=policy.scope, perturbed_slots=slots, permutation=policy.permutation)


# ---------------------------------------------------------------------------
# contamination index and gradient interference


def attention_mass_c_to_n(trace, roles) -> float:
    """Mean over layers, heads, and clean queries of mass sent to noisy keys."""
    if roles.noisy.size == 0:
        raise ContractError("attention mass undefined with no perturbed tokens")
    total = 0.0
    n_layers = len(trace.attention)
    n_heads = trace.attention[0].shape[0]
    for attn in trace.attention:
        block = attn.data[:, roles.clean][:, :, roles.noisy]
        total += float(block.sum())
    return total / (n_layers * n_heads * roles.clean.size)


def contamination_index(model: ToyMllm, sample, uaps: UapSet | None, roles) -> float | None:
    """Attention-weighted hidden-state divergence from clean to noisy tokens.

    Attention is averaged over layers and heads; hidden states come from the
    final decoder layer. Returns None when no tokens are perturbed.
    """
    if roles.noisy.size == 0:
        return None
    if uaps is not None:
        perturbed_ids = sorted(
            k for k, span in roles.image_spans.items() if np.isin(span, roles.noisy).all()
        )
        adv = replace(
            sample, images=tuple(apply_uaps(list(sample.images), uaps, perturbed_ids))
        )
    else:
        adv = sample
    trace = forward_batch(model, [adv]).sample(0)
    attn = np.mean([a.data for a in trace.attention], axis=(0, 1))  # layer+head average
    h = trace.hidden[-1].data
    hn = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), ad.COSINE_NORM_FLOOR)
    cosdist = 1.0 - hn[roles.clean] @ hn[roles.noisy].T
    weights = attn[roles.clean][:, roles.noisy]
    return float(np.sum(weights * cosdist) / (roles.clean.size * roles.noisy.size))


def grad_interference(model: ToyMllm, samples, uaps: UapSet, cfg: AttackConfig) -> dict:
    """Pairwise cosine between per-component delta gradients on one batch.

    A component with zero gradient yields None for its pairs.
    """
    grads = {}
    for name in LOSS_NAMES:
        one_cfg = replace(cfg, mask=(name,))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            breakdown = batch_loss(model, samples, uaps, one_cfg)
        for d in uaps.deltas:
            d.grad = None
        ad.backward(getattr(breakdown, name))
        parts = [
            (d.grad if d.grad is not None else np.zeros_like(d.data)).ravel()
            for d in uaps.deltas
        ]
        grads[name] = np.concatenate(parts)
    for d in uaps.deltas:
        d.grad = None

    table = {}
    for a in LOSS_NAMES:
        for b in LOSS_NAMES:
            ga, gb = grads[a], grads[b]
            na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
            if na == 0.0 or nb == 0.0:
                table[(a, b)] = None
            else:
                table[(a, b)] = float(np.dot(ga, gb) / (na * nb))
    return table


# ---------------------------------------------------------------------------
# attention maps and perceptual metrics


def export_attention_map(trace, image_spans, out_dir, answer_position, layers=None, prefix="attn"):
    """Per image and layer: the head-averaged attention received by the
    image's tokens from the answer position, reshaped to the patch grid.

    Writes one CSV (row-major floats) and one binary 8-bit PGM per map;
    constant maps normalize to 0. Returns the written paths.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_layers = len(trace.attention)
    layers = range(1, n_layers + 1) if layers is None else layers
    paths = []
    for layer in layers:
        if not 1 <= layer <= n_layers:
            raise ContractError(f"layer {layer} outside 1..{n_layers}")
        head_avg = trace.attention[layer - 1].data.mean(axis=0)
        for k, span in sorted(image_spans.items()):
            vec = head_avg[answer_position, span]
            side = int(round(math.sqrt(vec.size)))
            grid = vec.reshape(side, side)
            stem = out / f"{prefix}_img{k}_layer{layer}"
            csv_path = stem.with_suffix(".csv")
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                for row in grid:
                    writer.writerow([repr(v) for v in row])
            lo, hi = float(grid.min()), float(grid.max())
            if hi > lo:
                scaled = np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
            else:
                scaled = np.zeros_like(grid, dtype=np.uint8)
            pgm_path = stem.with_suffix(".pgm")
            with open(pgm_path, "wb") as fh:
                fh.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
                fh.write(scaled.tobytes())
            paths.extend([csv_path, pgm_path])
    return paths


def perceptual_metrics(clean_images, perturbed_images) -> list:
    """Per image: max-abs difference, RMS difference, and PSNR in dB.

    Identical images report infinite PSNR.
    """
    out = []
    for clean, pert in zip(clean_images, perturbed_images):
        c = np.asarray(clean, dtype=np.float64)
        p = pert.data if hasattr(pert, "data") else np.asarray(pert, dtype=np.float64)
        if c.shape != p.shape:
            raise ContractError(f"image shape mismatch {c.shape} vs {p.shape}")
        diff = p - c
        linf = float(np.max(np.abs(diff)))
        l2 = float(np.sqrt(np.mean(diff * diff)))
        psnr = math.inf if l2 == 0.0 else 20.0 * math.log10(1.0 / l2)
        out.append({"linf": linf, "l2": l2, "psnr_db": psnr})
    return out


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class AttackReport:
    asr: float | None = None
    n_eval: int = 0
    scope: str = "flipped-of-correct"
    asr_incorrect_of_all: float | None = None
    loss_trace_path: str | None = None
    sweep_curves: dict = field(default_factory=dict)
    ablation_rows: list = field(default_factory=list)
    ci_clean_vs_adv: tuple | None = None
    grad_cos: dict = field(default_factory=dict)
    perceptual: list = field(default_factory=list)

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return v

        payload = {
            "asr": self.asr,
            "n_eval": self.n_eval,
            "scope": self.scope,
            "asr_incorrect_of_all": self.asr_incorrect_of_all,
            "sweep_curves": {k: [[x, a] for x, a in v] for k, v in self.sweep_curves.items()},
            "ablation": [[name, asr] for name, asr in self.ablation_rows],
            "ci_clean_vs_adv": self.ci_clean_vs_adv,
            "grad_cos": {f"{a}:{b}": enc(c) for (a, b), c in self.grad_cos.items()},
            "perceptual": [{k: enc(v) for k, v in row.items()} for row in self.perceptual],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def write_table_csv(rows, header, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(list(row))


def roles_for_policy(sample, uaps_k: int, policy: EvalPolicy):
    slot_ids = resolve_slots(policy.perturbed_slots, sample.n_images, uaps_k)
    return role_index(sample, slot_ids)
