"""The five attack loss components and their weighted combination.

All losses are differentiable with respect to the perturbations through the
adversarial forward trace; anything derived from the clean trace is treated
as constant. Sign conventions follow minimization: driving a loss down
weakens the model on perturbed inputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .interleave import RoleIndex
from .model import ForwardTrace

PROB_CLAMP = 1.0 - 1e-6

LOSS_NAMES = ("lm", "dec", "h", "ctg", "ias")


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined objective; the contagion and index-suppression
    terms default slightly higher."""

    lm: float = 1.0
    dec: float = 1.0
    h: float = 1.0
    ctg: float = 1.2
    ias: float = 1.2

    def __post_init__(self):
        for name in LOSS_NAMES:
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be nonnegative")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in LOSS_NAMES}


@dataclass(frozen=True)
class PhdConfig:
    """Relaxed Pompeiu-Hausdorff settings: which rank to pick and the row metric."""

    k_fraction: float = 0.05
    metric: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.k_fraction <= 1.0:
            raise ContractError(f"k_fraction {self.k_fraction} outside (0, 1]")
        if self.metric not in ("cosine", "euclidean"):
            raise ContractError(f"unknown metric {self.metric!r}")

    def k_for(self, set_size: int) -> int:
        return max(1, math.ceil(self.k_fraction * set_size))


@dataclass
class LossBreakdown:
    lm: Tensor
    dec: Tensor
    h: Tensor
    ctg: Tensor
    ias: Tensor
    total: Tensor

    def values(self) -> dict:
        return {name: getattr(self, name).item() for name in (*LOSS_NAMES, "total")}


# ---------------------------------------------------------------------------
# language-model loss


def lm_loss(trace_adv: ForwardTrace, roles: RoleIndex, targets) -> Tensor:
    """Mean -log(1 - P(correct token)) over the target positions.

    P is clamped below 1 - 1e-6 so a confident frozen model cannot blow the
    log up. Degenerates to 0 when no image is perturbed.
    """
    targets = [int(t) for t in targets]
    if not targets:
        raise ContractError("lm_loss: empty target set")
    if len(targets) != len(roles.target_positions):
        raise ContractError("lm_loss: one target token per target position required")
    if roles.noisy.size == 0:
        warnings.warn("lm_loss: no perturbed tokens, returning 0", stacklevel=2)
        return Tensor(0.0)

    terms = []
    for pos, tok in zip(roles.target_positions, targets):
        probs = ad.softmax(trace_adv.logits[pos])
        p = ad.clamp(probs[tok], None, PROB_CLAMP)
        terms.append(ad.log(ad.sub(1.0, p)))
    stacked = terms[0] if len(terms) == 1 else ad.concat([ad.reshape(t, (1,)) for t in terms])
    return ad.mul(ad.mean(stacked), -1.0)


# ---------------------------------------------------------------------------
# hidden-state divergence


def pooled_hidden(trace: ForwardTrace, layer: int) -> Tensor:
    """Mean over sequence positions of the layer's output state (1-based layer)."""
    n_layers = len(trace.hidden)
    if not 1 <= layer <= n_layers:
        raise ContractError(f"layer {layer} outside 1..{n_layers}")
    return ad.mean(trace.hidden[layer - 1], axis=0)


def hidden_state_loss(trace_adv: ForwardTrace, trace_clean: ForwardTrace) -> Tensor:
    """Mean cosine alignment between adversarial and clean pooled states."""
    n_layers = len(trace_adv.hidden)
    if len(trace_clean.hidden) != n_layers:
        raise ContractError("traces have different layer counts")
    total = None
    for layer in range(1, n_layers + 1):
        clean = Tensor(pooled_hidden(trace_clean, layer).data)  # constant
        c = ad.cosine_sim(pooled_hidden(trace_adv, layer), clean)
        total = c if total is None else ad.add(total, c)
    return ad.mul(total, 1.0 / n_layers)


# ---------------------------------------------------------------------------
# attention divergence via the relaxed Pompeiu-Hausdorff distance


def head_avg_attention(trace: ForwardTrace, layer: int) -> Tensor:
    """Head-averaged attention matrix for a 1-based layer; rows stay stochastic."""
    n_layers = len(trace.attention)
    if not 1 <= layer <= n_layers:
        raise ContractError(f"layer {layer} outside 1..{n_layers}")
    return ad.mean(trace.attention[layer - 1], axis=0)


def _pair_distance(u: Tensor, v: Tensor, metric: str) -> Tensor:
    if metric == "cosine":
        return ad.sub(1.0, ad.cosine_sim(u, v))
    diff = ad.sub(u, v)
    return ad.sqrt(ad.sum_(ad.mul(diff, diff)))


def _distance_matrix(rows1: np.ndarray, rows2: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        dots = np.sum(rows1[:, None, :] * rows2[None, :, :], axis=-1)
        n1 = np.sqrt(np.sum(rows1 * rows1, axis=-1))
        n2 = np.sqrt(np.sum(rows2 * rows2, axis=-1))
        denom = np.maximum(n1[:, None] * n2[None, :], ad.COSINE_NORM_FLOOR)
        return 1.0 - dots / denom
    diff = rows1[:, None, :] - rows2[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _kth_largest_index(values: np.ndarray, k: int) -> int:
    order = np.argsort(-values, kind="stable")
    return int(order[k - 1])


def phd_directed(s1, s2, cfg: PhdConfig = PhdConfig()) -> Tensor:
    """Relaxed directed Hausdorff distance from row set s1 to row set s2.

    For every row of s1 take its nearest row of s2, then return the
    k-th largest of those minima, k = max(1, ceil(k_fraction * |s1|)).
    The gradient flows through the selected pair only.
    """
    t1 = s1 if isinstance(s1, Tensor) else Tensor(np.asarray(s1, dtype=np.float64))
    t2 = s2 if isinstance(s2, Tensor) else Tensor(np.asarray(s2, dtype=np.float64))
    if t1.data.ndim != 2 or t2.data.ndim != 2:
        raise ContractError("phd_directed expects 2-d row sets")
    if t1.shape[0] == 0 or t2.shape[0] == 0:
        raise ContractError("phd_directed on empty set")

    dmat = _distance_matrix(t1.data, t2.data, cfg.metric)
    nearest = dmat.argmin(axis=1)
    mins = dmat[np.arange(dmat.shape[0]), nearest]
    i_sel = _kth_largest_index(mins, cfg.k_for(t1.shape[0]))
    j_sel = int(nearest[i_sel])
    return _pair_distance(t1[i_sel], t2[j_sel], cfg.metric)


def phd_loss(trace_adv: ForwardTrace, trace_clean: ForwardTrace, cfg: PhdConfig = PhdConfig()) -> Tensor:
    """Negated layer-mean of the symmetric relaxed Hausdorff distance between
    clean and adversarial head-averaged attention rows."""
    n_layers = len(trace_adv.attention)
    total = None
    for layer in range(1, n_layers + 1):
        adv_rows = head_avg_attention(trace_adv, layer)
        clean_rows = Tensor(head_avg_attention(trace_clean, layer).data)  # constant
        d1 = phd_directed(clean_rows, adv_rows, cfg)
        d2 = phd_directed(adv_rows, clean_rows, cfg)
        d = d1 if d1.item() >= d2.item() else d2
        total = d if total is None else ad.add(total, d)
    return ad.mul(total, -1.0 / n_layers)


# ---------------------------------------------------------------------------
# contagion and index-attention suppression


def contagious_loss(trace_adv: ForwardTrace, roles: RoleIndex) -> Tensor:
    """Negated attention mass flowing from clean queries to perturbed keys,
    averaged over layers and heads."""
    if roles.noisy.size == 0:
        warnings.warn("contagious_loss: no perturbed tokens, returning 0", stacklevel=2)
        return Tensor(0.0)
    n_layers = len(trace_adv.attention)
    n_heads = trace_adv.attention[0].shape[0]
    total = None
    for attn in trace_adv.attention:
        block = ad.take(ad.take(attn, roles.clean, axis=1), roles.noisy, axis=2)
        s = ad.sum_(block)
        total = s if total is None else ad.add(total, s)
    return ad.mul(total, -1.0 / (n_layers * n_heads))


def ias_loss(trace_adv: ForwardTrace, roles: RoleIndex, normalize_by_pairs: bool = False) -> Tensor:
    """Attention from every image's tokens to that image's index marker,
    averaged over layers and heads (all images, perturbed or not).

    ``normalize_by_pairs`` additionally divides by the number of (image,
    token) pairs; off by default so the scale follows the plain sum.
    """
    missing = [k for k in roles.image_spans if k not in roles.index_token_pos]
    if missing:
        raise ContractError(f"images {missing} have no index-token position")
    n_layers = len(trace_adv.attention)
    n_heads = trace_adv.attention[0].shape[0]
    total = None
    n_pairs = 0
    for attn in trace_adv.attention:
        for k, span in roles.image_spans.items():
            col = roles.index_token_pos[k]
            block = ad.index(ad.take(attn, span, axis=1), (slice(None), slice(None), col))
            s = ad.sum_(block)
            total = s if total is None else ad.add(total, s)
    n_pairs = sum(len(span) for span in roles.image_spans.values())
    scale = 1.0 / (n_layers * n_heads)
    if normalize_by_pairs and n_pairs:
        scale /= n_pairs
    return ad.mul(total, scale)


# ---------------------------------------------------------------------------
# combination


def total_loss(
    lm: Tensor,
    dec: Tensor,
    h: Tensor,
    ctg: Tensor,
    ias: Tensor,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Weighted sum of the five components; a masked component enters with
    weight zero so the breakdown still records it."""
    total = ad.add(
        ad.add(ad.mul(lm, weights.lm), ad.mul(dec, weights.dec)),
        ad.add(ad.mul(h, weights.h), ad.add(ad.mul(ctg, weights.ctg), ad.mul(ias, weights.ias))),
    )
    return LossBreakdown(lm=lm, dec=dec, h=h, ctg=ctg, ias=ias, total=total)
