"""Scikit-learn style front end for the perturbation attack.

``UapAttack`` follows the estimator protocol: hyperparameters in
``__init__`` (so ``get_params``/``set_params``/``clone`` work), state
learned by ``fit`` stored in trailing-underscore attributes, ``transform``
applying the learned perturbations to images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .attack import AttackConfig, apply_uaps, resolve_slots, train_uaps
from .errors import ContractError
from .harness import EvalPolicy, eval_asr
from .losses import LOSS_NAMES, LossWeights, PhdConfig
from .validation import check_dataset, check_image_lists


class UapAttack(BaseEstimator, TransformerMixin):
    """Learns a fixed set of l-infinity bounded universal perturbations
    against a frozen model, then applies them to unseen images.

    Parameters mirror AttackConfig; ``model`` must be a frozen ToyMllm.
    After ``fit``: ``uaps_`` (the learned perturbation set), ``records_``
    (per-step loss trace), ``epoch_trace_`` (per-epoch eval values).
    """

    def __init__(
        self,
        model=None,
        epsilon=12 / 255,
        n_perturbations=2,
        epochs=20,
        batch_size=64,
        lr0=1e-4,
        lr_final_factor=0.2,
        weight_decay=0.0,
        loss_mask=LOSS_NAMES,
        lambda_lm=1.0,
        lambda_dec=1.0,
        lambda_h=1.0,
        lambda_ctg=1.2,
        lambda_ias=1.2,
        phd_k_fraction=0.05,
        phd_metric="cosine",
        perturbed_slots="first",
        seed=0,
    ):
        self.model = model
        self.epsilon = epsilon
        self.n_perturbations = n_perturbations
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_final_factor = lr_final_factor
        self.weight_decay = weight_decay
        self.loss_mask = loss_mask
        self.lambda_lm = lambda_lm
        self.lambda_dec = lambda_dec
        self.lambda_h = lambda_h
        self.lambda_ctg = lambda_ctg
        self.lambda_ias = lambda_ias
        self.phd_k_fraction = phd_k_fraction
        self.phd_metric = phd_metric
        self.perturbed_slots = perturbed_slots
        self.seed = seed

    def _config(self) -> AttackConfig:
        if self.model is None:
            raise ContractError("UapAttack requires a frozen model")
        return AttackConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr0=self.lr0,
            lr_final_factor=self.lr_final_factor,
            weight_decay=self.weight_decay,
            epsilon=self.epsilon,
            k=self.n_perturbations,
            weights=LossWeights(
                lm=self.lambda_lm,
                dec=self.lambda_dec,
                h=self.lambda_h,
                ctg=self.lambda_ctg,
                ias=self.lambda_ias,
            ),
            mask=tuple(self.loss_mask),
            phd=PhdConfig(k_fraction=self.phd_k_fraction, metric=self.phd_metric),
            perturbed_slots=self.perturbed_slots,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        """Learn the perturbation set from a SynthDataset (or instance list)."""
        dataset = check_dataset(X)
        self.uaps_, self.records_, self.epoch_trace_ = train_uaps(
            self.model, dataset, self._config()
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "uaps_"):
            raise NotFittedError("UapAttack is not fitted; call fit first")

    def transform(self, X):
        """Perturb each sample's slot images; X is a list of image lists or a
        [n, m, side, side, 3] array. Returns perturbed pixel arrays."""
        self._check_fitted()
        side = self.model.config.image_side
        batches = check_image_lists(X, side)
        out = []
        for images in batches:
            slots = resolve_slots(self.perturbed_slots, len(images), self.uaps_.k)
            perturbed = apply_uaps(images, self.uaps_, slots)
            out.append([p.data if hasattr(p, "data") else np.asarray(p) for p in perturbed])
        return out

    def score(self, X, y=None) -> float:
        """Held-out attack success rate (flipped-of-correct scope)."""
        self._check_fitted()
        dataset = check_dataset(X)
        result = eval_asr(
            self.model,
            dataset,
            self.uaps_,
            EvalPolicy(perturbed_slots=self.perturbed_slots),
        )
        if not result.defined:
            raise ContractError("ASR undefined: no clean-correct samples")
        return result.asr
