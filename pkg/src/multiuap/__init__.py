"""Universal adversarial perturbations for a toy multi-image transformer.

The package trains a small frozen multi-image decoder model on a synthetic
multiple-choice task, then optimizes a fixed set of l-infinity bounded pixel
perturbations against it under a five-part objective, and evaluates attack
success, transfer, and attention-level diagnostics.
"""

from ._tuning import tune_allocator as _tune_allocator

_tune_allocator()

from .attack import AttackConfig, UapSet, apply_uaps, train_uaps  # noqa: E402
from .autodiff import Tensor, backward, finite_diff_check  # noqa: E402
from .errors import ContractError, DomainError, ShapeError, TrainingFailure  # noqa: E402
from .estimator import UapAttack  # noqa: E402
from .harness import EvalPolicy, eval_asr, transfer_eval  # noqa: E402
from .interleave import InterleavedSample, RoleIndex, build_sequence, role_index  # noqa: E402
from .losses import LossBreakdown, LossWeights, PhdConfig  # noqa: E402
from .model import ForwardTrace, ModelConfig, ToyMllm, forward, init_model  # noqa: E402
from .pretrain import pretrain_model  # noqa: E402
from .synthtask import DatasetSpec, SynthDataset, SynthInstance, gen_dataset  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "ContractError",
    "DatasetSpec",
    "DomainError",
    "EvalPolicy",
    "ForwardTrace",
    "InterleavedSample",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "PhdConfig",
    "RoleIndex",
    "ShapeError",
    "SynthDataset",
    "SynthInstance",
    "Tensor",
    "ToyMllm",
    "TrainingFailure",
    "UapAttack",
    "UapSet",
    "apply_uaps",
    "backward",
    "build_sequence",
    "eval_asr",
    "finite_diff_check",
    "forward",
    "gen_dataset",
    "init_model",
    "pretrain_model",
    "role_index",
    "train_uaps",
    "transfer_eval",
]
