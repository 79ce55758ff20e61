"""Run configuration: a flat "section.key = value" text format.

Every key is declared in SCHEMA with a type and default; unknown keys and
unparsable values are rejected with the offending key and line number. The
effective configuration is echoed into each run's output directory so a run
can be reproduced from its artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attack import DEFAULT_EPSILON, AttackConfig
from .errors import ContractError
from .losses import LossWeights, PhdConfig
from .model import ModelConfig
from .synthtask import DatasetSpec


def _bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes", "on"):
        return True
    if text.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type constructor, default, validator or None)
SCHEMA: dict = {
    "model.d_model": (int, 64, lambda v: v > 0),
    "model.n_layers": (int, 4, lambda v: v > 0),
    "model.n_heads": (int, 4, lambda v: v > 0),
    "model.vocab_size": (int, 64, lambda v: v >= 40),
    "model.image_side": (int, 16, lambda v: v > 0),
    "model.patch_side": (int, 4, lambda v: v > 0),
    "model.max_seq": (int, 256, lambda v: v > 0),
    "model.seed": (int, 0, None),
    "data.seed": (int, 7, None),
    "data.n_train": (int, 2048, lambda v: v >= 0),
    "data.n_heldout": (int, 512, lambda v: v >= 0),
    "data.mix_count": (float, 1.0, lambda v: v >= 0),
    "data.mix_compare": (float, 0.8, lambda v: v >= 0),
    "data.mix_position": (float, 1.2, lambda v: v >= 0),
    "data.mix_m2": (float, 2.0, lambda v: v >= 0),
    "data.mix_m3": (float, 2.0, lambda v: v >= 0),
    "data.mix_m4": (float, 1.0, lambda v: v >= 0),
    "pretrain.epochs": (int, 30, lambda v: v >= 0),
    "pretrain.lr": (float, 5e-3, lambda v: v > 0),
    "pretrain.batch_size": (int, 32, lambda v: v > 0),
    "pretrain.weight_decay": (float, 0.02, lambda v: v >= 0),
    "pretrain.lr_final_factor": (float, 0.05, lambda v: 0 < v <= 1),
    "pretrain.accuracy_floor": (float, 0.90, lambda v: 0 <= v <= 1),
    "pretrain.seed": (int, 0, None),
    "attack.epochs": (int, 20, lambda v: v >= 1),
    "attack.batch_size": (int, 64, lambda v: v > 0),
    "attack.lr0": (float, 1e-4, lambda v: v > 0),
    "attack.lr_final_factor": (float, 0.2, lambda v: 0 < v <= 1),
    "attack.weight_decay": (float, 0.0, lambda v: v >= 0),
    "attack.epsilon": (float, DEFAULT_EPSILON, lambda v: v > 0),
    "attack.k": (int, 2, lambda v: v >= 1),
    "attack.slots": (str, "first", lambda v: v in ("first", "last", "first-last")),
    "attack.seed": (int, 0, None),
    "attack.use_lm": (_bool, True, None),
    "attack.use_dec": (_bool, True, None),
    "attack.use_h": (_bool, True, None),
    "attack.use_ctg": (_bool, True, None),
    "attack.use_ias": (_bool, True, None),
    "attack.ias_normalize_by_pairs": (_bool, False, None),
    "loss.lambda_lm": (float, 1.0, lambda v: v >= 0),
    "loss.lambda_dec": (float, 1.0, lambda v: v >= 0),
    "loss.lambda_h": (float, 1.0, lambda v: v >= 0),
    "loss.lambda_ctg": (float, 1.2, lambda v: v >= 0),
    "loss.lambda_ias": (float, 1.2, lambda v: v >= 0),
    "phd.k_fraction": (float, 0.05, lambda v: 0 < v <= 1),
    "phd.metric": (str, "cosine", lambda v: v in ("cosine", "euclidean")),
    "eval.scope": (
        str,
        "flipped-of-correct",
        lambda v: v in ("flipped-of-correct", "incorrect-of-all"),
    ),
    "eval.permutation": (str, "none", lambda v: v in ("none", "reverse")),
    "eval.epoch_asr_samples": (int, 256, lambda v: v >= 0),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {key: default for key, (_, default, _) in SCHEMA.items()}
        full.update(self.values)
        self.values = full

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ContractError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str, where: str = "<override>") -> None:
        if key not in SCHEMA:
            raise ContractError(f"{where}: unknown config key {key!r}")
        ctor, _, validator = SCHEMA[key]
        try:
            value = ctor(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ContractError(f"{where}: bad value for {key}: {exc}") from None
        if validator is not None and not validator(value):
            raise ContractError(f"{where}: value {value!r} out of range for {key}")
        self.values[key] = value

    # --- typed views -------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self["model.d_model"],
            n_layers=self["model.n_layers"],
            n_heads=self["model.n_heads"],
            vocab_size=self["model.vocab_size"],
            image_side=self["model.image_side"],
            patch_side=self["model.patch_side"],
            max_seq=self["model.max_seq"],
            seed=self["model.seed"],
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            seed=self["data.seed"],
            n_train=self["data.n_train"],
            n_heldout=self["data.n_heldout"],
            kind_mix={
                "count": self["data.mix_count"],
                "compare": self["data.mix_compare"],
                "position": self["data.mix_position"],
            },
            image_count_mix={
                2: self["data.mix_m2"],
                3: self["data.mix_m3"],
                4: self["data.mix_m4"],
            },
            # cells are patch-aligned, so the task grid follows the model geometry
            grid=self["model.image_side"] // self["model.patch_side"],
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lm=self["loss.lambda_lm"],
            dec=self["loss.lambda_dec"],
            h=self["loss.lambda_h"],
            ctg=self["loss.lambda_ctg"],
            ias=self["loss.lambda_ias"],
        )

    def loss_mask(self) -> tuple:
        return tuple(
            name for name in ("lm", "dec", "h", "ctg", "ias") if self[f"attack.use_{name}"]
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            epochs=self["attack.epochs"],
            batch_size=self["attack.batch_size"],
            lr0=self["attack.lr0"],
            lr_final_factor=self["attack.lr_final_factor"],
            weight_decay=self["attack.weight_decay"],
            epsilon=self["attack.epsilon"],
            k=self["attack.k"],
            weights=self.loss_weights(),
            mask=self.loss_mask(),
            phd=PhdConfig(k_fraction=self["phd.k_fraction"], metric=self["phd.metric"]),
            perturbed_slots=self["attack.slots"],
            seed=self["attack.seed"],
            ias_normalize_by_pairs=self["attack.ias_normalize_by_pairs"],
        )

    def echo(self) -> str:
        lines = ["# effective configuration"]
        for key in sorted(SCHEMA):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse a config file (optional) and apply key=value overrides on top."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = open(path).read()
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected 'section.key = value'")
            key, _, value = line.partition("=")
            cfg.set(key.strip(), value.strip(), where=f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip(), where=f"--set {item}")
    return cfg
