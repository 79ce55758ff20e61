"""Command-line pipeline: data generation, pretraining, perturbation
training, evaluation, ablations, sweeps, and attention-map export.

Every verb echoes its effective configuration into the output directory;
re-running from the echoed file reproduces the artifacts byte for byte in
sequential mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from ._tuning import tune_allocator
from .errors import ContractError, DomainError, TrainingFailure

OUT_ENV = "MULTIUAP_OUT"

MODEL_FILE = "model.bin"
UAPS_FILE = "uaps.bin"
TRAIN_FILE = "train.jsonl"
HELDOUT_FILE = "heldout.jsonl"


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise ContractError("no output directory: pass --out or set MULTIUAP_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_run_config(args):
    from .config import load_config

    return load_config(args.config, args.set or ())


def _echo_config(cfg, out: Path, verb: str) -> None:
    (out / f"config-{verb}.txt").write_text(cfg.echo())


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ContractError(f"missing {what}: expected file {path}")
    return path


def _set_mode(mode: str) -> None:
    if mode == "sequential":
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(1)
        except ImportError:  # pragma: no cover
            pass


def _load_datasets(out: Path, need_train=True, need_heldout=True):
    from .synthtask import load_dataset

    train = heldout = None
    if need_train:
        train = load_dataset(_require(out / TRAIN_FILE, "training dataset"))
    if need_heldout:
        heldout = load_dataset(_require(out / HELDOUT_FILE, "held-out dataset"))
    return train, heldout


def cmd_gen_data(args) -> int:
    from .synthtask import gen_dataset, save_dataset

    cfg = _load_run_config(args)
    out = _out_dir(args)
    train, heldout = gen_dataset(cfg.dataset_spec())
    save_dataset(train, out / TRAIN_FILE)
    save_dataset(heldout, out / HELDOUT_FILE)
    _echo_config(cfg, out, "gen-data")
    print(f"wrote {len(train)} train / {len(heldout)} held-out instances to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .model import init_model, save_weights
    from .pretrain import pretrain_model

    cfg = _load_run_config(args)
    out = _out_dir(args)
    train, heldout = _load_datasets(out)
    model = init_model(cfg.model_config())
    t0 = time.time()
    try:
        report = pretrain_model(
            model,
            train,
            heldout,
            epochs=cfg["pretrain.epochs"],
            lr=cfg["pretrain.lr"],
            batch_size=cfg["pretrain.batch_size"],
            weight_decay=cfg["pretrain.weight_decay"],
            lr_final_factor=cfg["pretrain.lr_final_factor"],
            accuracy_floor=cfg["pretrain.accuracy_floor"],
            seed=cfg["pretrain.seed"],
        )
    except TrainingFailure as exc:
        (out / "pretrain_report.json").write_text(
            json.dumps({"heldout_accuracy": exc.accuracy, "passed_gate": False}, indent=2)
        )
        print(f"pretraining FAILED the accuracy gate: {exc}", file=sys.stderr)
        return 1
    save_weights(model, out / MODEL_FILE)
    (out / "pretrain_report.json").write_text(
        json.dumps(
            {
                "heldout_accuracy": report.heldout_accuracy,
                "passed_gate": True,
                "epochs": report.epochs,
                "final_loss": report.final_loss,
                "seconds": round(time.time() - t0, 1),
            },
            indent=2,
        )
    )
    _echo_config(cfg, out, "pretrain")
    print(f"frozen model at {out / MODEL_FILE}; held-out accuracy {report.heldout_accuracy:.4f}")
    return 0


def _load_model(cfg, out: Path):
    from .model import load_weights

    return load_weights(_require(out / MODEL_FILE, "frozen model checkpoint"), cfg.model_config())


def cmd_attack(args) -> int:
    from .attack import save_uaps, train_uaps, write_loss_csv
    from .harness import EvalPolicy, eval_asr
    from .synthtask import SynthDataset

    cfg = _load_run_config(args)
    out = _out_dir(args)
    train, heldout = _load_datasets(out)
    model = _load_model(cfg, out)
    attack_cfg = cfg.attack_config()

    n_epoch_eval = min(cfg["eval.epoch_asr_samples"], len(heldout))
    policy = EvalPolicy(scope=cfg["eval.scope"], perturbed_slots=attack_cfg.perturbed_slots)
    subset = SynthDataset(heldout.instances[:n_epoch_eval], seed=heldout.seed, split="heldout")

    def epoch_eval(epoch, uaps):
        if n_epoch_eval == 0:
            return float("nan")
        result = eval_asr(model, subset, uaps, policy)
        return result.asr if result.defined else float("nan")

    t0 = time.time()
    uaps, records, epoch_trace = train_uaps(model, train, attack_cfg, epoch_eval=epoch_eval)
    save_uaps(uaps, out / UAPS_FILE)
    write_loss_csv(records, out / "loss_trace.csv")
    with open(out / "epoch_asr.csv", "w") as fh:
        fh.write("epoch,asr\n")
        for epoch, asr in enumerate(epoch_trace):
            fh.write(f"{epoch},{asr}\n")
    _echo_config(cfg, out, "attack")
    print(
        f"perturbations at {out / UAPS_FILE}; final epoch ASR "
        f"{epoch_trace[-1] if epoch_trace else float('nan'):.4f} "
        f"({time.time() - t0:.0f}s)"
    )
    return 0


def cmd_eval(args) -> int:
    from .attack import load_uaps
    from .harness import (
        AttackReport,
        EvalPolicy,
        contamination_index,
        eval_asr,
        grad_interference,
        perceptual_metrics,
        roles_for_policy,
    )

    cfg = _load_run_config(args)
    out = _out_dir(args)
    _, heldout = _load_datasets(out, need_train=False)
    model = _load_model(cfg, out)
    uaps = load_uaps(_require(out / UAPS_FILE, "perturbation checkpoint"))
    attack_cfg = cfg.attack_config()
    permutation = None if cfg["eval.permutation"] == "none" else cfg["eval.permutation"]
    policy = EvalPolicy(
        scope=cfg["eval.scope"],
        perturbed_slots=attack_cfg.perturbed_slots,
        permutation=permutation,
    )

    flipped = eval_asr(model, heldout, uaps, replace(policy, scope="flipped-of-correct"))
    incorrect = eval_asr(model, heldout, uaps, replace(policy, scope="incorrect-of-all"))
    primary = flipped if policy.scope == "flipped-of-correct" else incorrect

    # contamination on the first multi-image held-out samples with a clean image
    ci_adv = ci_clean = None
    for inst in heldout:
        sample = inst.to_sample(model.config)
        if sample.n_images <= uaps.k:
            continue
        roles = roles_for_policy(sample, uaps.k, policy)
        ci_adv = contamination_index(model, sample, uaps, roles)
        ci_clean = contamination_index(model, sample, None, roles)
        break

    samples = [inst.to_sample(model.config) for inst in heldout.instances[:16]]
    from .pretrain import layout_batches

    batch_idx = layout_batches(samples, 16)[0]
    grad_table = grad_interference(
        model, [samples[i] for i in batch_idx], uaps.copy(), attack_cfg
    )

    inst0 = heldout.instances[0]
    clean_images = inst0.images(model.config)
    from .attack import apply_uaps, resolve_slots

    slots = resolve_slots(policy.perturbed_slots, len(clean_images), uaps.k)
    perturbed = apply_uaps(clean_images, uaps, slots)
    perceptual = perceptual_metrics(
        [clean_images[s - 1] for s in slots], [perturbed[s - 1] for s in slots]
    )

    report = AttackReport(
        asr=primary.asr,
        n_eval=primary.n_eval,
        scope=policy.scope,
        asr_incorrect_of_all=incorrect.asr,
        ci_clean_vs_adv=(ci_clean, ci_adv),
        grad_cos=grad_table,
        perceptual=perceptual,
    )
    (out / "summary.json").write_text(report.to_json())
    _echo_config(cfg, out, "eval")
    print(f"ASR ({policy.scope}): {primary.asr} over {primary.n_eval} samples")
    return 0


def cmd_ablate(args) -> int:
    from .harness import EvalPolicy, run_ablation, write_table_csv

    cfg = _load_run_config(args)
    out = _out_dir(args)
    train, heldout = _load_datasets(out)
    model = _load_model(cfg, out)
    attack_cfg = cfg.attack_config()
    rows = run_ablation(
        model,
        train,
        heldout,
        attack_cfg,
        policy=EvalPolicy(scope=cfg["eval.scope"], perturbed_slots=attack_cfg.perturbed_slots),
    )
    write_table_csv(rows, ["mask", "asr"], out / "ablation.csv")
    _echo_config(cfg, out, "ablate")
    for name, asr in rows:
        print(f"{name:14s} {asr:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import EvalPolicy, run_sweep, write_table_csv

    cfg = _load_run_config(args)
    out = _out_dir(args)
    train, heldout = _load_datasets(out)
    model = _load_model(cfg, out)
    attack_cfg = cfg.attack_config()
    policy = EvalPolicy(scope=cfg["eval.scope"], perturbed_slots=attack_cfg.perturbed_slots)
    curve = run_sweep(args.kind, model, train, heldout, attack_cfg, policy=policy)
    rows = [(str(x), asr) for x, asr in curve]
    write_table_csv(rows, ["x", "asr"], out / f"sweep_{args.kind}.csv")
    _echo_config(cfg, out, f"sweep-{args.kind}")
    for x, asr in rows:
        print(f"{x:>18s} {asr:.4f}")
    return 0


def cmd_export_attn(args) -> int:
    from .attack import apply_uaps, load_uaps, resolve_slots
    from .harness import export_attention_map
    from .interleave import role_index
    from .model import forward_batch

    cfg = _load_run_config(args)
    out = _out_dir(args)
    _, heldout = _load_datasets(out, need_train=False)
    model = _load_model(cfg, out)
    uaps = load_uaps(_require(out / UAPS_FILE, "perturbation checkpoint"))

    inst = heldout.instances[args.sample_index]
    sample = inst.to_sample(model.config)
    slots = resolve_slots(cfg["attack.slots"], sample.n_images, uaps.k)
    roles = role_index(sample, slots)

    clean_trace = forward_batch(model, [sample]).sample(0)
    adv_sample = replace(
        sample, images=tuple(apply_uaps(list(sample.images), uaps, slots))
    )
    adv_trace = forward_batch(model, [adv_sample]).sample(0)

    attn_dir = out / "attention"
    export_attention_map(
        clean_trace, roles.image_spans, attn_dir, sample.answer_position, prefix="clean"
    )
    export_attention_map(
        adv_trace, roles.image_spans, attn_dir, sample.answer_position, prefix="adv"
    )
    _echo_config(cfg, out, "export-attn")
    print(f"attention maps in {attn_dir}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "export-attn": cmd_export_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multiuap",
        description="universal adversarial perturbations for a toy multi-image transformer",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="config file (section.key = value)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default=None, help=f"output directory (or ${OUT_ENV})")
        p.add_argument(
            "--mode",
            choices=("sequential", "parallel"),
            default="sequential",
            help="sequential pins BLAS to one thread for bitwise reproducibility",
        )
        if verb == "sweep":
            p.add_argument(
                "--kind",
                choices=("budget", "count", "position", "count-vs-budget"),
                required=True,
            )
        if verb == "export-attn":
            p.add_argument("--sample-index", type=int, default=0)
    return parser


def main(argv=None) -> int:
    tune_allocator()
    args = build_parser().parse_args(argv)
    _set_mode(args.mode)
    try:
        return COMMANDS[args.verb](args)
    except (ContractError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
