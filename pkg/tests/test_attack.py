"""Attack loop contracts: projection, schedule, determinism, descent."""

import numpy as np
import pytest

from multiuap import vocab
from multiuap.attack import (
    AttackConfig,
    UapSet,
    apply_uaps,
    attack_step,
    init_uaps,
    load_uaps,
    resolve_slots,
    save_uaps,
    train_uaps,
    write_loss_csv,
)
from multiuap.autodiff import Tensor
from multiuap.errors import ContractError
from multiuap.losses import LossWeights
from multiuap.model import ModelConfig, init_model
from multiuap.optim import AdamW, lr_schedule
from multiuap.pretrain import predict_batch
from multiuap.synthtask import DatasetSpec, gen_dataset

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=2, image_side=4, patch_side=2, max_seq=64, seed=2)


def tiny_dataset(n=12, seed=5):
    train, _ = gen_dataset(
        DatasetSpec(seed=seed, n_train=n, n_heldout=0, image_count_mix={2: 1.0}, grid=2)
    )
    return train


def frozen_tiny():
    model = init_model(TINY)
    model.freeze()
    return model


class TestApplyUaps:
    def test_zero_delta_identity(self):
        images = [np.full((4, 4, 3), 0.3), np.full((4, 4, 3), 0.6)]
        uaps = UapSet(deltas=[Tensor(np.zeros((4, 4, 3)), requires_grad=True)], k=1)
        out = apply_uaps(images, uaps, [1])
        np.testing.assert_array_equal(out[0].data, images[0])
        assert out[1] is images[1]

    def test_clamp_at_one(self):
        images = [np.full((4, 4, 3), 0.99)]
        uaps = UapSet(deltas=[Tensor(np.full((4, 4, 3), 0.047), requires_grad=True)], k=1)
        out = apply_uaps(images, uaps, [1])
        np.testing.assert_allclose(out[0].data, 1.0)

    def test_budget_preserved(self):
        rng = np.random.default_rng(0)
        images = [rng.uniform(0.2, 0.8, size=(4, 4, 3))]
        uaps = init_uaps(4, epsilon=12 / 255, k=1, seed=3)
        out = apply_uaps(images, uaps, [1])
        assert np.max(np.abs(out[0].data - images[0])) <= 12 / 255 + 1e-12

    def test_slot_out_of_range(self):
        uaps = init_uaps(4, k=1)
        with pytest.raises(ContractError):
            apply_uaps([np.zeros((4, 4, 3))], uaps, [2])


class TestResolveSlots:
    def test_symbolic(self):
        assert resolve_slots("first", 4, 2) == [1, 2]
        assert resolve_slots("last", 4, 2) == [3, 4]
        assert resolve_slots("first-last", 4, 2) == [1, 4]
        assert resolve_slots("first", 1, 2) == [1]

    def test_explicit(self):
        assert resolve_slots((3, 1), 4, 2) == [1, 3]
        with pytest.raises(ContractError):
            resolve_slots((5,), 4, 2)


class TestSchedule:
    def test_paper_endpoints(self):
        assert lr_schedule(0, 100, 1e-4, 0.2) == pytest.approx(1e-4)
        assert lr_schedule(100, 100, 1e-4, 0.2) == pytest.approx(2e-5)
        assert lr_schedule(50, 100, 1e-4, 0.2) == pytest.approx(6e-5)

    def test_monotone_nonincreasing(self):
        values = [lr_schedule(s, 64, 1e-4, 0.2) for s in range(65)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_step_bounds(self):
        with pytest.raises(ContractError):
            lr_schedule(11, 10, 1e-4, 0.2)


class TestUapSet:
    def test_projection_idempotent(self):
        uaps = init_uaps(4, epsilon=0.05, k=2, seed=1)
        uaps.deltas[0].data += 1.0  # push outside the ball
        uaps.project()
        once = [d.data.copy() for d in uaps.deltas]
        uaps.project()
        for a, d in zip(once, uaps.deltas):
            np.testing.assert_array_equal(a, d.data)
        assert uaps.max_abs() <= 0.05

    def test_checkpoint_round_trip(self, tmp_path):
        uaps = init_uaps(4, epsilon=12 / 255, k=2, seed=9)
        path = tmp_path / "uaps.bin"
        save_uaps(uaps, path)
        loaded = load_uaps(path)
        assert loaded.k == 2 and loaded.epsilon == pytest.approx(12 / 255)
        for a, b in zip(uaps.deltas, loaded.deltas):
            np.testing.assert_array_equal(a.data, b.data)


class TestAttackStep:
    def test_budget_after_step(self):
        model = frozen_tiny()
        data = tiny_dataset()
        cfg = AttackConfig(epochs=1, batch_size=4, epsilon=0.05, k=1, seed=0)
        samples = [inst.to_sample(TINY) for inst in data]
        uaps = init_uaps(4, 0.05, 1, 0)
        opt = AdamW(uaps.deltas, lr=1e-3)
        attack_step(model, samples[:4], uaps, opt, cfg, 1e-3)
        assert uaps.max_abs() <= 0.05 + 1e-15

    def test_requires_frozen_model(self):
        model = init_model(TINY)
        cfg = AttackConfig(epochs=1, k=1)
        uaps = init_uaps(4, k=1)
        with pytest.raises(ContractError):
            attack_step(model, [], uaps, AdamW(uaps.deltas), cfg, 1e-4)

    def test_all_zero_weights_leave_deltas(self):
        model = frozen_tiny()
        data = tiny_dataset()
        samples = [inst.to_sample(TINY) for inst in data]
        cfg = AttackConfig(
            epochs=1,
            batch_size=4,
            epsilon=0.05,
            k=1,
            weights=LossWeights(lm=0, dec=0, h=0, ctg=0, ias=0),
        )
        uaps = init_uaps(4, 0.05, 1, 0)
        before = [d.data.copy() for d in uaps.deltas]
        opt = AdamW(uaps.deltas, lr=1e-3)
        attack_step(model, samples[:4], uaps, opt, cfg, 1e-3)
        for b, d in zip(before, uaps.deltas):
            np.testing.assert_array_equal(b, d.data)

    def test_lm_only_descent(self):
        """50 lm-only steps on one tiny batch drive P(correct) down."""
        model = frozen_tiny()
        data = tiny_dataset(n=4, seed=11)
        samples = [inst.to_sample(TINY) for inst in data]
        cfg = AttackConfig(
            epochs=1, batch_size=4, epsilon=0.15, k=1, mask=("lm",), lr0=5e-3, seed=0
        )
        uaps = init_uaps(4, 0.15, 1, 0)
        opt = AdamW(uaps.deltas, lr=cfg.lr0)

        from multiuap.attack import perturbed_batch
        from multiuap.model import forward_batch
        from scipy.special import softmax

        def mean_correct_prob():
            adv, _ = perturbed_batch(samples, uaps, cfg.perturbed_slots)
            trace = forward_batch(model, adv)
            probs = softmax(trace.logits.data[:, samples[0].answer_position, :], axis=-1)
            return float(
                np.mean([probs[i, s.target_tokens[0]] for i, s in enumerate(samples)])
            )

        start = mean_correct_prob()
        for _ in range(50):
            attack_step(model, samples, uaps, opt, cfg, cfg.lr0)
        assert mean_correct_prob() < start


class TestTrainUaps:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            train_uaps(frozen_tiny(), [], AttackConfig(epochs=1))

    def test_determinism(self):
        model = frozen_tiny()
        data = tiny_dataset(n=8)
        cfg = AttackConfig(epochs=2, batch_size=4, epsilon=0.05, k=1, seed=3)
        a, _, _ = train_uaps(model, data, cfg)
        b, _, _ = train_uaps(model, data, cfg)
        assert a.checksum() == b.checksum()
        for da, db in zip(a.deltas, b.deltas):
            np.testing.assert_array_equal(da.data, db.data)

    def test_budget_and_freeze_invariants(self):
        model = frozen_tiny()
        before = model.weight_checksum()
        data = tiny_dataset(n=8)
        cfg = AttackConfig(epochs=2, batch_size=4, epsilon=0.05, k=1, seed=3)
        uaps, records, _ = train_uaps(model, data, cfg)
        assert uaps.max_abs() <= 0.05 + 1e-15
        assert model.weight_checksum() == before
        assert len(records) == 2 * len(layouts(data, 4))
        lrs = [r.lr for r in records]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_epoch_eval_hook(self):
        model = frozen_tiny()
        data = tiny_dataset(n=8)
        cfg = AttackConfig(epochs=2, batch_size=8, epsilon=0.05, k=1)
        calls = []
        train_uaps(model, data, cfg, epoch_eval=lambda ep, u: calls.append(ep) or ep)
        assert calls == [0, 1]

    def test_loss_csv(self, tmp_path):
        model = frozen_tiny()
        data = tiny_dataset(n=4)
        cfg = AttackConfig(epochs=1, batch_size=4, epsilon=0.05, k=1)
        _, records, _ = train_uaps(model, data, cfg)
        path = tmp_path / "trace.csv"
        write_loss_csv(records, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,lm,dec,h,ctg,ias,total,lr"
        assert len(lines) == len(records) + 1


def layouts(dataset, batch_size):
    from multiuap.pretrain import layout_batches

    samples = [inst.to_sample(TINY) for inst in dataset]
    return layout_batches(samples, batch_size)
