"""Task generator: rendering, ground-truth oracle, balance audits, serialization."""

import collections

import numpy as np
import pytest

from multiuap import vocab
from multiuap.errors import ContractError
from multiuap.model import ModelConfig
from multiuap.synthtask import (
    DatasetSpec,
    PALETTE,
    SynthInstance,
    _count_cells,
    gen_dataset,
    gen_instance,
    load_dataset,
    render_image,
    save_dataset,
)

CFG = ModelConfig()


class TestRenderImage:
    def test_empty_spec_black(self):
        np.testing.assert_array_equal(render_image([], CFG), np.zeros((16, 16, 3)))

    def test_single_cell_pixel_count(self):
        image = render_image([(0, 0, 0)], CFG)  # red cell at (0, 0), patch 4
        red = (image == PALETTE[0]).all(axis=-1) & (image.sum(axis=-1) > 0)
        assert int(red.sum()) == 16

    def test_deterministic(self):
        spec = [(0, 0, 0), (3, 2, 1)]
        np.testing.assert_array_equal(render_image(spec, CFG), render_image(spec, CFG))

    def test_overlap_rejected(self):
        with pytest.raises(ContractError):
            render_image([(0, 1, 1), (2, 1, 1)], CFG)

    def test_out_of_grid_rejected(self):
        with pytest.raises(ContractError):
            render_image([(0, 4, 0)], CFG)


class TestGenInstance:
    def test_count_answer_forced(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            inst = gen_instance(rng, "count", 3)
            true = sum(1 for spec in inst.specs if _count_cells(spec, inst.color) > 0)
            assert inst.answer == vocab.num_token(true)
            assert inst.answer in inst.options

    def test_compare_answer_and_remap(self):
        specs = (
            ((0, 0, 0), (0, 0, 1), (0, 0, 2)),  # 3 red cells
            ((0, 1, 0),),  # 1 red cell
        )
        inst = SynthInstance(
            kind="compare",
            specs=specs,
            color=0,
            slot=0,
            question_tokens=(3,) * 10,
            options=(vocab.img_opt_token(1), vocab.img_opt_token(2)),
            answer=vocab.img_opt_token(1),
            order_sensitive=True,
        )
        assert inst.answer_under((1, 2)) == vocab.img_opt_token(1)
        assert inst.answer_under((2, 1)) == vocab.img_opt_token(2)

    def test_position_answer_consistent(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            inst = gen_instance(rng, "position", 3)
            contains = _count_cells(inst.specs[inst.slot - 1], inst.color) > 0
            assert inst.answer == (vocab.YES if contains else vocab.NO)

    def test_count_insensitive_to_order(self):
        rng = np.random.default_rng(2)
        inst = gen_instance(rng, "count", 3)
        assert not inst.order_sensitive
        assert inst.remap((3, 1, 2), inst.specs) == (inst.answer,)

    def test_unsupported_kind_and_m(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ContractError):
            gen_instance(rng, "compare", 1)
        with pytest.raises(ContractError):
            gen_instance(rng, "sort", 2)

    @pytest.mark.parametrize("kind,n_options", [("count", 3), ("compare", 3), ("position", 2)])
    def test_answer_balance(self, kind, n_options):
        rng = np.random.default_rng(7)
        slots = collections.Counter()
        n = 1000
        for _ in range(n):
            inst = gen_instance(rng, kind, 3)
            slots[inst.options.index(inst.answer)] += 1
        for count in slots.values():
            assert abs(count / n - 1.0 / n_options) <= 0.05


class TestGroundTruthOracle:
    def test_recount_from_rendered_pixels(self):
        # recompute every answer directly from the rendered images
        rng = np.random.default_rng(4)
        for kind in ("count", "compare", "position"):
            for _ in range(25):
                inst = gen_instance(rng, kind, 3)
                rendered = inst.images(CFG)
                per_image = []
                for img in rendered:
                    cells = 0
                    p = CFG.patch_side
                    for r in range(CFG.grid_side):
                        for c in range(CFG.grid_side):
                            cell = img[r * p : (r + 1) * p, c * p : (c + 1) * p]
                            if np.array_equal(cell[0, 0], PALETTE[inst.color]):
                                cells += 1
                    per_image.append(cells)
                if kind == "count":
                    want = vocab.num_token(sum(1 for c in per_image if c > 0))
                elif kind == "compare":
                    want = vocab.img_opt_token(int(np.argmax(per_image)) + 1)
                else:
                    want = vocab.YES if per_image[inst.slot - 1] > 0 else vocab.NO
                assert inst.answer == want


class TestGenDataset:
    def test_determinism(self):
        a_train, a_held = gen_dataset(DatasetSpec(seed=9, n_train=50, n_heldout=10))
        b_train, b_held = gen_dataset(DatasetSpec(seed=9, n_train=50, n_heldout=10))
        assert [i.specs for i in a_train] == [i.specs for i in b_train]
        assert [i.answer for i in a_held] == [i.answer for i in b_held]

    def test_empty_heldout(self):
        _, held = gen_dataset(DatasetSpec(n_train=10, n_heldout=0))
        assert len(held) == 0

    def test_image_count_mix_audit(self):
        spec = DatasetSpec(seed=3, n_train=2048, n_heldout=0)
        train, _ = gen_dataset(spec)
        counts = collections.Counter(inst.n_images for inst in train)
        weights = spec.image_count_mix
        total_w = sum(weights.values())
        for m, w in weights.items():
            want = w / total_w
            got = counts[m] / len(train)
            assert abs(got - want) <= 0.03, f"M={m}: {got:.3f} vs {want:.3f}"

    def test_invalid_mix(self):
        with pytest.raises(ContractError):
            gen_dataset(DatasetSpec(kind_mix={"count": -1.0}))

    def test_splits_disjoint(self):
        train, held = gen_dataset(DatasetSpec(seed=5, n_train=100, n_heldout=50))
        train_keys = {(i.kind, i.specs) for i in train}
        held_keys = {(i.kind, i.specs) for i in held}
        # random cell layouts collide with negligible probability
        assert len(train_keys & held_keys) <= 2


class TestSerialization:
    def test_round_trip(self, tmp_path):
        train, _ = gen_dataset(DatasetSpec(seed=11, n_train=40, n_heldout=0))
        path = tmp_path / "train.jsonl"
        save_dataset(train, path)
        loaded = load_dataset(path)
        assert loaded.seed == train.seed
        assert loaded.split == train.split
        assert len(loaded) == len(train)
        for a, b in zip(train, loaded):
            assert a == b
        # images re-render identically
        np.testing.assert_array_equal(
            train.instances[0].images(CFG)[0], loaded.instances[0].images(CFG)[0]
        )
