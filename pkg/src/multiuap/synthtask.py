"""Deterministic multi-image multiple-choice task generator.

Images are grids of patch-aligned solid-color cells; questions ask the model
to count, compare, or locate colors across the images. Answers are computed
from the generated cell specs, never sampled, so recounting from the specs
is an exact oracle for every instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .errors import ContractError
from .interleave import DEFAULT_TEMPLATE, InterleavedSample, Template, build_sequence
from .model import ModelConfig

# red, green, blue, yellow, magenta, cyan
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ]
)

KINDS = ("count", "compare", "position")

COUNT_OPTIONS = (vocab.num_token(0), vocab.num_token(1), vocab.num_token(2))
POSITION_OPTIONS = (vocab.YES, vocab.NO)


def render_image(spec, config: ModelConfig) -> np.ndarray:
    """Render [(color, row, col)] cells onto a black patch-aligned grid."""
    g = config.grid_side
    image = np.zeros((config.image_side, config.image_side, config.channels))
    seen = set()
    for color, row, col in spec:
        if not (0 <= row < g and 0 <= col < g):
            raise ContractError(f"cell ({row}, {col}) outside {g}x{g} grid")
        if not 0 <= color < len(PALETTE):
            raise ContractError(f"color {color} outside palette of {len(PALETTE)}")
        if (row, col) in seen:
            raise ContractError(f"overlapping cell ({row}, {col})")
        seen.add((row, col))
        p = config.patch_side
        image[row * p : (row + 1) * p, col * p : (col + 1) * p, :] = PALETTE[color]
    return image


def _count_cells(spec, color: int) -> int:
    return sum(1 for c, _, _ in spec if c == color)


def _contains(spec, color: int) -> bool:
    return _count_cells(spec, color) > 0


@dataclass(frozen=True)
class SynthInstance:
    """One generated task: image cell specs plus the rendered question."""

    kind: str
    specs: tuple  # per image: tuple of (color, row, col)
    color: int  # the color the question asks about
    slot: int  # 1-based slot referenced by position questions, else 0
    question_tokens: tuple
    options: tuple
    answer: int
    order_sensitive: bool

    @property
    def n_images(self) -> int:
        return len(self.specs)

    def answer_under(self, perm) -> int:
        """Ground-truth answer after placing image perm[i] into slot i+1."""
        perm = tuple(int(p) for p in perm)
        if sorted(perm) != list(range(1, self.n_images + 1)):
            raise ContractError(f"perm {perm} is not a bijection on 1..{self.n_images}")
        specs = tuple(self.specs[p - 1] for p in perm)
        return _answer_from_specs(self.kind, specs, self.color, self.slot)

    def remap(self, perm, _targets) -> tuple:
        if not self.order_sensitive:
            return (self.answer,)
        return (self.answer_under(perm),)

    def images(self, config: ModelConfig) -> list:
        return [render_image(spec, config) for spec in self.specs]

    def to_sample(
        self, config: ModelConfig, template: Template = DEFAULT_TEMPLATE
    ) -> InterleavedSample:
        return build_sequence(
            self.images(config),
            self.question_tokens,
            template=template,
            tokens_per_image=config.tokens_per_image,
            target_tokens=(self.answer,),
        )


def _answer_from_specs(kind: str, specs, color: int, slot: int) -> int:
    if kind == "count":
        return vocab.num_token(sum(1 for s in specs if _contains(s, color)))
    if kind == "compare":
        counts = [_count_cells(s, color) for s in specs]
        return vocab.img_opt_token(int(np.argmax(counts)) + 1)
    if kind == "position":
        return vocab.YES if _contains(specs[slot - 1], color) else vocab.NO
    raise ContractError(f"unknown task kind {kind!r}")


def _question(kind_token: int, color: int, ref: int, options) -> tuple:
    opts = list(options) + [vocab.QPAD] * (4 - len(options))
    q = [kind_token, vocab.color_token(color), ref, vocab.SEP, *opts, vocab.SEP, vocab.ANSWER_PROMPT]
    assert len(q) == vocab.QUESTION_LEN
    return tuple(q)


def _scatter_cells(rng, grid: int, taken: set, color: int, n_cells: int) -> list:
    free = [(r, c) for r in range(grid) for c in range(grid) if (r, c) not in taken]
    if n_cells > len(free):
        raise ContractError("image grid too small for requested cells")
    picks = rng.choice(len(free), size=n_cells, replace=False)
    cells = [(color, *free[int(i)]) for i in picks]
    taken.update((r, c) for _, r, c in cells)
    return cells


def _fill_distractors(rng, grid: int, taken: set, query_color: int, n: int) -> list:
    other = [c for c in range(len(PALETTE)) if c != query_color]
    cells = []
    for _ in range(n):
        free = [(r, c) for r in range(grid) for c in range(grid) if (r, c) not in taken]
        if not free:
            break
        pos = free[int(rng.integers(len(free)))]
        taken.add(pos)
        cells.append((int(rng.choice(other)), *pos))
    return cells


def _cell_budget(grid: int) -> tuple:
    """(strong_lo, strong_hi, winner_lo, winner_hi, distractor_hi), area-scaled."""
    area = grid * grid
    strong_lo = max(1, area // 5)
    strong_hi = max(strong_lo + 1, area // 3 + 1)
    winner_lo = max(2, area // 3)
    winner_hi = max(winner_lo + 1, int(area * 0.4) + 1)
    distractor_hi = max(1, area // 6 + 1)
    return strong_lo, strong_hi, winner_lo, winner_hi, distractor_hi


def gen_instance(rng: np.random.Generator, task_kind: str, m: int, grid: int = 4) -> SynthInstance:
    """Generate one instance; the answer slot is balanced by construction."""
    if task_kind not in KINDS:
        raise ContractError(f"unsupported task kind {task_kind!r}")
    if task_kind == "count" and m < 1:
        raise ContractError("count requires at least 1 image")
    if task_kind in ("compare", "position") and m < 2:
        raise ContractError(f"{task_kind} requires at least 2 images")

    color = int(rng.integers(len(PALETTE)))
    s_lo, s_hi, w_lo, w_hi, d_hi = _cell_budget(grid)

    if task_kind == "count":
        target = int(rng.integers(min(2, m) + 1))  # uniform over the option values
        holders = rng.choice(m, size=target, replace=False) if target else np.empty(0)
        holders = set(int(h) for h in holders)
        specs = []
        for i in range(m):
            taken: set = set()
            cells = []
            if i in holders:
                cells += _scatter_cells(rng, grid, taken, color, int(rng.integers(s_lo, s_hi)))
            cells += _fill_distractors(rng, grid, taken, color, int(rng.integers(0, d_hi)))
            specs.append(tuple(cells))
        question = _question(vocab.KIND_COUNT, color, vocab.QPAD, COUNT_OPTIONS)
        return SynthInstance(
            kind="count",
            specs=tuple(specs),
            color=color,
            slot=0,
            question_tokens=question,
            options=COUNT_OPTIONS,
            answer=vocab.num_token(target),
            order_sensitive=False,
        )

    if task_kind == "compare":
        winner = int(rng.integers(m)) + 1
        win_cells = int(rng.integers(w_lo, w_hi))
        specs = []
        for i in range(m):
            taken = set()
            n_query = win_cells if i + 1 == winner else int(rng.integers(0, max(1, win_cells - 2)))
            cells = _scatter_cells(rng, grid, taken, color, n_query)
            cells += _fill_distractors(rng, grid, taken, color, int(rng.integers(0, d_hi)))
            specs.append(tuple(cells))
        options = tuple(vocab.img_opt_token(k) for k in range(1, m + 1))
        question = _question(vocab.KIND_COMPARE, color, vocab.QPAD, options)
        return SynthInstance(
            kind="compare",
            specs=tuple(specs),
            color=color,
            slot=0,
            question_tokens=question,
            options=options,
            answer=vocab.img_opt_token(winner),
            order_sensitive=True,
        )

    # position: "does image k contain <color>?"; non-slot images hold the
    # color half the time, so "present anywhere" cannot stand in for binding
    slot = int(rng.integers(m)) + 1
    wants_yes = bool(rng.integers(2))
    specs = []
    for i in range(m):
        taken = set()
        cells = []
        if i + 1 == slot:
            if wants_yes:
                cells += _scatter_cells(rng, grid, taken, color, int(rng.integers(s_lo, s_hi)))
        elif rng.integers(2):
            cells += _scatter_cells(rng, grid, taken, color, int(rng.integers(s_lo, s_hi)))
        cells += _fill_distractors(rng, grid, taken, color, int(rng.integers(0, d_hi)))
        specs.append(tuple(cells))
    question = _question(vocab.KIND_POSITION, color, vocab.idx_token(slot), POSITION_OPTIONS)
    return SynthInstance(
        kind="position",
        specs=tuple(specs),
        color=color,
        slot=slot,
        question_tokens=question,
        options=POSITION_OPTIONS,
        answer=vocab.YES if wants_yes else vocab.NO,
        order_sensitive=True,
    )


DEFAULT_KIND_MIX = {"count": 1.0, "compare": 0.8, "position": 1.2}
# weight toward 2-3 images: keeps count answers identifiable from the
# presence fraction plus sequence length, and keeps contexts short
DEFAULT_IMAGE_COUNT_MIX = {2: 2.0, 3: 2.0, 4: 1.0}


@dataclass
class SynthDataset:
    instances: list
    seed: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 7
    n_train: int = 2048
    n_heldout: int = 512
    kind_mix: dict = field(default_factory=lambda: dict(DEFAULT_KIND_MIX))
    image_count_mix: dict = field(default_factory=lambda: dict(DEFAULT_IMAGE_COUNT_MIX))
    grid: int = 4


def gen_dataset(spec: DatasetSpec = DatasetSpec()) -> tuple:
    """Deterministically generate disjoint (train, heldout) splits."""
    kw = np.asarray([spec.kind_mix.get(k, 0.0) for k in KINDS], dtype=float)
    mw_keys = sorted(spec.image_count_mix)
    mw = np.asarray([spec.image_count_mix[k] for k in mw_keys], dtype=float)
    if np.any(kw < 0) or np.any(mw < 0) or kw.sum() <= 0 or mw.sum() <= 0:
        raise ContractError("mix weights must be nonnegative with positive sum")
    kw = kw / kw.sum()
    mw = mw / mw.sum()

    rng = np.random.default_rng(spec.seed)
    total = spec.n_train + spec.n_heldout
    instances = []
    for _ in range(total):
        kind = KINDS[int(rng.choice(len(KINDS), p=kw))]
        m = int(mw_keys[int(rng.choice(len(mw_keys), p=mw))])
        if kind in ("compare", "position"):
            m = max(2, m)
        instances.append(gen_instance(rng, kind, m, grid=spec.grid))
    train = SynthDataset(instances[: spec.n_train], seed=spec.seed, split="train")
    heldout = SynthDataset(instances[spec.n_train :], seed=spec.seed, split="heldout")
    return train, heldout


# ---------------------------------------------------------------------------
# one record per line; images are re-rendered from specs on load


def save_dataset(dataset: SynthDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"seed": dataset.seed, "split": dataset.split}) + "\n")
        for inst in dataset.instances:
            record = {
                "kind": inst.kind,
                "specs": [[list(cell) for cell in spec] for spec in inst.specs],
                "color": inst.color,
                "slot": inst.slot,
                "question": list(inst.question_tokens),
                "options": list(inst.options),
                "answer": inst.answer,
                "order_sensitive": inst.order_sensitive,
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> SynthDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        instances = []
        for line in fh:
            r = json.loads(line)
            instances.append(
                SynthInstance(
                    kind=r["kind"],
                    specs=tuple(tuple(tuple(cell) for cell in spec) for spec in r["specs"]),
                    color=r["color"],
                    slot=r["slot"],
                    question_tokens=tuple(r["question"]),
                    options=tuple(r["options"]),
                    answer=r["answer"],
                    order_sensitive=r["order_sensitive"],
                )
            )
    return SynthDataset(instances, seed=header["seed"], split=header["split"])
