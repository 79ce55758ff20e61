"""Interleaved image/text sequences and the index sets the losses consume.

A sample's layout is an ordered list of segments, each either literal text
tokens or an image slot; flattening the layout yields one token sequence in
which every image occupies a contiguous span preceded by its index-marker
token ("image k: <img> ... </img>" rendered with synthetic tokens).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import vocab
from .errors import ContractError

IDX_PLACEHOLDER = "{idx}"


@dataclass(frozen=True)
class Template:
    """Per-image framing pattern plus capacity.

    ``image_prefix`` / ``image_suffix`` hold literal token ids, except that
    the string ``"{idx}"`` in the prefix expands to the image's index-marker
    token.
    """

    image_prefix: tuple = (IDX_PLACEHOLDER, vocab.IMG_START)
    image_suffix: tuple = (vocab.IMG_END,)
    max_images: int = vocab.MAX_IMAGES

    def framing_per_image(self) -> int:
        return len(self.image_prefix) + len(self.image_suffix)


DEFAULT_TEMPLATE = Template()

DEFAULT_TEMPLATE_TEXT = """\
# interleaved sequence template: one line per field
image_prefix = {idx} 1
image_suffix = 2
max_images = 8
"""


def parse_template(text: str) -> Template:
    """Parse the structured-text template description."""
    fields: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"template line {lineno}: expected 'field = values'")
        name, _, value = line.partition("=")
        name = name.strip()
        parts = value.split()
        if name in ("image_prefix", "image_suffix"):
            toks = tuple(IDX_PLACEHOLDER if p == IDX_PLACEHOLDER else int(p) for p in parts)
            fields[name] = toks
        elif name == "max_images":
            fields[name] = int(parts[0])
        else:
            raise ContractError(f"template line {lineno}: unknown field {name!r}")
    return Template(**fields)


@dataclass(frozen=True)
class InterleavedSample:
    """One model input: images, prompt tokens, and the expanded layout.

    ``layout`` segments are ("text", token tuple) or ("image", k) with k the
    1-based image id; image slots expand to ``tokens_per_image`` positions.
    """

    images: tuple
    text_tokens: tuple
    layout: tuple
    answer_position: int
    target_tokens: tuple
    tokens_per_image: int

    @property
    def n_images(self) -> int:
        return sum(1 for kind, _ in self.layout if kind == "image")

    def flat_length(self) -> int:
        total = 0
        for kind, payload in self.layout:
            total += self.tokens_per_image if kind == "image" else len(payload)
        return total

    def flat_text_ids(self) -> np.ndarray:
        """Flat token ids with image positions filled by PAD (for inspection)."""
        out = []
        for kind, payload in self.layout:
            if kind == "image":
                out.extend([vocab.PAD] * self.tokens_per_image)
            else:
                out.extend(payload)
        return np.asarray(out, dtype=np.intp)


@dataclass(frozen=True)
class RoleIndex:
    """Index sets derived from a sample's layout.

    ``noisy`` are the token positions of perturbed-image spans; ``clean`` is
    everything else (clean image tokens and all text tokens). The two sets
    partition the sequence.
    """

    image_spans: dict
    index_token_pos: dict
    noisy: np.ndarray
    clean: np.ndarray
    target_positions: tuple


def build_sequence(
    images: Sequence,
    question_tokens: Sequence[int],
    template: Template = DEFAULT_TEMPLATE,
    tokens_per_image: int = 16,
    target_tokens: Sequence[int] = (),
) -> InterleavedSample:
    """Render the default "image k: <img>...</img> ... question" layout."""
    m = len(images)
    if m < 1:
        raise ContractError("build_sequence requires at least one image")
    if m > template.max_images:
        raise ContractError(f"{m} images exceeds template capacity {template.max_images}")
    if len(question_tokens) == 0:
        raise ContractError("question must be nonempty")

    layout = []
    for k in range(1, m + 1):
        prefix = tuple(
            vocab.idx_token(k) if tok == IDX_PLACEHOLDER else tok for tok in template.image_prefix
        )
        layout.append(("text", prefix))
        layout.append(("image", k))
        if template.image_suffix:
            layout.append(("text", tuple(template.image_suffix)))
    layout.append(("text", tuple(int(t) for t in question_tokens)))

    sample = InterleavedSample(
        images=tuple(images),
        text_tokens=tuple(int(t) for t in question_tokens),
        layout=tuple(layout),
        answer_position=0,
        target_tokens=tuple(int(t) for t in target_tokens),
        tokens_per_image=int(tokens_per_image),
    )
    # the answer is read from the final prompt position
    return replace(sample, answer_position=sample.flat_length() - 1)


def role_index(sample: InterleavedSample, perturbed_image_ids: Sequence[int]) -> RoleIndex:
    """Compute image spans, index-token positions, and the clean/noisy split.

    ``perturbed_image_ids`` are 1-based image ids. Noisy positions are the
    spans of perturbed images; clean positions are all remaining indices.
    """
    m = sample.n_images
    perturbed = set(int(k) for k in perturbed_image_ids)
    unknown = perturbed - set(range(1, m + 1))
    if unknown:
        raise ContractError(f"unknown image ids {sorted(unknown)}; sample has {m} images")

    image_spans: dict = {}
    index_token_pos: dict = {}
    pos = 0
    for kind, payload in sample.layout:
        if kind == "image":
            image_spans[payload] = np.arange(pos, pos + sample.tokens_per_image)
            pos += sample.tokens_per_image
        else:
            for offset, tok in enumerate(payload):
                if vocab.IDX_BASE <= tok < vocab.IDX_BASE + vocab.MAX_IMAGES:
                    k = tok - vocab.IDX_BASE + 1
                    # the marker inside an image's framing precedes its span;
                    # later mentions (e.g. in the question) do not override it
                    if k not in index_token_pos:
                        index_token_pos[k] = pos + offset
            pos += len(payload)

    total = pos
    noisy = (
        np.concatenate([image_spans[k] for k in sorted(perturbed)])
        if perturbed
        else np.empty(0, dtype=np.intp)
    )
    noisy = np.sort(noisy.astype(np.intp))
    mask = np.ones(total, dtype=bool)
    mask[noisy] = False
    clean = np.flatnonzero(mask)

    if not perturbed:
        warnings.warn("no images perturbed: noisy set is empty", stacklevel=2)

    return RoleIndex(
        image_spans=image_spans,
        index_token_pos=index_token_pos,
        noisy=noisy,
        clean=clean,
        target_positions=(sample.answer_position,),
    )


def permute_images(
    sample: InterleavedSample,
    perm: Sequence[int],
    remap: Callable | None = None,
) -> InterleavedSample:
    """Reorder image payloads while the template text stays fixed.

    ``perm[i]`` is the 1-based id of the image placed into slot i+1. The
    target answer is remapped through ``remap(perm, targets)`` when the task
    is order-sensitive; the task module supplies that rule.
    """
    m = sample.n_images
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(1, m + 1)):
        raise ContractError(f"perm {perm} is not a bijection on 1..{m}")
    images = tuple(sample.images[p - 1] for p in perm)
    targets = sample.target_tokens if remap is None else tuple(remap(perm, sample.target_tokens))
    return replace(sample, images=images, target_tokens=targets)
