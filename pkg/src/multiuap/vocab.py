"""Synthetic token vocabulary shared by the sequence builder and task generator.

Token ids are fixed small integers; there is no natural-language tokenizer.
Index markers IDX_1..IDX_8 are single dedicated tokens so that each image's
textual index occupies exactly one sequence position.
"""

PAD = 0
IMG_START = 1
IMG_END = 2

KIND_COUNT = 3
KIND_COMPARE = 4
KIND_POSITION = 5

COLOR_BASE = 6  # COLOR_BASE + c for palette color c in 0..5
N_COLORS = 6

ANSWER_PROMPT = 12

NUM_BASE = 13  # NUM_BASE + n: numeric answer option "n", n in 0..4
IMG_OPT_BASE = 18  # IMG_OPT_BASE + (k-1): answer option "image k", k in 1..4
YES = 22
NO = 23

IDX_BASE = 24  # IDX_BASE + (k-1): index marker token for image k, k in 1..8
MAX_IMAGES = 8

SEP = 32
QPAD = 33

QUESTION_LEN = 10


def idx_token(image_id: int) -> int:
    """Index-marker token for 1-based image id."""
    if not 1 <= image_id <= MAX_IMAGES:
        raise ValueError(f"image id {image_id} outside 1..{MAX_IMAGES}")
    return IDX_BASE + image_id - 1


def color_token(color: int) -> int:
    if not 0 <= color < N_COLORS:
        raise ValueError(f"color index {color} outside 0..{N_COLORS - 1}")
    return COLOR_BASE + color


def num_token(n: int) -> int:
    if not 0 <= n <= 4:
        raise ValueError(f"numeric option {n} outside 0..4")
    return NUM_BASE + n


def img_opt_token(image_id: int) -> int:
    if not 1 <= image_id <= 4:
        raise ValueError(f"image option {image_id} outside 1..4")
    return IMG_OPT_BASE + image_id - 1
