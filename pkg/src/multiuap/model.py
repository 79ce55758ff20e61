"""Frozen toy multi-image decoder transformer.

A linear patch projection maps pixels to image tokens (the gradient path for
the perturbations), text tokens come from a learned embedding, and a stack
of pre-norm causal self-attention blocks produces per-layer hidden states
and post-softmax attention weights, both retained in the forward trace.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .interleave import InterleavedSample

CHECKPOINT_MAGIC = "multiuap-weights 1"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    image_side: int = 16
    channels: int = 3
    patch_side: int = 4
    max_seq: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.image_side % self.patch_side != 0:
            raise ContractError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def tokens_per_image(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2 * self.channels


@dataclass
class ForwardTrace:
    """Per-sample forward products: logits [T,V], per-layer hidden [T,d],
    per-layer post-softmax attention [H,T,T]."""

    logits: Tensor
    hidden: list
    attention: list

    @property
    def seq_len(self) -> int:
        return self.logits.shape[0]


@dataclass
class BatchTrace:
    """Batched forward products over same-layout samples (leading batch axis)."""

    logits: Tensor
    hidden: list
    attention: list

    def sample(self, b: int) -> ForwardTrace:
        return ForwardTrace(
            logits=self.logits[b],
            hidden=[h[b] for h in self.hidden],
            attention=[a[b] for a in self.attention],
        )

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def _weight_shapes(config: ModelConfig) -> dict:
    d, v = config.d_model, config.vocab_size
    shapes = {
        "patch_proj": (config.patch_dim, d),
        "patch_bias": (d,),
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq, d),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.shift"] = (d,)
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.shift"] = (d,)
        shapes[p + "mlp.w_in"] = (d, 4 * d)
        shapes[p + "mlp.w_out"] = (4 * d, d)
    shapes["ln_f.scale"] = (d,)
    shapes["ln_f.shift"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


@dataclass
class ToyMllm:
    config: ModelConfig
    weights: dict = field(default_factory=dict)
    frozen: bool = False

    def parameters(self) -> list:
        return list(self.weights.values())

    def freeze(self) -> None:
        for w in self.weights.values():
            w.requires_grad = False
            w.grad = None
        self.frozen = True

    def weight_checksum(self) -> float:
        return float(sum(np.sum(w.data * w.data) for w in self.weights.values()))

    # sklearn-flavoured conveniences; fit/predict live in pretrain/predict_answer
    def fit(self, dataset, epochs: int = 30, lr: float = 3e-3, batch_size: int = 64):
        from .pretrain import pretrain_model

        pretrain_model(self, dataset, epochs=epochs, lr=lr, batch_size=batch_size)
        return self

    def predict(self, sample: InterleavedSample, option_tokens) -> int:
        trace = forward(self, sample)
        return predict_answer(trace, sample.answer_position, option_tokens)


def init_model(config: ModelConfig) -> ToyMllm:
    """Seeded variance-scaled initialization; identical config gives identical bits."""
    rng = np.random.default_rng(config.seed)
    weights: dict = {}
    resid_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    for name, shape in _weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("scale",):
            data = np.ones(shape)
        elif leaf in ("shift", "patch_bias"):
            data = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            data = rng.normal(0.0, 0.2, size=shape)
        else:
            fan_in = shape[0]
            std = 1.0 / np.sqrt(fan_in)
            if leaf in ("wo", "w_out"):
                std *= resid_scale
            data = rng.normal(0.0, std, size=shape)
        weights[name] = Tensor(data, requires_grad=True)
    return ToyMllm(config=config, weights=weights, frozen=False)


def _as_image_tensor(image, config: ModelConfig) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    expected = (config.image_side, config.image_side, config.channels)
    if t.shape != expected:
        raise ShapeError("patch_embed", f"image shape {t.shape}, expected {expected}")
    return t


def patch_embed(image, model: ToyMllm) -> Tensor:
    """Non-overlapping patches, flattened and linearly projected to d_model."""
    batched = patch_embed_batch(_stack_images([image], model.config), model)
    return batched[0]


def _stack_images(images, model_config: ModelConfig) -> Tensor:
    tensors = [_as_image_tensor(im, model_config) for im in images]
    if all(t.node is None and not t.requires_grad for t in tensors):
        return Tensor(np.stack([t.data for t in tensors]))
    s = model_config.image_side
    rows = [ad.reshape(t, (1, s, s, model_config.channels)) for t in tensors]
    return ad.concat(rows, axis=0)


def patch_embed_batch(images: Tensor, model: ToyMllm) -> Tensor:
    """[B, S, S, C] pixels -> [B, tokens_per_image, d_model]."""
    cfg = model.config
    b = images.shape[0]
    g, p, c = cfg.grid_side, cfg.patch_side, cfg.channels
    x = ad.reshape(images, (b, g, p, g, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, g * g, p * p * c))
    tokens = ad.matmul(x, model.weights["patch_proj"])
    bias = ad.broadcast_to(model.weights["patch_bias"], tokens.shape)
    return ad.add(tokens, bias)


def causal_mask(seq_len: int) -> np.ndarray:
    mask = np.zeros((seq_len, seq_len))
    mask[np.triu_indices(seq_len, k=1)] = -np.inf
    return mask


def _check_same_layout(samples) -> None:
    first = samples[0]
    for s in samples[1:]:
        if (
            tuple((k, p if k == "image" else len(p)) for k, p in s.layout)
            != tuple((k, p if k == "image" else len(p)) for k, p in first.layout)
            or s.tokens_per_image != first.tokens_per_image
        ):
            raise ContractError("batched forward requires identical sample layouts")


def forward_batch(model: ToyMllm, samples) -> BatchTrace:
    """Causal decoder forward over same-layout samples.

    Retains per-layer hidden states and post-softmax attention weights; the
    pixel inputs of each image slot are the only differentiable leaves when
    the model is frozen.
    """
    cfg = model.config
    if not samples:
        raise ContractError("forward_batch on empty sample list")
    _check_same_layout(samples)
    sample0 = samples[0]
    seq_len = sample0.flat_length()
    if seq_len > cfg.max_seq:
        raise ContractError(f"sequence length {seq_len} exceeds max_seq {cfg.max_seq}")
    if sample0.tokens_per_image != cfg.tokens_per_image:
        raise ContractError(
            f"sample tokens_per_image {sample0.tokens_per_image} != model {cfg.tokens_per_image}"
        )

    w = model.weights
    segments = []
    for seg_i, (kind, payload) in enumerate(sample0.layout):
        if kind == "image":
            stacked = _stack_images([s.images[payload - 1] for s in samples], cfg)
            segments.append(patch_embed_batch(stacked, model))
        else:
            ids = np.stack(
                [np.asarray(s.layout[seg_i][1], dtype=np.intp) for s in samples]
            )
            segments.append(ad.embedding(w["tok_emb"], ids))
    x = segments[0] if len(segments) == 1 else ad.concat(segments, axis=1)

    pos = ad.broadcast_to(ad.index(w["pos_emb"], slice(0, seq_len)), x.shape)
    x = ad.add(x, pos)

    mask = causal_mask(seq_len)[None, None]
    b = len(samples)
    h_count, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    hidden: list = []
    attention: list = []

    def split_heads(t):
        t = ad.reshape(t, (b, seq_len, h_count, hd))
        return ad.transpose(t, (0, 2, 1, 3))

    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h = ad.layer_norm(x, w[p + "ln1.scale"], w[p + "ln1.shift"])
        # scale folded into q so the large score matrix sees no extra pass
        q = ad.mul(split_heads(ad.matmul(h, w[p + "attn.wq"])), scale)
        k = split_heads(ad.matmul(h, w[p + "attn.wk"]))
        v = split_heads(ad.matmul(h, w[p + "attn.wv"]))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        attn = ad.softmax(scores, mask=mask)
        attention.append(attn)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, seq_len, cfg.d_model))
        x = ad.add(x, ad.matmul(ctx, w[p + "attn.wo"]))
        m = ad.layer_norm(x, w[p + "ln2.scale"], w[p + "ln2.shift"])
        m = ad.matmul(ad.gelu(ad.matmul(m, w[p + "mlp.w_in"])), w[p + "mlp.w_out"])
        x = ad.add(x, m)
        hidden.append(x)

    final = ad.layer_norm(x, w["ln_f.scale"], w["ln_f.shift"])
    logits = ad.matmul(final, w["lm_head"])
    return BatchTrace(logits=logits, hidden=hidden, attention=attention)


def forward(model: ToyMllm, sample: InterleavedSample) -> ForwardTrace:
    return forward_batch(model, [sample]).sample(0)


def predict_answer(trace: ForwardTrace, answer_position: int, option_tokens) -> int:
    """Argmax over the option tokens' logits; ties go to the lowest token id."""
    options = sorted(int(t) for t in option_tokens)
    if not options:
        raise ContractError("option_tokens must be nonempty")
    if not 0 <= answer_position < trace.seq_len:
        raise ContractError(
            f"answer_position {answer_position} outside sequence of length {trace.seq_len}"
        )
    row = trace.logits.data[answer_position]
    return options[int(np.argmax(row[options]))]


# ---------------------------------------------------------------------------
# checkpoint io: text header (name + shape per tensor) followed by the flat
# float64 little-endian payload


def save_weights(model: ToyMllm, path) -> None:
    names = sorted(model.weights)
    with open(path, "wb") as fh:
        header = io.StringIO()
        header.write(f"{CHECKPOINT_MAGIC}\n")
        header.write(f"frozen {int(model.frozen)}\n")
        for name in names:
            shape = " ".join(str(n) for n in model.weights[name].shape)
            header.write(f"tensor {name} {shape}\n")
        header.write("data\n")
        fh.write(header.getvalue().encode("ascii"))
        for name in names:
            fh.write(model.weights[name].data.astype("<f8").tobytes())


def load_weights(path, config: ModelConfig) -> ToyMllm:
    expected = _weight_shapes(config)
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii").strip() != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a weight checkpoint")
        frozen_line = fh.readline().decode("ascii").split()
        frozen = bool(int(frozen_line[1]))
        entries = []
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "data":
                break
            if not line.startswith("tensor "):
                raise ContractError(f"{path}: malformed header line {line!r}")
            parts = line.split()
            name = parts[1]
            shape = tuple(int(p) for p in parts[2:])
            if name not in expected:
                raise ContractError(f"{path}: unexpected tensor {name!r} for this config")
            if shape != expected[name]:
                raise ShapeError(
                    "load_weights", f"{name} has shape {shape}, config expects {expected[name]}"
                )
            entries.append((name, shape))
        if {n for n, _ in entries} != set(expected):
            missing = sorted(set(expected) - {n for n, _ in entries})
            raise ContractError(f"{path}: missing tensors {missing}")
        weights = {}
        for name, shape in entries:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ContractError(f"{path}: truncated payload at tensor {name!r}")
            weights[name] = Tensor(
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy(),
                requires_grad=not frozen,
            )
    model = ToyMllm(config=config, weights=weights, frozen=frozen)
    if frozen:
        model.freeze()
    return model
