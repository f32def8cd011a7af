"""Toy dual-encoder segmentation backbone with a cost-volume head.

Structure: a patch-based visual encoder and a prompt-templated text encoder
(single-head transformer blocks), a cosine-similarity cost volume over
(pixel, template, class), one spatial and one class attention block over that
volume, and a bilinear upsampling decoder followed by a per-pixel softmax.

The class attention block carries no class-position encoding, so the head is
equivariant to permutations of the class axis.
"""
from __future__ import annotations

import functools
import math
import re
import zlib
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from .lora import LoraSet, effective_weight
from .numerics import (
    ShapeError,
    Tensor,
    l2_normalize,
    no_grad,
    softmax,
    standardize,
)

PLACEHOLDER = "{}"
PAD_ID = 0
EOS_ID = 1

DEFAULT_TEMPLATES: tuple[str, ...] = (
    "a photo of a {}.",
    "a painting of a {}.",
    "a rendering of a {}.",
    "a close-up photo of the {}.",
    "a blurry photo of the {}.",
    "a bright photo of a {}.",
    "a cropped photo of the {}.",
    "a pixelated photo of the {}.",
    "there is a {} in the scene.",
    "itap of a {}.",
)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    patch_size: int = 8
    n_blocks: int = 4
    d_agg: int = 16
    mlp_ratio: int = 2
    vocab_size: int = 4096
    init_std: float = 0.02
    embed_std: float = 1.0      # token table; unit scale keeps unseen words distinct

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class Vocabulary:
    """Ordered class names plus the prompt templates each name is rendered into."""

    classes: tuple[str, ...]
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.classes:
            raise ValueError("vocabulary needs at least one class")
        for name in self.classes:
            if not isinstance(name, str) or not name.strip():
                raise ValueError("class names must be nonempty strings")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if not self.templates:
            raise ValueError("vocabulary needs at least one prompt template")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValueError(f"template {t!r} must contain exactly one {PLACEHOLDER!r}")

    def __len__(self) -> int:
        return len(self.classes)

    def prompts(self) -> list[str]:
        """Class-major list of rendered prompts, length ``N * P``."""
        return [t.replace(PLACEHOLDER, c) for c in self.classes for t in self.templates]

    def permuted(self, order: Sequence[int]) -> "Vocabulary":
        return Vocabulary(tuple(self.classes[i] for i in order), self.templates)


_WORD = re.compile(r"[a-z0-9]+")


def token_id(word: str, vocab_size: int = 4096) -> int:
    """Stable id for a lowercase word: ``2 + crc32(word) mod (vocab_size - 2)``.

    Ids 0 and 1 are reserved for padding and end-of-sequence.
    """
    return 2 + zlib.crc32(word.encode("utf-8")) % (vocab_size - 2)


def tokenize(text: str, vocab_size: int = 4096) -> list[int]:
    ids = [token_id(w, vocab_size) for w in _WORD.findall(text.lower())]
    return ids + [EOS_ID]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class BackboneParams:
    """Named base weights of both encoders and the aggregation head."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = dict(tensors)
        self.config = config

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> "BackboneParams":
        rng = np.random.default_rng(seed)
        d, da, std = config.d_model, config.d_agg, config.init_std
        shapes: dict[str, tuple[int, ...]] = {}
        patch_dim = 3 * config.patch_size ** 2

        shapes["visual.patch.weight"] = (d, patch_dim)
        shapes["visual.patch.bias"] = (d,)
        shapes["text.embed"] = (config.vocab_size, d)
        for enc in ("visual", "text"):
            for b in range(config.n_blocks):
                _block_shapes(shapes, f"{enc}.blocks.{b}", d, config.mlp_ratio)
            shapes[f"{enc}.ln_final.gain"] = (d,)
            shapes[f"{enc}.ln_final.bias"] = (d,)
            shapes[f"{enc}.proj"] = (d, d)
        shapes["agg.embed.weight"] = (da, 1)
        shapes["agg.embed.bias"] = (da,)
        _block_shapes(shapes, "agg.spatial", da, config.mlp_ratio)
        _block_shapes(shapes, "agg.class", da, config.mlp_ratio)
        shapes["agg.head.gain"] = (da,)
        shapes["agg.head.bias"] = (da,)
        shapes["agg.head.weight"] = (1, da)
        shapes["agg.head.out_bias"] = (1,)
        shapes["agg.skip_scale"] = (1,)

        tensors = {}
        for name, shape in shapes.items():
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif name.endswith("bias"):
                data = np.zeros(shape)
            elif name == "agg.skip_scale":
                data = np.full(shape, 10.0)
            elif name == "text.embed":
                data = rng.normal(0.0, config.embed_std, size=shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(tensors, config)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tensors.items()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def freeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors.values())

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
            self.config,
        )


def _block_shapes(shapes: dict, prefix: str, d: int, mlp_ratio: int) -> None:
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.gain"] = (d,)
        shapes[f"{prefix}.{ln}.bias"] = (d,)
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.attn.{proj}.bias"] = (d,)
    shapes[f"{prefix}.mlp.fc1.weight"] = (mlp_ratio * d, d)
    shapes[f"{prefix}.mlp.fc1.bias"] = (mlp_ratio * d,)
    shapes[f"{prefix}.mlp.fc2.weight"] = (d, mlp_ratio * d)
    shapes[f"{prefix}.mlp.fc2.bias"] = (d,)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _layer_norm(x: Tensor, params: BackboneParams, prefix: str) -> Tensor:
    return standardize(x) * params[f"{prefix}.gain"] + params[f"{prefix}.bias"]


def _linear(x: Tensor, params: BackboneParams, prefix: str, adapters: LoraSet | None = None,
            site=None) -> Tensor:
    W = params[f"{prefix}.weight"]
    if adapters is not None and site is not None:
        W = effective_weight(W, adapters.get(site))
    if x.ndim > 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ W.T + params[f"{prefix}.bias"]).reshape(*lead, W.shape[0])
    return x @ W.T + params[f"{prefix}.bias"]


def _attention_block(x: Tensor, params: BackboneParams, prefix: str,
                     adapters: LoraSet | None = None, encoder: str | None = None,
                     block: int | None = None, key_bias: np.ndarray | None = None) -> Tensor:
    """Pre-norm single-head attention + MLP over the second-to-last axis of ``x``."""
    def site(proj):
        return None if encoder is None else (encoder, block, proj)

    h = _layer_norm(x, params, f"{prefix}.ln1")
    q = _linear(h, params, f"{prefix}.attn.q", adapters, site("q"))
    k = _linear(h, params, f"{prefix}.attn.k", adapters, site("k"))
    v = _linear(h, params, f"{prefix}.attn.v", adapters, site("v"))
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(x.shape[-1]))
    if key_bias is not None:
        scores = scores + key_bias
    att = softmax(scores, axis=-1)
    x = x + _linear(att @ v, params, f"{prefix}.attn.o", adapters, site("o"))
    h = _layer_norm(x, params, f"{prefix}.ln2")
    h = _linear(h, params, f"{prefix}.mlp.fc1").gelu()
    return x + _linear(h, params, f"{prefix}.mlp.fc2")


@functools.lru_cache(maxsize=64)
def _sinusoid_1d(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(100.0) * (np.arange(0, dim, 2) / dim))[None, :]
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=64)
def _sinusoid_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    half = dim // 2
    r = _sinusoid_1d(rows, half)
    c = _sinusoid_1d(cols, dim - half)
    out = np.concatenate([np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=64)
def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row-stochastic ``[out, in]`` interpolation matrix (half-pixel centres, edge clamp)."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def encode_text(vocab: Vocabulary, params: BackboneParams, adapters: LoraSet | None = None) -> Tensor:
    """Text features ``[N, P, d]``, one per (class, template) pair."""
    cfg = params.config
    seqs = [tokenize(p, cfg.vocab_size) for p in vocab.prompts()]
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD_ID, dtype=np.intp)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    eos_pos = np.array([len(s) - 1 for s in seqs])
    key_bias = np.where(ids == PAD_ID, -1e9, 0.0)[:, None, :]

    x = params["text.embed"][ids] + _sinusoid_1d(length, cfg.d_model)
    for b in range(cfg.n_blocks):
        x = _attention_block(x, params, f"text.blocks.{b}", adapters, "text", b, key_bias)
    x = _layer_norm(x, params, "text.ln_final")
    pooled = x[np.arange(len(seqs)), eos_pos]
    out = pooled @ params["text.proj"].T
    return out.reshape(len(vocab.classes), len(vocab.templates), cfg.d_model)


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    H, W, C = img.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {patch}")
    return (img.reshape(H // patch, patch, W // patch, patch, C)
               .transpose(0, 2, 1, 3, 4)
               .reshape((H // patch) * (W // patch), patch * patch * C))


def encode_image(img: np.ndarray, params: BackboneParams, adapters: LoraSet | None = None) -> Tensor:
    """Dense visual features ``[H/p, W/p, d]`` for an ``[H, W, 3]`` image in [0, 1]."""
    cfg = params.config
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an [H, W, 3] image, got {img.shape}")
    hf, wf = img.shape[0] // cfg.patch_size, img.shape[1] // cfg.patch_size
    patches = patchify(img - 0.5, cfg.patch_size)
    x = Tensor(patches) @ params["visual.patch.weight"].T + params["visual.patch.bias"]
    x = x + _sinusoid_2d(hf, wf, cfg.d_model)
    for b in range(cfg.n_blocks):
        x = _attention_block(x, params, f"visual.blocks.{b}", adapters, "visual", b)
    x = _layer_norm(x, params, "visual.ln_final")
    x = x @ params["visual.proj"].T
    return x.reshape(hf, wf, cfg.d_model)


# ---------------------------------------------------------------------------
# cost volume and head
# ---------------------------------------------------------------------------

def build_cost_volume(dv: Tensor, dl: Tensor) -> Tensor:
    """Cosine similarities ``[Hf, Wf, P, N]`` between every patch and every prompt."""
    if dv.shape[-1] != dl.shape[-1]:
        raise ShapeError(f"feature widths differ: visual {dv.shape}, text {dl.shape}")
    hf, wf, d = dv.shape
    n, p, _ = dl.shape
    v = l2_normalize(dv.reshape(hf * wf, d))
    t = l2_normalize(dl.reshape(n * p, d))
    cv = (v @ t.T).reshape(hf, wf, n, p)
    return cv.transpose(0, 1, 3, 2)


def aggregate_and_decode(cv: Tensor, params: BackboneParams) -> Tensor:
    """Refine the cost volume and upsample to pixel logits ``[H, W, N]``."""
    cfg = params.config
    hf, wf, p, n = cv.shape
    s = hf * wf
    x = cv.transpose(3, 0, 1, 2).reshape(n, s, p)            # [N, S, P]
    mean_cost = x.mean(axis=-1)                              # [N, S]
    # shared per-template embedding pooled over templates, so any P works
    h = x.reshape(n, s, p, 1) @ params["agg.embed.weight"].T + params["agg.embed.bias"]
    h = h.gelu().mean(axis=2)                                # [N, S, da]
    h = h + _sinusoid_2d(hf, wf, cfg.d_agg)
    h = _attention_block(h, params, "agg.spatial")           # across pixels, per class
    h = h.transpose(1, 0, 2)                                 # [S, N, da]
    h = _attention_block(h, params, "agg.class")             # across classes, per pixel
    h = _layer_norm(h, params, "agg.head")
    logit = (h @ params["agg.head.weight"].T).reshape(s, n) + params["agg.head.out_bias"]
    logit = logit + mean_cost.T * params["agg.skip_scale"]   # [S, N]
    coarse = logit.T.reshape(n, hf, wf)
    up = bilinear_matrix(hf * cfg.patch_size, hf) @ coarse @ bilinear_matrix(wf * cfg.patch_size, wf).T
    return up.transpose(1, 2, 0)


def logits_from_text(img: np.ndarray, text_features: Tensor, params: BackboneParams,
                     adapters: LoraSet | None = None, keep: Sequence[int] | None = None) -> Tensor:
    """Pixel logits given precomputed text features; ``keep`` prunes the class axis."""
    dv = encode_image(img, params, adapters)
    cv = build_cost_volume(dv, text_features)
    if keep is not None:
        cv = cv.take(np.asarray(keep), axis=3)
    return aggregate_and_decode(cv, params)


def forward_logits(img: np.ndarray, vocab: Vocabulary, params: BackboneParams,
                   adapters: LoraSet | None = None) -> Tensor:
    return logits_from_text(img, encode_text(vocab, params, adapters), params, adapters)


def forward(img: np.ndarray, vocab: Vocabulary, params: BackboneParams,
            adapters: LoraSet | None = None) -> Tensor:
    """Per-pixel class probabilities ``[H, W, N]``."""
    return softmax(forward_logits(img, vocab, params, adapters), axis=-1)


def predict(images: Sequence[np.ndarray], vocab: Vocabulary, params: BackboneParams,
            adapters: LoraSet | None = None) -> list[np.ndarray]:
    """Argmax label maps for a batch of images, without recording a graph."""
    with no_grad():
        text = encode_text(vocab, params, adapters)
        return [np.argmax(logits_from_text(img, text, params, adapters).data, axis=-1)
                for img in images]
