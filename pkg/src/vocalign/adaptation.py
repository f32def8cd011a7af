"""Source-free student-teacher adaptation restricted to LoRA factors.

Each step, per target image: the EMA teacher labels a clean crop using the
concept-expanded vocabulary, the labels are folded back to the original
classes, the Top-K classes are picked from the teacher's mean activations,
and the student is trained on a masked, jittered view of the same crop over
the pruned class axis. After the gradient step the teacher moves towards the
student by exponential averaging.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .lora import LoraSet, Site, parse_site, site_key, trainable_parameters
from .model import BackboneParams, Vocabulary, encode_text, logits_from_text
from .numerics import (
    ContractError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    one_hot,
    pixelwise_cross_entropy,
    softmax,
)
from .optim import AdamW, warmup_lr
from .topk import (
    IGNORE,
    ClassSelection,
    randomized_selection,
    remap_pseudo_labels,
    select_topk,
)
from .vocab_align import ConceptMap, ExpandedVocabulary, aggregate_concepts, expand_vocabulary, load_concepts

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.99
    tau: float = 0.968
    mask_ratio: float = 0.7
    mask_patch: int = 8
    topk: int | None = 15
    lr: float = 5e-5
    warmup_lr: float = 5e-6
    warmup_steps: int = 500
    iterations: int = 600
    batch_size: int = 2
    seed: int = 0
    lora_rank: int = 2
    lora_sites: tuple[str, ...] | None = None
    lora_scaling: float = 1.0
    concepts_path: str | None = None
    # beyond the core keys
    weight_decay: float = 0.0
    q_mode: str = "scalar"            # "scalar" or "pixel"
    crop_size: int | None = None
    jitter: float = 0.2               # per-channel gain drawn from [1 - jitter, 1 + jitter]
    random_fraction: float = 0.0      # Top-K picks swapped for random classes
    log_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.mask_patch < 1 or self.batch_size < 1 or self.lora_rank < 1:
            raise ValueError("mask_patch, batch_size and lora_rank must be positive")
        if self.topk is not None and self.topk < 1:
            raise ValueError("topk must be positive (or null to disable)")
        if self.iterations < 0 or self.warmup_steps < 0:
            raise ValueError("iterations and warmup_steps must be non-negative")
        if self.lr < 0 or self.warmup_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.q_mode not in ("scalar", "pixel"):
            raise ValueError("q_mode must be 'scalar' or 'pixel'")
        if not 0.0 <= self.jitter < 1.0 or not 0.0 <= self.random_fraction <= 1.0:
            raise ValueError("jitter must lie in [0, 1) and random_fraction in [0, 1]")
        if self.lora_sites is not None:
            object.__setattr__(self, "lora_sites", tuple(self.lora_sites))

    def sites(self) -> list[Site] | None:
        return None if self.lora_sites is None else [parse_site(s) for s in self.lora_sites]

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["lora_sites"] is not None:
            d["lora_sites"] = list(d["lora_sites"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "AdaptConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def with_(self, **changes) -> "AdaptConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# pseudo-labels, confidence, masking, loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfidenceWeight:
    q: float
    tau: float


@dataclass(frozen=True)
class PatchMask:
    mask: np.ndarray    # [H, W] of 0.0 / 1.0
    b: int
    r: float

    @property
    def visible_fraction(self) -> float:
        return float(self.mask.mean())


def _probs(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def generate_pseudo_labels(teacher_probs) -> np.ndarray:
    """Per-pixel argmax; the first (lowest) index wins ties."""
    return np.argmax(_probs(teacher_probs), axis=-1)


def confidence_weight(teacher_probs, tau: float) -> ConfidenceWeight:
    """Fraction of pixels whose top probability exceeds ``tau``."""
    top = _probs(teacher_probs).max(axis=-1)
    return ConfidenceWeight(float(np.count_nonzero(top > tau)) / top.size, tau)


def confident_pixels(teacher_probs, tau: float) -> np.ndarray:
    """Per-pixel 0/1 weights, the ``q_mode="pixel"`` variant."""
    return (_probs(teacher_probs).max(axis=-1) > tau).astype(np.float64)


def sample_mask(H: int, W: int, b: int, r: float, rng: np.random.Generator) -> PatchMask:
    """Patch-constant binary mask: a ``b x b`` patch stays visible iff ``v > r``, ``v ~ U(0, 1]``."""
    if H % b or W % b:
        raise ShapeError(f"{H}x{W} is not divisible by mask patch {b}")
    v = 1.0 - rng.random((H // b, W // b))
    visible = (v > r).astype(np.float64)
    return PatchMask(np.kron(visible, np.ones((b, b))), b, r)


def apply_mask(img: np.ndarray, mask: PatchMask | np.ndarray | None) -> np.ndarray:
    if mask is None:
        return img
    m = mask.mask if isinstance(mask, PatchMask) else mask
    return img * m[..., None]


def masked_forward(img: np.ndarray, mask: PatchMask | None, text_features: Tensor,
                   params: BackboneParams, adapters: LoraSet | None,
                   keep: Sequence[int] | None = None) -> Tensor:
    """Student probabilities on ``mask * img``; masking acts on pixels, before patch embedding."""
    return softmax(logits_from_text(apply_mask(img, mask), text_features, params, adapters, keep), axis=-1)


def adaptation_loss(student_probs: Tensor, labels: np.ndarray, q: ConfidenceWeight | float,
                    pixel_weights: np.ndarray | None = None) -> Tensor:
    """``q`` times the summed cross-entropy over non-ignored pixels."""
    qv = q.q if isinstance(q, ConfidenceWeight) else float(q)
    labels = np.asarray(labels)
    if student_probs.shape[:-1] != labels.shape:
        raise ShapeError(f"probabilities {student_probs.shape} do not match labels {labels.shape}")
    if qv == 0.0 or not np.any(labels != IGNORE):
        return Tensor(0.0)
    target = one_hot(labels, student_probs.shape[-1], IGNORE)
    return pixelwise_cross_entropy(student_probs, target, pixel_weights) * qv


# ---------------------------------------------------------------------------
# teacher / state
# ---------------------------------------------------------------------------

def ema_update(teacher: LoraSet, student: LoraSet, alpha: float) -> LoraSet:
    """``teacher <- alpha * teacher + (1 - alpha) * student``, factor by factor."""
    if teacher.sites() != student.sites():
        raise ContractError("teacher and student adapters cover different sites")
    for site, t_ad in teacher.items():
        s_ad = student[site]
        if t_ad.A.shape != s_ad.A.shape or t_ad.B.shape != s_ad.B.shape:
            raise ContractError(f"adapter shapes differ at {site_key(site)}")
        if alpha == 1.0:
            continue
        if alpha == 0.0:
            t_ad.A.data, t_ad.B.data = s_ad.A.data.copy(), s_ad.B.data.copy()
            continue
        # increment form keeps a teacher that equals the student bitwise fixed
        t_ad.A.data = t_ad.A.data + (1.0 - alpha) * (s_ad.A.data - t_ad.A.data)
        t_ad.B.data = t_ad.B.data + (1.0 - alpha) * (s_ad.B.data - t_ad.B.data)
    return teacher


@dataclass
class AdaptationState:
    params: BackboneParams
    student: LoraSet
    teacher: LoraSet
    optimizer: AdamW
    rng: np.random.Generator
    t: int = 0
    _order: np.ndarray | None = field(default=None, repr=False)
    _cursor: int = 0

    def next_batch(self, n_images: int, batch_size: int) -> list[int]:
        out = []
        for _ in range(batch_size):
            if self._order is None or self._cursor >= len(self._order):
                self._order = self.rng.permutation(n_images)
                self._cursor = 0
            out.append(int(self._order[self._cursor]))
            self._cursor += 1
        return out


def init_state(ckpt: Checkpoint, config: AdaptConfig) -> AdaptationState:
    """Student and teacher adapters start identical; base weights are frozen and shared."""
    params = ckpt.params.freeze()
    rng = np.random.default_rng(config.seed)
    if ckpt.adapters is not None:
        student = ckpt.adapters.clone(trainable=True)
    else:
        student = LoraSet.create(params.config.d_model, config.lora_rank, rng,
                                 config.sites(), config.lora_scaling)
    teacher = student.clone(trainable=False)
    optimizer = AdamW(trainable_parameters(student), weight_decay=config.weight_decay)
    return AdaptationState(params, student, teacher, optimizer, rng)


@dataclass(frozen=True)
class StepMetrics:
    iteration: int
    loss: float
    q_mean: float
    ignored_fraction: float
    lr: float
    selected_classes: tuple[tuple[int, ...], ...]

    def csv_row(self) -> list[str]:
        sel = "|".join(" ".join(str(c) for c in s) for s in self.selected_classes)
        return [str(self.iteration), repr(self.loss), repr(self.q_mean),
                repr(self.ignored_fraction), repr(self.lr), sel]


METRIC_COLUMNS = ("iteration", "loss", "q_mean", "ignored_fraction", "lr", "selected_classes")


def augment(img: np.ndarray, config: AdaptConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random crop shared by both views; colour jitter on the student view only."""
    H, W, _ = img.shape
    if config.crop_size is not None and config.crop_size < min(H, W):
        c = config.crop_size
        y, x = int(rng.integers(0, H - c + 1)), int(rng.integers(0, W - c + 1))
        img = img[y:y + c, x:x + c]
    clean = img
    if config.jitter > 0:
        gain = rng.uniform(1.0 - config.jitter, 1.0 + config.jitter, size=3)
        student_view = np.clip(img * gain, 0.0, 1.0)
    else:
        student_view = img
    return clean, student_view


def teacher_probabilities(img: np.ndarray, teacher_text: Tensor, ev: ExpandedVocabulary,
                          params: BackboneParams, teacher: LoraSet | None) -> np.ndarray:
    with no_grad():
        logits = logits_from_text(img, teacher_text, params, teacher)
        return aggregate_concepts(logits, ev).data


def adapt_step(state: AdaptationState | None, images: Sequence[np.ndarray], vocab: Vocabulary,
               cm: ConceptMap | None, config: AdaptConfig) -> StepMetrics:
    """One optimisation step on a batch of unlabeled target images."""
    if state is None or state.teacher is None or state.student is None:
        raise ContractError("adaptation state is not initialised")
    params, rng = state.params, state.rng
    ev = expand_vocabulary(vocab, cm)
    n_classes = len(vocab)
    lr = warmup_lr(state.t, config.lr, config.warmup_lr, config.warmup_steps)
    use_topk = config.topk is not None and config.topk < n_classes

    with no_grad():
        teacher_text = encode_text(ev.vocab, params, state.teacher)
    student_text = encode_text(vocab, params, state.student)

    total: Tensor | None = None
    qs, ignored, pixels, selections = [], 0, 0, []
    for img in images:
        clean, view = augment(img, config, rng)
        probs = teacher_probabilities(clean, teacher_text, ev, params, state.teacher)
        labels = generate_pseudo_labels(probs)
        q = confidence_weight(probs, config.tau)
        weights = confident_pixels(probs, config.tau) if config.q_mode == "pixel" else None
        if config.q_mode == "pixel":
            q = ConfidenceWeight(1.0, config.tau)
        if use_topk:
            sel = select_topk(probs, config.topk)
            if config.random_fraction > 0:
                sel = randomized_selection(sel, config.random_fraction, rng)
            keep = sel.selected
            labels = remap_pseudo_labels(labels, sel)
        else:
            keep = None
            sel = ClassSelection(tuple(range(n_classes)), n_classes)
        mask = None
        if config.mask_ratio > 0:
            mask = sample_mask(view.shape[0], view.shape[1], config.mask_patch, config.mask_ratio, rng)
        student_probs = masked_forward(view, mask, student_text, params, state.student, keep)
        loss = adaptation_loss(student_probs, labels, q, weights)
        total = loss if total is None else total + loss
        qs.append(q.q if config.q_mode == "scalar" else float(weights.mean()))
        ignored += int(np.count_nonzero(labels == IGNORE))
        pixels += labels.size
        selections.append(sel.selected)

    loss = total * (1.0 / len(images))
    grads = backward(loss)
    # no supervision at all: leave the student (and the optimiser moments) untouched
    if grads and any(np.any(g) for g in grads.values()):
        state.optimizer.step(grads, lr)
    ema_update(state.teacher, state.student, config.alpha)
    state.t += 1
    return StepMetrics(state.t, float(loss.item()), float(np.mean(qs)), ignored / pixels, lr,
                       tuple(selections))


def run_adaptation(ckpt: Checkpoint, target_images: Sequence[np.ndarray], vocab: Vocabulary,
                   cm: ConceptMap | None, config: AdaptConfig,
                   state: AdaptationState | None = None) -> tuple[Checkpoint, list[StepMetrics]]:
    """Adapt ``ckpt`` on unlabeled ``target_images``; deterministic for a fixed seed."""
    if config.iterations == 0:
        return ckpt, []
    if cm is None and config.concepts_path:
        cm = load_concepts(config.concepts_path)
    state = state or init_state(ckpt, config)
    history: list[StepMetrics] = []
    for it in range(config.iterations):
        batch = [target_images[i] for i in state.next_batch(len(target_images), config.batch_size)]
        m = adapt_step(state, batch, vocab, cm, config)
        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            history.append(m)
            log.debug("iter %d loss %.4f q %.3f", m.iteration, m.loss, m.q_mean)
    out = Checkpoint(state.params, state.student, state.teacher,
                     {**ckpt.meta, "adapted": True, "adapt_config": config.to_dict()})
    return out, history


def write_metrics_csv(history: Iterable[StepMetrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in history:
            w.writerow(m.csv_row())
