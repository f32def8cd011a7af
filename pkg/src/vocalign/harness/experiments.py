"""Source pretraining, evaluation, the entropy baseline, ablation ladder and Top-K sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..adaptation import AdaptConfig, StepMetrics, init_state, run_adaptation
from ..checkpoint import Checkpoint
from ..model import BackboneParams, ModelConfig, Vocabulary, encode_text, logits_from_text, predict
from ..numerics import backward, entropy_map, one_hot, pixelwise_cross_entropy, softmax
from ..optim import AdamW, warmup_lr
from .data import Split, SyntheticDatasetSpec, default_spec, generate_synthetic_domains
from .metrics import MetricsReport, miou_dataset

log = logging.getLogger(__name__)

BENCHMARK_SEED = 17


# ---------------------------------------------------------------------------
# source pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    lr: float = 2e-3
    batch_size: int = 4
    seed: int = 0
    model: dict | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model or {})

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, path: str | Path) -> "PretrainConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(raw.get("pretrain", raw))


def pretrain_source(source: Split, vocab: Vocabulary, config: PretrainConfig = PretrainConfig(),
                    params: BackboneParams | None = None) -> tuple[Checkpoint, list[float]]:
    """Fit every base weight with summed pixel cross-entropy; returns the frozen model
    and the mean per-image loss of each epoch."""
    if source.labels is None:
        raise ValueError("pretraining needs a labeled source split")
    params = params or BackboneParams.init(config.model_config(), config.seed)
    params.unfreeze()
    opt = AdamW(params.parameters())
    rng = np.random.default_rng(config.seed)
    n = len(source)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            text = encode_text(vocab, params)
            loss = None
            for i in idx:
                probs = softmax(logits_from_text(source.images[i], text, params), axis=-1)
                li = pixelwise_cross_entropy(probs, one_hot(source.labels[i], len(vocab)))
                loss = li if loss is None else loss + li
            loss = loss * (1.0 / len(idx))
            opt.step(backward(loss), config.lr)
            total += loss.item() * len(idx)
        history.append(total / n)
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    params.freeze()
    meta = {"stage": "source", "pretrain": asdict(config), "classes": list(vocab.classes)}
    return Checkpoint(params, None, None, meta), history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(ckpt: Checkpoint, split: Split, vocab: Vocabulary, use: str = "student") -> MetricsReport:
    """mIoU of the student (default) or teacher adapters over a labeled split."""
    if split.labels is None:
        raise ValueError("evaluation needs labels")
    adapters = ckpt.adapters if use == "student" else ckpt.teacher_adapters
    start = time.perf_counter()
    preds = predict(split.images, vocab, ckpt.params, adapters)
    report = miou_dataset(preds, split.labels, len(vocab))
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# entropy-minimisation baseline
# ---------------------------------------------------------------------------

def min_entropy_adapt(ckpt: Checkpoint, target: Split, vocab: Vocabulary,
                      config: AdaptConfig) -> tuple[Checkpoint, list[StepMetrics]]:
    """LoRA-only minimisation of mean per-pixel prediction entropy (no teacher)."""
    if config.iterations == 0:
        return ckpt, []
    state = init_state(ckpt, config)
    history = []
    for _ in range(config.iterations):
        batch = state.next_batch(len(target), config.batch_size)
        lr = warmup_lr(state.t, config.lr, config.warmup_lr, config.warmup_steps)
        text = encode_text(vocab, state.params, state.student)
        loss = None
        for i in batch:
            probs = softmax(logits_from_text(target.images[i], text, state.params, state.student), axis=-1)
            li = entropy_map(probs).mean()
            loss = li if loss is None else loss + li
        loss = loss * (1.0 / len(batch))
        state.optimizer.step(backward(loss), lr)
        state.t += 1
        history.append(StepMetrics(state.t, loss.item(), float("nan"), 0.0, lr, ()))
    out = Checkpoint(state.params, state.student, None,
                     {**ckpt.meta, "adapted": True, "method": "min_entropy"})
    return out, history


# ---------------------------------------------------------------------------
# ablation ladder and sweeps
# ---------------------------------------------------------------------------

LADDER = ("Zero-Shot", "Min-Entropy", "Teacher-Student", "+ Masking", "+ Vocab Alignment", "+ TopK")


def ladder_configs(config: AdaptConfig) -> dict[str, AdaptConfig | None]:
    """Cumulative row configurations; Top-K is off until the last row."""
    ts = config.with_(mask_ratio=0.0, topk=None)
    return {
        "Zero-Shot": None,
        "Min-Entropy": config.with_(mask_ratio=0.0, topk=None),
        "Teacher-Student": ts,
        "+ Masking": ts.with_(mask_ratio=config.mask_ratio),
        "+ Vocab Alignment": ts.with_(mask_ratio=config.mask_ratio),
        "+ TopK": config,
    }


@dataclass
class LadderRow:
    method: str
    report: MetricsReport
    checkpoint: Checkpoint
    history: list[StepMetrics]


def run_ablation_ladder(ckpt: Checkpoint, splits: dict[str, Split], spec: SyntheticDatasetSpec,
                        config: AdaptConfig, rows: Sequence[str] = LADDER) -> list[LadderRow]:
    """Run each ladder row from the same source checkpoint and seed."""
    vocab, cm = spec.target_vocab(), spec.concept_map()
    target, val = splits["target_train"].unlabeled(), splits["target_val"]
    cfgs = ladder_configs(config)
    out = []
    for name in rows:
        cfg = cfgs[name]
        start = time.perf_counter()
        if cfg is None:
            adapted, hist = ckpt, []
        elif name == "Min-Entropy":
            adapted, hist = min_entropy_adapt(ckpt, target, vocab, cfg)
        else:
            concepts = cm if name in ("+ Vocab Alignment", "+ TopK") else None
            adapted, hist = run_adaptation(ckpt, list(target.images), vocab, concepts, cfg)
        report = evaluate(adapted, val, vocab)
        report.config = {} if cfg is None else cfg.to_dict()
        report.seed = None if cfg is None else cfg.seed
        report.wall_clock = time.perf_counter() - start
        log.info("%-18s mIoU %.4f", name, report.miou)
        out.append(LadderRow(name, report, adapted, hist))
    return out


def ladder_csv(rows: Sequence[LadderRow], num_classes: int) -> str:
    """Deterministic CSV text (no timings)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "miou"] + [f"iou_{c}" for c in range(num_classes)])
    for r in rows:
        w.writerow([r.method, f"{r.report.miou:.10f}"] + [f"{v:.10f}" for v in r.report.per_class_iou])
    return buf.getvalue()


@dataclass
class SweepRow:
    k: int
    random_fraction: float
    class_width: int
    miou: float


def run_topk_sweep(ckpt: Checkpoint, splits: dict[str, Split], spec: SyntheticDatasetSpec,
                   config: AdaptConfig, ks: Sequence[int],
                   fractions: Sequence[float] = (0.0,)) -> list[SweepRow]:
    """Full method at each K (and random-replacement fraction); class width is the memory proxy."""
    vocab, cm = spec.target_vocab(), spec.concept_map()
    target, val = splits["target_train"].unlabeled(), splits["target_val"]
    n = spec.num_classes
    rows = []
    for k in ks:
        for frac in fractions:
            cfg = config.with_(topk=k, random_fraction=frac)
            adapted, _ = run_adaptation(ckpt, list(target.images), vocab, cm, cfg)
            report = evaluate(adapted, val, vocab)
            rows.append(SweepRow(k, frac, min(k, n), report.miou))
            log.info("K=%d fraction=%.2f mIoU %.4f", k, frac, report.miou)
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "random_fraction", "class_width", "miou"])
    for r in rows:
        w.writerow([r.k, r.random_fraction, r.class_width, f"{r.miou:.10f}"])
    return buf.getvalue()


def desk_config(**overrides) -> AdaptConfig:
    """Desk-scale adaptation recipe used by the benchmark and the CLI defaults."""
    base = dict(iterations=600, warmup_steps=50, lr=3e-4, warmup_lr=3e-5, topk=4,
                mask_ratio=0.5, mask_patch=8, seed=BENCHMARK_SEED)
    base.update(overrides)
    return AdaptConfig(**base)


def prepare_benchmark(seed: int = BENCHMARK_SEED):
    """Default spec, its splits and a freshly pretrained source checkpoint, all from ``seed``."""
    spec = default_spec()
    splits = generate_synthetic_domains(spec, seed)
    ckpt, _ = pretrain_source(splits["source"], spec.source_vocab(), PretrainConfig(seed=seed))
    return spec, splits, ckpt
