from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vocalign.checkpoint import Checkpoint
from vocalign.harness.data import (
    SPLITS,
    SyntheticDatasetSpec,
    default_spec,
    generate_synthetic_domains,
    load_spec,
    load_split,
    save_domains,
)
from vocalign.harness.experiments import (
    LADDER,
    PretrainConfig,
    desk_config,
    evaluate,
    ladder_configs,
    ladder_csv,
    min_entropy_adapt,
    pretrain_source,
    run_ablation_ladder,
    run_topk_sweep,
    sweep_csv,
)
from vocalign.harness.metrics import confusion_matrix, miou, miou_dataset
from vocalign.numerics import ShapeError

from oracles import confusion_oracle, miou_oracle


def tiny_spec(n_classes=3, **kw):
    base = dict(image_size=(32, 32), n_source=10, n_source_val=10, n_target_train=10, n_target_val=10)
    base.update(kw)
    return replace(default_spec(n_classes), **base)


@pytest.fixture(scope="module")
def overfit():
    spec = tiny_spec()
    splits = generate_synthetic_domains(spec, 1)
    cfg = PretrainConfig(epochs=30, lr=5e-3, batch_size=2, seed=1, model={"d_model": 16, "d_agg": 8})
    ckpt, history = pretrain_source(splits["source"], spec.source_vocab(), cfg)
    return spec, splits, ckpt, history


# -- data -------------------------------------------------------------------------

def test_generation_is_deterministic():
    spec = tiny_spec()
    a, b = generate_synthetic_domains(spec, 4), generate_synthetic_domains(spec, 4)
    for name in SPLITS:
        assert np.array_equal(a[name].images, b[name].images)
    assert not np.array_equal(a["source"].images, generate_synthetic_domains(spec, 5)["source"].images)


def test_split_contents():
    spec = tiny_spec()
    splits = generate_synthetic_domains(spec, 2)
    assert set(splits) == set(SPLITS)
    assert splits["target_train"].labels is None
    for name in ("source", "source_val", "target_val"):
        s = splits[name]
        assert s.images.shape == (10, 32, 32, 3) and s.labels.shape == (10, 32, 32)
        assert s.labels.min() >= 0 and s.labels.max() < spec.num_classes
        assert 0.0 <= s.images.min() and s.images.max() <= 1.0


def test_default_spec_renames_half_the_classes():
    spec = default_spec()
    assert spec.num_classes == 8
    changed = [s for s, t in zip(spec.source_classes, spec.target_classes) if s != t]
    assert len(changed) == 4
    for s in changed:
        assert spec.concepts[spec.rename[s]] == [s]


def test_identity_shift_drops_renames():
    spec = default_spec().identity_shift()
    assert spec.target_classes == spec.source_classes and spec.concepts == {}
    assert spec.color_offset == (0.0, 0.0, 0.0)


def test_spec_validation():
    spec = default_spec(3)
    with pytest.raises(ValueError, match="bijection"):
        replace(spec, rename={"sky": "road"})
    with pytest.raises(ValueError):
        replace(spec, rename={"moon": "x"})
    with pytest.raises(ValueError):
        replace(spec, appearance=spec.appearance[:2])


def test_spec_dict_round_trip():
    spec = default_spec()
    assert SyntheticDatasetSpec.from_dict(spec.to_dict()) == spec


def test_disk_round_trip(tmp_path):
    spec = tiny_spec()
    splits = generate_synthetic_domains(spec, 3)
    save_domains(splits, spec, tmp_path, 3)
    assert load_spec(tmp_path) == spec
    for name in SPLITS:
        back = load_split(tmp_path, name)
        assert np.array_equal(back.images, splits[name].images)
        assert (back.labels is None) == (splits[name].labels is None)


# -- metrics -----------------------------------------------------------------------

def test_hand_two_by_two():
    r = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    assert r.per_class_iou == [0.5, 2 / 3]
    assert r.miou == pytest.approx(7 / 12, abs=1e-15)


def test_metric_extremes():
    gt = np.array([[0, 1], [1, 0]])
    assert miou(gt, gt, 2).miou == 1.0
    assert miou(1 - gt, gt, 2).miou == 0.0


def test_predicted_only_class_scores_zero():
    r = miou(np.array([[0, 2]]), np.array([[0, 0]]), 3)
    assert r.per_class_iou[2] == 0.0 and np.isnan(r.per_class_iou[1])
    assert r.miou == pytest.approx(0.25)


def test_metric_shape_error():
    with pytest.raises(ShapeError):
        miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_confusion_against_loop(n, seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, n, (3, 4)), rng.integers(0, n, (3, 4))
    assert confusion_matrix(pred, gt, n).tolist() == confusion_oracle(pred, gt, n)


def test_dataset_metric_pools_confusion():
    rng = np.random.default_rng(0)
    preds, gts = rng.integers(0, 3, (4, 5, 5)), rng.integers(0, 3, (4, 5, 5))
    _, expect = miou_oracle(preds, gts, 3)
    assert miou_dataset(preds, gts, 3).miou == pytest.approx(expect, abs=1e-15)


# -- pretraining and evaluation -------------------------------------------------------

def test_pretraining_overfits_small_set(overfit):
    spec, splits, ckpt, history = overfit
    pixels = 32 * 32
    assert len(history) == 30
    assert history[-1] / pixels < 0.1
    assert history[-1] < 0.1 * history[0]
    assert history[-1] < min(history[:15])
    assert ckpt.params.frozen and ckpt.meta["stage"] == "source"
    assert evaluate(ckpt, splits["source"], spec.source_vocab()).miou > 0.9


def test_identity_shift_zero_shot_matches_source(overfit):
    spec, splits, ckpt, _ = overfit
    same = spec.identity_shift()
    target = generate_synthetic_domains(same, 1)["target_val"]
    src = evaluate(ckpt, splits["source_val"], spec.source_vocab()).miou
    assert abs(evaluate(ckpt, target, same.target_vocab()).miou - src) < 0.03


def test_evaluate_needs_labels(overfit):
    spec, splits, ckpt, _ = overfit
    with pytest.raises(ValueError):
        evaluate(ckpt, splits["target_train"], spec.target_vocab())


def test_pretrain_needs_labels(overfit):
    spec, splits, _, _ = overfit
    with pytest.raises(ValueError):
        pretrain_source(splits["target_train"], spec.source_vocab())


# -- ladder and sweeps -----------------------------------------------------------------

def test_ladder_rows_differ_by_one_component():
    cfg = desk_config()
    rows = ladder_configs(cfg)
    assert tuple(rows) == LADDER and rows["Zero-Shot"] is None
    assert rows["Teacher-Student"].mask_ratio == 0.0 and rows["Teacher-Student"].topk is None
    assert rows["+ Masking"] == rows["Teacher-Student"].with_(mask_ratio=cfg.mask_ratio)
    assert rows["+ Vocab Alignment"] == rows["+ Masking"]
    assert rows["+ TopK"] == cfg


def test_tiny_ladder_and_sweep(overfit):
    spec, splits, ckpt, _ = overfit
    cfg = desk_config(iterations=2, warmup_steps=1, topk=2, mask_patch=4, batch_size=2)
    rows = run_ablation_ladder(ckpt, splits, spec, cfg)
    assert [r.method for r in rows] == list(LADDER)
    assert rows[0].checkpoint is ckpt
    assert all(0.0 <= r.report.miou <= 1.0 for r in rows)
    text = ladder_csv(rows, spec.num_classes)
    assert text.splitlines()[0] == "method,miou,iou_0,iou_1,iou_2"
    assert len(text.splitlines()) == 1 + len(LADDER)

    sweep = run_topk_sweep(ckpt, splits, spec, cfg, ks=(1, 5), fractions=(0.0, 1.0))
    assert [(r.k, r.random_fraction, r.class_width) for r in sweep] == \
        [(1, 0.0, 1), (1, 1.0, 1), (5, 0.0, 3), (5, 1.0, 3)]
    assert sweep_csv(sweep).splitlines()[0] == "k,random_fraction,class_width,miou"


def test_min_entropy_baseline_moves_only_adapters(overfit):
    spec, splits, ckpt, _ = overfit
    snap = {n: t.data.copy() for n, t in ckpt.params.named_tensors()}
    cfg = desk_config(iterations=2, warmup_steps=0, lr=1e-3, mask_ratio=0.0, topk=None, batch_size=10)
    out, hist = min_entropy_adapt(ckpt, splits["target_train"], spec.target_vocab(), cfg)
    assert len(hist) == 2 and isinstance(out, Checkpoint) and out.teacher_adapters is None
    assert all(np.array_equal(snap[n], t.data) for n, t in out.params.named_tensors())
    assert hist[1].loss < hist[0].loss
