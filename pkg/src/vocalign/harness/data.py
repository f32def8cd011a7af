"""Synthetic source/target segmentation domains.

Images are Voronoi layouts; every cell is filled with its class's colour,
an oriented sinusoidal texture and Gaussian noise. The target domain adds a
colour offset, scales the noise, and renames part of the vocabulary so that
some target class names were never seen during source training.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..model import Vocabulary
from ..vocab_align import ConceptMap

SPLITS = ("source", "source_val", "target_train", "target_val")


@dataclass(frozen=True)
class ClassAppearance:
    color: tuple[float, float, float]
    frequency: float      # texture cycles per pixel
    amplitude: float
    noise: float


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    source_classes: tuple[str, ...]
    appearance: tuple[ClassAppearance, ...]
    rename: dict[str, str] = field(default_factory=dict)   # source name -> target name
    concepts: dict[str, list[str]] = field(default_factory=dict)  # target name -> concepts
    image_size: tuple[int, int] = (64, 64)
    n_source: int = 200
    n_source_val: int = 50
    n_target_train: int = 200
    n_target_val: int = 50
    seeds_range: tuple[int, int] = (3, 6)
    color_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_multiplier: float = 1.0

    def __post_init__(self):
        n = len(self.source_classes)
        if n == 0:
            raise ValueError("dataset needs at least one class")
        if len(self.appearance) != n:
            raise ValueError("one appearance entry per class is required")
        if any(k not in self.source_classes for k in self.rename):
            raise ValueError("rename keys must be source class names")
        targets = self.target_classes
        if len(set(targets)) != len(targets):
            raise ValueError("renaming must be a bijection onto distinct target names")
        lo, hi = self.seeds_range
        if not 1 <= lo <= hi:
            raise ValueError("seeds_range must satisfy 1 <= lo <= hi")

    @property
    def num_classes(self) -> int:
        return len(self.source_classes)

    @property
    def target_classes(self) -> tuple[str, ...]:
        return tuple(self.rename.get(c, c) for c in self.source_classes)

    def source_vocab(self, templates=None) -> Vocabulary:
        return Vocabulary(self.source_classes, templates) if templates else Vocabulary(self.source_classes)

    def target_vocab(self, templates=None) -> Vocabulary:
        return Vocabulary(self.target_classes, templates) if templates else Vocabulary(self.target_classes)

    def concept_map(self) -> ConceptMap:
        return ConceptMap.from_dict(self.concepts)

    def identity_shift(self) -> "SyntheticDatasetSpec":
        d = self.to_dict()
        d.update(rename={}, concepts={}, color_offset=(0.0, 0.0, 0.0), noise_multiplier=1.0)
        return SyntheticDatasetSpec.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["appearance"] = [asdict(a) for a in self.appearance]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        d["source_classes"] = tuple(d["source_classes"])
        d["appearance"] = tuple(ClassAppearance(tuple(a["color"]), a["frequency"], a["amplitude"], a["noise"])
                                for a in d["appearance"])
        for key in ("image_size", "seeds_range", "color_offset"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticDatasetSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


DEFAULT_SOURCE_CLASSES = ("sky", "road", "building", "tree", "automobile", "pedestrian", "water", "grass")
DEFAULT_RENAME = {"automobile": "car", "pedestrian": "person", "tree": "vegetation", "grass": "terrain"}
DEFAULT_CONCEPTS = {"car": ["automobile"], "person": ["pedestrian"],
                    "vegetation": ["tree"], "terrain": ["grass"]}


def default_spec(num_classes: int = 8, appearance_seed: int = 3) -> SyntheticDatasetSpec:
    """The desk-scale benchmark: 8 classes, 64x64 images, half the names changed."""
    if num_classes > len(DEFAULT_SOURCE_CLASSES):
        names = tuple(f"class{i}" for i in range(num_classes))
        rename, concepts = {}, {}
    else:
        names = DEFAULT_SOURCE_CLASSES[:num_classes]
        rename = {k: v for k, v in DEFAULT_RENAME.items() if k in names}
        concepts = {v: [k] for k, v in rename.items()}
    return SyntheticDatasetSpec(
        source_classes=names,
        appearance=random_appearance(num_classes, appearance_seed),
        rename=rename,
        concepts=concepts,
        color_offset=(0.08, -0.04, 0.06),
        noise_multiplier=1.5,
    )


def random_appearance(num_classes: int, seed: int, min_dist: float = 0.25) -> tuple[ClassAppearance, ...]:
    """Well-separated class colours with distinct texture frequencies."""
    rng = np.random.default_rng(seed)
    colors: list[np.ndarray] = []
    while len(colors) < num_classes:
        c = rng.uniform(0.15, 0.85, size=3)
        if all(np.linalg.norm(c - o) >= min_dist for o in colors):
            colors.append(c)
        elif rng.random() < 0.01:
            min_dist *= 0.95  # relax when the colour cube fills up
    freqs = rng.permutation(np.linspace(0.04, 0.3, num_classes))
    return tuple(
        ClassAppearance(tuple(float(round(v, 4)) for v in colors[i]), float(round(freqs[i], 4)),
                        float(round(rng.uniform(0.05, 0.12), 4)), float(round(rng.uniform(0.02, 0.06), 4)))
        for i in range(num_classes)
    )


@dataclass
class Split:
    images: np.ndarray                 # [n, H, W, 3]
    labels: np.ndarray | None = None   # [n, H, W]; absent for unlabeled splits

    def __len__(self) -> int:
        return len(self.images)

    def unlabeled(self) -> "Split":
        return Split(self.images, None)


def _render(spec: SyntheticDatasetSpec, rng: np.random.Generator, target: bool) -> tuple[np.ndarray, np.ndarray]:
    H, W = spec.image_size
    lo, hi = spec.seeds_range
    n_seeds = int(rng.integers(lo, hi + 1))
    pts = rng.uniform(0, [H, W], size=(n_seeds, 2))
    cls = rng.integers(0, spec.num_classes, size=n_seeds)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    cell = np.argmin(d2, axis=-1)
    labels = cls[cell]

    img = np.empty((H, W, 3))
    noise_mult = spec.noise_multiplier if target else 1.0
    for k in range(n_seeds):
        app = spec.appearance[cls[k]]
        theta, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * app.frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        region = cell == k
        fill = np.asarray(app.color) + app.amplitude * wave[..., None]
        fill = fill + rng.normal(0.0, app.noise * noise_mult, size=(H, W, 3))
        img[region] = fill[region]
    if target:
        img = img + np.asarray(spec.color_offset)
    return np.clip(img, 0.0, 1.0), labels.astype(np.int64)


def _make_split(spec: SyntheticDatasetSpec, n: int, rng: np.random.Generator, target: bool) -> Split:
    H, W = spec.image_size
    images = np.empty((n, H, W, 3))
    labels = np.empty((n, H, W), dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = _render(spec, rng, target)
    return Split(images, labels)


def generate_synthetic_domains(spec: SyntheticDatasetSpec, seed: int) -> dict[str, Split]:
    """Labeled source and source-val, unlabeled target-train, labeled target-val."""
    if spec.num_classes == 0:
        raise ValueError("degenerate spec")
    root = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(len(SPLITS))]
    return {
        "source": _make_split(spec, spec.n_source, rngs[0], target=False),
        "source_val": _make_split(spec, spec.n_source_val, rngs[1], target=False),
        "target_train": _make_split(spec, spec.n_target_train, rngs[2], target=True).unlabeled(),
        "target_val": _make_split(spec, spec.n_target_val, rngs[3], target=True),
    }


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/spec.json, <dir>/concepts.json, <dir>/<split>.npz
# ---------------------------------------------------------------------------

def save_domains(splits: dict[str, Split], spec: SyntheticDatasetSpec, out_dir: str | Path, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps({**spec.to_dict(), "seed": seed}, indent=2) + "\n", encoding="utf-8")
    (out / "concepts.json").write_text(json.dumps(spec.concepts, indent=2) + "\n", encoding="utf-8")
    for name, split in splits.items():
        arrays = {"images": split.images}
        if split.labels is not None:
            arrays["labels"] = split.labels
        np.savez_compressed(out / f"{name}.npz", **arrays)


def load_spec(data_dir: str | Path) -> SyntheticDatasetSpec:
    d = json.loads((Path(data_dir) / "spec.json").read_text(encoding="utf-8"))
    d.pop("seed", None)
    return SyntheticDatasetSpec.from_dict(d)


def load_split(data_dir: str | Path, name: str) -> Split:
    with np.load(Path(data_dir) / f"{name}.npz") as z:
        return Split(z["images"], z["labels"] if "labels" in z.files else None)
