"""Procedurally generated 3D referring-segmentation benchmark.

Scenes are sets of axis-aligned Gaussian point clusters. Each cluster is one
object instance whose color and nominal size are fixed by its category.
Superpoints are occupancy-grid cells intersected with instances, so a
superpoint never straddles two objects. Referring expressions are templated
token sequences over category, size, shade and proximity words.

Everything here is a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

CATEGORY_NAMES = ["chair", "table", "sofa", "lamp", "shelf", "bed", "desk", "cabinet"]

# The eight corners of a shrunken RGB cube: well separated under +-0.2 jitter.
_LO, _HI = 0.2, 0.8
BASE_COLORS = np.array(
    [[r, g, b] for r in (_LO, _HI) for g in (_LO, _HI) for b in (_LO, _HI)]
)[[4, 2, 1, 6, 3, 5, 7, 0]]

# Nominal (sx, sy, sz) extents per category, in scene units.
BASE_SIZES = np.array(
    [
        [0.6, 0.6, 0.9],
        [1.4, 0.9, 0.8],
        [2.0, 0.9, 0.8],
        [0.4, 0.4, 1.5],
        [1.0, 0.4, 1.8],
        [2.0, 1.6, 0.6],
        [1.3, 0.7, 0.8],
        [0.9, 0.5, 1.2],
    ]
)

FILLER_WORDS = [
    "the", "a", "this", "that", "is", "it", "in", "room", "find", "please",
    "object", "one", "there", "which", "with", "on", "of", "to", "and", "at",
    "select", "segment", "locate", "show", "me", "item", "thing", "placed",
    "standing", "here", "see", "you", "can", "look", "for", "point",
]
SIZE_WORDS = ["small", "large"]
SHADE_WORDS = ["dark", "light"]
RELATION_WORDS = ["near", "left-of", "right-of"]

# An attribute word is used only when the referent beats every same-category
# rival by this much (volume ratio / brightness difference).
SIZE_MARGIN = 1.0
SHADE_MARGIN = 0.1

_PREFIXES = [
    ["the"],
    ["find", "the"],
    ["please", "find", "the"],
    ["select", "the"],
    ["segment", "the"],
    ["locate", "the"],
    ["show", "me", "the"],
    ["look", "for", "the"],
    ["it", "is", "the"],
    ["point", "to", "the"],
]
_SUFFIXES = [
    [],
    [],
    ["in", "the", "room"],
    ["placed", "here"],
    ["you", "can", "see"],
    ["standing", "there"],
    ["object"],
    ["item"],
]


@dataclass(frozen=True)
class SceneConfig:
    instances_min: int = 4
    instances_max: int = 8
    points_min: int = 40
    points_max: int = 120
    n_categories: int = 8
    grid_size: float = 0.5
    room_size: float = 6.0
    color_noise: float = 0.04
    shade_range: float = 0.12
    size_jitter: float = 0.3
    min_separation: float = 1.0
    two_level_attributes: bool = True

    def validate(self) -> None:
        if self.instances_max < 1 or self.instances_min < 1:
            raise ValueError("scene config must allow at least one instance")
        if self.points_max < 1 or self.points_min < 1:
            raise ValueError("scene config must allow at least one point per instance")
        if self.instances_min > self.instances_max or self.points_min > self.points_max:
            raise ValueError("scene config ranges are inverted")
        if not 1 <= self.n_categories <= len(CATEGORY_NAMES):
            raise ValueError(f"n_categories must be in [1, {len(CATEGORY_NAMES)}]")
        if self.grid_size <= 0:
            raise ValueError("grid_size must be positive")


@dataclass(frozen=True)
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_scenes: int = 60
    samples_per_scene: int = 6
    n_val_scenes: int = 30
    unique_rate: float = 0.2


@dataclass(frozen=True)
class SplitSpec:
    labeled_ratio: float
    seed: int
    n_scenes: int = 60
    samples_per_scene: int = 6


@dataclass(eq=False)
class Scene:
    points: np.ndarray
    instance_id: np.ndarray
    category_id: np.ndarray
    superpoint_id: np.ndarray
    scene_id: int

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_superpoints(self) -> int:
        return int(self.superpoint_id.max()) + 1

    @property
    def n_instances(self) -> int:
        return int(self.instance_id.max()) + 1

    def instance_categories(self) -> np.ndarray:
        cats = np.zeros(self.n_instances, dtype=np.int64)
        cats[self.instance_id] = self.category_id
        return cats

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.instance_id, other.instance_id)
            and np.array_equal(self.category_id, other.category_id)
            and np.array_equal(self.superpoint_id, other.superpoint_id)
        )


@dataclass(eq=False)
class ReferringSample:
    sample_id: int
    scene_id: int
    tokens: np.ndarray
    gt_mask: Optional[np.ndarray]
    referent_instance: int
    is_unique: bool
    split: str = "train"

    def without_mask(self) -> "ReferringSample":
        return replace(self, gt_mask=None)

    def __eq__(self, other):
        if not isinstance(other, ReferringSample):
            return NotImplemented
        masks_equal = (self.gt_mask is None and other.gt_mask is None) or (
            self.gt_mask is not None
            and other.gt_mask is not None
            and np.array_equal(self.gt_mask, other.gt_mask)
        )
        return (
            self.sample_id == other.sample_id
            and self.scene_id == other.scene_id
            and np.array_equal(self.tokens, other.tokens)
            and masks_equal
            and self.referent_instance == other.referent_instance
            and self.is_unique == other.is_unique
            and self.split == other.split
        )


@dataclass(eq=False)
class Dataset:
    config: DatasetConfig
    seed: int
    vocab: list
    scenes: dict
    samples: list
    val_samples: list

    def scene_of(self, sample: ReferringSample) -> Scene:
        return self.scenes[sample.scene_id]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.config == other.config
            and self.seed == other.seed
            and self.vocab == other.vocab
            and self.scenes.keys() == other.scenes.keys()
            and all(self.scenes[k] == other.scenes[k] for k in self.scenes)
            and self.samples == other.samples
            and self.val_samples == other.val_samples
        )


def build_vocab(n_categories: int = 8) -> list:
    words = list(FILLER_WORDS) + SIZE_WORDS + SHADE_WORDS + RELATION_WORDS
    words += CATEGORY_NAMES[:n_categories]
    # pad with unused words so the embedding table size is a round 64
    k = 0
    while len(words) < 64:
        words.append(f"<unused{k}>")
        k += 1
    return words


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _category_layout(rng: np.random.Generator, n: int, n_categories: int) -> np.ndarray:
    """Category per instance, with at least one unique and one repeated category when possible."""
    if n == 1 or n_categories == 1:
        return np.full(n, rng.integers(n_categories), dtype=np.int64)
    cats = rng.permutation(n_categories)
    n_unique = 1 if n < 6 else int(rng.integers(1, 3))
    n_unique = min(n_unique, n - 2, n_categories - 1) if n >= 3 else 1
    rest = n - n_unique
    if rest < 2:
        return np.array(cats[: n] if n <= n_categories else rng.integers(n_categories, size=n))
    n_rep = int(rng.integers(1, rest // 2 + 1))
    n_rep = min(n_rep, n_categories - n_unique)
    counts = np.full(n_rep, 2)
    for _ in range(rest - 2 * n_rep):
        counts[rng.integers(n_rep)] += 1
    layout = list(cats[:n_unique])
    for c, k in zip(cats[n_unique : n_unique + n_rep], counts):
        layout += [c] * int(k)
    return rng.permutation(np.array(layout, dtype=np.int64))


def _superpoints(xyz: np.ndarray, instance_id: np.ndarray, grid_size: float) -> np.ndarray:
    cells = np.floor((xyz - xyz.min(axis=0)) / grid_size).astype(np.int64)
    keys = np.column_stack([instance_id, cells])
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


def generate_scene(seed: int, config: SceneConfig, scene_id: int = 0, n_instances: Optional[int] = None) -> Scene:
    config.validate()
    rng = _rng(seed, 0x5CE7E)
    n = n_instances or int(rng.integers(config.instances_min, config.instances_max + 1))
    if n < 1:
        raise ValueError("scene must contain at least one instance")
    cats = _category_layout(rng, n, config.n_categories)

    centers = []
    for _ in range(n):
        for attempt in range(200):
            c = rng.uniform(0.5, config.room_size - 0.5, size=2)
            if all(np.linalg.norm(c - o) >= config.min_separation for o in centers) or attempt == 199:
                break
        centers.append(c)

    pts, inst, cat = [], [], []
    for k in range(n):
        c = int(cats[k])
        if config.two_level_attributes:
            # small/large and dark/light are then readable from a single superpoint
            extent = BASE_SIZES[c] * (1 + config.size_jitter * rng.choice([-1.0, 1.0]))
        else:
            extent = BASE_SIZES[c] * rng.uniform(1 - config.size_jitter, 1 + config.size_jitter)
        m = int(rng.integers(config.points_min, config.points_max + 1))
        center = np.array([centers[k][0], centers[k][1], extent[2] / 2])
        xyz = center + rng.normal(size=(m, 3)) * (extent / 4)
        if config.two_level_attributes:
            shade = config.shade_range * rng.choice([-1.0, 1.0])
        else:
            shade = rng.uniform(-config.shade_range, config.shade_range)
        rgb = BASE_COLORS[c] + shade + rng.normal(scale=config.color_noise, size=(m, 3))
        pts.append(np.column_stack([xyz, np.clip(rgb, 0.0, 1.0)]))
        inst.append(np.full(m, k, dtype=np.int64))
        cat.append(np.full(m, c, dtype=np.int64))

    points = np.concatenate(pts)
    instance_id = np.concatenate(inst)
    return Scene(
        points=points,
        instance_id=instance_id,
        category_id=np.concatenate(cat),
        superpoint_id=_superpoints(points[:, :3], instance_id, config.grid_size),
        scene_id=scene_id,
    )


def instance_stats(scene: Scene) -> dict:
    """Per-instance centroid, volume proxy and mean brightness."""
    n = scene.n_instances
    counts = np.bincount(scene.instance_id, minlength=n).astype(float)
    centroid = np.stack(
        [np.bincount(scene.instance_id, scene.points[:, j], minlength=n) / counts for j in range(3)], axis=1
    )
    spread = np.stack(
        [
            np.sqrt(np.bincount(scene.instance_id, (scene.points[:, j] - centroid[scene.instance_id, j]) ** 2, minlength=n) / counts)
            for j in range(3)
        ],
        axis=1,
    )
    brightness = np.bincount(scene.instance_id, scene.points[:, 3:].mean(axis=1), minlength=n) / counts
    return {
        "centroid": centroid,
        "volume": spread.prod(axis=1),
        "brightness": brightness,
        "category": scene.instance_categories(),
        "count": counts.astype(np.int64),
    }


def _extreme(values: np.ndarray, idx: int, candidates: np.ndarray, margin: float, ratio: bool) -> Optional[int]:
    others = values[candidates[candidates != idx]]
    if len(others) == 0:
        return None
    hi, lo = others.max(), others.min()
    if ratio:
        if values[idx] > hi * (1 + margin):
            return 1
        if values[idx] * (1 + margin) < lo:
            return -1
    else:
        if values[idx] > hi + margin:
            return 1
        if values[idx] < lo - margin:
            return -1
    return None


def generate_expression(scene: Scene, referent: int, seed: int, vocab: Optional[list] = None) -> np.ndarray:
    if not 0 <= referent < scene.n_instances:
        raise ValueError(f"referent {referent} is not an instance of scene {scene.scene_id}")
    vocab = vocab or build_vocab(len(CATEGORY_NAMES))
    index = {w: i for i, w in enumerate(vocab)}
    rng = _rng(seed, scene.scene_id, referent, 0xE4E)
    stats = instance_stats(scene)
    cats = stats["category"]
    same = np.flatnonzero(cats == cats[referent])

    words = list(_PREFIXES[rng.integers(len(_PREFIXES))])
    descriptors = []
    relation = []
    if len(same) > 1:
        size = _extreme(stats["volume"], referent, same, SIZE_MARGIN, ratio=True)
        if size is not None:
            descriptors.append("large" if size > 0 else "small")
        shade = _extreme(stats["brightness"], referent, same, SHADE_MARGIN, ratio=False)
        if shade is not None:
            descriptors.append("light" if shade > 0 else "dark")
        if not descriptors:
            relation = _relation_phrase(stats, referent, same, rng)
    words += descriptors
    words.append(CATEGORY_NAMES[cats[referent]])
    words += relation
    words += _SUFFIXES[rng.integers(len(_SUFFIXES))]
    return np.array([index[w] for w in words], dtype=np.int64)


def _relation_phrase(stats: dict, referent: int, same: np.ndarray, rng: np.random.Generator) -> list:
    cats = stats["category"]
    cen = stats["centroid"][:, :2]
    options = []
    for c2 in np.unique(cats):
        if c2 == cats[referent]:
            continue
        anchors = np.flatnonzero(cats == c2)
        dist = np.array([np.linalg.norm(cen[anchors] - cen[i], axis=1).min() for i in same])
        order = np.argsort(dist)
        if same[order[0]] == referent and dist[order[1]] - dist[order[0]] > 0.1:
            options.append(["near", "the", CATEGORY_NAMES[c2]])
    x = cen[same, 0]
    if x.argmin() == np.flatnonzero(same == referent)[0] and np.sort(x)[1] - x.min() > 0.1:
        options.append(["left-of", "the", "room"])
    if x.argmax() == np.flatnonzero(same == referent)[0] and x.max() - np.sort(x)[-2] > 0.1:
        options.append(["right-of", "the", "room"])
    if not options:
        return []
    return options[rng.integers(len(options))]


def _choose_referent(scene: Scene, want_unique: bool, rng: np.random.Generator) -> int:
    cats = scene.instance_categories()
    counts = np.bincount(cats)
    multiplicity = counts[cats]
    if want_unique:
        pool = np.flatnonzero(multiplicity == 1)
    else:
        pool = np.flatnonzero(multiplicity > 1)
        # prefer referents that an attribute word can single out
        named = [i for i in pool if _has_attribute(scene, i)]
        if named:
            pool = np.array(named)
    if len(pool) == 0:
        pool = np.arange(len(cats))
    return int(rng.choice(pool))


def _has_attribute(scene: Scene, referent: int) -> bool:
    stats = instance_stats(scene)
    same = np.flatnonzero(stats["category"] == stats["category"][referent])
    return (
        _extreme(stats["volume"], referent, same, SIZE_MARGIN, ratio=True) is not None
        or _extreme(stats["brightness"], referent, same, SHADE_MARGIN, ratio=False) is not None
    )


def is_unique_referent(scene: Scene, referent: int) -> bool:
    cats = scene.instance_categories()
    return int(np.sum(cats == cats[referent])) == 1


def _make_samples(scenes, start_id, config, seed, vocab, split):
    samples = []
    rng = _rng(seed, 0x5A11, 0 if split == "train" else 1)
    sid = start_id
    for scene in scenes:
        for _ in range(config.samples_per_scene):
            referent = _choose_referent(scene, rng.random() < config.unique_rate, rng)
            tokens = generate_expression(scene, referent, int(rng.integers(2**31)), vocab)
            samples.append(
                ReferringSample(
                    sample_id=sid,
                    scene_id=scene.scene_id,
                    tokens=tokens,
                    gt_mask=scene.instance_id == referent,
                    referent_instance=referent,
                    is_unique=is_unique_referent(scene, referent),
                    split=split,
                )
            )
            sid += 1
    return samples


def generate_dataset(config: DatasetConfig = DatasetConfig(), seed: int = 0) -> Dataset:
    """Build train and validation scenes plus their referring samples."""
    vocab = build_vocab(config.scene.n_categories)
    n_total = config.n_scenes + config.n_val_scenes
    scenes = {
        i: generate_scene(int(_rng(seed, i).integers(2**31)), config.scene, scene_id=i) for i in range(n_total)
    }
    train_scenes = [scenes[i] for i in range(config.n_scenes)]
    val_scenes = [scenes[i] for i in range(config.n_scenes, n_total)]
    samples = _make_samples(train_scenes, 0, config, seed, vocab, "train")
    val = _make_samples(val_scenes, len(samples), config, seed, vocab, "val")
    return Dataset(config=config, seed=seed, vocab=vocab, scenes=scenes, samples=samples, val_samples=val)


def n_labeled_for(ratio: float, total: int) -> int:
    return max(1, int(math.floor(ratio * total + 0.5)))


def make_splits(samples: list, spec: SplitSpec) -> tuple[list, list]:
    """Partition samples into a labeled list and a mask-free unlabeled list."""
    if not 0.0 < spec.labeled_ratio <= 1.0:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {spec.labeled_ratio}")
    order = _rng(spec.seed, 0x5B117).permutation(len(samples))
    n_l = n_labeled_for(spec.labeled_ratio, len(samples))
    labeled_idx = np.sort(order[:n_l])
    unlabeled_idx = np.sort(order[n_l:])
    d_l = [samples[i] for i in labeled_idx]
    d_u = [samples[i].without_mask() for i in unlabeled_idx]
    return d_l, d_u


# ---------------------------------------------------------------------------
# Line-oriented text serialization

FORMAT_TAG = "REST3D-DATASET 1"


def encode_mask(mask: Optional[np.ndarray]) -> str:
    """Run-length encoding ``<first bit>:<run>,<run>,...``; ``-`` for a withheld mask."""
    if mask is None:
        return "-"
    m = np.asarray(mask, dtype=bool)
    if len(m) == 0:
        return "0:"
    change = np.flatnonzero(m[1:] != m[:-1]) + 1
    bounds = np.concatenate([[0], change, [len(m)]])
    runs = np.diff(bounds)
    return f"{int(m[0])}:" + ",".join(str(r) for r in runs)


def decode_mask(text: str) -> Optional[np.ndarray]:
    if text == "-":
        return None
    first, _, runs = text.partition(":")
    bit = first == "1"
    out = []
    for r in runs.split(",") if runs else []:
        out.append(np.full(int(r), bit))
        bit = not bit
    return np.concatenate(out) if out else np.zeros(0, dtype=bool)


def _config_to_dict(config: DatasetConfig) -> dict:
    return asdict(config)


def _config_from_dict(d: dict) -> DatasetConfig:
    d = dict(d)
    d["scene"] = SceneConfig(**d["scene"])
    return DatasetConfig(**d)


def save_dataset(dataset: Dataset, path) -> None:
    lines = [FORMAT_TAG]
    header = {"seed": dataset.seed, "vocab": dataset.vocab, "config": _config_to_dict(dataset.config)}
    lines.append("header " + json.dumps(header, sort_keys=True))
    for sid in sorted(dataset.scenes):
        s = dataset.scenes[sid]
        fields = [
            "scene",
            str(s.scene_id),
            str(s.n_points),
            " ".join(repr(float(v)) for v in s.points.reshape(-1)),
            " ".join(str(int(v)) for v in s.instance_id),
            " ".join(str(int(v)) for v in s.category_id),
            " ".join(str(int(v)) for v in s.superpoint_id),
        ]
        lines.append(" ".join(fields))
    for smp in dataset.samples + dataset.val_samples:
        fields = [
            "sample",
            str(smp.sample_id),
            smp.split,
            str(smp.scene_id),
            str(smp.referent_instance),
            str(int(smp.is_unique)),
            str(len(smp.tokens)),
            " ".join(str(int(t)) for t in smp.tokens),
            encode_mask(smp.gt_mask),
        ]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise ValueError(f"{path}: not a dataset file")
    header = None
    scenes, samples, val = {}, [], []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "header":
            header = json.loads(rest)
        elif kind == "scene":
            parts = rest.split()
            sid, n = int(parts[0]), int(parts[1])
            vals = parts[2:]
            pts = np.array([float(v) for v in vals[: 6 * n]]).reshape(n, 6)
            ints = np.array([int(v) for v in vals[6 * n :]], dtype=np.int64).reshape(3, n)
            scenes[sid] = Scene(pts, ints[0], ints[1], ints[2], sid)
        elif kind == "sample":
            parts = rest.split()
            n_tok = int(parts[5])
            smp = ReferringSample(
                sample_id=int(parts[0]),
                split=parts[1],
                scene_id=int(parts[2]),
                referent_instance=int(parts[3]),
                is_unique=parts[4] == "1",
                tokens=np.array([int(t) for t in parts[6 : 6 + n_tok]], dtype=np.int64),
                gt_mask=decode_mask(parts[6 + n_tok]),
            )
            (samples if smp.split == "train" else val).append(smp)
        elif kind:
            raise ValueError(f"{path}: unknown record type {kind!r}")
    if header is None:
        raise ValueError(f"{path}: missing header record")
    return Dataset(
        config=_config_from_dict(header["config"]),
        seed=header["seed"],
        vocab=header["vocab"],
        scenes=scenes,
        samples=samples,
        val_samples=val,
    )


def save_split(path, d_l: list, d_u: list, spec: SplitSpec) -> None:
    lines = [
        f"split ratio={spec.labeled_ratio!r} seed={spec.seed}",
        "labeled " + " ".join(str(s.sample_id) for s in d_l),
        "unlabeled " + " ".join(str(s.sample_id) for s in d_u),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path) -> tuple[list, list]:
    labeled, unlabeled = [], []
    for line in Path(path).read_text().splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "labeled":
            labeled = [int(v) for v in rest.split()]
        elif kind == "unlabeled":
            unlabeled = [int(v) for v in rest.split()]
    return labeled, unlabeled
