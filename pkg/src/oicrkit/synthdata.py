"""Synthetic weakly-labelled detection bags.

Each image holds a few objects, each with a "part" rectangle inside it.
A class owns a block of feature dimensions split in two halves: the first
responds to how tightly a proposal sits on the part, the second to how much
of the whole object it covers. ``part_bias`` weights the part half, so a
scorer trained from image labels alone tends to lock onto part-sized boxes.

Randomness comes from numpy's PCG64 bit generator seeded with
``SceneConfig.seed``; one stream is consumed per dataset in a fixed order.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box

FORMAT_VERSION = "oicr-ds-1"
FEATURE_MAGIC = b"OICRFEAT"
OVERSHOOT_PENALTY = 0.25

# proposal jitter
JITTER_SCALE = (0.7, 1.3)
JITTER_SHIFT = 0.2
BOX_JITTERS_PER_OBJECT = 6
PART_JITTERS_PER_OBJECT = 8

OBJECT_SIZE = (0.25, 0.55)  # fraction of canvas side
PART_SIZE = (0.6, 0.8)  # fraction of object side
RANDOM_BOX_SIZE = (0.15, 0.6)


@dataclass
class SceneConfig:
    canvas_width: float = 128.0
    canvas_height: float = 128.0
    num_classes: int = 4
    feature_dim: int = 32
    proposals_per_image: int = 64
    images: int = 200
    objects_per_image_range: tuple[int, int] = (1, 3)
    part_bias: float = 0.6
    feature_noise_sigma: float = 0.05
    seed: int = 7

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < max(8, 2 * self.num_classes):
            raise ValueError(f"feature_dim must be >= 8 and give each class 2 dims, got {self.feature_dim}")
        lo, hi = self.objects_per_image_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad objects_per_image_range {self.objects_per_image_range}")
        if hi > self.num_classes:
            raise ValueError("objects per image cannot exceed num_classes (classes are distinct)")
        if self.images < 1 or self.canvas_width <= 0 or self.canvas_height <= 0:
            raise ValueError("image count and canvas size must be positive")
        needed = hi * (BOX_JITTERS_PER_OBJECT + PART_JITTERS_PER_OBJECT)
        if self.proposals_per_image < max(needed, 2):
            raise ValueError(f"proposals_per_image must be >= {needed}")
        if not 0.0 <= self.part_bias <= 1.0:
            raise ValueError(f"part_bias must lie in [0, 1], got {self.part_bias}")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be >= 0")

    @property
    def canvas(self) -> Box:
        return Box(0.0, 0.0, self.canvas_width, self.canvas_height)


@dataclass(frozen=True)
class GroundTruthObject:
    box: Box
    part_box: Box
    class_index: int


@dataclass
class Bag:
    image_id: int
    proposals: list[Box]
    features: np.ndarray  # (|R|, D), float32 values
    label: np.ndarray  # (C,) of 0/1
    ground_truth: list[GroundTruthObject] = field(default_factory=list)

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    @property
    def positive_classes(self) -> list[int]:
        """1-based indices of classes present in the image."""
        return [int(c) + 1 for c in np.flatnonzero(self.label)]

    def proposal_array(self) -> np.ndarray:
        return np.array([p.as_tuple() for p in self.proposals], dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.image_id == other.image_id
                and self.proposals == other.proposals
                and self.ground_truth == other.ground_truth
                and np.array_equal(self.label, other.label)
                and self.features.dtype == other.features.dtype
                and np.array_equal(self.features, other.features))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def class_block(class_index: int, cfg: SceneConfig) -> tuple[slice, slice]:
    """(part half, whole half) of the dims owned by a 1-based class index."""
    block = cfg.feature_dim // cfg.num_classes
    start = (class_index - 1) * block
    mid = start + block // 2
    return slice(start, mid), slice(mid, start + block)


def signature(class_index: int, cfg: SceneConfig) -> np.ndarray:
    """Block one-hot embedding of a 1-based class index."""
    part, whole = class_block(class_index, cfg)
    sig = np.zeros(cfg.feature_dim)
    sig[part] = 1.0
    sig[whole] = 1.0
    return sig


def _overlap(p: Box, b: Box) -> float:
    w = min(p.x_max, b.x_max) - max(p.x_min, b.x_min)
    h = min(p.y_max, b.y_max) - max(p.y_min, b.y_min)
    return w * h if (w > 0 and h > 0) else 0.0


def cover(p: Box, b: Box) -> float:
    """Fraction of ``b`` covered by ``p``."""
    return _overlap(p, b) / b.area if b.area > 0 else 0.0


def purity(p: Box, b: Box) -> float:
    """Fraction of ``p`` occupied by ``b``."""
    return _overlap(p, b) / p.area if p.area > 0 else 0.0


def overshoot(p: Box, obj: Box) -> float:
    """Fraction of ``p`` lying outside ``obj``; zero when they do not touch."""
    inter = _overlap(p, obj)
    if inter == 0.0 or p.area <= 0:
        return 0.0
    return (p.area - inter) / p.area


def featurize_proposal(p: Box, scene: list[GroundTruthObject], cfg: SceneConfig,
                       noise_source: np.random.Generator | None) -> np.ndarray:
    feat = np.zeros(cfg.feature_dim)
    for obj in scene:
        part, whole = class_block(obj.class_index, cfg)
        penalty = OVERSHOOT_PENALTY * overshoot(p, obj.box)
        feat[part] += cfg.part_bias * purity(p, obj.part_box) - penalty
        feat[whole] += (1.0 - cfg.part_bias) * cover(p, obj.box) - penalty
    if noise_source is not None and cfg.feature_noise_sigma > 0:
        feat += cfg.feature_noise_sigma * noise_source.standard_normal(cfg.feature_dim)
    return feat


def _clip_box(x0, y0, x1, y1, cfg: SceneConfig) -> Box:
    x0 = min(max(x0, 0.0), cfg.canvas_width)
    x1 = min(max(x1, 0.0), cfg.canvas_width)
    y0 = min(max(y0, 0.0), cfg.canvas_height)
    y1 = min(max(y1, 0.0), cfg.canvas_height)
    return Box(float(x0), float(y0), float(x1), float(y1))


def _jitter(b: Box, rng: np.random.Generator, cfg: SceneConfig) -> Box:
    s = rng.uniform(*JITTER_SCALE)
    dx, dy = rng.uniform(-JITTER_SHIFT, JITTER_SHIFT, size=2)
    cx = 0.5 * (b.x_min + b.x_max) + dx * b.width
    cy = 0.5 * (b.y_min + b.y_max) + dy * b.height
    hw, hh = 0.5 * s * b.width, 0.5 * s * b.height
    return _clip_box(cx - hw, cy - hh, cx + hw, cy + hh, cfg)


def _random_box(rng: np.random.Generator, cfg: SceneConfig, size_range) -> Box:
    w = rng.uniform(*size_range) * cfg.canvas_width
    h = rng.uniform(*size_range) * cfg.canvas_height
    x0 = rng.uniform(0.0, cfg.canvas_width - w)
    y0 = rng.uniform(0.0, cfg.canvas_height - h)
    return Box(float(x0), float(y0), float(x0 + w), float(y0 + h))


def _make_object(class_index: int, rng: np.random.Generator, cfg: SceneConfig) -> GroundTruthObject:
    box = _random_box(rng, cfg, OBJECT_SIZE)
    pw = rng.uniform(*PART_SIZE) * box.width
    ph = rng.uniform(*PART_SIZE) * box.height
    px = rng.uniform(box.x_min, box.x_max - pw)
    py = rng.uniform(box.y_min, box.y_max - ph)
    part = Box(float(px), float(py), float(min(px + pw, box.x_max)), float(min(py + ph, box.y_max)))
    return GroundTruthObject(box=box, part_box=part, class_index=class_index)


def generate_image(image_id: int, rng: np.random.Generator, cfg: SceneConfig) -> Bag:
    lo, hi = cfg.objects_per_image_range
    n_obj = int(rng.integers(lo, hi + 1))
    classes = sorted(int(c) + 1 for c in rng.choice(cfg.num_classes, size=n_obj, replace=False))
    scene = [_make_object(c, rng, cfg) for c in classes]

    proposals = []
    for obj in scene:
        proposals += [_jitter(obj.box, rng, cfg) for _ in range(BOX_JITTERS_PER_OBJECT)]
        proposals += [_jitter(obj.part_box, rng, cfg) for _ in range(PART_JITTERS_PER_OBJECT)]
    while len(proposals) < cfg.proposals_per_image:
        proposals.append(_random_box(rng, cfg, RANDOM_BOX_SIZE))
    order = rng.permutation(len(proposals))
    proposals = [proposals[i] for i in order]

    feats = np.stack([featurize_proposal(p, scene, cfg, rng) for p in proposals])
    label = np.zeros(cfg.num_classes, dtype=np.int64)
    for obj in scene:
        label[obj.class_index - 1] = 1
    return Bag(image_id=image_id, proposals=proposals, features=feats.astype(np.float32),
               label=label, ground_truth=scene)


def generate_dataset(cfg: SceneConfig) -> list[Bag]:
    cfg.validate()
    rng = make_rng(cfg.seed)
    return [generate_image(i, rng, cfg) for i in range(cfg.images)]


# -- serialization -----------------------------------------------------------

class DatasetError(Exception):
    """Raised when a dataset directory cannot be decoded."""

    kind = "dataset"

    def __init__(self, path, offset: int, detail: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.kind} error in {self.path} at offset {offset}: {detail}")


class DatasetFormatError(DatasetError):
    kind = "format"


class DatasetVersionError(DatasetError):
    kind = "version"


class TruncatedPayloadError(DatasetError):
    kind = "truncated payload"


class ChecksumError(DatasetError):
    kind = "checksum"


def _box_list(b: Box) -> list[float]:
    return list(b.as_tuple())


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(bags: list[Bag], path, cfg: SceneConfig | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not bags:
        raise ValueError("refusing to save an empty dataset")
    num_classes = int(bags[0].label.shape[0])
    dim = int(bags[0].features.shape[1])

    payload = bytearray(FEATURE_MAGIC)
    images = []
    for bag in bags:
        feats = np.ascontiguousarray(bag.features, dtype="<f4")
        if feats.shape != (bag.num_proposals, dim):
            raise ValueError(f"image {bag.image_id}: feature shape {feats.shape} mismatch")
        payload += feats.tobytes()
        images.append({
            "image_id": bag.image_id,
            "num_proposals": bag.num_proposals,
            "label": [int(v) for v in bag.label],
            "proposals": [_box_list(p) for p in bag.proposals],
            "ground_truth": [
                {"class_index": o.class_index, "box": _box_list(o.box),
                 "part_box": _box_list(o.part_box)}
                for o in bag.ground_truth
            ],
        })
    manifest = {
        "version": FORMAT_VERSION,
        "num_classes": num_classes,
        "feature_dim": dim,
        "features_crc32": zlib.crc32(bytes(payload)),
        "config": _config_to_json(cfg) if cfg is not None else None,
        "images": images,
    }
    atomic_write_bytes(path / "features.bin", bytes(payload))
    atomic_write_bytes(path / "manifest.json",
                       json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8"))


def _config_to_json(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["objects_per_image_range"] = list(cfg.objects_per_image_range)
    return d


def load_config(path) -> SceneConfig | None:
    with open(Path(path) / "manifest.json", encoding="utf-8") as fh:
        raw = json.load(fh).get("config")
    if raw is None:
        return None
    raw["objects_per_image_range"] = tuple(raw["objects_per_image_range"])
    return SceneConfig(**raw)


def load_dataset(path) -> list[Bag]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    feat_path = path / "features.bin"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(manifest_path, exc.pos, "manifest is not valid JSON") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(manifest_path, 0,
                                  f"expected {FORMAT_VERSION!r}, found {manifest.get('version')!r}")

    data = feat_path.read_bytes()
    if data[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DatasetFormatError(feat_path, 0, "bad magic, expected OICRFEAT")
    dim = int(manifest["feature_dim"])
    num_classes = int(manifest["num_classes"])

    bags = []
    offset = len(FEATURE_MAGIC)
    for entry in manifest["images"]:
        n = int(entry["num_proposals"])
        nbytes = n * dim * 4
        if offset + nbytes > len(data):
            rows = (len(data) - offset) // (dim * 4)
            raise TruncatedPayloadError(
                feat_path, offset,
                f"image {entry['image_id']} declares {n} rows, only {rows} present")
        feats = np.frombuffer(data, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim)
        offset += nbytes
        label = np.array(entry["label"], dtype=np.int64)
        if label.shape != (num_classes,):
            raise DatasetFormatError(manifest_path, 0, f"image {entry['image_id']}: bad label length")
        bags.append(Bag(
            image_id=int(entry["image_id"]),
            proposals=[Box(*p) for p in entry["proposals"]],
            features=feats.astype(np.float32),
            label=label,
            ground_truth=[GroundTruthObject(box=Box(*o["box"]), part_box=Box(*o["part_box"]),
                                            class_index=int(o["class_index"]))
                          for o in entry["ground_truth"]],
        ))
    if offset != len(data):
        raise DatasetFormatError(feat_path, offset, f"{len(data) - offset} trailing bytes")
    crc = zlib.crc32(data)
    if crc != manifest["features_crc32"]:
        raise ChecksumError(feat_path, 0,
                            f"crc32 {crc:#010x} != manifest {manifest['features_crc32']:#010x}")
    return bags
