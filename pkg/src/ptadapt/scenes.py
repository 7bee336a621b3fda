"""Seeded synthetic dense scenes and point-prompt sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .npc import InstancePromptSet
from .segmenter import NEGATIVE, POSITIVE, PointPrompt

DOMAINS = ("clean", "cluttered", "speckled")
SHAPES = ("rectangle", "ellipse", "ring")
MAX_ATTEMPTS = 200


@dataclass(frozen=True)
class GeneratorSpec:
    size: int = 64
    min_objects: int = 6
    max_objects: int = 14
    shapes: tuple[str, ...] = SHAPES
    min_gap: int = 1
    contrast: float = 0.15
    domain: str = "speckled"
    background: float = 0.35
    min_extent: int = 8
    max_extent: int = 20
    speckle_sigma: float = 0.3
    clutter_blobs: int = 6

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.size < 8 or self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("invalid scene size or object count range")
        if self.min_extent < 1 or self.max_extent < self.min_extent or self.max_extent > self.size:
            raise ValueError("invalid object extent range")
        if self.min_gap < 0:
            raise ValueError("min_gap must be non-negative")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        unknown = set(self.shapes) - set(SHAPES)
        if not self.shapes or unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown generator fields {sorted(unknown)}")
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        return d


@dataclass
class Instance:
    instance_id: int
    gt_mask: np.ndarray
    prompts: InstancePromptSet
    shape: str = "rectangle"


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # (C, H, W) float in [0, 1]
    instances: list[Instance]
    domain_tag: str
    seed: int
    points: int = 1

    @property
    def height(self) -> int:
        return self.image.shape[-2]

    @property
    def width(self) -> int:
        return self.image.shape[-1]

    @property
    def gt_masks(self) -> list[np.ndarray]:
        return [inst.gt_mask for inst in self.instances]

    @property
    def prompt_sets(self) -> list[InstancePromptSet]:
        return [inst.prompts for inst in self.instances]

    def with_prompts(self, prompt_sets) -> "Scene":
        insts = [
            Instance(inst.instance_id, inst.gt_mask, ps, inst.shape)
            for inst, ps in zip(self.instances, prompt_sets)
        ]
        return Scene(self.scene_id, self.image, insts, self.domain_tag, self.seed, self.points)


def _shape_mask(shape, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    r = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2
    if shape == "ellipse":
        m = r <= 1.0
    else:
        inner = rng.uniform(0.25, 0.45)
        m = (r <= 1.0) & (r >= inner)
    if not m.any():
        m[int(cy), int(cx)] = True
    return m


def _dilate(mask, radius):
    if radius <= 0:
        return mask
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            src = mask[max(0, -dy): h - max(0, dy), max(0, -dx): w - max(0, dx)]
            out[max(0, dy): h - max(0, -dy), max(0, dx): w - max(0, -dx)] |= src
    return out


def _box_blur(img):
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy: dy + h, dx: dx + w]
    return acc / 9.0


def generate_scene(spec: GeneratorSpec, seed: int, scene_id: str | None = None, points: int = 1) -> Scene:
    """Place disjoint shapes by rejection sampling and render one scene.

    Object intensities vary per instance around ``background + contrast``,
    so neighbouring objects are similar but not identical.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE]))
    size = spec.size
    target = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((size, size), dtype=bool)
    blocked = np.zeros((size, size), dtype=bool)
    placed = []
    shapes = list(spec.shapes)
    if spec.domain == "speckled" and "ring" in shapes:
        weights = np.array([2.0 if s == "ring" else 1.0 for s in shapes])
    else:
        weights = np.ones(len(shapes))
    weights /= weights.sum()
    for _ in range(target):
        for _attempt in range(MAX_ATTEMPTS):
            shape = shapes[int(rng.choice(len(shapes), p=weights))]
            h = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            w = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            y0 = int(rng.integers(0, size - h + 1))
            x0 = int(rng.integers(0, size - w + 1))
            local = _shape_mask(shape, h, w, rng)
            full = np.zeros((size, size), dtype=bool)
            full[y0: y0 + h, x0: x0 + w] = local
            if (full & blocked).any():
                continue
            occupied |= full
            blocked |= _dilate(full, spec.min_gap)
            placed.append((shape, full))
            break
        else:
            break
    if not placed:
        raise ValueError(f"no object could be placed for seed {seed}")

    img = np.full((size, size), spec.background)
    if spec.domain == "cluttered":
        for _ in range(spec.clutter_blobs):
            r = rng.uniform(2.0, 6.0)
            cy, cx = rng.uniform(0, size, size=2)
            yy, xx = np.mgrid[0:size, 0:size]
            blob = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
            blob &= ~occupied
            img[blob] = spec.background + spec.contrast * rng.uniform(0.4, 1.2)
    for _, m in placed:
        img[m] = spec.background + spec.contrast * rng.uniform(0.6, 1.6)
    if spec.domain == "speckled":
        img = img * (1.0 + spec.speckle_sigma * rng.standard_normal(img.shape))
    img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)

    instances = []
    prompt_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A7]))
    for idx, (shape, m) in enumerate(placed):
        ps = sample_prompts(m, points, prompt_rng, instance_id=idx)
        instances.append(Instance(idx, m, ps, shape))
    sid = scene_id if scene_id is not None else f"scene_{seed:06d}"
    return Scene(sid, img[None], instances, spec.domain, seed, points)


def sample_prompts(gt_mask, n: int, rng: np.random.Generator, instance_id: int = 0) -> InstancePromptSet:
    """``n`` positives inside the mask and ``n`` negatives outside it."""
    if n < 1:
        raise ValueError("need at least one point per instance")
    m = np.asarray(gt_mask, dtype=bool)
    inside = np.flatnonzero(m.ravel())
    outside = np.flatnonzero(~m.ravel())
    if inside.size == 0 or outside.size == 0:
        raise ValueError("mask must be non-empty and must not cover the whole image")
    w = m.shape[1]
    pos = rng.choice(inside, size=n, replace=inside.size < n)
    neg = rng.choice(outside, size=n, replace=outside.size < n)
    return InstancePromptSet(
        instance_id,
        tuple(PointPrompt(int(i % w), int(i // w), POSITIVE) for i in pos),
        tuple(PointPrompt(int(i % w), int(i // w), NEGATIVE) for i in neg),
    )


def resample_prompts(scene: Scene, n: int, seed: int) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, seed, n, 0x9A7]))
    sets = [sample_prompts(inst.gt_mask, n, rng, inst.instance_id) for inst in scene.instances]
    out = scene.with_prompts(sets)
    out.points = n
    return out


def generate_dataset(spec: GeneratorSpec, count: int, seed: int, points: int = 1) -> list[Scene]:
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [
        generate_scene(spec, int(s), scene_id=f"scene_{i:05d}", points=points)
        for i, s in enumerate(seeds)
    ]
