"""Negative prompt calibration.

Instances whose initial masks overlap lend their positive prompts to each
other as negatives, and every instance is re-decoded with its original
positives plus the borrowed negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .masks import binarize, iou_matrix
from .segmenter import NEGATIVE, POSITIVE, PointPrompt

DEFAULT_TAU_IOU = 0.1
DEFAULT_K = 1


@dataclass(frozen=True)
class InstancePromptSet:
    instance_id: int
    positives: tuple[PointPrompt, ...]
    negatives: tuple[PointPrompt, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if not self.positives:
            raise ValueError(f"instance {self.instance_id} has no positive prompt")
        if any(p.polarity != POSITIVE for p in self.positives):
            raise ValueError("positives must all have positive polarity")
        if any(p.polarity != NEGATIVE for p in self.negatives):
            raise ValueError("negatives must all have negative polarity")

    @property
    def prompts(self) -> list[PointPrompt]:
        return list(self.positives) + list(self.negatives)

    def with_negatives(self, negatives: Sequence[PointPrompt]) -> "InstancePromptSet":
        negs = tuple(PointPrompt(p.x, p.y, NEGATIVE) for p in negatives)
        return InstancePromptSet(self.instance_id, self.positives, negs)


# ``forward(fmap, prompts) -> logits``: a bound segmenter decoder
Forward = Callable[[np.ndarray, Sequence[PointPrompt]], np.ndarray]


def initial_masks(forward: Forward, fmap, prompt_sets: Sequence[InstancePromptSet]) -> list[np.ndarray]:
    return [binarize(forward(fmap, ps.prompts)) for ps in prompt_sets]


def candidate_negatives(O, prompt_sets: Sequence[InstancePromptSet], tau_iou: float) -> list[list[PointPrompt]]:
    """Positives of every other instance whose mask overlaps with IoU >= tau."""
    O = np.asarray(O, dtype=np.float64)
    n = len(prompt_sets)
    if O.shape != (n, n):
        raise ValueError(f"IoU matrix shape {O.shape} does not match {n} instances")
    out = []
    for i in range(n):
        cands = []
        for j in range(n):
            if j != i and O[i, j] >= tau_iou:
                cands.extend(prompt_sets[j].positives)
        out.append(cands)
    return out


def select_negatives(candidates: Sequence[PointPrompt], k: int, rng: np.random.Generator) -> list[PointPrompt]:
    """Uniform ``k``-subset without replacement, kept in candidate order."""
    if k < 1:
        raise ValueError("k must be positive")
    if len(candidates) <= k:
        return list(candidates)
    idx = np.sort(rng.choice(len(candidates), size=k, replace=False))
    return [candidates[i] for i in idx]


@dataclass
class CalibrationResult:
    initial: list[np.ndarray]
    refined: list[np.ndarray]
    overlap: np.ndarray
    candidates: list[list[PointPrompt]]
    prompt_sets: list[InstancePromptSet]


def calibrate_detailed(
    forward: Forward,
    fmap,
    prompt_sets: Sequence[InstancePromptSet],
    tau_iou: float = DEFAULT_TAU_IOU,
    k: int = DEFAULT_K,
    rng: np.random.Generator | None = None,
) -> CalibrationResult:
    if rng is None:
        rng = np.random.default_rng(0)
    initial = initial_masks(forward, fmap, prompt_sets)
    O = iou_matrix(initial)
    cands = candidate_negatives(O, prompt_sets, tau_iou)
    new_sets, refined = [], []
    for ps, cand, init in zip(prompt_sets, cands, initial):
        if not cand:
            # nothing overlaps: keep the annotated negatives and the mask
            new_sets.append(ps)
            refined.append(init)
            continue
        calibrated = ps.with_negatives(select_negatives(cand, k, rng))
        new_sets.append(calibrated)
        refined.append(binarize(forward(fmap, calibrated.prompts)))
    return CalibrationResult(initial, refined, O, cands, new_sets)


def calibrate(
    forward: Forward,
    fmap,
    prompt_sets: Sequence[InstancePromptSet],
    tau_iou: float = DEFAULT_TAU_IOU,
    k: int = DEFAULT_K,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    return calibrate_detailed(forward, fmap, prompt_sets, tau_iou, k, rng).refined
