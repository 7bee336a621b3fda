"""Benchmark protocols: NPC effect and threshold sweep, toggle ablation,
and the number-of-points comparison."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable, Sequence

import numpy as np

from . import npc as npc_mod
from .masks import evaluate, iou_matrix
from .scenes import GeneratorSpec, Scene, generate_dataset
from .segmenter import SegmenterParams, encode, predict_mask
from .train import TrainConfig, evaluate_scenes, initial_params, run_adaptation, substream

TRAIN_SCENES = 20
EVAL_SCENES = 30
DEFAULT_TAUS = tuple(round(0.1 * i, 1) for i in range(10))

# toggle sets of the ablation; "direct" evaluates the source model untouched
ABLATIONS = {
    "direct": None,
    "st": {"pbr": False, "npc": False},
    "st+pbr": {"pbr": True, "npc": False},
    "st+npc": {"pbr": False, "npc": True},
    "st+pbr+npc": {"pbr": True, "npc": True},
}


def benchmark_splits(seed: int, points: int = 1, domain: str = "speckled",
                     n_train: int = TRAIN_SCENES, n_eval: int = EVAL_SCENES) -> tuple[list[Scene], list[Scene]]:
    """Disjointly seeded adaptation and held-out splits for one benchmark seed."""
    spec = GeneratorSpec(domain=domain)
    train = generate_dataset(spec, n_train, seed=100 + seed, points=points)
    held_out = generate_dataset(spec, n_eval, seed=200 + seed, points=points)
    return train, held_out


def _off_diagonal_mean(masks) -> float:
    n = len(masks)
    if n < 2:
        return float("nan")
    return float(iou_matrix(masks)[~np.eye(n, dtype=bool)].mean())


def npc_effect(scenes: Sequence[Scene], params: SegmenterParams, tau_iou: float = npc_mod.DEFAULT_TAU_IOU,
               k: int = npc_mod.DEFAULT_K, seed: int = 0) -> dict:
    """Scene-averaged quality and mutual overlap of initial vs calibrated masks."""
    rng = substream(seed, "npc-select")

    def forward(fmap, prompts):
        return predict_mask(fmap, prompts, params)

    acc = {key: [] for key in ("init_mIoU", "refined_mIoU", "init_F1", "refined_F1", "init_overlap", "refined_overlap")}
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        r = npc_mod.calibrate_detailed(forward, encode(scene.image, params), scene.prompt_sets, tau_iou, k, rng)
        before, after = evaluate(r.initial, scene.gt_masks), evaluate(r.refined, scene.gt_masks)
        acc["init_mIoU"].append(before["mIoU"])
        acc["refined_mIoU"].append(after["mIoU"])
        acc["init_F1"].append(before["F1"])
        acc["refined_F1"].append(after["F1"])
        if len(r.initial) > 1:
            acc["init_overlap"].append(_off_diagonal_mean(r.initial))
            acc["refined_overlap"].append(_off_diagonal_mean(r.refined))
    return {key: float(np.mean(v)) if v else float("nan") for key, v in acc.items()}


def tau_sweep(scenes: Sequence[Scene], params: SegmenterParams, taus: Iterable[float] = DEFAULT_TAUS,
              k: int = npc_mod.DEFAULT_K, seed: int = 0) -> list[dict]:
    return [{"tau_iou": float(t), **npc_effect(scenes, params, float(t), k, seed)} for t in taus]


def declines_after_peak(values: Sequence[float]) -> bool:
    """True when the sequence never rises again after its maximum."""
    v = list(values)
    peak = int(np.argmax(v))
    return all(b <= a for a, b in zip(v[peak:], v[peak + 1:]))


def ablation_run(seed: int, name: str, points: int = 1, config: TrainConfig | None = None) -> dict:
    """Final held-out scores of one toggle set on one benchmark seed."""
    base = config if config is not None else TrainConfig()
    base = replace(base, seed=seed, points=points)
    train, held_out = benchmark_splits(seed, points)
    toggles = ABLATIONS[name]
    if toggles is None:
        ev = evaluate_scenes(held_out, initial_params(base))
        return {"seed": seed, "config": name, "points": points, "mIoU": ev["mIoU"], "F1": ev["F1"], "history": []}
    res = run_adaptation(train, held_out, replace(base, **toggles))
    last = res.history[-1]
    return {"seed": seed, "config": name, "points": points, "mIoU": last["mIoU"], "F1": last["F1"],
            "history": res.history}


def ablation_table(seeds: Sequence[int] = (1, 2, 3), names: Sequence[str] = tuple(ABLATIONS), points: int = 1,
                   config: TrainConfig | None = None) -> list[dict]:
    return [ablation_run(s, n, points, config) for n in names for s in seeds]


def mean_by_config(rows: Sequence[dict], key: str = "mIoU") -> dict:
    out: dict[tuple, list] = {}
    for r in rows:
        out.setdefault((r["config"], r["points"]), []).append(r[key])
    return {k: float(np.mean(v)) for k, v in out.items()}


def points_sweep(values: Sequence[int] = (1, 2, 3), seeds: Sequence[int] = (1, 2, 3),
                 names: Sequence[str] = ("st", "st+pbr+npc"), config: TrainConfig | None = None) -> list[dict]:
    return [ablation_run(s, n, int(p), config) for p in values for n in names for s in seeds]

