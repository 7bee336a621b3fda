"""Self-training loop with prototype matching and negative prompt calibration."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import npc as npc_mod
from .losses import total_loss
from .masks import binarize, per_instance_scores
from .prototypes import (
    MemoryBank,
    PrototypeSet,
    bank_push,
    build_target_prototypes,
    cluster_bank,
    distance_matrix,
    extract_point_features,
    hungarian_match,
    matching_loss,
)
from .scenes import Instance, Scene, _box_blur
from .segmenter import (
    TRAINABLE,
    PointPrompt,
    SegmenterGrads,
    SegmenterParams,
    backward,
    encode,
    init_params,
    predict_mask,
    source_params,
)

log = logging.getLogger(__name__)

# fixed ids for the named random substreams derived from the config seed
STREAMS = {"init": 0, "data-order": 1, "augment": 2, "npc-select": 3}


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch: int = 1
    lora_rank: int = 4
    lambda_focal: float = 20.0
    lambda_match: float = 0.1
    tau_iou: float = 0.1
    npc_k: int = 1
    bank_capacity: int = 512
    max_instances_per_image: int = 50
    points: int = 1
    steps: int = 220
    seed: int = 0
    self_training: bool = True
    pbr: bool = True
    npc: bool = True
    channels: int = 16
    stride: int = 4
    model_seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.lambda_focal < 0 or self.lambda_match < 0:
            raise ValueError("loss weights must be non-negative")
        if self.points < 1 or self.npc_k < 1 or self.bank_capacity < 1:
            raise ValueError("points, npc_k and bank_capacity must be >= 1")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.steps < 0 or self.max_instances_per_image < 1:
            raise ValueError("steps must be >= 0 and max_instances_per_image >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"toggles"}
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k in names}
        kw.update(d.get("toggles", {}))
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[name]]))


# --- augmentation ------------------------------------------------------------


@dataclass
class View:
    image: np.ndarray
    gt_masks: list[np.ndarray]
    prompt_sets: list[npc_mod.InstancePromptSet]
    flipped: bool


def _flip_prompt(p: PointPrompt, width: int) -> PointPrompt:
    return PointPrompt(width - 1 - p.x, p.y, p.polarity)


def flip_view(scene: Scene, flip: bool) -> View:
    if not flip:
        return View(scene.image, scene.gt_masks, scene.prompt_sets, False)
    w = scene.width
    sets = [
        npc_mod.InstancePromptSet(
            ps.instance_id,
            tuple(_flip_prompt(p, w) for p in ps.positives),
            tuple(_flip_prompt(p, w) for p in ps.negatives),
        )
        for ps in scene.prompt_sets
    ]
    return View(scene.image[..., ::-1].copy(), [m[:, ::-1].copy() for m in scene.gt_masks], sets, True)


def augment_weak(scene: Scene, rng: np.random.Generator) -> View:
    """Horizontal flip with probability 0.5."""
    return flip_view(scene, bool(rng.random() < 0.5))


@dataclass(frozen=True)
class PhotometricDraw:
    noise: np.ndarray | None
    brightness: float
    contrast: float
    blur: bool


def draw_photometric(shape, rng: np.random.Generator) -> PhotometricDraw:
    return PhotometricDraw(
        noise=rng.standard_normal(shape),
        brightness=float(rng.uniform(0.8, 1.25)),
        contrast=float(rng.uniform(0.8, 1.25)),
        blur=bool(rng.random() < 0.3),
    )


def apply_photometric(image: np.ndarray, draw: PhotometricDraw, noise_sigma: float = 0.05) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if draw.noise is not None:
        img = img + noise_sigma * draw.noise
    img = img * draw.brightness
    mean = img.mean()
    img = (img - mean) * draw.contrast + mean
    if draw.blur:
        img = np.stack([_box_blur(ch) for ch in img])
    return np.clip(img, 0.0, 1.0)


def augment_strong(scene: Scene, weak_flip: bool, rng: np.random.Generator, draw: PhotometricDraw | None = None) -> View:
    """Same flip as the weak view, then photometric-only perturbations."""
    base = flip_view(scene, weak_flip)
    if draw is None:
        draw = draw_photometric(base.image.shape, rng)
    return View(apply_photometric(base.image, draw), base.gt_masks, base.prompt_sets, weak_flip)


# --- optimiser -----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: SegmenterParams, grads: SegmenterGrads, state: OptimizerState, config: TrainConfig,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with decoupled weight decay on the trainable parameters."""
    g = grads.as_dict()
    cur = params.arrays()
    t = state.step + 1
    m_new, v_new, updates = {}, {}, {}
    for name in TRAINABLE:
        p = cur[name]
        gi = g[name]
        if gi.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {gi.shape}, expected {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * gi
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * gi * gi
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new = p - config.lr * m_hat / (np.sqrt(v_hat) + eps) - config.lr * config.weight_decay * p
        m_new[name], v_new[name], updates[name] = m, v, new
    return params.with_updates(**updates), OptimizerState(m_new, v_new, t)


# --- training step ---------------------------------------------------------------


@dataclass
class StepResult:
    params: SegmenterParams
    bank: MemoryBank
    state: OptimizerState
    losses: dict[str, float]


def _prototype_term(fmap, prompt_sets, bank, targets, stride):
    """Push current positives into the bank and backprop the matching loss
    into the teacher feature map (current-step entries only)."""
    positives = [p for ps in prompt_sets for p in ps.positives]
    feats = extract_point_features(fmap, positives, stride)
    keep = np.linalg.norm(feats, axis=1) > 0
    if not keep.all():
        log.debug("dropping %d zero-norm point features", int((~keep).sum()))
    feats = feats[keep]
    positives = [p for p, k in zip(positives, keep) if k]
    bank = bank_push(bank, feats)
    grad = np.zeros_like(fmap)
    if len(bank) < 2 or targets is None:
        return bank, 0.0, grad
    predicted, clusters = cluster_bank(bank)
    D = distance_matrix(targets, predicted)
    assignment = hungarian_match(D)
    res = matching_loss(D, assignment, targets, predicted)
    counts = np.bincount(clusters.labels, minlength=clusters.k)
    n_now = min(len(positives), len(bank))
    first = len(bank) - n_now
    for offset, p in enumerate(positives[len(positives) - n_now:]):
        j = clusters.labels[first + offset]
        grad[:, p.y // stride, p.x // stride] += res["grad_predicted"][j] / counts[j]
    return bank, res["value"], grad


def train_step(scene: Scene, params: SegmenterParams, bank: MemoryBank, target_prototypes: PrototypeSet | None,
               config: TrainConfig, rng_augment: np.random.Generator, rng_npc: np.random.Generator,
               state: OptimizerState | None = None) -> StepResult:
    if not scene.instances:
        raise ValueError(f"scene {scene.scene_id} has no instances")
    state = OptimizerState() if state is None else state
    scene = Scene(scene.scene_id, scene.image, scene.instances[: config.max_instances_per_image],
                  scene.domain_tag, scene.seed, scene.points)
    s = config.stride

    weak = augment_weak(scene, rng_augment)
    strong = augment_strong(scene, weak.flipped, rng_augment)

    # teacher: same weights, weak view, outputs used as constants
    f_teacher = encode(weak.image, params)

    def forward(fmap, prompts):
        return predict_mask(fmap, prompts, params, s)

    if config.npc:
        pseudo = npc_mod.calibrate(forward, f_teacher, weak.prompt_sets, config.tau_iou, config.npc_k, rng_npc)
    else:
        pseudo = npc_mod.initial_masks(forward, f_teacher, weak.prompt_sets)

    match_value, feat_grad = 0.0, None
    if config.pbr:
        bank, match_value, g = _prototype_term(f_teacher, weak.prompt_sets, bank, target_prototypes, s)
        feat_grad = config.lambda_match * g

    f_student = encode(strong.image, params)
    prompts = [ps.prompts for ps in strong.prompt_sets]
    student_logits = [predict_mask(f_student, p, params, s) for p in prompts]
    loss = total_loss(student_logits, pseudo, match_value, config.lambda_focal, config.lambda_match,
                      use_match=config.pbr)

    grads = SegmenterGrads.zeros_like(params)
    if config.self_training:
        grads = grads + backward(strong.image, prompts, loss["logit_grads"], params, s)
    if feat_grad is not None:
        grads = grads + backward(weak.image, [], [], params, s, feature_grad=feat_grad)
    new_params, new_state = adam_step(params, grads, state, config)
    breakdown = {k: loss[k] for k in ("value", "focal", "dice", "iou", "match")}
    return StepResult(new_params, bank, new_state, breakdown)


# --- evaluation and the outer loop -------------------------------------------------


def predict_scene(scene: Scene, params: SegmenterParams) -> list[np.ndarray]:
    fmap = encode(scene.image, params)
    return [binarize(predict_mask(fmap, inst.prompts.prompts, params)) for inst in scene.instances]


def evaluate_scenes(scenes: Sequence[Scene], params: SegmenterParams) -> dict:
    """Instance-pooled mean IoU and Dice over scenes (sorted by id)."""
    rows = []
    for scene in sorted(scenes, key=lambda sc: sc.scene_id):
        preds = predict_scene(scene, params)
        for inst, (iou, dice) in zip(scene.instances, per_instance_scores(preds, scene.gt_masks)):
            rows.append((scene.scene_id, inst.instance_id, iou, dice))
    if not rows:
        raise ValueError("no instances to evaluate")
    return {
        "mIoU": float(np.mean([r[2] for r in rows])),
        "F1": float(np.mean([r[3] for r in rows])),
        "rows": rows,
    }


HISTORY_COLUMNS = ("epoch", "mIoU", "F1", "loss_focal", "loss_dice", "loss_iou", "loss_match")


@dataclass
class AdaptationResult:
    params: SegmenterParams
    history: list[dict]
    target_prototypes: PrototypeSet | None
    bank: MemoryBank
    steps: int


def initial_params(config: TrainConfig) -> SegmenterParams:
    return init_params(config.model_seed, channels=config.channels, rank=config.lora_rank, stride=config.stride)


def run_adaptation(train_scenes: Sequence[Scene], eval_scenes: Sequence[Scene], config: TrainConfig,
                   params: SegmenterParams | None = None,
                   target_prototypes: PrototypeSet | None = None) -> AdaptationResult:
    if not train_scenes:
        raise ValueError("adaptation split is empty")
    params = initial_params(config) if params is None else params
    if config.pbr and target_prototypes is None:
        src = source_params(params)
        target_prototypes = build_target_prototypes(train_scenes, lambda im: encode(im, src), config.stride)
    data_rng = substream(config.seed, "data-order")
    aug_rng = substream(config.seed, "augment")
    npc_rng = substream(config.seed, "npc-select")

    base = evaluate_scenes(eval_scenes, params) if eval_scenes else {"mIoU": float("nan"), "F1": float("nan")}
    history = [{"epoch": 0, "mIoU": base["mIoU"], "F1": base["F1"], "loss_focal": 0.0, "loss_dice": 0.0,
                "loss_iou": 0.0, "loss_match": 0.0}]
    bank = MemoryBank(config.bank_capacity)
    state = OptimizerState()
    done, epoch = 0, 0
    while done < config.steps:
        epoch += 1
        sums = {"focal": 0.0, "dice": 0.0, "iou": 0.0, "match": 0.0}
        n = 0
        for idx in data_rng.permutation(len(train_scenes)):
            if done >= config.steps:
                break
            r = train_step(train_scenes[int(idx)], params, bank, target_prototypes, config, aug_rng, npc_rng, state)
            params, bank, state = r.params, r.bank, r.state
            for k in sums:
                sums[k] += r.losses[k]
            n += 1
            done += 1
        ev = evaluate_scenes(eval_scenes, params) if eval_scenes else {"mIoU": float("nan"), "F1": float("nan")}
        history.append({"epoch": epoch, "mIoU": ev["mIoU"], "F1": ev["F1"],
                        **{f"loss_{k}": v / max(n, 1) for k, v in sums.items()}})
        log.info("epoch %d: mIoU %.4f F1 %.4f", epoch, ev["mIoU"], ev["F1"])
    return AdaptationResult(params, history, target_prototypes, bank, done)
