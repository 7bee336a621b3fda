"""Central finite-difference checks for every analytic gradient.

Each suite draws seeded random problems, compares the analytic gradient with
``(f(x + h) - f(x - h)) / 2h`` entry by entry and reports the worst relative
error ``max|a - n| / max(max|a|, max|n|)`` per checked array.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import dice_loss, focal_loss, soft_iou_loss, total_loss
from .prototypes import PrototypeSet, distance_matrix, hungarian_match, matching_loss
from .segmenter import (
    NEGATIVE,
    POSITIVE,
    TRAINABLE,
    PointPrompt,
    _encode_cells,
    backward,
    encode,
    init_params,
    predict_mask,
)

STEP = 1e-5
TOLERANCE = 1e-4
CONFIGS = 50
# pre-activations closer than this to the relu kink are resampled
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    suite: str
    name: str
    config: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric) -> float:
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2.0 * step)
    return g


# --- segmenter ------------------------------------------------------------------------


def _random_prompts(rng, size, n_pos, n_neg):
    pts = [PointPrompt(int(rng.integers(size)), int(rng.integers(size)), POSITIVE) for _ in range(n_pos)]
    pts += [PointPrompt(int(rng.integers(size)), int(rng.integers(size)), NEGATIVE) for _ in range(n_neg)]
    return pts


def random_segmenter_problem(seed: int):
    """A small image, perturbed parameters, prompts and a random linear loss."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    while True:
        channels = int(rng.integers(4, 9))
        rank = int(rng.integers(1, 4))
        stride = int(rng.choice([2, 4]))
        size = stride * int(rng.integers(3, 6))
        params = init_params(int(rng.integers(1 << 16)), channels=channels, rank=rank, stride=stride)
        params = params.with_updates(
            A1=rng.normal(0, 0.3, params.A1.shape),
            B1=rng.normal(0, 0.3, params.B1.shape),
            e_pos=rng.normal(0, 0.2, channels),
            e_neg=rng.normal(0, 0.2, channels),
            a_pos=rng.uniform(1, 8),
            a_neg=rng.uniform(1, 8),
            c=rng.uniform(-4, 2),
        )
        image = rng.uniform(0, 1, size=(1, size, size))
        _, h, _ = _encode_cells(image, params)
        if np.abs(h).min() > KINK_MARGIN:
            break
    n_inst = int(rng.integers(1, 4))
    prompt_sets = [_random_prompts(rng, size, int(rng.integers(1, 3)), int(rng.integers(0, 3))) for _ in range(n_inst)]
    logit_w = [rng.normal(size=(size, size)) for _ in range(n_inst)]
    feat_w = rng.normal(size=(channels, size // stride, size // stride))
    return params, image, prompt_sets, logit_w, feat_w


def _segmenter_objective(params, image, prompt_sets, logit_w, feat_w):
    fmap = encode(image, params)
    total = float(np.sum(feat_w * fmap))
    for prompts, w in zip(prompt_sets, logit_w):
        total += float(np.sum(w * predict_mask(fmap, prompts, params)))
    return total


def check_segmenter(seed: int) -> list[CheckResult]:
    params, image, prompt_sets, logit_w, feat_w = random_segmenter_problem(seed)
    grads = backward(image, prompt_sets, logit_w, params, feature_grad=feat_w).as_dict()
    out = []
    for name in TRAINABLE:
        base = np.asarray(getattr(params, name), dtype=np.float64)

        def f(x, name=name):
            v = float(x) if x.ndim == 0 else x
            return _segmenter_objective(params.with_updates(**{name: v}), image, prompt_sets, logit_w, feat_w)

        out.append(CheckResult("segmenter", name, seed, relative_error(grads[name], numeric_grad(f, base))))
    return out


# --- mask losses ------------------------------------------------------------------------


def check_losses(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x105]))
    shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    logits = rng.normal(0, 3, size=shape)
    target = rng.random(shape) < rng.uniform(0.1, 0.9)
    out = []
    for name, fn in (("focal", focal_loss), ("dice", dice_loss), ("soft_iou", soft_iou_loss)):
        num = numeric_grad(lambda x: fn(x, target)["value"], logits)
        out.append(CheckResult("losses", name, seed, relative_error(fn(logits, target)["grad"], num)))

    n_inst = int(rng.integers(1, 4))
    stack = rng.normal(0, 3, size=(n_inst, *shape))
    labels = [rng.random(shape) < 0.4 for _ in range(n_inst)]
    lf, lm = rng.uniform(1, 30), rng.uniform(0, 1)
    r = total_loss(list(stack), labels, 0.7, lf, lm)
    num = numeric_grad(lambda x: total_loss(list(x), labels, 0.7, lf, lm)["value"], stack)
    out.append(CheckResult("losses", "total", seed, relative_error(np.stack(r["logit_grads"]), num)))
    return out


# --- matching loss ------------------------------------------------------------------------


def check_matching(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A7]))
    d = int(rng.integers(2, 9))
    targets = PrototypeSet(rng.normal(size=(int(rng.integers(1, 7)), d)), "target")
    pred = rng.normal(size=(int(rng.integers(1, 7)), d))
    P = PrototypeSet(pred, "predicted")
    D = distance_matrix(targets, P)
    assignment = hungarian_match(D)
    res = matching_loss(D, assignment, targets, P)

    def f(x):
        px = PrototypeSet(x, "predicted")
        return matching_loss(distance_matrix(targets, px), assignment, targets, px)["value"]

    return [CheckResult("matching", "matching_loss", seed, relative_error(res["grad_predicted"], numeric_grad(f, pred)))]


SUITES = {"segmenter": check_segmenter, "losses": check_losses, "matching": check_matching}


def run_all(configs: int = CONFIGS, suites=None) -> list[CheckResult]:
    names = list(SUITES) if suites is None else list(suites)
    results = []
    for name in names:
        for seed in range(configs):
            results.extend(SUITES[name](seed))
    return results


def summarize(results: list[CheckResult]) -> list[dict]:
    """Worst error per (suite, name) across configurations."""
    worst: dict[tuple[str, str], CheckResult] = {}
    for r in results:
        key = (r.suite, r.name)
        if key not in worst or r.max_rel_error > worst[key].max_rel_error:
            worst[key] = r
    return [
        {"suite": k[0], "name": k[1], "worst_config": r.config, "max_rel_error": r.max_rel_error, "passed": r.passed}
        for k, r in worst.items()
    ]


if __name__ == "__main__":
    t0 = time.perf_counter()
    for row in summarize(run_all()):
        print(row)
    print(f"{time.perf_counter() - t0:.1f}s")
