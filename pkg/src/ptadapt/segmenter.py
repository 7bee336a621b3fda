"""A small promptable segmenter with a low-rank adapter.

Image encoder: every ``s x s`` patch is embedded by a frozen affine map
``z0 = W0 @ patch + b0`` and mixed by ``relu((W1 + A1 @ B1) @ z0)``. Only the
adapter factors ``A1``/``B1`` are trainable in the encoder.

Prompt encoder and mask decoder: positive prompts are averaged into a query
``q_pos`` (negative prompts into ``q_neg``) after adding a learned
per-polarity embedding; every feature cell scores
``a_pos * cos(F, q_pos) - a_neg * cos(F, q_neg) + c`` and the score is
broadcast to the cell's pixel block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

NORM_EPS = 1e-8
POS_PERIOD = 96.0

FROZEN = ("W0", "b0", "Wp", "W1")
TRAINABLE = ("A1", "B1", "e_pos", "e_neg", "a_pos", "a_neg", "c")

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    polarity: str = POSITIVE

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be positive or negative, got {self.polarity!r}")

    @property
    def positive(self) -> bool:
        return self.polarity == POSITIVE


@dataclass
class SegmenterParams:
    W0: np.ndarray
    b0: np.ndarray
    Wp: np.ndarray
    W1: np.ndarray
    A1: np.ndarray
    B1: np.ndarray
    e_pos: np.ndarray
    e_neg: np.ndarray
    a_pos: float
    a_neg: float
    c: float
    stride: int = 4
    in_channels: int = 1
    pos_period: float = POS_PERIOD

    @property
    def channels(self) -> int:
        return self.W1.shape[0]

    @property
    def rank(self) -> int:
        return self.A1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Every parameter as a float64 array, scalars as shape ``()``."""
        return {name: np.asarray(getattr(self, name), dtype=np.float64) for name in FROZEN + TRAINABLE}

    def copy(self) -> "SegmenterParams":
        kw = {k: (v.copy() if v.ndim else float(v)) for k, v in self.arrays().items()}
        return replace(self, **kw)

    def with_updates(self, **values) -> "SegmenterParams":
        kw = {}
        for k, v in values.items():
            kw[k] = float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=np.float64)
        return replace(self, **kw)


@dataclass
class SegmenterGrads:
    A1: np.ndarray
    B1: np.ndarray
    e_pos: np.ndarray
    e_neg: np.ndarray
    a_pos: float
    a_neg: float
    c: float

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(getattr(self, k), dtype=np.float64) for k in TRAINABLE}

    def __add__(self, other: "SegmenterGrads") -> "SegmenterGrads":
        a, b = self.as_dict(), other.as_dict()
        return SegmenterGrads(**{k: a[k] + b[k] for k in TRAINABLE})

    @classmethod
    def zeros_like(cls, params: SegmenterParams) -> "SegmenterGrads":
        return cls(
            A1=np.zeros_like(params.A1),
            B1=np.zeros_like(params.B1),
            e_pos=np.zeros_like(params.e_pos),
            e_neg=np.zeros_like(params.e_neg),
            a_pos=0.0,
            a_neg=0.0,
            c=0.0,
        )


def init_params(
    seed: int,
    channels: int = 16,
    rank: int = 4,
    stride: int = 4,
    in_channels: int = 1,
    a_pos: float = 8.0,
    a_neg: float = 4.0,
    c: float = -4.0,
    mixing_noise: float = 0.03,
    **embedding,
) -> SegmenterParams:
    """Seeded frozen source weights plus a fresh adapter (``B1 = 0``).

    Extra keyword arguments go to the source patch embedding.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6]))
    patch = stride * stride * in_channels
    W0, b0, Wp = source_embedding(rng, channels, patch, **embedding)
    W1 = np.eye(channels) + rng.normal(0.0, mixing_noise, size=(channels, channels))
    A1 = rng.uniform(-0.01, 0.01, size=(channels, rank))
    # float32-representable so a fresh checkpoint reloads exactly
    W0, b0, Wp, W1, A1 = (_f32(a) for a in (W0, b0, Wp, W1, A1))
    return SegmenterParams(
        W0=W0,
        b0=b0,
        Wp=Wp,
        W1=W1,
        A1=A1,
        B1=np.zeros((rank, channels)),
        e_pos=np.zeros(channels),
        e_neg=np.zeros(channels),
        a_pos=float(a_pos),
        a_neg=float(a_neg),
        c=float(c),
        stride=stride,
        in_channels=in_channels,
    )


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def source_embedding(rng, channels, patch, position_channels=None, intensity_channels=None,
                     gain=4.0, texture_gain=1.0, position_gain=0.6,
                     up_range=(0.40, 0.60), down_range=(0.42, 0.36)):
    """Frozen patch and position embedding of the source model.

    Channel groups, in order:

    * position: ``position_gain * cos(theta - phase)`` for four phases per
      axis, ``theta = 2 pi * coord / POS_PERIOD``;
    * intensity: "up" ramps ``gain * (mean - t)`` with thresholds above the
      usual background level and "down" ramps below the usual object level,
      so background and objects excite mostly disjoint channels after relu;
    * texture: zero-mean random filters that fire on edges and speckle.
    """
    if position_channels is None:
        position_channels = 4 * (channels // 8)
    if intensity_channels is None:
        intensity_channels = max(1, (5 * (channels - position_channels)) // 8)
    if position_channels % 4 or position_channels + intensity_channels > channels:
        raise ValueError("bad channel split for the source embedding")
    W0 = np.zeros((channels, patch))
    b0 = np.zeros(channels)
    Wp = np.zeros((channels, 4))
    k = 0
    for axis in range(2 if position_channels else 0):
        for r in range(position_channels // 2):
            phase = 2.0 * np.pi * r / (position_channels // 2)
            Wp[k, 2 * axis] = position_gain * np.cos(phase)
            Wp[k, 2 * axis + 1] = position_gain * np.sin(phase)
            k += 1
    n_up = intensity_channels - intensity_channels // 3
    mean_filter = np.full(patch, 1.0 / patch)
    for t in np.linspace(*up_range, n_up):
        W0[k] = gain * mean_filter
        b0[k] = -gain * t
        k += 1
    for t in np.linspace(*down_range, intensity_channels - n_up):
        W0[k] = -gain * mean_filter
        b0[k] = gain * t
        k += 1
    while k < channels:
        w = rng.normal(size=patch)
        w -= w.mean()
        W0[k] = w / np.linalg.norm(w) * texture_gain
        k += 1
    return W0, b0, Wp


def patchify(image: np.ndarray, stride: int) -> np.ndarray:
    """``(C, H, W)`` image to ``(cells, C*s*s)`` rows, cells in row-major order."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide image size {h}x{w}")
    hc, wc = h // stride, w // stride
    x = img.reshape(c, hc, stride, wc, stride).transpose(1, 3, 0, 2, 4)
    return x.reshape(hc * wc, c * stride * stride)


def position_basis(rows: int, cols: int, stride: int, period: float = POS_PERIOD) -> np.ndarray:
    """``(cells, 4)`` rows of ``[cos tx, sin tx, cos ty, sin ty]`` at cell centres."""
    yy, xx = np.mgrid[0:rows, 0:cols]
    tx = 2.0 * np.pi * (xx.ravel() + 0.5) * stride / period
    ty = 2.0 * np.pi * (yy.ravel() + 0.5) * stride / period
    return np.stack([np.cos(tx), np.sin(tx), np.cos(ty), np.sin(ty)], axis=1)


def _encode_cells(image, params: SegmenterParams):
    img = np.asarray(image, dtype=np.float64)
    X = patchify(img, params.stride)
    if X.shape[1] != params.W0.shape[1]:
        raise ValueError(f"patch size {X.shape[1]} does not match W0 input {params.W0.shape[1]}")
    rows, cols = img.shape[-2] // params.stride, img.shape[-1] // params.stride
    z0 = X @ params.W0.T + params.b0
    if np.any(params.Wp):
        z0 = z0 + position_basis(rows, cols, params.stride, params.pos_period) @ params.Wp.T
    W = params.W1 + params.A1 @ params.B1
    h = z0 @ W.T
    return z0, h, np.maximum(h, 0.0)


def encode(image, params: SegmenterParams) -> np.ndarray:
    """Feature map of shape ``(channels, H/s, W/s)``."""
    img = np.asarray(image)
    hh, ww = img.shape[-2:]
    s = params.stride
    if hh % s or ww % s:
        raise ValueError(f"stride {s} does not divide image size {hh}x{ww}")
    _, _, F = _encode_cells(image, params)
    return F.T.reshape(params.channels, hh // s, ww // s)


def source_params(params: SegmenterParams) -> SegmenterParams:
    """The frozen source model: same weights with the adapter product removed."""
    return params.with_updates(B1=np.zeros_like(params.B1))


def merge_lora(params: SegmenterParams) -> SegmenterParams:
    """Fold ``A1 @ B1`` into ``W1`` and zero both adapter factors."""
    return params.with_updates(
        W1=params.W1 + params.A1 @ params.B1,
        A1=np.zeros_like(params.A1),
        B1=np.zeros_like(params.B1),
    )


def _split_prompts(prompts, n_cells_r, n_cells_c, stride):
    pos, neg = [], []
    h, w = n_cells_r * stride, n_cells_c * stride
    for p in prompts:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise ValueError(f"prompt ({p.x}, {p.y}) outside a {w}x{h} image")
        cell = (p.y // stride) * n_cells_c + (p.x // stride)
        (pos if p.positive else neg).append(cell)
    if not pos:
        raise ValueError("at least one positive prompt is required")
    return np.array(pos, dtype=np.intp), np.array(neg, dtype=np.intp)


def _cosines(F, q):
    fn = np.linalg.norm(F, axis=1)
    qn = np.linalg.norm(q)
    return (F @ q) / ((fn + NORM_EPS) * (qn + NORM_EPS)), fn, qn


def _decode_cells(F, pos, neg, params):
    q_pos = F[pos].mean(axis=0) + params.e_pos
    cos_pos, _, _ = _cosines(F, q_pos)
    logits = params.a_pos * cos_pos + params.c
    if neg.size:
        q_neg = F[neg].mean(axis=0) + params.e_neg
        cos_neg, _, _ = _cosines(F, q_neg)
        logits = logits - params.a_neg * cos_neg
    return logits


def _cells_to_pixels(cell_values, rows, cols, stride):
    grid = cell_values.reshape(rows, cols)
    return np.repeat(np.repeat(grid, stride, axis=0), stride, axis=1)


def predict_mask(fmap, prompts: Sequence[PointPrompt], params: SegmenterParams, stride: int | None = None):
    """Full-resolution mask logits for one instance's prompts."""
    stride = params.stride if stride is None else stride
    fmap = np.asarray(fmap, dtype=np.float64)
    ch, rows, cols = fmap.shape
    F = fmap.reshape(ch, rows * cols).T
    pos, neg = _split_prompts(prompts, rows, cols, stride)
    return _cells_to_pixels(_decode_cells(F, pos, neg, params), rows, cols, stride)


def _cos_grads(F, q, fn, qn, g):
    """Backprop ``sum_u g_u * cos(F_u, q)`` to ``F`` (rows) and ``q``."""
    dn = (fn + NORM_EPS) * (qn + NORM_EPS)
    dot = F @ q
    safe_fn = np.where(fn > 0, fn, 1.0)
    dF = (g / dn)[:, None] * q[None, :]
    dF -= (g * dot / (dn * (fn + NORM_EPS)) / safe_fn)[:, None] * F
    dq = (g / dn) @ F
    if qn > 0:
        dq -= float(np.sum(g * dot / (dn * (qn + NORM_EPS)))) / qn * q
    return dF, dq


def backward(
    image,
    prompt_sets: Sequence[Sequence[PointPrompt]],
    logit_grads: Sequence[np.ndarray],
    params: SegmenterParams,
    stride: int | None = None,
    feature_grad: np.ndarray | None = None,
) -> SegmenterGrads:
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``logit_grads[i]`` is dL/d(logits) for ``predict_mask(encode(image),
    prompt_sets[i])``. ``feature_grad`` optionally adds a direct dL/dF term
    of shape ``(channels, H/s, W/s)`` (used by the prototype loss).
    """
    s = params.stride if stride is None else stride
    if len(prompt_sets) != len(logit_grads):
        raise ValueError("one logit gradient per prompt set is required")
    img = np.asarray(image, dtype=np.float64)
    hh, ww = img.shape[-2:]
    rows, cols = hh // s, ww // s
    z0, h, F = _encode_cells(img, params)
    ch = params.channels
    dF = np.zeros_like(F)
    if feature_grad is not None:
        fg = np.asarray(feature_grad, dtype=np.float64)
        if fg.shape != (ch, rows, cols):
            raise ValueError(f"feature_grad shape {fg.shape} != {(ch, rows, cols)}")
        dF += fg.reshape(ch, rows * cols).T

    d_e_pos = np.zeros(ch)
    d_e_neg = np.zeros(ch)
    d_a_pos = d_a_neg = d_c = 0.0
    for prompts, gl in zip(prompt_sets, logit_grads):
        gl = np.asarray(gl, dtype=np.float64)
        if gl.shape != (hh, ww):
            raise ValueError(f"logit gradient shape {gl.shape} != {(hh, ww)}")
        g = gl.reshape(rows, s, cols, s).sum(axis=(1, 3)).ravel()
        pos, neg = _split_prompts(prompts, rows, cols, s)

        q_pos = F[pos].mean(axis=0) + params.e_pos
        cos_pos, fn, qn = _cosines(F, q_pos)
        d_a_pos += float(g @ cos_pos)
        d_c += float(g.sum())
        dFp, dq = _cos_grads(F, q_pos, fn, qn, params.a_pos * g)
        dF += dFp
        d_e_pos += dq
        np.add.at(dF, pos, dq / pos.size)

        if neg.size:
            q_neg = F[neg].mean(axis=0) + params.e_neg
            cos_neg, fn, qn = _cosines(F, q_neg)
            d_a_neg -= float(g @ cos_neg)
            dFn, dq = _cos_grads(F, q_neg, fn, qn, -params.a_neg * g)
            dF += dFn
            d_e_neg += dq
            np.add.at(dF, neg, dq / neg.size)

    dh = dF * (h > 0)
    dW = dh.T @ z0
    return SegmenterGrads(
        A1=dW @ params.B1.T,
        B1=params.A1.T @ dW,
        e_pos=d_e_pos,
        e_neg=d_e_neg,
        a_pos=d_a_pos,
        a_neg=d_a_neg,
        c=d_c,
    )
