"""On-disk formats: tensor files, RLE masks, scene directories, checkpoints,
prototype sets and box tables.

Tensor file layout (little-endian throughout):

    b"PTAD" | u8 version = 1 | u32 rank | u32 dims[rank] | f32 payload (row-major)
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .masks import HorizontalBox
from .npc import InstancePromptSet
from .prototypes import PrototypeSet
from .scenes import Instance, Scene
from .segmenter import FROZEN, NEGATIVE, POSITIVE, TRAINABLE, PointPrompt, SegmenterParams

MAGIC = b"PTAD"
VERSION = 1
SCENE_MANIFEST = "manifest.json"
SCENE_IMAGE = "image.tnsr"
CHECKPOINT_MANIFEST = "checkpoint.json"
BOX_COLUMNS = ("mask_index", "x_min", "y_min", "x_max", "y_max")


class FormatError(ValueError):
    """Malformed file content; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# --- tensors -----------------------------------------------------------------------


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if not np.issubdtype(a.dtype, np.number) and a.dtype != bool:
        raise TypeError(f"cannot store dtype {a.dtype}")
    header = MAGIC + struct.pack("<BI", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse a tensor file image into a float32 array."""
    n = len(data)
    if n < 4:
        raise FormatError("truncated magic", n)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    if n < 5:
        raise FormatError("missing version byte", 4)
    if data[4] != VERSION:
        raise FormatError(f"unsupported version {data[4]}", 4)
    if n < 9:
        raise FormatError("truncated rank field", 5)
    (rank,) = struct.unpack_from("<I", data, 5)
    dims_end = 9 + 4 * rank
    if n < dims_end:
        raise FormatError(f"truncated dimensions for rank {rank}", 9 + 4 * ((n - 9) // 4))
    shape = struct.unpack_from(f"<{rank}I", data, 9)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = dims_end + 4 * count
    if n < end:
        raise FormatError(f"payload truncated: need {4 * count} bytes", n)
    if n > end:
        raise FormatError(f"{n - end} trailing bytes after payload", end)
    return np.frombuffer(data, dtype="<f4", count=count, offset=dims_end).reshape(shape).astype(np.float32)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- run-length masks ---------------------------------------------------------------


def rle_encode(mask) -> list[int]:
    """Alternating run lengths over the row-major mask, unset run first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    total = int(np.prod(shape, dtype=np.int64))
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != total:
        raise ValueError(f"runs cover {sum(runs)} pixels, mask has {total}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


# --- scenes ---------------------------------------------------------------------------


def _points(prompts) -> list[list[int]]:
    return [[p.x, p.y] for p in prompts]


def scene_manifest(scene: Scene) -> dict:
    c, h, w = scene.image.shape
    return {
        "scene_id": scene.scene_id,
        "domain_tag": scene.domain_tag,
        "seed": int(scene.seed),
        "points": int(scene.points),
        "channels": int(c),
        "height": int(h),
        "width": int(w),
        "instances": [
            {
                "id": int(inst.instance_id),
                "shape": inst.shape,
                "mask_rle": rle_encode(inst.gt_mask),
                "positives": _points(inst.prompts.positives),
                "negatives": _points(inst.prompts.negatives),
            }
            for inst in scene.instances
        ],
    }


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_scene(scene: Scene, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / SCENE_MANIFEST, scene_manifest(scene))
    write_tensor(out / SCENE_IMAGE, scene.image)
    return out


def scene_from_manifest(meta: dict, image: np.ndarray) -> Scene:
    try:
        h, w = int(meta["height"]), int(meta["width"])
        instances = []
        for d in meta["instances"]:
            prompts = InstancePromptSet(
                int(d["id"]),
                tuple(PointPrompt(int(x), int(y), POSITIVE) for x, y in d["positives"]),
                tuple(PointPrompt(int(x), int(y), NEGATIVE) for x, y in d["negatives"]),
            )
            instances.append(Instance(int(d["id"]), rle_decode(d["mask_rle"], (h, w)), prompts, d.get("shape", "rectangle")))
        scene = Scene(str(meta["scene_id"]), image.astype(np.float64), instances, str(meta["domain_tag"]),
                      int(meta["seed"]), int(meta.get("points", 1)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scene manifest: {exc!r}") from exc
    if scene.image.shape != (int(meta["channels"]), h, w):
        raise ValueError(f"image shape {scene.image.shape} disagrees with manifest")
    return scene


def read_scene(path) -> Scene:
    p = Path(path)
    meta = json.loads((p / SCENE_MANIFEST).read_text())
    return scene_from_manifest(meta, read_tensor(p / SCENE_IMAGE))


def is_scene_dir(path) -> bool:
    p = Path(path)
    return (p / SCENE_MANIFEST).is_file() and (p / SCENE_IMAGE).is_file()


def read_dataset(path) -> list[Scene]:
    """Every scene directory under ``path`` (or ``path`` itself), sorted by id."""
    root = Path(path)
    if is_scene_dir(root):
        return [read_scene(root)]
    scenes = [read_scene(d) for d in sorted(root.iterdir()) if is_scene_dir(d)]
    if not scenes:
        raise ValueError(f"no scene directories under {root}")
    return sorted(scenes, key=lambda s: s.scene_id)


def write_dataset(scenes: Sequence[Scene], path) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    return [write_scene(s, root / s.scene_id) for s in scenes]


# --- checkpoints --------------------------------------------------------------------


def write_checkpoint(params: SegmenterParams, path, seed: int = 0, steps: int = 0) -> Path:
    """JSON manifest plus one tensor file per parameter (stored as float32)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = params.arrays()
    files = {}
    for name in FROZEN + TRAINABLE:
        fname = f"{name}.tnsr"
        write_tensor(out / fname, arrays[name])
        files[name] = fname
    _dump_json(out / CHECKPOINT_MANIFEST, {
        "channels": params.channels,
        "rank": params.rank,
        "stride": params.stride,
        "in_channels": params.in_channels,
        "pos_period": params.pos_period,
        "seed": int(seed),
        "steps": int(steps),
        "tensors": files,
    })
    return out


def read_checkpoint(path) -> tuple[SegmenterParams, dict]:
    p = Path(path)
    meta = json.loads((p / CHECKPOINT_MANIFEST).read_text())
    try:
        kw = {name: read_tensor(p / meta["tensors"][name]).astype(np.float64) for name in FROZEN + TRAINABLE}
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing tensor {exc}") from exc
    for name in ("a_pos", "a_neg", "c"):
        kw[name] = float(kw[name])
    params = SegmenterParams(**kw, stride=int(meta["stride"]), in_channels=int(meta["in_channels"]),
                             pos_period=float(meta["pos_period"]))
    if params.channels != meta["channels"] or params.rank != meta["rank"]:
        raise ValueError("checkpoint tensors disagree with manifest dimensions")
    return params, meta


# --- prototypes -----------------------------------------------------------------------


def write_prototypes(protos: PrototypeSet, path) -> Path:
    """Tensor file at ``path`` and a ``<path>.json`` sidecar."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(p, protos.prototypes)
    k, d = protos.prototypes.shape
    _dump_json(Path(str(p) + ".json"), {"count": int(k), "dim": int(d), "source_tag": protos.source_tag})
    return p


def read_prototypes(path) -> PrototypeSet:
    p = Path(path)
    meta = json.loads(Path(str(p) + ".json").read_text())
    arr = read_tensor(p).astype(np.float64)
    if arr.shape != (meta["count"], meta["dim"]):
        raise ValueError(f"prototype tensor {arr.shape} disagrees with sidecar")
    return PrototypeSet(arr, meta["source_tag"])


# --- boxes ----------------------------------------------------------------------------


def read_masks(path) -> np.ndarray:
    """A tensor file holding one ``(H, W)`` mask or an ``(N, H, W)`` stack."""
    a = read_tensor(path)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"mask tensor must have rank 2 or 3, got {a.ndim}")
    return a != 0


def write_boxes_csv(path, boxes: Sequence[HorizontalBox]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOX_COLUMNS)
        for i, b in enumerate(boxes):
            w.writerow((i, *b.as_tuple()))


def read_boxes_csv(path) -> list[HorizontalBox]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [HorizontalBox(*(int(r[c]) for c in BOX_COLUMNS[1:])) for r in rows]
