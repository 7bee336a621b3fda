import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ptadapt.masks import HorizontalBox
from ptadapt.prototypes import PrototypeSet
from ptadapt.scenes import GeneratorSpec, generate_scene
from ptadapt.segmenter import init_params
from ptadapt.storage import (
    FormatError,
    decode_tensor,
    encode_tensor,
    read_boxes_csv,
    read_checkpoint,
    read_dataset,
    read_masks,
    read_prototypes,
    read_scene,
    rle_decode,
    rle_encode,
    write_boxes_csv,
    write_checkpoint,
    write_dataset,
    write_prototypes,
    write_scene,
    write_tensor,
)


def test_rle_examples():
    assert rle_encode(np.zeros((2, 2), bool)) == [4]
    m = np.zeros((2, 2), bool)
    m[0, 1] = True
    assert rle_encode(m) == [1, 1, 2]
    assert rle_encode(np.ones((2, 2), bool)) == [0, 4]


@settings(max_examples=100, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_rle_round_trip(mask):
    runs = rle_encode(mask)
    assert sum(runs) == mask.size
    assert all(r > 0 for r in runs[1:])
    np.testing.assert_array_equal(rle_decode(runs, mask.shape), mask)


def test_rle_decode_errors():
    with pytest.raises(ValueError):
        rle_decode([3], (2, 2))
    with pytest.raises(ValueError):
        rle_decode([5, -1], (2, 2))


def test_tensor_layout():
    data = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    expected = b"PTAD" + bytes([1]) + struct.pack("<III", 2, 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert data == expected


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(a):
    data = encode_tensor(a)
    b = decode_tensor(data)
    assert b.shape == a.shape and b.tobytes() == a.tobytes()
    assert encode_tensor(b) == data


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda d: b"XTAD" + d[4:], 0),
        (lambda d: d[:4] + bytes([2]) + d[5:], 4),
        (lambda d: d[:3], 3),
        (lambda d: d[:4], 4),
        (lambda d: d[:7], 5),
        (lambda d: d[:14], 13),
        (lambda d: d[:-2], None),
        (lambda d: d + b"\0", None),
    ],
)
def test_tensor_errors_report_offset(mutate, offset):
    good = encode_tensor(np.ones((2, 3)))
    bad = mutate(good)
    with pytest.raises(FormatError) as info:
        decode_tensor(bad)
    if offset is None:
        offset = len(bad) if len(bad) < len(good) else len(good)
    assert info.value.offset == offset
    assert f"byte offset {offset}" in str(info.value)


def test_scene_round_trip_bytes(tmp_path):
    scene = generate_scene(GeneratorSpec(), 21, points=2)
    write_scene(scene, tmp_path / "a")
    back = read_scene(tmp_path / "a")
    write_scene(back, tmp_path / "b")
    for name in ("manifest.json", "image.tnsr"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert back.image.tobytes() == scene.image.tobytes()
    assert [m.tobytes() for m in back.gt_masks] == [m.tobytes() for m in scene.gt_masks]
    assert back.prompt_sets == scene.prompt_sets
    assert (back.scene_id, back.domain_tag, back.seed, back.points) == (scene.scene_id, "speckled", 21, 2)


def test_dataset_sorted_by_id(tmp_path):
    scenes = [generate_scene(GeneratorSpec(), s, scene_id=f"s{i}") for i, s in enumerate((3, 1, 2))]
    write_dataset(scenes[::-1], tmp_path)
    assert [s.scene_id for s in read_dataset(tmp_path)] == ["s0", "s1", "s2"]
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "empty")


def test_checkpoint_round_trip(tmp_path):
    p = init_params(3)
    write_checkpoint(p, tmp_path / "a", seed=3, steps=0)
    q, meta = read_checkpoint(tmp_path / "a")
    assert meta["seed"] == 3 and meta["steps"] == 0 and meta["rank"] == 4
    for k, v in p.arrays().items():
        assert np.array_equal(np.asarray(v), np.asarray(q.arrays()[k])), k
    write_checkpoint(q, tmp_path / "b", seed=3, steps=0)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_prototype_round_trip(tmp_path):
    protos = PrototypeSet(np.random.default_rng(0).normal(size=(4, 16)).astype(np.float32).astype(np.float64), "target")
    write_prototypes(protos, tmp_path / "p.tnsr")
    back = read_prototypes(tmp_path / "p.tnsr")
    assert back.source_tag == "target"
    assert back.prototypes.tobytes() == protos.prototypes.tobytes()


def test_masks_and_boxes(tmp_path):
    m = np.zeros((2, 6, 6), np.float32)
    m[0, 5, 3] = 1
    m[1, 1:3, 2:5] = 1
    write_tensor(tmp_path / "m.tnsr", m)
    masks = read_masks(tmp_path / "m.tnsr")
    assert masks.dtype == bool and masks.shape == (2, 6, 6)
    boxes = [HorizontalBox(3, 5, 3, 5), HorizontalBox(2, 1, 4, 2)]
    write_boxes_csv(tmp_path / "b.csv", boxes)
    assert read_boxes_csv(tmp_path / "b.csv") == boxes
    write_tensor(tmp_path / "bad.tnsr", np.zeros(4))
    with pytest.raises(ValueError):
        read_masks(tmp_path / "bad.tnsr")
