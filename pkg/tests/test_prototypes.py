import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptadapt.prototypes import (
    Assignment,
    MemoryBank,
    PrototypeSet,
    bank_push,
    build_target_prototypes,
    distance_matrix,
    extract_point_features,
    hungarian_match,
    matching_loss,
    predicted_prototypes,
)
from ptadapt.gradcheck import numeric_grad, relative_error
from ptadapt.segmenter import PointPrompt

from .oracles import brute_force_assignment


class _FakeScene:
    def __init__(self, image, positives, scene_id="s"):
        self.image = image
        self.scene_id = scene_id
        self.instances = [type("I", (), {"prompts": type("P", (), {"positives": tuple(positives)})()})()]


def test_extract_point_features_examples():
    fmap = np.arange(3 * 4 * 5, dtype=float).reshape(3, 4, 5)
    np.testing.assert_array_equal(extract_point_features(fmap, [PointPrompt(0, 0)], 4)[0], fmap[:, 0, 0])
    np.testing.assert_array_equal(extract_point_features(fmap, [PointPrompt(17, 6)], 4)[0], fmap[:, 1, 4])
    two = extract_point_features(fmap, [PointPrompt(5, 5), PointPrompt(6, 7)], 4)
    np.testing.assert_array_equal(two[0], two[1])


def test_extract_point_features_out_of_bounds():
    with pytest.raises(ValueError):
        extract_point_features(np.zeros((2, 2, 2)), [PointPrompt(8, 0)], 4)


def test_build_target_prototypes_examples():
    feat = np.array([0.3, 1.0, 0.2])
    fmap = np.broadcast_to(feat[:, None, None], (3, 4, 4)).copy()
    one = build_target_prototypes([_FakeScene(fmap, [PointPrompt(1, 1)])], lambda im: im, 4)
    np.testing.assert_array_equal(one.prototypes, [feat])
    same = build_target_prototypes([_FakeScene(fmap, [PointPrompt(1, 1), PointPrompt(9, 9)])] * 3, lambda im: im, 4)
    np.testing.assert_allclose(same.prototypes, [feat], rtol=1e-15, atol=0)

    # each blob chains into one first-neighbour component: 0 <-> 1 <- 2
    def blob(base):
        return np.array([[np.cos(np.deg2rad(a)), np.sin(np.deg2rad(a)), 0.5] for a in (base, base + 1, base + 2.5)])

    blob_a, blob_b = blob(0.0), blob(90.0)
    scenes = []
    for b in (blob_a, blob_b):
        fmap = np.zeros((3, 1, 3))
        fmap[:, 0, :] = b.T
        scenes.append(_FakeScene(fmap, [PointPrompt(4 * i, 0) for i in range(3)]))
    protos = build_target_prototypes(scenes, lambda im: im, 4)
    assert protos.source_tag == "target"
    np.testing.assert_allclose(protos.prototypes, [blob_a.mean(0), blob_b.mean(0)], rtol=0, atol=1e-15)


def test_build_target_prototypes_deterministic():
    rng = np.random.default_rng(3)
    scenes = [_FakeScene(rng.random((4, 4, 4)), [PointPrompt(int(x), int(y)) for x, y in rng.integers(0, 16, (5, 2))])
              for _ in range(3)]
    a = build_target_prototypes(scenes, lambda im: im, 4)
    b = build_target_prototypes(scenes, lambda im: im, 4)
    assert a.prototypes.tobytes() == b.prototypes.tobytes()


def test_bank_push_examples():
    a, b, c, d = (np.full(2, float(i)) for i in range(4))
    bank = bank_push(MemoryBank(3), [a, b])
    np.testing.assert_array_equal(bank.queue, [a, b])
    np.testing.assert_array_equal(bank_push(MemoryBank(3, np.stack([a, b, c])), [d]).queue, [b, c, d])
    np.testing.assert_array_equal(bank_push(MemoryBank(3, np.stack([a])), [b, c, d]).queue, [b, c, d])


def test_bank_rejects_dim_change():
    bank = bank_push(MemoryBank(4), np.ones((1, 3)))
    with pytest.raises(ValueError):
        bank_push(bank, np.ones((1, 2)))


@given(st.integers(1, 10), st.lists(st.integers(0, 6), max_size=12))
def test_bank_fifo_property(capacity, sizes):
    bank = MemoryBank(capacity)
    pushed = []
    counter = 0
    for n in sizes:
        rows = np.arange(counter, counter + n, dtype=float)[:, None] * np.ones((1, 2))
        counter += n
        pushed.extend(rows.tolist())
        bank = bank.push(rows)
        assert len(bank) <= capacity
        assert bank.queue.tolist() == pushed[-capacity:] if pushed else len(bank) == 0


def test_predicted_prototypes_examples():
    v = np.array([0.5, -2.0, 1.0])
    np.testing.assert_array_equal(predicted_prototypes(MemoryBank(4, v[None])).prototypes, [v])
    np.testing.assert_allclose(predicted_prototypes(MemoryBank(8, np.tile(v, (5, 1)))).prototypes, [v], rtol=1e-15, atol=0)
    rng = np.random.default_rng(1)
    a = np.array([1.0, 0, 0]) + rng.normal(0, 0.01, (3, 3))
    b = np.array([0, 1.0, 0]) + rng.normal(0, 0.01, (3, 3))
    p = predicted_prototypes(MemoryBank(8, np.vstack([a, b])))
    assert p.source_tag == "predicted"
    np.testing.assert_allclose(p.prototypes, [a.mean(0), b.mean(0)], atol=1e-15)


def test_distance_matrix_examples():
    e1, e2 = np.eye(2)
    s = PrototypeSet([[1.0, 2.0]], "target")
    np.testing.assert_allclose(distance_matrix(s, PrototypeSet([[1.0, 2.0]], "predicted")), [[0.0]], atol=1e-15)
    t = PrototypeSet([e1, [1.0, 1.0]], "target")
    D = distance_matrix(t, PrototypeSet([e1, [1.0, 1.0]], "predicted"))
    np.testing.assert_allclose(np.diag(D), 0.0, atol=1e-15)
    assert D[0, 1] > 0 and D[1, 0] > 0
    D = distance_matrix(PrototypeSet([e1, e2], "target"), PrototypeSet([e2], "predicted"))
    np.testing.assert_allclose(D, [[1.0], [0.0]], atol=1e-15)


def test_prototype_set_validation():
    with pytest.raises(ValueError):
        PrototypeSet(np.zeros((0, 3)), "target")
    with pytest.raises(ValueError):
        PrototypeSet([[1.0]], "source")


def test_hungarian_examples(backend):
    a = hungarian_match([[0, 1], [1, 0]])
    assert set(a.pairs) == {(0, 0), (1, 1)} and a.cost == 0
    a = hungarian_match([[0.2, 0.5], [0.4, 0.1]])
    assert set(a.pairs) == {(0, 0), (1, 1)} and a.cost == pytest.approx(0.3, abs=1e-15)
    a = hungarian_match([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    assert set(a.pairs) == {(0, 1), (1, 0)} and a.cost == pytest.approx(0.3, abs=1e-15)


def test_hungarian_tie_break_lexicographic(backend):
    assert hungarian_match(np.zeros((3, 3))).pairs == ((0, 0), (1, 1), (2, 2))
    assert hungarian_match(np.ones((2, 4))).pairs == ((0, 0), (1, 1))
    assert hungarian_match(np.ones((4, 2))).pairs == ((0, 0), (1, 1))


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((0, 2)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1 << 30), st.integers(1, 6), st.integers(1, 6), st.booleans())
def test_hungarian_matches_brute_force(seed, r, c, integer):
    rng = np.random.default_rng(seed)
    D = rng.integers(0, 3, (r, c)).astype(float) if integer else rng.random((r, c))
    got = hungarian_match(D)
    pairs, cost = brute_force_assignment(D)
    assert got.pairs == pairs
    assert got.cost == pytest.approx(cost, abs=1e-12)


def test_matching_loss_examples():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(3, 4))
    t, p = PrototypeSet(P, "target"), PrototypeSet(P, "predicted")
    D = distance_matrix(t, p)
    r = matching_loss(D, hungarian_match(D), t, p)
    assert r["value"] == pytest.approx(0.0, abs=1e-12)
    for g, v in zip(r["grad_predicted"], P):
        assert abs(g @ v) < 1e-12

    e1, e2 = np.eye(2)
    t, p = PrototypeSet([e1], "target"), PrototypeSet([e2], "predicted")
    D = distance_matrix(t, p)
    r = matching_loss(D, hungarian_match(D), t, p)
    assert r["value"] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(r["grad_predicted"], [-e1], atol=1e-15)
    num = numeric_grad(lambda x: matching_loss(distance_matrix(t, PrototypeSet(x, "predicted")),
                                               hungarian_match(D), t, PrototypeSet(x, "predicted"))["value"],
                       np.array([e2]))
    np.testing.assert_allclose(num, [-e1], atol=1e-8)


def test_matching_loss_rejects_partial_assignment():
    t = PrototypeSet(np.eye(2), "target")
    D = distance_matrix(t, PrototypeSet(np.eye(2), "predicted"))
    with pytest.raises(ValueError):
        matching_loss(D, Assignment(((0, 0),), 0.0), t, PrototypeSet(np.eye(2), "predicted"))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1 << 30), st.integers(1, 5), st.integers(1, 5))
def test_matching_loss_properties(seed, kt, kp):
    rng = np.random.default_rng(seed)
    T, P = rng.normal(size=(kt, 3)), rng.normal(size=(kp, 3))
    t, p = PrototypeSet(T, "target"), PrototypeSet(P, "predicted")
    D = distance_matrix(t, p)
    a = hungarian_match(D)
    r = matching_loss(D, a, t, p)
    assert 0.0 <= r["value"] <= 2.0 * min(kt, kp)
    # positive rescaling of individual prototypes changes nothing
    ts = PrototypeSet(T * rng.uniform(0.1, 10, (kt, 1)), "target")
    ps = PrototypeSet(P * rng.uniform(0.1, 10, (kp, 1)), "predicted")
    Ds = distance_matrix(ts, ps)
    a2 = hungarian_match(Ds)
    assert a2.pairs == a.pairs
    assert matching_loss(Ds, a2, ts, ps)["value"] == pytest.approx(r["value"], abs=1e-12)
    # unmatched predicted prototypes get no gradient
    matched = {j for _, j in a.pairs}
    for j in range(kp):
        if j not in matched:
            assert not r["grad_predicted"][j].any()

    def f(x):
        px = PrototypeSet(x, "predicted")
        return matching_loss(distance_matrix(t, px), a, t, px)["value"]

    assert relative_error(r["grad_predicted"], numeric_grad(f, P)) < 1e-4
