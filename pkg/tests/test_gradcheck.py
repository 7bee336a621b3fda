import numpy as np
import pytest

from ptadapt import gradcheck


def test_relative_error_definition():
    assert gradcheck.relative_error([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert gradcheck.relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
    assert gradcheck.relative_error(3.0, 3.0) == 0.0


def test_numeric_grad_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = gradcheck.numeric_grad(lambda v: float(np.sum(v**2)), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)


def test_problems_avoid_relu_kink():
    for seed in range(5):
        params, image, *_ = gradcheck.random_segmenter_problem(seed)
        _, h, _ = gradcheck._encode_cells(image, params)
        assert np.abs(h).min() > gradcheck.KINK_MARGIN


@pytest.mark.parametrize("seed", range(10))
def test_matching_suite(seed):
    for r in gradcheck.check_matching(seed):
        assert r.passed, r


def test_summary_keeps_worst():
    rs = [gradcheck.CheckResult("s", "a", 0, 1e-9), gradcheck.CheckResult("s", "a", 1, 1e-3),
          gradcheck.CheckResult("s", "b", 0, 0.0)]
    rows = {r["name"]: r for r in gradcheck.summarize(rs)}
    assert rows["a"]["worst_config"] == 1 and not rows["a"]["passed"]
    assert rows["b"]["passed"]
