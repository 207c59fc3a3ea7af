import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deqei.autodiff import Tensor
from deqei.linops import DenseOp, GroupElement, InpaintingOp, rotate
from deqei.metrics import (PSNR_CAP, MetricReport, operator_equivariance_error, pipeline_equivariance_error, psnr,
                           psnr_report, reconstruct)


def test_psnr_known_value():
    x = np.zeros((4, 4))
    assert math.isclose(psnr(x + 0.1, x), 20.0)
    assert psnr(x, x) == math.inf
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(0, 3))
def test_psnr_symmetric_and_rotation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 6, 6)), rng.random((1, 6, 6))
    g = GroupElement(90.0 * k)
    assert psnr(a, b) == psnr(b, a)
    assert psnr(rotate(a, g), rotate(b, g)) == psnr(a, b)


def test_report_statistics_and_cap():
    rep = MetricReport("psnr", [10.0, 20.0, math.inf])
    assert rep.mean == pytest.approx((10 + 20 + PSNR_CAP) / 3, abs=1e-12)
    assert rep.std == pytest.approx(np.std([10, 20, PSNR_CAP]), abs=1e-12)
    assert rep.n == 3
    assert math.isnan(MetricReport("psnr", []).mean)


def test_report_files(tmp_path):
    rep = MetricReport("psnr", [1.5, 2.5], config_hash="00ff")
    rep.write(tmp_path / "r")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "metric,image_index,value" and len(rows) == 3
    vals = [float(r.split(",")[2]) for r in rows[1:]]
    assert np.mean(vals) == pytest.approx(rep.mean, abs=1e-12)
    assert json.loads((tmp_path / "r.json").read_text())["config_hash"] == "00ff"


def _linear_reconstructor(A):
    return lambda y: A.pseudoinverse(y if isinstance(y, Tensor) else Tensor(y))


def test_pipeline_equivariance_of_equivariant_system_is_infinite():
    A = DenseOp(np.eye(16), (1, 4, 4))
    x = np.random.default_rng(0).random((3, 1, 4, 4))
    rep = pipeline_equivariance_error(_linear_reconstructor(A), A, x)
    assert rep.values == [math.inf] * 3 and rep.mean == PSNR_CAP


def test_constant_map_with_rotation_invariant_constant():
    c = np.ones((1, 1, 4, 4))
    A = InpaintingOp(np.random.default_rng(1).random((1, 4, 4)) < 0.5)
    rep = pipeline_equivariance_error(lambda y: Tensor(np.repeat(c, len(y), 0)), A, np.random.default_rng(2).random((2, 1, 4, 4)))
    assert all(v == math.inf for v in rep.values)


@pytest.mark.parametrize("angle", [90.0, 270.0, 180.0])
def test_equivariance_error_g_and_inverse_agree(angle):
    rng = np.random.default_rng(3)
    A = InpaintingOp(rng.random((1, 6, 6)) < 0.6)
    f = _linear_reconstructor(A)
    x = rng.random((4, 1, 6, 6))
    g = GroupElement(angle)
    a = pipeline_equivariance_error(f, A, x, g).values
    b = pipeline_equivariance_error(f, A, rotate(x, g), g.inverse()).values
    assert np.allclose(a, b, atol=1e-9)


def test_operator_equivariance_uses_single_application():
    rng = np.random.default_rng(4)
    A = InpaintingOp(rng.random((1, 6, 6)) < 0.5)
    calls = []

    def F(x, y):
        calls.append(1)
        return x - A.adjoint(A.apply(x) - y)

    rep = operator_equivariance_error(F, A, rng.random((2, 1, 6, 6)))
    assert len(calls) == 2 and rep.n == 2
    assert all(v == math.inf for v in rep.values)  # F(x, Ax) = x commutes with rotation


def test_reconstruct_batches_and_psnr_report():
    A = DenseOp(np.eye(4), (1, 2, 2))
    x = np.random.default_rng(5).random((5, 1, 2, 2))
    out = reconstruct(_linear_reconstructor(A), A.apply(x), batch_size=2)
    assert np.allclose(out, x)
    rep = psnr_report(_linear_reconstructor(A), A.apply(x) + 0.01, x)
    assert rep.n == 5 and 30 < rep.mean < 50
