import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osaq import _backend, _pykernels
from osaq.errors import ConfigError, DimMismatch, NotPositiveDefinite
from osaq.quantizer import (
    Backend,
    QuantConfig,
    QuantizedTensor,
    damped_inverse_factor,
    dequantize,
    from_tensors,
    output_mse_from_hessian,
    quant_params,
    quantize,
    quantize_compensated,
    quantize_rtn,
    reconstruction_metrics,
    to_tensors,
)
from osaq.tensorstore import decode, encode

from .oracles import brute_force_codes


def test_quant_params_examples():
    assert quant_params([0.0, 3.0, 15.0], 4) == (1.0, 0.0, 0.0)
    s, z, o = quant_params([-1.0, 0.2, 1.0], 2)
    assert s == pytest.approx(2 / 3, rel=1e-15)
    assert z == 2.0  # rint(1.5) -> 2
    assert o == 0.0
    assert quant_params([-2.5, 2.5], 1 + 1)[1] == 2.0  # rint(1.5)
    assert quant_params([-1.5, 2.5], 2)[1] == 1.0  # 1.5/(4/3) = 1.125


def test_half_to_even_ties():
    # -min/s = 2.5 exactly: -1.25 / 0.5
    s, z, _ = quant_params([-1.25, 0.25], 2)
    assert s == 0.5 and z == 2.0
    s, z, _ = quant_params([-1.75, -0.25], 2)
    assert s == 0.5 and z == 4.0  # rint(3.5) -> 4


def test_constant_group_is_exact():
    for c in (0.7, -3.2, 0.0, 250.0):
        w = np.full((2, 4), c)
        q = quantize_rtn(w, QuantConfig(bits=3))
        assert np.all(q.scales == 1.0) and np.all(q.zeros == 0.0)
        assert np.all((q.codes >= 0) & (q.codes <= 7))
        np.testing.assert_allclose(dequantize(q), w, atol=1e-12, rtol=0)
    s, z, o = quant_params([0.7] * 3, 3)
    assert (s, z) == (1.0, 0.0)
    assert o == pytest.approx(0.7 - 1.0)


def test_worked_code_example():
    w = np.array([[-1.0, 0.4, 1.0]])
    q = quantize_rtn(w, QuantConfig(bits=2))
    assert q.codes[0, 1] == 3
    w_hat = dequantize(q)
    assert w_hat[0, 1] == pytest.approx(2 / 3, abs=1e-12)
    assert abs(w_hat[0, 1] - 0.4) == pytest.approx(0.26667, abs=1e-5)
    assert abs(w_hat[0, 1] - 0.4) <= q.scales[0, 0] / 2


def _bound_holds(w, q):
    err = np.abs(w - dequantize(q))
    return np.all(err <= q.expand(q.scales) / 2 + 1e-7)


def test_round_trip_bound_all_bits_and_groups():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((16, 32))
    for bits in range(2, 9):
        for gs in (None, 8, 16):
            q = quantize_rtn(w, QuantConfig(bits=bits, group_size=gs))
            assert _bound_holds(w, q)
            assert q.codes.min() >= 0 and q.codes.max() <= (1 << bits) - 1
            assert np.all(q.scales > 0)


def test_on_grid_round_trip_and_zero_codes():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((6, 12))
    q = quantize_rtn(w, QuantConfig(bits=4))
    w_hat = dequantize(q)
    np.testing.assert_allclose(dequantize(quantize_rtn(w_hat, QuantConfig(bits=4))), w_hat, atol=1e-12)
    zero = QuantizedTensor(q.expand(q.zeros).astype(np.uint8), q.scales, q.zeros, q.offsets, 4, 12)
    assert np.array_equal(dequantize(zero), np.zeros_like(w))


def _spanning_grid(rng, rows, cols, gs, bits):
    """Grid weights whose codes hit both 0 and 2^b - 1 in every group."""
    maxq = (1 << bits) - 1
    codes = rng.integers(0, maxq + 1, (rows, cols))
    g = codes.reshape(rows, cols // gs, gs)
    g[..., 0], g[..., 1] = 0, maxq
    s = rng.uniform(0.05, 0.5, (rows, cols // gs, 1))
    z = rng.integers(1, maxq, (rows, cols // gs, 1))
    return (s * (g - z)).reshape(rows, cols), codes


@pytest.mark.parametrize("backend", ["rtn", "compensated"])
def test_grid_fixed_point(backend):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((64, 16))
    h = 2 / 64 * x.T @ x
    for gs in (None, 8):
        w, codes = _spanning_grid(rng, 8, 16, gs or 16, 3)
        cfg = QuantConfig(bits=3, group_size=gs, backend=backend)
        q1 = quantize(w, cfg, h)
        assert np.array_equal(q1.codes, codes)
        np.testing.assert_allclose(dequantize(q1), w, atol=1e-12)
        q2 = quantize(dequantize(q1), cfg, h)
        assert np.array_equal(q1.codes, q2.codes)


def test_rtn_idempotence_on_its_own_output():
    rng = np.random.default_rng(2)
    for gs in (None, 8):
        cfg = QuantConfig(bits=3, group_size=gs)
        q1 = quantize_rtn(rng.standard_normal((8, 16)), cfg)
        q2 = quantize_rtn(dequantize(q1), cfg)
        assert np.array_equal(q1.codes, q2.codes)
        np.testing.assert_allclose(dequantize(q2), dequantize(q1), atol=1e-12)


def test_compensated_with_diagonal_hessian_equals_rtn_bitwise():
    rng = np.random.default_rng(3)
    for gs in (None, 4):
        w = rng.standard_normal((10, 16))
        h = np.diag(rng.uniform(0.1, 5.0, 16))
        r = quantize_rtn(w, QuantConfig(bits=3, group_size=gs))
        c = quantize_compensated(w, h, QuantConfig(bits=3, group_size=gs, backend="compensated"))
        for field in ("codes", "scales", "zeros", "offsets"):
            assert np.array_equal(getattr(r, field), getattr(c, field)), field


def test_exhaustive_two_column_oracle():
    rng = np.random.default_rng(4)
    for trial in range(50):
        corr = rng.uniform(-0.95, 0.95)
        x = rng.standard_normal((64, 2)) @ np.linalg.cholesky([[1.0, corr], [corr, 1.0]]).T
        h = 2 / 64 * x.T @ x
        w = rng.standard_normal((1, 2))
        cfg = QuantConfig(bits=2, damping=0.0)
        rtn = quantize_rtn(w, cfg)
        comp = quantize_compensated(w, h, cfg)
        s, z, o = rtn.scales[0, 0], rtn.zeros[0, 0], rtn.offsets[0, 0]

        def calib_err(q):
            e = x @ (w - dequantize(q))[0]
            return float(e @ e)

        best = brute_force_codes(w[0], h, s, z, o, cfg.maxq) * 64 / 2
        assert best <= calib_err(comp) + 1e-12
        assert calib_err(comp) <= calib_err(rtn) + 1e-12


def test_damped_inverse_factor():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((40, 6))
    h = 2 / 40 * x.T @ x
    u = damped_inverse_factor(h, 0.01)
    hd = h + 0.01 * np.mean(np.diag(h)) * np.eye(6)
    np.testing.assert_allclose(u.T @ u, np.linalg.inv(hd), rtol=1e-10, atol=1e-12)
    assert np.allclose(u, np.triu(u))
    singular = np.outer(np.arange(1.0, 5.0), np.arange(1.0, 5.0))
    with pytest.raises(NotPositiveDefinite):
        damped_inverse_factor(singular - np.diag([0, 0, 0, 1.0]), 0.0)


def test_group_refinement_never_hurts_on_average():
    mse = {None: [], 128: [], 32: []}
    for seed in range(20):
        w = np.random.default_rng(100 + seed).standard_normal((16, 256))
        for gs in mse:
            mse[gs].append(reconstruction_metrics(w, quantize_rtn(w, QuantConfig(bits=3, group_size=gs)))["weight_mse"])
    per, g128, g32 = (np.array(mse[k]) for k in (None, 128, 32))
    assert np.all(per >= g128) and np.all(g128 >= g32)


def test_metrics():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((8, 16))
    x = rng.standard_normal((30, 16))
    exact = quantize_rtn(np.zeros((8, 16)), QuantConfig(bits=3))
    m0 = reconstruction_metrics(np.zeros((8, 16)), exact, x)
    assert all(v == 0 for v in m0.values())
    assert reconstruction_metrics(w, quantize_rtn(w, QuantConfig()), np.zeros((5, 16)))["output_mse"] == 0.0
    m2 = reconstruction_metrics(w, quantize_rtn(w, QuantConfig(bits=2)), x)
    m8 = reconstruction_metrics(w, quantize_rtn(w, QuantConfig(bits=8)), x)
    for key in m2:
        assert m2[key] > m8[key], key
    q = quantize_rtn(w, QuantConfig(bits=2))
    err = w - dequantize(q)
    h = 2 / 30 * x.T @ x
    assert output_mse_from_hessian(err, h) == pytest.approx(reconstruction_metrics(w, q, x)["output_mse"], rel=1e-12)
    with pytest.raises(DimMismatch):
        reconstruction_metrics(w, q, np.zeros((3, 5)))
    with pytest.raises(DimMismatch):
        reconstruction_metrics(w[:2], q)


def test_archive_round_trip():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((6, 16))
    w[0] = 1.5
    q = quantize_rtn(w, QuantConfig(bits=3, group_size=8))
    back = from_tensors("layer0.attn.q_proj", decode(encode(to_tensors("layer0.attn.q_proj", q))).tensors, 3)
    assert back.group_size == 8
    np.testing.assert_array_equal(dequantize(back), dequantize(q))


def test_config_validation():
    for bad in (dict(bits=1), dict(bits=9), dict(group_size=0), dict(damping=-1.0), dict(backend="gptq"), dict(rounding="up")):
        with pytest.raises(ConfigError):
            QuantConfig(**bad)
    with pytest.raises(ConfigError):
        QuantConfig(group_size=5).groups_for(16)
    with pytest.raises(ConfigError):
        quantize(np.zeros((2, 4)), QuantConfig(backend=Backend.COMPENSATED))
    assert QuantConfig(backend=Backend.COMPENSATED).backend is Backend.COMPENSATED


@pytest.mark.skipif(_backend.NAME != "cython", reason="compiled kernels not built")
def test_compiled_and_python_kernels_agree_bitwise():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((80, 24))
    u = damped_inverse_factor(2 / 80 * x.T @ x, 0.01)
    w = rng.standard_normal((12, 24))
    w[3] = 0.25
    outs = []
    for kernels in (_backend.kernels, _pykernels):
        bufs = [np.zeros((12, 3)) for _ in range(3)] + [np.zeros((12, 24))]
        wc = w.copy()
        kernels.compensate_columns(wc, u, 8, 7, *bufs)
        outs.append([wc] + bufs)
    for a, b in zip(*outs):
        assert np.array_equal(a, b)


@settings(max_examples=150, deadline=None)
@given(
    arrays(np.float64, (3, 8), elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)),
    st.integers(2, 8),
    st.sampled_from([None, 2, 4]),
)
def test_round_trip_property(w, bits, gs):
    q = quantize_rtn(w, QuantConfig(bits=bits, group_size=gs))
    err = np.abs(w - dequantize(q))
    assert np.all(err <= q.expand(q.scales) / 2 * (1 + 1e-9) + 1e-7)
