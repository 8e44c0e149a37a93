import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perturbode.core import Regime, RegimeKind
from perturbode.model import (
    ModelParams, RegimeContext, extract_grn, init_params, inv_softplus, load_checkpoint,
    regime_context, save_checkpoint, softplus, vector_field, vjp_vector_field,
)

from helpers import fd_check, random_params, random_regime


def scalar_field(params, regime_kind, targets, shift_vals, y):
    """Loop-by-loop evaluation of the masked vector field (independent of numpy matmuls)."""
    d, l = params.A.shape
    beta = [math.log1p(math.exp(b)) for b in params.beta_raw]
    w = [math.log1p(math.exp(v)) for v in params.w_raw]
    act = []
    for m in range(l):
        z = sum(params.B[m][j] * y[j] for j in range(d)) - beta[m]
        act.append(1.0 / (1.0 + math.exp(-params.alpha[m] * z)))
    out = []
    for i in range(d):
        masked = regime_kind in (RegimeKind.PERFECT, RegimeKind.KNOCKOUT) and i in targets
        module = 0.0 if masked else sum(params.A[i][m] * act[m] for m in range(l))
        shift = shift_vals.get(i, 0.0) if regime_kind is not RegimeKind.KNOCKOUT else 0.0
        out.append(module + shift - w[i] * y[i])
    return out


def tiny_params():
    return ModelParams(
        A=np.array([[1.0], [0.0]]),
        B=np.array([[1.0, 0.0]]),
        alpha=np.array([2.0]),
        beta_raw=np.array([-40.0]),
        w_raw=np.full(2, float(inv_softplus(0.5))),
    )


def test_pure_decay():
    p = ModelParams(np.zeros((2, 1)), np.zeros((1, 2)), np.ones(1), np.zeros(1),
                    np.full(2, float(inv_softplus(1.0))))
    f = vector_field(p, RegimeContext.control(2), [1.0, 2.0])
    np.testing.assert_allclose(f, [-1.0, -2.0], rtol=1e-12)


def test_half_activation_control():
    f = vector_field(tiny_params(), RegimeContext.control(2), [0.0, 1.0])
    np.testing.assert_allclose(f, [0.5, -0.5], atol=1e-12)


def test_knockout_matches_scalar_oracle():
    p = tiny_params()
    ko = Regime("ko", (0,), RegimeKind.KNOCKOUT)
    f = vector_field(p, regime_context(p, ko), [0.0, 1.0])
    expected = scalar_field(p, RegimeKind.KNOCKOUT, {0}, {}, [0.0, 1.0])
    np.testing.assert_allclose(f, expected, atol=1e-14)
    np.testing.assert_allclose(f, [0.0, -0.5], atol=1e-12)


@pytest.mark.parametrize("kind", [RegimeKind.SHIFT, RegimeKind.PERFECT, RegimeKind.KNOCKOUT])
def test_random_regimes_match_scalar_oracle(kind):
    rng = np.random.default_rng(3)
    for _ in range(10):
        d, l = 5, 3
        reg = random_regime(rng, d, kind)
        p = random_params(rng, d, l, [reg])
        y = rng.normal(size=d)
        f = vector_field(p, regime_context(p, reg), y)
        shifts = {t: p.s["r"][t] for t in reg.targets}
        np.testing.assert_allclose(f, scalar_field(p, kind, set(reg.targets), shifts, y), atol=1e-12)


def test_batch_rows_match_single_rows():
    rng = np.random.default_rng(0)
    reg = random_regime(rng, 6)
    p = random_params(rng, 6, 4, [reg])
    ctx = regime_context(p, reg)
    Y = rng.normal(size=(7, 6))
    F = vector_field(p, ctx, Y)
    for i in range(7):
        np.testing.assert_allclose(F[i], vector_field(p, ctx, Y[i]), rtol=1e-13, atol=1e-13)


def test_origin_is_module_term():
    rng = np.random.default_rng(1)
    p = random_params(rng, 4, 3)
    f = vector_field(p, RegimeContext.control(4), np.zeros(4))
    expected = p.A @ (1 / (1 + np.exp(p.alpha * p.beta)))
    np.testing.assert_allclose(f, expected, rtol=1e-12)


def test_shape_mismatch_raises():
    p = tiny_params()
    with pytest.raises(ValueError):
        vector_field(p, RegimeContext.control(2), np.zeros(3))
    with pytest.raises(ValueError):
        vector_field(p, RegimeContext.control(3), np.zeros(2))


def test_masked_rows_zero_for_any_input():
    rng = np.random.default_rng(5)
    reg = Regime("r", (1, 3), RegimeKind.PERFECT)
    p = random_params(rng, 5, 4, [reg])
    ctx = regime_context(p, reg)
    Y = rng.normal(size=(50, 5)) * 10
    F = vector_field(p, ctx, Y)
    expected = ctx.shift[[1, 3]] - p.w[[1, 3]] * Y[:, [1, 3]]
    np.testing.assert_array_equal(F[:, [1, 3]], expected)


# -- reverse mode ---------------------------------------------------------------

def _grads_dict(grads):
    return grads.tensors()


def test_vjp_zero_cotangent():
    rng = np.random.default_rng(0)
    reg = random_regime(rng, 5, RegimeKind.SHIFT)
    p = random_params(rng, 5, 3, [reg])
    gy, g = vjp_vector_field(p, regime_context(p, reg), rng.normal(size=5), np.zeros(5))
    assert not np.any(gy)
    assert all(not np.any(v) for v in g.tensors().values())


def test_vjp_linear_decay():
    rng = np.random.default_rng(0)
    d = 4
    p = ModelParams(np.zeros((d, 2)), rng.normal(size=(2, d)), np.ones(2), np.zeros(2), rng.normal(size=d))
    y, c = rng.normal(size=d), rng.normal(size=d)
    gy, g = vjp_vector_field(p, RegimeContext.control(d), y, c)
    np.testing.assert_allclose(gy, -p.w * c, rtol=1e-14)
    sig = 1 / (1 + np.exp(-p.w_raw))
    np.testing.assert_allclose(g.w_raw, -c * y * sig, rtol=1e-14)


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(42)
    for _ in range(5):
        d, l = 5, 3
        reg = random_regime(rng, d)
        p = random_params(rng, d, l, [reg])
        y, c = rng.normal(size=d), rng.normal(size=d)
        ctx = regime_context(p, reg)
        _, g = vjp_vector_field(p, ctx, y, c)
        analytic = {k: v for k, v in p.tensors().items()}
        analytic = {k: np.zeros_like(v) for k, v in analytic.items()}
        analytic.update(g.tensors())

        def fun(q):
            return float(c @ vector_field(q, regime_context(q, reg), y))

        assert fd_check(fun, p, analytic, step=1e-5) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 10), l=st.integers(1, 5))
def test_vjp_property_finite_differences(seed, d, l):
    rng = np.random.default_rng(seed)
    reg = random_regime(rng, d)
    p = random_params(rng, d, l, [reg])
    y, c = rng.normal(size=d), rng.normal(size=d)
    ctx = regime_context(p, reg)
    gy, g = vjp_vector_field(p, ctx, y, c)
    analytic = {k: np.zeros_like(v) for k, v in p.tensors().items()}
    analytic.update(g.tensors())

    def fun(q):
        return float(c @ vector_field(q, regime_context(q, reg), y))

    assert fd_check(fun, p, analytic, step=1e-5, atol=1e-8) < 1e-4
    h = 1e-5
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        num = (c @ vector_field(p, ctx, y + e) - c @ vector_field(p, ctx, y - e)) / (2 * h)
        assert abs(num - gy[j]) <= 1e-4 * max(abs(num), 1e-4)


# -- GRN readout ----------------------------------------------------------------

def test_grn_zero_alpha():
    rng = np.random.default_rng(0)
    p = random_params(rng, 4, 2)
    q = p.with_tensors({"alpha": np.zeros(2)})
    assert not np.any(extract_grn(q).weights)


def test_grn_two_by_two():
    p = ModelParams(np.array([[1.0], [2.0]]), np.array([[4.0, 5.0]]), np.array([3.0]), np.zeros(1), np.zeros(2))
    np.testing.assert_array_equal(extract_grn(p).weights, [[12.0, 15.0], [24.0, 30.0]])


def test_grn_deterministic_and_bilinear():
    rng = np.random.default_rng(9)
    p = random_params(rng, 6, 3)
    g1, g2 = extract_grn(p).weights, extract_grn(p).weights
    assert np.array_equal(g1, g2)
    scaled = extract_grn(p.with_tensors({"A": 2.0 * p.A})).weights
    np.testing.assert_array_equal(scaled, 2.0 * g1)


def test_grn_orientation_edges():
    # gene 0 drives a module that raises gene 1: effect of 0 on 1 is G[1, 0]
    p = ModelParams(np.array([[0.0], [1.0]]), np.array([[1.0, 0.0]]), np.ones(1), np.zeros(1), np.zeros(2))
    from perturbode.core import GeneVocab
    est = extract_grn(p, GeneVocab(("a", "b")))
    assert est.weights[1, 0] == 1.0
    assert est.edges() == [("a", "b", 1.0)]


# -- init and checkpoints ---------------------------------------------------------

def test_init_deterministic_and_defaults():
    regs = [Regime("ctrl"), Regime("r1", (2,), RegimeKind.SHIFT), Regime("ko", (1,), RegimeKind.KNOCKOUT)]
    p1 = init_params(5, 100, regs, seed=7)
    p2 = init_params(5, 100, regs, seed=7)
    for k, v in p1.tensors().items():
        assert np.array_equal(v, p2.tensors()[k])
    np.testing.assert_allclose(p1.beta, 1.0)
    np.testing.assert_allclose(p1.w, 1.0)
    np.testing.assert_array_equal(p1.alpha, 1.0)
    assert p1.s["r1"][2] == 10.0 and p1.s["r1"].sum() == 10.0
    assert not np.any(p1.s["ko"])
    assert "ctrl" not in p1.s
    assert abs(p1.A.std() - 0.1 / np.sqrt(100)) < 0.002


def test_softplus_roundtrip():
    x = np.array([1e-3, 0.5, 1.0, 30.0])
    np.testing.assert_allclose(softplus(inv_softplus(x)), x, rtol=1e-12)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(4)
    reg = random_regime(rng, 5)
    p = random_params(rng, 5, 3, [reg])
    path = tmp_path / "ck.json"
    save_checkpoint(path, p, seed=3)
    q, vocab, extra = load_checkpoint(path)
    assert extra["seed"] == 3 and vocab is None
    for k, v in p.tensors().items():
        assert np.array_equal(v, q.tensors()[k])
    assert q.learn_s == p.learn_s


def test_checkpoint_rejects_other_versions(tmp_path):
    import json
    path = tmp_path / "ck.json"
    save_checkpoint(path, init_params(2, 1))
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
