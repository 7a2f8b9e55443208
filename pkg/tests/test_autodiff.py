import numpy as np
import pytest

from gpode import autodiff as ad
from gpode.errors import ContractError, DimensionError, NumericalError

from helpers import assert_grads_close, finite_difference


def leaf_map(tape, params):
    return {name: tape.leaf(v) for name, v in params.items()}


def analytic_grads(build, params):
    """Run `build` on fresh leaves and return gradients keyed like params."""
    tape = ad.Tape()
    leaves = leaf_map(tape, params)
    loss = build(leaves)
    raw = tape.backward(loss)
    return {name: raw[t.nid] for name, t in leaves.items()}


class TestRecordShapes:
    def test_matmul_shape_rule(self):
        a = ad.wrap(np.ones((2, 3)))
        b = ad.wrap(np.ones((3, 1)))
        out = ad.record("matmul", a, b)
        assert out.shape == (2, 1)

    def test_matmul_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.matmul(ad.wrap(np.ones((2, 3))), ad.wrap(np.ones((2, 3))))

    def test_elementwise_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.add(ad.wrap(np.ones(3)), ad.wrap(np.ones(4)))

    def test_cholesky_identity(self):
        out = ad.record("cholesky", ad.wrap(np.eye(4)))
        np.testing.assert_array_equal(out.value, np.eye(4))

    def test_cholesky_hand_case(self):
        # L L^T must reproduce [[4,2],[2,3]]; L = [[2,0],[1,sqrt(2)]].
        a = np.array([[4.0, 2.0], [2.0, 3.0]])
        L = ad.cholesky(ad.wrap(a)).value
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=1e-15)
        np.testing.assert_allclose(L @ L.T, a, rtol=1e-15)

    def test_cholesky_non_pd_names_minor(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NumericalError, match="leading minor"):
            ad.cholesky(ad.wrap(bad))

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ad.record("frobnicate", ad.wrap(1.0))


class TestBackwardBasics:
    def test_sum_of_squares(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([1.0, 2.0, 3.0]))
        loss = ad.reduce_sum(x * x)
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x.nid], [2.0, 4.0, 6.0])

    def test_unreachable_leaf_gets_zero(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        y = tape.leaf(np.array([5.0]))
        loss = ad.reduce_sum(x * x)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[y.nid], np.zeros(1))

    def test_logdet_via_cholesky_is_inverse(self):
        a = np.array([[4.0, 2.0], [2.0, 3.0]])

        def build(p):
            L = ad.cholesky(p["a"])
            return 2.0 * ad.reduce_sum(ad.log(ad.diag_part(L)))

        grads = analytic_grads(build, {"a": a})
        np.testing.assert_allclose(grads["a"], np.linalg.inv(a), rtol=1e-10)

        def f(p):
            sym = 0.5 * (p["a"] + p["a"].T)
            return float(np.linalg.slogdet(sym)[1])

        assert_grads_close(grads, finite_difference(f, {"a": a}))

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ContractError):
            tape.backward(x * x)

    def test_backward_is_linear(self):
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal(4)
        a, b = 1.7, -0.3

        def grad_of(scale1, scale2):
            tape = ad.Tape()
            x = tape.leaf(x0)
            l1 = ad.reduce_sum(x * x)
            l2 = ad.reduce_sum(ad.sin(x))
            loss = scale1 * l1 + scale2 * l2
            return tape.backward(loss)[x.nid]

        combined = grad_of(a, b)
        parts = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        np.testing.assert_allclose(combined, parts, rtol=1e-12)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((5, 5))

        def run():
            tape = ad.Tape()
            x = tape.leaf(x0)
            y = ad.exp(ad.sin(x) * 0.1) @ ad.cos(x)
            return ad.reduce_sum(y).value.copy()

        assert np.array_equal(run(), run())


PRIMITIVE_CASES = {
    "add": lambda p: ad.reduce_sum(p["a"] + p["b"]),
    "sub_bcast": lambda p: ad.reduce_sum((p["a"] - p["s"]) * p["a"]),
    "mul": lambda p: ad.reduce_sum(p["a"] * p["b"] * p["a"]),
    "div": lambda p: ad.reduce_sum(p["a"] / (p["b"] * p["b"] + 2.0)),
    "neg_pow": lambda p: ad.reduce_sum(-((p["a"] * p["a"] + 1.0) ** 1.5)),
    "log": lambda p: ad.reduce_sum(ad.log(p["a"] * p["a"] + 0.5)),
    "exp": lambda p: ad.reduce_sum(ad.exp(0.3 * p["a"])),
    "cos": lambda p: ad.reduce_sum(ad.cos(p["a"]) * p["b"]),
    "sin": lambda p: ad.reduce_sum(ad.sin(p["a"] * 2.0)),
    "sqrt": lambda p: ad.reduce_sum(ad.sqrt(p["a"] * p["a"] + 1.0)),
    "softplus": lambda p: ad.reduce_sum(ad.softplus(3.0 * p["a"])),
    "sum_axis": lambda p: ad.reduce_sum(ad.reduce_sum(p["m"], axis=0) ** 2.0),
    "broadcast": lambda p: ad.reduce_sum(ad.broadcast_to(p["s"], (3, 4)) * p["m2"]),
    "transpose": lambda p: ad.reduce_sum(ad.transpose(p["m2"]) * 0.5),
    "diag": lambda p: ad.reduce_sum(ad.diag_part(p["sq"]) ** 2.0),
}


NUMERIC_CASES = {
    "matmul": lambda p: ad.reduce_sum(ad.sin(p["m"] @ p["m2"])),
    "contract": lambda p: ad.reduce_sum(ad.contract("ij,jk->ik", p["m"], p["m2"]) ** 2.0),
    "cholesky": lambda p: ad.reduce_sum(ad.cholesky(p["pd"]) * p["sq"]),
    "tri_solve": lambda p: ad.reduce_sum(
        ad.solve_triangular(ad.cholesky(p["pd"]), p["rhs"]) ** 2.0
    ),
    "tri_solve_t": lambda p: ad.reduce_sum(
        ad.solve_triangular(ad.cholesky(p["pd"]), p["rhs"], trans=True) ** 2.0
    ),
    "tril_softplus": lambda p: ad.reduce_sum(ad.tril_with_softplus_diag(p["sq"]) ** 2.0),
    "concat": lambda p: ad.reduce_sum(ad.concat_rows([p["m"], ad.transpose(p["m2"])]) ** 2.0),
}


def _draw_params(rng):
    base = rng.standard_normal((4, 3))
    pd = rng.standard_normal((3, 3))
    pd = pd @ pd.T + 3.0 * np.eye(3)
    return {
        "a": rng.standard_normal((2, 3)),
        "b": rng.standard_normal((2, 3)) + 0.1,
        "s": rng.standard_normal((1, 1)),
        "m": rng.standard_normal((4, 3)),
        "m2": rng.standard_normal((3, 4)),
        "sq": rng.standard_normal((3, 3)),
        "pd": pd,
        "rhs": rng.standard_normal((3, 2)),
        "_": base,
    }


@pytest.mark.parametrize("name", sorted({**PRIMITIVE_CASES, **NUMERIC_CASES}))
def test_primitive_gradients_match_finite_differences(name):
    # >= 20 random draws per primitive, rel err < 1e-4 with 1e-7 floor.
    build = {**PRIMITIVE_CASES, **NUMERIC_CASES}[name]
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        params = _draw_params(rng)
        grads = analytic_grads(build, params)

        def f(p):
            tape = ad.Tape()
            leaves = leaf_map(tape, p)
            return float(build(leaves).value)

        assert_grads_close(grads, finite_difference(f, params))


def test_constants_do_not_record():
    tape = ad.Tape()
    x = tape.leaf(np.ones(2))
    c = ad.wrap(np.ones(2)) * ad.wrap(2.0)
    assert c.tape is None
    n_before = len(tape.nodes)
    _ = ad.wrap(3.0) + ad.wrap(4.0)
    assert len(tape.nodes) == n_before
    out = x + c
    assert out.tape is tape


def test_mixed_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ContractError):
        ad.add(t1.leaf(np.ones(2)), t2.leaf(np.ones(2)))
