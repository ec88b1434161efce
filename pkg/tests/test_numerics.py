import math

import numpy as np
import pytest

from alibi_surgeon import numerics as nx
from alibi_surgeon.numerics import Parameter, Tape, Tensor


def check_grad(op, *shapes, seed=0, positive=False, h=1e-3):
    """Compare tape gradients of sum(R * op(*xs)) against central differences."""
    rng = np.random.default_rng(seed)
    with nx.precision(np.float64):
        xs = [rng.normal(size=s) for s in shapes]
        if positive:
            xs = [np.abs(x) + 0.5 for x in xs]
        out_shape = op(*[Tensor(x) for x in xs]).shape
        R = rng.normal(size=out_shape)

        def scalar(*arrs):
            return float((op(*[Tensor(a) for a in arrs]).data * R).sum())

        ts = [Tensor(x, requires_grad=True) for x in xs]
        with Tape() as tape:
            y = nx.dot(op(*ts), Tensor(R))
        tape.backward(y)
        errs = []
        for i, x in enumerate(xs):
            def f(xi, i=i):
                arrs = list(xs)
                arrs[i] = xi
                return scalar(*arrs)

            fd = nx.finite_diff_grad(f, x, h)
            errs.append(nx.relative_error(ts[i].grad, fd))
    return max(errs)


CAUSAL4 = np.triu(np.full((4, 4), -np.inf), k=1)

PRIMITIVES = {
    "add": (nx.add, [(3, 4), (3, 4)]),
    "add_bias": (nx.add_bias, [(5, 3), (3,)]),
    "scale": (lambda x: nx.scale(x, -1.7), [(4, 2)]),
    "matmul": (nx.matmul, [(3, 4), (4, 5)]),
    "matmul_batched": (nx.matmul, [(2, 3, 4), (2, 4, 2)]),
    "transpose": (nx.transpose, [(3, 5)]),
    "reshape": (lambda x: nx.reshape(x, (6, 2)), [(3, 4)]),
    "take_cols": (lambda x: nx.take_cols(x, 1, 4), [(3, 6)]),
    "split_heads": (lambda x: nx.split_heads(x, 2), [(3, 6)]),
    "concat_heads": (nx.concat_heads, [(2, 3, 4)]),
    "softmax": (nx.softmax_rows, [(3, 5)]),
    "softmax_masked": (lambda x: nx.softmax_rows(x, CAUSAL4), [(4, 4)]),
    "layernorm": (lambda x, g, b: nx.layernorm(x, g, b), [(4, 6), (6,), (6,)]),
    "gelu": (nx.gelu, [(4, 5)]),
    "embedding": (lambda t: nx.embedding_lookup(t, [0, 2, 2, 4]), [(5, 3)]),
    "cross_entropy": (lambda z: nx.cross_entropy(z, [1, 0, 3]), [(3, 4)]),
    "sum_all": (nx.sum_all, [(3, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("trial", range(2))
def test_primitive_gradients_match_finite_differences(name, trial):
    op, shapes = PRIMITIVES[name]
    assert check_grad(op, *shapes, seed=trial) < 1e-4


def test_gradient_check_many_random_trials():
    rng = np.random.default_rng(7)
    errs = []
    for trial in range(24):
        n, m, k = (int(v) for v in rng.integers(3, 7, size=3))
        op = lambda a, b, g, s: nx.gelu(nx.layernorm(nx.matmul(a, b), g, s))  # noqa: E731
        errs.append(check_grad(op, (n, m), (m, k), (k,), (k,), seed=trial))
    assert len(errs) >= 20
    assert max(errs) < 1e-4


def test_softmax_reference_values():
    p = nx.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(p, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_causal_mask_gives_exact_zeros():
    p = nx.softmax_rows(Tensor(np.zeros((4, 4))), CAUSAL4).data
    assert np.all(p[np.triu_indices(4, 1)] == 0.0)
    np.testing.assert_allclose(p[3], 0.25)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_softmax_rejects_fully_masked_row():
    bias = np.full((2, 3), -np.inf)
    bias[0, 0] = 0.0
    with pytest.raises(ValueError):
        nx.softmax_rows(Tensor(np.zeros((2, 3))), bias)


def test_layernorm_normalizes():
    x = Tensor(np.random.default_rng(0).normal(3.0, 5.0, size=(4, 8)))
    y = nx.layernorm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-3)


def test_gelu_is_exact_erf_form():
    x = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
    expect = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(nx.gelu(Tensor(x)).data, expect, rtol=1e-6, atol=1e-7)


def test_cross_entropy_uniform_is_log_vocab():
    loss = nx.cross_entropy(Tensor(np.zeros((5, 8))), [0, 1, 2, 3, 7])
    assert loss.item() == pytest.approx(math.log(8), abs=1e-6)


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        nx.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_non_finite_values_are_rejected():
    with pytest.raises(nx.NonFiniteError):
        nx.scale(Tensor([1e30]), 1e30)


def test_backward_twice_on_same_tape_fails():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        y = nx.sum_all(w)
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_parameter_gradients_accumulate_across_tapes():
    w = Parameter(np.arange(3.0))
    for _ in range(2):
        with Tape() as tape:
            y = nx.dot(w, Tensor(np.ones(3)))
        tape.backward(y)
    np.testing.assert_array_equal(w.grad, [2.0, 2.0, 2.0])


def test_trainable_mask_zeroes_gradients():
    w = Parameter(np.ones(4))
    w.trainable_mask = np.array([True, False, True, False])
    with Tape() as tape:
        y = nx.sum_all(w)
    tape.backward(y)
    w.apply_mask()
    np.testing.assert_array_equal(w.grad, [1, 0, 1, 0])


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    r1 = nx.softmax_rows(nx.matmul(Tensor(a), Tensor(b))).data
    r2 = nx.softmax_rows(nx.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


def test_precision_context_restores_default():
    assert nx.default_dtype() == np.float32
    with nx.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
