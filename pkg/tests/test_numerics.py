"""Oracle tests for the numeric primitives.

The attention oracle here is an independent triple-loop implementation:
anything the fast path computes must match it on small random instances.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ldif.numerics import (SeededRng, grad_check, masked_softmax,
                           scaled_dot_attention, softmax)


def naive_attention(q, k, v):
    """O(l*n*d) reference: per-row softmax over explicit logits."""
    l, d = q.shape
    n = k.shape[0]
    out = np.zeros((l, v.shape[1]))
    for i in range(l):
        logits = np.zeros(n)
        for j in range(n):
            acc = 0.0
            for c in range(d):
                acc += float(q[i, c]) * float(k[j, c])
            logits[j] = acc / math.sqrt(d)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        for j in range(n):
            out[i] += w[j] * v[j].numpy()
    return out


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(torch.tensor([0.0, 0.0]))
        assert torch.allclose(out, torch.tensor([0.5, 0.5]))

    def test_closed_form(self):
        # e^0 / (e^0 + e^ln3) = 1/4
        out = softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64))
        assert torch.allclose(out, torch.tensor([0.25, 0.75], dtype=torch.float64), atol=1e-12)

    def test_constant_rows(self):
        for x in (-7.0, 0.0, 123.0):
            out = softmax(torch.full((3,), x, dtype=torch.float64))
            assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax(torch.tensor([0.0, float("nan")]))
        with pytest.raises(ValueError):
            softmax(torch.tensor([0.0, float("inf")]))

    def test_invalid_dim(self):
        with pytest.raises(ValueError):
            softmax(torch.zeros(2, 3), dim=5)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=6),
           st.floats(-50, 50))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, values, shift):
        logits = torch.tensor(values, dtype=torch.float64)
        a = softmax(logits)
        b = softmax(logits + shift)
        assert torch.allclose(a, b, atol=1e-6)
        assert abs(float(a.sum()) - 1.0) <= 1e-6
        assert (a > 0).all() and (a <= 1).all()


class TestScaledDotAttention:
    def test_single_key_weight_one(self):
        q = torch.randn(4, 3, dtype=torch.float64)
        k = torch.randn(1, 3, dtype=torch.float64)
        v = torch.randn(1, 3, dtype=torch.float64)
        out = scaled_dot_attention(q, k, v)
        for i in range(4):
            assert torch.allclose(out[i], v[0])

    def test_zero_query_gives_value_mean(self):
        q = torch.zeros(2, 3, dtype=torch.float64)
        k = torch.randn(5, 3, dtype=torch.float64)
        v = torch.randn(5, 3, dtype=torch.float64)
        out = scaled_dot_attention(q, k, v)
        assert torch.allclose(out, v.mean(dim=0).expand(2, 3), atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            scaled_dot_attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4))
        with pytest.raises(ValueError):
            scaled_dot_attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(5, 3))

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
    @settings(max_examples=80, deadline=None)
    def test_matches_triple_loop_oracle(self, l, n, d, seed):
        rng = SeededRng(seed)
        q = torch.from_numpy(rng.normal((l, d)))
        k = torch.from_numpy(rng.normal((n, d)))
        v = torch.from_numpy(rng.normal((n, d)))
        fast = scaled_dot_attention(q, k, v).numpy()
        slow = naive_attention(q, k, v)
        np.testing.assert_allclose(fast, slow, atol=1e-6)

    def test_batched_matches_per_item(self):
        rng = SeededRng(3)
        q = torch.from_numpy(rng.normal((2, 4, 3)))
        k = torch.from_numpy(rng.normal((2, 5, 3)))
        v = torch.from_numpy(rng.normal((2, 5, 3)))
        batched = scaled_dot_attention(q, k, v)
        for b in range(2):
            single = scaled_dot_attention(q[b], k[b], v[b])
            assert torch.allclose(batched[b], single, atol=1e-12)


class TestMaskedSoftmax:
    def test_invalid_keys_get_zero_weight(self):
        logits = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        valid = torch.tensor([[True, False, True]])
        w = masked_softmax(logits, valid)
        assert float(w[0, 1]) == 0.0
        assert abs(float(w.sum()) - 1.0) <= 1e-12

    def test_matches_plain_softmax_when_all_valid(self):
        logits = torch.randn(3, 5, dtype=torch.float64)
        w = masked_softmax(logits, torch.ones(3, 5, dtype=torch.bool))
        assert torch.allclose(w, softmax(logits), atol=1e-12)

    def test_dead_row_uniform(self):
        logits = torch.randn(1, 4, dtype=torch.float64)
        w = masked_softmax(logits, torch.zeros(1, 4, dtype=torch.bool))
        assert torch.allclose(w, torch.full((1, 4), 0.25, dtype=torch.float64))

    def test_equals_gathered_softmax(self):
        rng = SeededRng(11)
        logits = torch.from_numpy(rng.normal((6, 7)))
        valid = torch.from_numpy(rng.uniform(shape=(6, 7)) > 0.4)
        valid[:, 0] = True
        w = masked_softmax(logits, valid)
        for i in range(6):
            keep = valid[i]
            ref = softmax(logits[i][keep])
            assert torch.allclose(w[i][keep], ref, atol=1e-12)
            assert float(w[i][~keep].abs().sum()) == 0.0


class TestSeededRng:
    def test_equal_seeds_equal_streams(self):
        a = SeededRng(42).normal((100,))
        b = SeededRng(42).normal((100,))
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        assert SeededRng(1).normal((8,)).tobytes() != SeededRng(2).normal((8,)).tobytes()

    def test_children_are_independent_and_stable(self):
        root = SeededRng(7)
        a1 = root.child("alpha").normal((16,))
        b1 = root.child("beta").normal((16,))
        a2 = SeededRng(7).child("alpha").normal((16,))
        assert a1.tobytes() == a2.tobytes()
        assert a1.tobytes() != b1.tobytes()

    def test_child_consumption_order_irrelevant(self):
        """Drawing from one child must not perturb a sibling's stream."""
        r1 = SeededRng(5)
        _ = r1.child("x").normal((32,))
        after = r1.child("y").normal((4,))
        fresh = SeededRng(5).child("y").normal((4,))
        assert after.tobytes() == fresh.tobytes()

    def test_integers_bounds(self):
        draws = SeededRng(9).integers(1, 11, shape=(1000,))
        assert draws.min() >= 1 and draws.max() <= 10

    def test_rejects_bad_seed(self):
        with pytest.raises(ValueError):
            SeededRng(-1)


class TestGradCheck:
    def test_quadratic(self):
        theta = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: (theta ** 2).sum(), {"theta": theta}, rel_tol=1e-6)
        assert report.passed
        assert report.max_rel_err <= 1e-6

    def test_budget_met_despite_rounding(self):
        # Many tiny tensors next to one big one make the proportional shares
        # round to zero; the sampler still owes min_elements in total.
        torch.manual_seed(0)
        params = {f"w{i}": torch.randn(1, dtype=torch.float64, requires_grad=True)
                  for i in range(100)}
        params["big"] = torch.randn(1000, dtype=torch.float64, requires_grad=True)

        def f():
            return sum((p ** 2).sum() for p in params.values())

        report = grad_check(f, params, rel_tol=1e-6, min_elements=200)
        assert report.n_elements >= 200
        assert report.passed

    def test_constant_function(self):
        theta = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: (theta * 0.0).sum(), {"theta": theta}, rel_tol=1e-8)
        assert report.passed

    def test_catches_wrong_gradient(self):
        """A detached term contributes to f but not to autograd: must fail."""
        theta = torch.tensor([1.5], dtype=torch.float64, requires_grad=True)

        def f():
            return (theta ** 2).sum() + 3.0 * theta.detach().sum()

        report = grad_check(f, {"theta": theta}, rel_tol=1e-4)
        assert not report.passed

    def test_rejects_float32(self):
        theta = torch.tensor([1.0], dtype=torch.float32, requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: (theta ** 2).sum(), {"theta": theta})

    def test_rejects_nondeterministic_f(self):
        theta = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        state = {"n": 0.0}

        def f():
            state["n"] += 1.0
            return (theta ** 2).sum() * state["n"]

        with pytest.raises(RuntimeError):
            grad_check(f, {"theta": theta})

    def test_multi_parameter_coverage(self):
        a = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        b = torch.randn(7, dtype=torch.float64, requires_grad=True)

        def f():
            return (a ** 2).sum() * b.sum() + (b ** 3).sum()

        report = grad_check(f, {"a": a, "b": b}, rel_tol=1e-5)
        assert report.passed
        assert set(report.per_param) == {"a", "b"}
