import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfgr.autograd import Tensor, backward
from dfgr.heads import HeadParams, masked_bce, probabilities, score


def silu(x):
    return x / (1.0 + np.exp(-x))


def test_zero_head():
    head = HeadParams(4)
    for _, p in head.named_parameters():
        p.data[:] = 0
    z = score(Tensor(np.ones((3, 4))), head)
    assert z.shape == (3,)
    np.testing.assert_array_equal(probabilities(z), np.full(3, 0.5))


def test_single_position_chain(rng):
    head = HeadParams(4, rng, std=0.5)
    y = rng.normal(size=4)
    h = silu(y @ head.W1.data + head.b1.data)
    expect = float(h @ head.W2.data[:, 0] + head.b2.data[0])
    assert score(Tensor(y[None]), head).data[0] == pytest.approx(expect, abs=1e-15)


def test_monotone_in_final_weight(rng):
    head = HeadParams(4, rng, std=0.5)
    y = Tensor(np.abs(rng.normal(size=(1, 4))) + 1)
    head.W1.data = np.abs(head.W1.data)
    head.b1.data[:] = 1.0
    z0 = score(y, head).data[0]
    head.W2.data[0, 0] += 0.5
    assert score(y, head).data[0] > z0


def test_batched_shape(rng):
    assert score(Tensor(rng.normal(size=(2, 5, 4))), HeadParams(4, rng)).shape == (2, 5)


class TestMaskedBce:
    def test_zero_logits_give_ln2(self):
        loss = masked_bce(Tensor(np.zeros(5)), np.array([0, 1, 1, 0, 1]), np.ones(5, dtype=bool))
        assert float(loss.data) == pytest.approx(np.log(2), abs=1e-15)

    def test_confident_correct_is_tiny(self):
        loss = masked_bce(Tensor(np.array([20.0, -20.0])), np.array([1, 0]), np.ones(2, dtype=bool))
        assert float(loss.data) < 1e-8

    def test_no_labels_rejected(self):
        with pytest.raises(ValueError):
            masked_bce(Tensor(np.zeros(3)), np.zeros(3), np.zeros(3, dtype=bool))

    def test_extreme_logits_are_finite(self):
        loss = masked_bce(Tensor(np.array([800.0, -800.0])), np.array([0, 1]), np.ones(2, dtype=bool))
        assert float(loss.data) == pytest.approx(800.0)

    def test_masked_positions_get_zero_gradient(self, rng):
        z = Tensor(rng.normal(size=6), requires_grad=True)
        mask = np.array([1, 0, 1, 0, 0, 1], dtype=bool)
        backward(masked_bce(z, rng.integers(0, 2, size=6), mask))
        assert not z.grad[~mask].any()

    def test_gradient_identity(self, rng):
        z = Tensor(rng.normal(size=(2, 5)) * 3, requires_grad=True)
        y = rng.integers(0, 2, size=(2, 5))
        mask = rng.random((2, 5)) < 0.7
        mask[0, 0] = True
        backward(masked_bce(z, y, mask))
        sig = 1 / (1 + np.exp(-z.data))
        np.testing.assert_allclose(z.grad[mask] * mask.sum(), (sig - y)[mask], rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-30, 30), st.integers(0, 1)), min_size=1, max_size=20))
def test_bce_matches_direct_formula(pairs):
    z = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    got = float(masked_bce(Tensor(z), y, np.ones(len(z), dtype=bool)).data)
    with mpmath.workdps(60):
        terms = []
        for zi, yi in zip(z.tolist(), y.tolist()):
            sig = 1 / (1 + mpmath.exp(-mpmath.mpf(zi)))
            terms.append(-(yi * mpmath.log(sig) + (1 - yi) * mpmath.log(1 - sig)))
        direct = float(mpmath.fsum(terms) / len(terms))
    assert got == pytest.approx(direct, rel=1e-12, abs=1e-14)
