import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdn import ops
from cdn.gradcheck import grad_check
from cdn.losses import (
    LossToggles,
    LossWeights,
    SsimConstants,
    composite_loss,
    kl_divergence,
    loss_kld,
    loss_l1,
    loss_ssim,
    ssim_global,
)
from cdn.tensor import Tensor, backward, use_tape

from conftest import leaf


def dist(*values):
    return Tensor(np.array([values], dtype=np.float64))


def kl_reference(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def ssim_reference(a, b, c1=1e-4, c2=9e-4):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))


U, Q = (0.5, 0.5), (0.25, 0.75)


class TestSsim:
    def test_identical_is_one(self, rng):
        x = Tensor(rng.uniform(size=(2, 1, 8, 8)), dtype=np.float64)
        assert ssim_global(x, x).item() == pytest.approx(1.0, abs=1e-12)

    def test_constant_images(self):
        a = Tensor(np.zeros((1, 1, 4, 4)), dtype=np.float64)
        b = Tensor(np.ones((1, 1, 4, 4)), dtype=np.float64)
        k = SsimConstants(1e-4, 9e-4)
        assert ssim_global(a, b, k).item() == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-12)

    def test_matches_reference(self, rng):
        a, b = rng.uniform(size=(1, 1, 8, 8)), rng.uniform(size=(1, 1, 8, 8))
        got = ssim_global(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
        assert got == pytest.approx(ssim_reference(a, b), rel=1e-12)

    def test_per_sample_batch_mean(self, rng):
        a, b = rng.uniform(size=(3, 1, 6, 6)), rng.uniform(size=(3, 1, 6, 6))
        got = ssim_global(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
        assert got == pytest.approx(np.mean([ssim_reference(a[i], b[i]) for i in range(3)]), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim_global(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))

    def test_bad_constants(self):
        with pytest.raises(ValueError):
            SsimConstants(0.0, 1e-3)

    def test_gradient(self, rng):
        a, b = leaf(rng.uniform(size=(2, 1, 8, 8))), leaf(rng.uniform(size=(2, 1, 8, 8)))
        assert grad_check(ssim_global, [a, b]).passed


class TestLossSsim:
    def test_perfect_prediction(self, rng):
        y = Tensor(rng.uniform(size=(1, 1, 8, 8)), dtype=np.float64)
        assert loss_ssim(y, y).item() == pytest.approx(0.0, abs=1e-12)

    def test_monotone_interpolation(self):
        rng = np.random.default_rng(7)
        y = rng.uniform(size=(1, 1, 16, 16))
        noise = rng.uniform(size=(1, 1, 16, 16))
        losses = [loss_ssim(Tensor((1 - t) * noise + t * y, dtype=np.float64), Tensor(y, dtype=np.float64)).item()
                  for t in np.linspace(0, 1, 5)]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.1, 5.0))
    def test_range_and_symmetry(self, seed, scale):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal((2, 1, 6, 6)) * scale, dtype=np.float64)
        b = Tensor(rng.uniform(size=(2, 1, 6, 6)), dtype=np.float64)
        v = loss_ssim(a, b).item()
        assert 0 <= v <= 2
        assert v == pytest.approx(loss_ssim(b, a).item(), rel=1e-12)

    def test_gradient(self, rng):
        a = leaf(rng.uniform(size=(2, 1, 8, 8)))
        y = Tensor(rng.uniform(size=(2, 1, 8, 8)), dtype=np.float64)
        assert grad_check(lambda a: loss_ssim(a, y), [a]).passed


class TestKlDivergence:
    def test_closed_form(self):
        assert kl_divergence(dist(*U), dist(*Q)).item() == pytest.approx(0.14384103622589045, abs=1e-6)
        assert kl_divergence(dist(*U), dist(*Q)).item() == pytest.approx(kl_reference(U, Q), abs=1e-12)

    def test_reverse_closed_form(self):
        assert kl_divergence(dist(*Q), dist(*U)).item() == pytest.approx(0.1308120, abs=1e-6)

    def test_self_is_zero(self):
        p = dist(0.1, 0.2, 0.7)
        assert kl_divergence(p, p).item() == 0.0

    def test_zero_mass_contributes_nothing(self):
        assert kl_divergence(dist(1.0, 0.0), dist(0.5, 0.5)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(dist(0.5, 0.5), dist(0.2, 0.3, 0.5))

    def test_unnormalized(self):
        with pytest.raises(ValueError):
            kl_divergence(dist(0.5, 0.6), dist(0.5, 0.5))

    def test_gibbs_on_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(2, 20))
            p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
            assert kl_divergence(Tensor(p[None]), Tensor(q[None])).item() >= 0

    def test_gradient_through_softmax(self, rng):
        a, b = leaf(rng.standard_normal((2, 1, 3, 3))), leaf(rng.standard_normal((2, 1, 3, 3)))
        assert grad_check(lambda a, b: kl_divergence(ops.softmax_flat(a), ops.softmax_flat(b)), [a, b]).passed


class TestLossKld:
    def test_identical(self):
        assert loss_kld([dist(0.2, 0.8)] * 4).item() == 0.0

    def test_closed_form(self):
        value = loss_kld([dist(*U), dist(*U), dist(*U), dist(*Q)]).item()
        assert value == pytest.approx(3 * (kl_reference(U, Q) + kl_reference(Q, U)), abs=1e-9)
        # the quoted figure sums the rounded pair values
        assert value == pytest.approx(0.82397, abs=5e-5)

    def test_brute_force_pairs(self):
        rng = np.random.default_rng(11)
        ps = [rng.dirichlet(np.ones(6)) for _ in range(4)]
        brute = 0.0
        for i in range(4):
            for j in range(4):
                if i != j:
                    brute += kl_reference(ps[i], ps[j])
        assert loss_kld([Tensor(p[None]) for p in ps]).item() == pytest.approx(brute, rel=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        ps = [Tensor(rng.dirichlet(np.ones(5))[None]) for _ in range(4)]
        base = loss_kld(ps).item()
        for perm in permutations(range(4)):
            assert loss_kld([ps[i] for i in perm]).item() == pytest.approx(base, rel=1e-12)

    def test_zero_iff_equal(self):
        p = dist(0.3, 0.7)
        assert loss_kld([p, p, p, dist(0.3 + 1e-6, 0.7 - 1e-6)]).item() > 0

    def test_requires_four(self):
        with pytest.raises(ValueError):
            loss_kld([dist(*U)] * 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_kld([dist(*U)] * 3 + [dist(0.2, 0.3, 0.5)])

    def test_gradient(self, rng):
        xs = [leaf(rng.standard_normal((2, 1, 2, 3))) for _ in range(4)]
        assert grad_check(lambda *xs: loss_kld([ops.softmax_flat(x) for x in xs]), xs).passed


class TestLossL1:
    def test_perfect(self, rng):
        y = Tensor(rng.uniform(size=(1, 1, 4, 4)))
        assert loss_l1(y, y).item() == 0.0

    def test_constant_offset(self, rng):
        y = rng.uniform(size=(1, 1, 4, 4))
        assert loss_l1(Tensor(y + 0.5, dtype=np.float64), Tensor(y, dtype=np.float64)).item() == pytest.approx(0.5)

    def test_subgradient(self, rng):
        x = leaf(rng.uniform(size=(1, 1, 4, 4)))
        y = Tensor(rng.uniform(size=(1, 1, 4, 4)), dtype=np.float64)
        with use_tape():
            backward(loss_l1(x, y))
        np.testing.assert_allclose(x.grad, np.sign(x.data - y.data) / x.size)
        x.zero_grad()
        assert grad_check(lambda x: loss_l1(x, y), [x]).passed

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_l1(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def loss_inputs(rng, identical=False):
    y = rng.uniform(size=(2, 1, 8, 8))
    denoised = y + 0.05 * rng.standard_normal(y.shape)
    x_c = y + 0.1 * rng.standard_normal(y.shape)
    logits = [rng.standard_normal((2, 1, 4, 4))] * 4 if identical else \
        [rng.standard_normal((2, 1, 4, 4)) for _ in range(4)]
    f = lambda a: Tensor(a, dtype=np.float64)  # noqa: E731
    return f(denoised), f(x_c), [ops.softmax_flat(f(z)) for z in logits], f(y)


def softmax_rows(z):
    z = z.reshape(z.shape[0], -1)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestCompositeLoss:
    def test_perfect_model(self, rng):
        y = Tensor(rng.uniform(size=(2, 1, 8, 8)), dtype=np.float64)
        p = ops.softmax_flat(Tensor(rng.standard_normal((2, 1, 4, 4)), dtype=np.float64))
        terms = composite_loss(y, y, [p] * 4, y)
        assert terms.total.item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_patches_drop_kld(self, rng):
        d, x_c, ps, y = loss_inputs(rng, identical=True)
        terms = composite_loss(d, x_c, ps, y)
        assert terms.l_kld.item() == 0.0
        assert terms.total.item() == terms.l_ssim.item() + terms.l1.item()

    def test_total_is_sum_of_terms(self, rng):
        terms = composite_loss(*loss_inputs(rng))
        v = terms.values()
        assert v["total"] == v["l_ssim"] + v["l_kld"] + v["l1"]
        assert min(v.values()) >= 0 and v["l_ssim"] <= 2

    def test_out_of_graph_oracle(self, rng):
        z = [rng.standard_normal((2, 1, 4, 4)) for _ in range(4)]
        y = rng.uniform(size=(2, 1, 8, 8))
        den = y + 0.05 * rng.standard_normal(y.shape)
        x_c = y + 0.1 * rng.standard_normal(y.shape)
        f = lambda a: Tensor(a, dtype=np.float64)  # noqa: E731
        terms = composite_loss(f(den), f(x_c), [ops.softmax_flat(f(a)) for a in z], f(y))

        probs = [softmax_rows(a) for a in z]
        l1 = np.abs(den - y).mean()
        l_ssim = 1 - np.mean([ssim_reference(x_c[i], y[i]) for i in range(2)])
        l_kld = sum(np.mean([kl_reference(probs[i][r], probs[j][r]) for r in range(2)])
                    for i, j in permutations(range(4), 2))
        assert terms.total.item() == pytest.approx(l1 + l_ssim + l_kld, abs=1e-6)

    def test_toggles_zero_and_detach(self, rng):
        d, x_c, ps, y = loss_inputs(rng)
        terms = composite_loss(d, x_c, ps, y, LossToggles(ssim=False, kld=False))
        assert terms.l_ssim.item() == 0 and terms.l_kld.item() == 0
        assert terms.total is terms.l1

    def test_weights(self, rng):
        d, x_c, ps, y = loss_inputs(rng)
        plain = composite_loss(d, x_c, ps, y).values()
        w = composite_loss(d, x_c, ps, y, weights=LossWeights(ssim=2.0, kld=0.5, l1=3.0)).values()
        assert w["total"] == pytest.approx(2 * plain["l_ssim"] + 0.5 * plain["l_kld"] + 3 * plain["l1"], rel=1e-12)

    def test_gradient(self, rng):
        y = Tensor(rng.uniform(size=(2, 1, 8, 8)), dtype=np.float64)
        den = leaf(y.data + 0.1 * rng.standard_normal(y.shape))
        x_c = leaf(y.data + 0.1 * rng.standard_normal(y.shape))
        zs = [leaf(rng.standard_normal((2, 1, 4, 4))) for _ in range(4)]

        def f(den, x_c, *zs):
            return composite_loss(den, x_c, [ops.softmax_flat(z) for z in zs], y).total

        assert grad_check(f, [den, x_c, *zs]).passed
