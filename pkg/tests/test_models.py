import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mirinf import models
from mirinf.data import Dataset, make_blobs
from mirinf.errors import ConfigError, EmptyBatchError, UnsupportedSpecError
from mirinf.models import Mlp, MultinomialLogistic


def one_row(x, y, C):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return Dataset(x, np.array([y]), ("r0",), C)


def central_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def ref_softmax_xent(logit_row, y):
    # independent scalar evaluation
    m = max(logit_row)
    lse = m + math.log(sum(math.exp(v - m) for v in logit_row))
    return lse - logit_row[y]


class TestParamCount:
    def test_examples(self):
        assert models.param_count(MultinomialLogistic(2, 2)) == 6
        assert models.param_count(MultinomialLogistic(784, 10)) == 7850
        assert models.param_count(Mlp((4, 3), 2)) == 23

    @given(st.lists(st.integers(1, 9), min_size=1, max_size=4), st.integers(2, 6))
    def test_mlp_formula(self, widths, C):
        w = widths + [C]
        expected = sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))
        assert models.param_count(Mlp(tuple(widths), C)) == expected


def test_spec_validation():
    with pytest.raises(ConfigError):
        MultinomialLogistic(2, 2, l2=-1.0)
    with pytest.raises(ConfigError):
        Mlp((3,), 2, activation="gelu")
    spec = Mlp((3, 4), 2, "tanh", 0.5)
    assert models.spec_from_dict(models.spec_to_dict(spec)) == spec


def test_init_params():
    assert np.array_equal(models.init_params(MultinomialLogistic(2, 2), seed=7), np.zeros(6))
    spec = Mlp((5, 4), 3)
    a, b = models.init_params(spec, 3), models.init_params(spec, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, models.init_params(spec, 4))
    assert np.abs(a[:20]).max() <= 1 / math.sqrt(5)


class TestLoss:
    def test_uniform_softmax(self):
        data = make_blobs(10, 3, 2, 1.0, 0)
        spec = MultinomialLogistic(3, 2)
        assert models.loss(spec, np.zeros(8), data).mean == pytest.approx(math.log(2), abs=1e-15)
        data10 = make_blobs(20, 3, 10, 1.0, 0)
        spec10 = MultinomialLogistic(3, 10)
        value = models.loss(spec10, np.zeros(40), data10).mean
        assert value == pytest.approx(math.log(10), abs=1e-15)

    def test_hand_evaluated_loss(self):
        spec = MultinomialLogistic(1, 2)
        # [W; b] with W = [0, 1] and zero bias gives logits (0, 1) at x = 1
        params = np.array([0.0, 1.0, 0.0, 0.0])
        # the class holding logit 1 costs ln(1 + e) - 1, the other ln(1 + e)
        high = models.per_example_losses(spec, params, one_row([1.0], 1, 2))[0]
        low = models.per_example_losses(spec, params, one_row([1.0], 0, 2))[0]
        assert high == pytest.approx(math.log(1 + math.e) - 1, abs=1e-12)
        assert high == pytest.approx(0.313262, abs=1e-6)
        assert low == pytest.approx(math.log(1 + math.e), abs=1e-12)

    def test_empty_batch(self, blobs):
        spec = MultinomialLogistic(4, 3)
        with pytest.raises(EmptyBatchError, match="empty batch"):
            models.loss(spec, np.zeros(15), blobs, indices=[])
        with pytest.raises(EmptyBatchError):
            models.grad(spec, np.zeros(15), blobs, indices=[])

    def test_matches_scalar_reference(self, blobs, rng):
        spec = Mlp((4, 6), 3, "tanh")
        theta = rng.normal(size=models.param_count(spec))
        Z = models.logits(spec, theta, blobs.features)
        per = models.per_example_losses(spec, theta, blobs)
        ref = [ref_softmax_xent(list(Z[i]), int(blobs.labels[i])) for i in range(blobs.n)]
        assert np.allclose(per, ref, rtol=1e-12, atol=1e-13)

    @given(st.integers(0, 10_000), st.floats(0, 2))
    def test_batch_mean_consistency(self, seed, l2):
        data = make_blobs(15, 3, 3, 1.0, seed)
        spec = MultinomialLogistic(3, 3, l2)
        theta = np.random.default_rng(seed).normal(size=12)
        value = models.loss(spec, theta, data, want_per_example=True)
        assert np.all(value.per_example >= 0)
        expected = value.per_example.mean() + 0.5 * l2 * theta @ theta
        assert value.mean == pytest.approx(expected, rel=1e-12)

    def test_loss_vanishes_with_margin(self):
        spec = MultinomialLogistic(1, 2)
        data = one_row([1.0], 0, 2)
        values = [models.loss(spec, np.array([m, 0.0, 0.0, 0.0]), data).mean for m in (1, 5, 10, 30)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-12


class TestGrad:
    def test_zero_params_two_classes(self):
        spec = MultinomialLogistic(3, 2)
        x = np.array([1.0, -2.0, 0.5])
        g = models.grad(spec, np.zeros(8), one_row(x, 1, 2)).reshape(4, 2)
        residual = np.array([0.5, -0.5])
        assert np.allclose(g[:3], np.outer(x, residual), atol=1e-15)
        assert np.allclose(g[3], residual, atol=1e-15)

    def test_duplicated_rows(self, blobs, rng):
        spec = Mlp((4, 5), 3)
        theta = rng.normal(size=models.param_count(spec))
        single = models.grad(spec, theta, blobs, [7])
        repeated = models.grad(spec, theta, blobs, [7, 7, 7, 7])
        assert np.allclose(single, repeated, rtol=1e-13, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("kind", ["logistic", "mlp-relu", "mlp-tanh"])
    def test_finite_difference(self, seed, kind):
        rng = np.random.default_rng(seed)
        data = make_blobs(12, 3, 3, 1.0, seed)
        if kind == "logistic":
            spec = MultinomialLogistic(3, 3, 0.1)
        else:
            spec = Mlp((3, 4, 4), 3, kind.split("-")[1], 0.1)
        theta = rng.normal(scale=0.7, size=models.param_count(spec))
        analytic = models.grad(spec, theta, data)
        numeric = central_grad(lambda t: models.loss(spec, t, data).mean, theta)
        assert np.all(np.abs(analytic - numeric) / (1 + np.abs(analytic)) < 1e-5)

    def test_per_example_grads_average_to_grad(self, blobs, rng):
        spec = Mlp((4, 5), 3, "tanh", 0.2)
        theta = rng.normal(size=models.param_count(spec))
        G = models.per_example_grads(spec, theta, blobs)
        assert G.shape == (blobs.n, theta.size)
        assert np.allclose(G.mean(0), models.grad(spec, theta, blobs, regularized=False), atol=1e-14)

    def test_per_example_dots_chunking(self, blobs, rng):
        spec = Mlp((4, 5), 3)
        theta = rng.normal(size=models.param_count(spec))
        v = rng.normal(size=theta.size)
        rows = np.arange(blobs.n)
        full = models.per_example_grads(spec, theta, blobs) @ v
        chunked = models.per_example_dots(spec, theta, blobs, rows, v, chunk_floats=50)
        assert np.allclose(full, chunked, rtol=1e-13, atol=1e-15)


class TestHessian:
    def instance(self, seed=0, l2=0.3):
        data = make_blobs(25, 3, 4, 1.0, seed)
        spec = MultinomialLogistic(3, 4, l2)
        theta = np.random.default_rng(seed).normal(size=16)
        return spec, theta, data

    def test_symmetric_and_shifted(self):
        spec, theta, data = self.instance(l2=1.0)
        H = models.hessian(spec, theta, data)
        assert np.abs(H - H.T).max() < 1e-12
        assert np.linalg.eigvalsh(H).min() >= 1 - 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference(self, seed):
        spec, theta, data = self.instance(seed)
        H = models.hessian(spec, theta, data)
        h = 1e-5
        numeric = np.zeros_like(H)
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h
            numeric[:, j] = (models.grad(spec, theta + e, data) - models.grad(spec, theta - e, data)) / (2 * h)
        assert np.max(np.abs(H - numeric) / (1 + np.abs(H))) < 1e-4

    def test_hvp(self, rng):
        spec, theta, data = self.instance()
        H = models.hessian(spec, theta, data)
        v, w = rng.normal(size=16), rng.normal(size=16)
        assert np.array_equal(models.hvp(spec, theta, data, np.zeros(16)), np.zeros(16))
        hv = models.hvp(spec, theta, data, v)
        assert np.linalg.norm(hv - H @ v) <= 1e-10 * np.linalg.norm(H @ v)
        lhs = models.hvp(spec, theta, data, 2.0 * v - 3.0 * w)
        rhs = 2.0 * hv - 3.0 * models.hvp(spec, theta, data, w)
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_mlp_rejected(self, blobs):
        spec = Mlp((4, 3), 3)
        with pytest.raises(UnsupportedSpecError, match="hessian unsupported for spec"):
            models.hessian(spec, models.init_params(spec), blobs)
        with pytest.raises(UnsupportedSpecError):
            models.hvp(spec, models.init_params(spec), blobs, np.zeros(models.param_count(spec)))


def test_wrong_param_length(blobs):
    with pytest.raises(ConfigError):
        models.loss(MultinomialLogistic(4, 3), np.zeros(3), blobs)


def test_source_losses_match_means(blobs, rng):
    spec = MultinomialLogistic(4, 3)
    theta = rng.normal(size=15)
    sources = [[0, 1, 2], [5], [10, 20]]
    out = models.source_losses(spec, theta, blobs, sources)
    for value, src in zip(out, sources):
        assert value == pytest.approx(models.data_loss(spec, theta, blobs, src), rel=1e-13)
