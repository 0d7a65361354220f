import numpy as np
import pytest

from hetgc.errors import InvalidInput
from hetgc.losses import LogisticLoss, QuadraticLoss, calibrate_C, make_logistic, make_quadratic


def finite_difference(fn, beta, h=1e-6):
    out = np.zeros_like(beta)
    for r in range(beta.size):
        e = np.zeros_like(beta)
        e[r] = h
        out[r] = (fn(beta + e) - fn(beta - e)) / (2 * h)
    return out


def partition_loss_quadratic(loss, j, beta):
    if loss.mode == "diag":
        resid = loss.A[j] * beta - loss.b[j]
    else:
        resid = loss.A[j] @ beta - loss.b[j]
    return 0.5 * resid @ resid + 0.5 * loss.ridge / loss.n * beta @ beta


def partition_loss_logistic(loss, j, beta):
    margins = loss.y[j] * (loss.X[j] @ beta)
    return np.mean(np.logaddexp(0.0, -margins)) + 0.5 * loss.ridge / loss.n * beta @ beta


QUADRATICS = {
    "diag": lambda rng: make_quadratic(4, 6, 0.5, rng, diagonal=True),
    "dense": lambda rng: make_quadratic(4, 6, 0.5, rng, rows=8),
    "rows": lambda rng: make_quadratic(4, 6, 0.5, rng, rows=2),
}


@pytest.mark.parametrize("mode", sorted(QUADRATICS))
def test_quadratic_partition_grads_match_finite_differences(mode):
    rng = np.random.default_rng(0)
    loss = QUADRATICS[mode](rng)
    assert loss.mode == mode
    beta = rng.standard_normal(6)
    G = loss.partition_grads(beta)[0]
    for j in range(loss.n):
        fd = finite_difference(lambda b: partition_loss_quadratic(loss, j, b), beta)
        assert np.allclose(G[j], fd, atol=1e-6)
    assert np.allclose(loss.grad(beta)[0], G.sum(axis=0), atol=1e-12)
    assert loss.loss(beta)[0] == pytest.approx(sum(partition_loss_quadratic(loss, j, beta) for j in range(4)))


@pytest.mark.parametrize("mode", sorted(QUADRATICS))
def test_quadratic_strong_convexity_is_pinned(mode):
    loss = QUADRATICS[mode](np.random.default_rng(1))
    assert loss.strong_convexity == pytest.approx(0.5, rel=1e-9)
    assert np.allclose(loss.grad(loss.optimum), 0.0, atol=1e-10)


@pytest.mark.parametrize("mode", sorted(QUADRATICS))
def test_encoded_grads_match_partition_grads(mode):
    rng = np.random.default_rng(2)
    loss = QUADRATICS[mode](rng)
    betas = rng.standard_normal((3, 6))
    W = rng.standard_normal((3, loss.n))
    expected = np.einsum("rn,rnl->rl", W, loss.partition_grads(betas))
    assert np.allclose(loss.encoded_grads(W, betas), expected, atol=1e-12)


def test_quadratic_identity_example():
    loss = QuadraticLoss(np.eye(3)[None], np.zeros((1, 3)))
    assert np.array_equal(loss.optimum, np.zeros(3))
    assert loss.strong_convexity == pytest.approx(1.0) and loss.smoothness == pytest.approx(1.0)


def test_quadratic_shape_errors():
    with pytest.raises(InvalidInput):
        QuadraticLoss(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(InvalidInput):
        QuadraticLoss(np.ones((2, 3, 4)), np.ones((2, 4)))
    with pytest.raises(InvalidInput):
        make_quadratic(0, 3, 1.0, np.random.default_rng(0))


@pytest.mark.parametrize("ridge", [0.0, 0.3])
def test_logistic_grads_match_finite_differences(ridge):
    rng = np.random.default_rng(3)
    loss = make_logistic(3, 5, 7, rng, ridge=ridge)
    for beta in (np.zeros(5), rng.standard_normal(5)):
        G = loss.partition_grads(beta)[0]
        for j in range(3):
            fd = finite_difference(lambda b: partition_loss_logistic(loss, j, b), beta)
            assert np.max(np.abs(G[j] - fd)) < 1e-5
        assert np.allclose(loss.grad(beta)[0], G.sum(axis=0), atol=1e-12)


def test_logistic_constant_labels_give_signed_gradient():
    X = np.abs(np.random.default_rng(4).standard_normal((2, 6, 3))) + 0.1
    loss = LogisticLoss(X, np.ones((2, 6)))
    assert np.all(loss.grad(np.zeros(3))[0] < 0)


def test_logistic_constants():
    loss = make_logistic(4, 8, 5, np.random.default_rng(0), ridge=0.2)
    assert loss.strong_convexity == 0.2
    assert loss.smoothness > 0.2
    assert loss.optimal_loss() is None


@pytest.mark.parametrize("factory", [
    lambda rng: make_quadratic(3, 4, 0.5, rng, diagonal=True),
    lambda rng: make_quadratic(3, 4, 0.5, rng, rows=2),
    lambda rng: make_quadratic(3, 4, 0.5, rng, rows=6),
    lambda rng: make_logistic(3, 4, 5, rng, ridge=0.1),
])
def test_minibatch_gradients_are_unbiased(factory):
    rng = np.random.default_rng(5)
    loss = factory(rng)
    beta = rng.standard_normal(4)
    draws = 20000
    idx = rng.integers(0, loss.m, size=(draws, loss.n, 2))
    G = loss.partition_grads(np.tile(beta, (draws, 1)), idx)
    mean = G.mean(axis=0)
    se = G.std(axis=0, ddof=1) / np.sqrt(draws)
    assert np.all(np.abs(mean - loss.partition_grads(beta)[0]) <= 5 * se + 1e-12)


def test_calibrate_C_floor_at_optimum():
    loss = QuadraticLoss(np.eye(3)[None], np.zeros((1, 3)))
    assert calibrate_C(loss, np.zeros(3)) == 1e-12


def test_calibrate_C_single_partition_example():
    loss = QuadraticLoss(np.eye(2)[None], np.zeros((1, 2)))
    # g = beta, so ||g||^2 = 4 at beta = (2, 0)
    assert calibrate_C(loss, np.array([2.0, 0.0])) == pytest.approx(4.4)


def test_calibrate_C_takes_maximum_over_samples():
    rng = np.random.default_rng(6)
    loss = make_quadratic(5, 4, 1.0, rng, diagonal=True)
    betas = rng.standard_normal((10, 4))
    G = loss.partition_grads(betas)
    assert calibrate_C(loss, betas, headroom=1.0) == pytest.approx(float(np.max(np.sum(G * G, axis=2))))
