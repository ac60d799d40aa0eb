import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from hrtrade.exceptions import NumericError
from hrtrade.high_level import (
    HighState,
    HighTrajectory,
    PortfolioPolicy,
    dirichlet_concentration,
    dirichlet_logpdf,
    entropy,
    log_prob_grad_logits,
    policy_mean,
    returns_to_go,
    sample_action,
    softmax,
)
from hrtrade.nn import Mlp, grad_check

from oracles import discounted_returns


def test_softmax_examples():
    assert np.allclose(softmax(np.full(24, 3.0)), 1 / 24, rtol=0, atol=1e-15)
    z = np.zeros(5)
    z[2] = 20.0
    assert softmax(z)[2] > 0.999
    with pytest.raises(NumericError):
        softmax([0.0, np.nan])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    a, b = softmax(z), softmax(np.asarray(z) + c)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12)
    assert abs(a.sum() - 1) < 1e-12 and np.all(a >= 0)


def test_entropy_examples():
    assert entropy(np.full(24, 1 / 24)) == pytest.approx(math.log(24), abs=1e-12)
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=10).filter(lambda v: sum(v) > 1e-6))
def test_entropy_bounds(v):
    w = np.asarray(v) / sum(v)
    assert -1e-12 <= entropy(w) <= math.log(len(w)) + 1e-12


def _flat_net(n_out, n_in=3):
    return Mlp([n_in, n_out], init="zeros")


def test_large_concentration_tracks_mean():
    net = _flat_net(4)
    net.biases[0][...] = [0.3, -0.2, 1.0, 0.0]
    x = np.ones(3)
    mean = policy_mean(x, net)
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, _ = sample_action(x, net, 1e6, rng)
        assert np.max(np.abs(w - mean)) < 1e-2
        assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)


def test_uniform_simplex_mean():
    net = _flat_net(2)
    rng = np.random.default_rng(1)
    draws = np.array([sample_action(np.ones(3), net, 2.0, rng)[0][1] for _ in range(100_000)])
    se = math.sqrt(1 / 12 / draws.size)
    assert abs(draws.mean() - 0.5) < 3 * se


@pytest.mark.parametrize("alpha", [(1.0, 1.0), (2.5, 1.7), (6.0, 3.0)])
def test_logpdf_integrates_to_one(alpha):
    total, _ = quad(lambda x: math.exp(dirichlet_logpdf([1 - x, x], alpha)), 0, 1)
    assert abs(total - 1) < 1e-3


def test_concentration_floor():
    alpha, clamped = dirichlet_concentration([1.0, 0.0], 50.0)
    assert alpha[1] == 1e-3 and clamped.tolist() == [False, True]


def test_returns_to_go_examples():
    assert returns_to_go([1, 2, 3], [0, 0, 0], 1.0, 0.0).tolist() == [6, 5, 3]
    assert returns_to_go([0.7], [0.4], 0.9, 0.0).tolist() == [0.7]
    r, h = [0.2, -0.1, 0.4], [0.6, 0.3, 0.1]
    assert np.allclose(returns_to_go(r, h, 0.9, 0.05), discounted_returns(r, h, 0.9, 0.05), rtol=0, atol=1e-15)


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 3)), min_size=1, max_size=40), st.floats(0.01, 1), st.floats(0, 1))
def test_return_recursion_matches_double_loop(steps, gamma, eta):
    r = [s[0] for s in steps]
    h = [s[1] for s in steps]
    assert np.allclose(returns_to_go(r, h, gamma, eta), discounted_returns(r, h, gamma, eta), rtol=0, atol=1e-10)


def test_logit_gradient_matches_density():
    rng = np.random.default_rng(3)
    net = Mlp([4, 6, 3], random_state=rng)
    X = rng.normal(size=(5, 4))
    actions = rng.dirichlet(np.ones(3), size=5)
    coefs = rng.normal(size=5)
    kappa = 20.0

    def surrogate(net, X):
        logits = net.forward(X)
        m = softmax(logits)
        value = -sum(c * dirichlet_logpdf(a, kappa * mu) for c, a, mu in zip(coefs, actions, m))
        return value, -coefs[:, None] * log_prob_grad_logits(logits, actions, kappa)

    assert grad_check(net, X, loss=surrogate) < 1e-5


def _bandit_state():
    return HighState(np.ones((1, 1, 5)), np.array([0.5, 0.5]))


def test_centered_returns_leave_parameters():
    policy = PortfolioPolicy(hidden=(4,), random_state=0).initialize(_bandit_state().vector().size, 2)
    before = policy.net_.get_flat()
    batch = []
    for _ in range(3):
        w, lp = policy.act(_bandit_state())
        tr = HighTrajectory()
        tr.append(_bandit_state(), w, lp, 1.0, 0.0)
        batch.append(tr)
    assert policy.update(batch)
    assert np.max(np.abs(policy.net_.get_flat() - before)) < 1e-12


def _fit_bandit(eta, seed):
    state = _bandit_state()

    def rollout(pol, rng):
        w, lp = pol.act(state)
        tr = HighTrajectory()
        tr.append(state, w, lp, w[1], entropy(w))
        return tr

    policy = PortfolioPolicy(hidden=(16,), eta=eta, gamma=1.0, learning_rate=0.01, batch_size=8, n_episodes=2000, random_state=seed)
    policy.fit(rollout, n_inputs=state.vector().size, n_weights=2)
    return policy.predict(state)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_entropy_bonus_resists_collapse(seed):
    assert entropy(_fit_bandit(1.0, seed)) > 0.5 * math.log(2)


def test_fit_is_deterministic():
    a = _fit_bandit(0.0, 5)
    b = _fit_bandit(0.0, 5)
    assert np.array_equal(a, b)


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        PortfolioPolicy(gamma=0.0).initialize(3, 2)
    with pytest.raises(ValueError):
        PortfolioPolicy(eta=-1.0).initialize(3, 2)
