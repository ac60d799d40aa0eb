"""Portfolio-weight policy trained with REINFORCE on entropy-augmented returns.

The network outputs ``M + 1`` logits whose softmax is the mean portfolio.
Exploration draws weights from a Dirichlet distribution centred on that mean
with total concentration ``kappa``, which gives a proper density on the
simplex for the score-function gradient.
"""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import digamma, gammaln
from sklearn.base import BaseEstimator

from ._validation import check_random_state, check_simplex
from .exceptions import NumericError
from .nn import Adam, GradientTape, Mlp

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-3
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class HighState:
    features: np.ndarray  # (M, k, 5) normalized window
    weights: np.ndarray  # current weights, M + 1

    def vector(self):
        """Network input: the centred feature window followed by the weights."""
        return np.concatenate([np.ravel(self.features) - 1.0, self.weights])


@dataclass
class HighTrajectory:
    inputs: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    entropies: List[float] = field(default_factory=list)

    def append(self, state, action, log_prob, reward, ent):
        self.inputs.append(state.vector() if isinstance(state, HighState) else np.asarray(state))
        self.actions.append(np.asarray(action))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.entropies.append(float(ent))

    def __len__(self):
        return len(self.rewards)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(w):
    """Shannon entropy in nats, with 0 log 0 = 0."""
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def dirichlet_concentration(mean, kappa):
    alpha = kappa * np.asarray(mean)
    clamped = alpha < ALPHA_FLOOR
    if np.any(clamped):
        logger.debug("clamping %d Dirichlet concentrations to %g", int(clamped.sum()), ALPHA_FLOOR)
        alpha = np.where(clamped, ALPHA_FLOOR, alpha)
    return alpha, clamped


def dirichlet_logpdf(w, alpha):
    """Log-density of Dirichlet(alpha) at ``w`` w.r.t. Lebesgue measure on the
    first ``len(w) - 1`` coordinates."""
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + np.sum((alpha - 1.0) * np.log(w)))


def policy_mean(state, net):
    x = state.vector() if isinstance(state, HighState) else np.asarray(state)
    return softmax(net.forward(x))


def sample_action(state, net, kappa, rng=None, deterministic=False):
    """Draw new weights and return ``(weights, log_density)``.

    With ``deterministic=True`` the policy mean itself is returned.
    """
    if not kappa > 0:
        raise ValueError("kappa must be > 0")
    mean = policy_mean(state, net)
    alpha, _ = dirichlet_concentration(mean, kappa)
    if deterministic:
        w = np.maximum(mean, WEIGHT_FLOOR)
    else:
        rng = check_random_state(rng)
        g = rng.standard_gamma(alpha)
        total = g.sum()
        w = g / total if total > 0 else mean.copy()
        w = np.maximum(w, WEIGHT_FLOOR)
    w = w / w.sum()
    return w, dirichlet_logpdf(w, alpha)


def returns_to_go(rewards, entropies, gamma, eta):
    """Discounted suffix sums of ``reward + eta * entropy``."""
    r = np.asarray(rewards, dtype=np.float64) + eta * np.asarray(entropies, dtype=np.float64)
    G = np.empty_like(r)
    acc = 0.0
    for t in range(r.shape[0] - 1, -1, -1):
        acc = r[t] + gamma * acc
        G[t] = acc
    return G


def log_prob_grad_logits(logits, action, kappa):
    """d log Dirichlet(action | kappa softmax(logits)) / d logits, row-wise."""
    m = softmax(logits)
    alpha = kappa * m
    clamped = alpha < ALPHA_FLOOR
    alpha = np.where(clamped, ALPHA_FLOOR, alpha)
    g_alpha = digamma(alpha.sum(axis=-1, keepdims=True)) - digamma(alpha) + np.log(action)
    g_alpha = np.where(clamped, 0.0, g_alpha)
    inner = np.sum(m * g_alpha, axis=-1, keepdims=True)
    return kappa * m * (g_alpha - inner)


def reinforce_gradient(net, trajectories, gamma, eta, kappa, baseline=True, discount_weighting=True):
    """Gradient of the REINFORCE surrogate loss over a batch of trajectories.

    Each step contributes ``-gamma**t * (G_t - b_t) * log pi(a_t | s_t)``
    averaged over trajectories, where ``b_t`` is the batch mean of ``G_t`` at
    that step index. Returns the tape and the advantage-weighted coefficients.
    """
    returns = [returns_to_go(tr.rewards, tr.entropies, gamma, eta) for tr in trajectories]
    horizon = max(len(G) for G in returns)
    if baseline:
        sums = np.zeros(horizon)
        counts = np.zeros(horizon)
        for G in returns:
            sums[: len(G)] += G
            counts[: len(G)] += 1
        b = sums / np.maximum(counts, 1)
    else:
        b = np.zeros(horizon)
    inputs, actions, coefs = [], [], []
    for tr, G in zip(trajectories, returns):
        for t in range(len(G)):
            weight = gamma**t if discount_weighting else 1.0
            inputs.append(tr.inputs[t])
            actions.append(tr.actions[t])
            coefs.append(weight * (G[t] - b[t]))
    coefs = np.asarray(coefs) / len(trajectories)
    logits = net.forward(np.asarray(inputs))
    dlogp = log_prob_grad_logits(logits, np.asarray(actions), kappa)
    return net.backward(-coefs[:, None] * dlogp), coefs


class PortfolioPolicy(BaseEstimator):
    """High-level portfolio policy.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths of the logit network.
    kappa : float
        Dirichlet concentration used for exploration.
    eta : float
        Weight of the portfolio-entropy bonus added to each reward.
    gamma : float
        Discount factor in (0, 1].
    learning_rate : float
        Adam step size.
    batch_size : int
        Episodes per policy-gradient update.
    n_episodes : int
        Training episodes used by :meth:`fit`.
    random_state : int or None
    """

    def __init__(
        self,
        hidden=(128, 128),
        kappa=50.0,
        eta=0.05,
        gamma=0.99,
        learning_rate=1e-3,
        batch_size=8,
        n_episodes=400,
        output_scale=0.01,
        random_state=None,
    ):
        self.hidden = hidden
        self.kappa = kappa
        self.eta = eta
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_episodes = n_episodes
        self.output_scale = output_scale
        self.random_state = random_state

    def initialize(self, n_inputs, n_weights):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.eta < 0 or not self.kappa > 0:
            raise ValueError("eta must be >= 0 and kappa > 0")
        self.rng_ = check_random_state(self.random_state)
        sizes = [n_inputs, *self.hidden, n_weights]
        self.net_ = Mlp(sizes, random_state=self.rng_, output_scale=self.output_scale)
        self.optimizer_ = Adam(self.net_, lr=self.learning_rate)
        self.n_updates_ = 0
        self.n_skipped_ = 0
        self.last_loss_ = 0.0
        self.history_ = []
        return self

    def predict(self, state):
        """Deterministic (mean) weights for ``state``."""
        return policy_mean(state, self.net_)

    def act(self, state, deterministic=False, rng=None):
        rng = self.rng_ if rng is None else rng
        return sample_action(state, self.net_, self.kappa, rng, deterministic)

    def update(self, trajectories):
        """One policy-gradient step; returns False if the gradient was unusable."""
        tape, coefs = reinforce_gradient(self.net_, trajectories, self.gamma, self.eta, self.kappa)
        log_probs = np.concatenate([tr.log_probs for tr in trajectories])
        self.last_loss_ = float(-np.sum(coefs * log_probs))
        if not tape.is_finite():
            logger.warning("non-finite policy gradient; update skipped")
            self.n_skipped_ += 1
            return False
        self.optimizer_.step(tape)
        self.n_updates_ += 1
        return True

    def fit(self, rollout, n_inputs=None, n_weights=None, callback=None):
        """Train on episodes from ``rollout(policy, rng) -> HighTrajectory``.

        The network must already exist or ``n_inputs``/``n_weights`` given.
        ``callback(policy, epoch, batch)`` runs after each update.
        """
        if n_inputs is not None:
            self.initialize(n_inputs, n_weights)
        elif not hasattr(self, "net_"):
            raise ValueError("call initialize() or pass n_inputs and n_weights")
        n_batches = max(1, self.n_episodes // self.batch_size)
        for epoch in range(n_batches):
            batch = [rollout(self, self.rng_) for _ in range(self.batch_size)]
            self.update(batch)
            stats = {
                "epoch": epoch,
                "mean_return": float(np.mean([sum(tr.rewards) for tr in batch])),
                "mean_entropy": float(np.mean([np.mean(tr.entropies) for tr in batch])),
            }
            self.history_.append(stats)
            if callback is not None:
                callback(self, epoch, batch)
        return self

    def sidecar(self):
        return {"kappa": self.kappa, "eta": self.eta, "gamma": self.gamma, "hidden": list(self.hidden)}


def check_action(w, n):
    return check_simplex(w, "action", size=n)
