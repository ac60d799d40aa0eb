"""Execution policy: a branching dueling Q-network over (price offset,
quantity proportion) actions trained with one-step double-Q targets."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_random_state
from .exceptions import NumericError, ValidationError
from .exchange import Direction, ExecutionEnv, FillReport, LimitOrderAction, LowState
from .nn import Adam, Mlp

logger = logging.getLogger(__name__)

N_PRIVATE = 4


@dataclass(frozen=True)
class ActionGrid:
    """Tick offsets from the best same-side quote and proportions of the
    remaining quantity. Positive offsets are passive for both directions."""

    price_offsets: tuple = (-2, -1, 0, 1, 2)
    proportions: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "price_offsets", tuple(int(o) for o in self.price_offsets))
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if len(self.price_offsets) < 1:
            raise ValidationError("need at least one price level")
        if len(self.proportions) < 2 or 0.0 not in self.proportions or 1.0 not in self.proportions:
            raise ValidationError("proportions need >= 2 entries including 0 and 1")
        if min(self.proportions) < 0 or max(self.proportions) > 1:
            raise ValidationError("proportions must lie in [0, 1]")

    @property
    def n_p(self):
        return len(self.price_offsets)

    @property
    def n_q(self):
        return len(self.proportions)


class BranchingQNet:
    """Shared trunk with a state-value head and one advantage head per branch.

    The underlying :class:`Mlp` emits ``[V, Adv_p..., Adv_q...]``.
    """

    def __init__(self, n_inputs, grid: ActionGrid, hidden=(128, 128), random_state=None, init="he"):
        self.grid = grid
        self.mlp = Mlp([n_inputs, *hidden, 1 + grid.n_p + grid.n_q], random_state=random_state, init=init)

    def copy(self):
        other = BranchingQNet.__new__(BranchingQNet)
        other.grid = self.grid
        other.mlp = self.mlp.copy()
        return other

    def heads(self, X):
        out = self.mlp.forward(X)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite network output")
        n_p = self.grid.n_p
        return out[..., 0], out[..., 1 : 1 + n_p], out[..., 1 + n_p :]

    def q_values(self, X):
        """Per-branch Q values: ``V + Adv_d - mean(Adv_d)``."""
        V, adv_p, adv_q = self.heads(X)
        Vc = np.expand_dims(V, -1)
        q_p = Vc + (adv_p - adv_p.mean(axis=-1, keepdims=True))
        q_q = Vc + (adv_q - adv_q.mean(axis=-1, keepdims=True))
        return q_p, q_q

    def backward(self, grad_qp, grad_qq):
        """Map branch-Q gradients through the dueling aggregation to the net."""
        g_v = grad_qp.sum(axis=-1) + grad_qq.sum(axis=-1)
        g_p = grad_qp - grad_qp.mean(axis=-1, keepdims=True)
        g_q = grad_qq - grad_qq.mean(axis=-1, keepdims=True)
        g = np.concatenate([g_v[..., None], g_p, g_q], axis=-1)
        return self.mlp.backward(g)


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling without replacement."""

    def __init__(self, capacity, n_inputs):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, n_inputs))
        self.next_states = np.zeros((self.capacity, n_inputs))
        self.actions = np.zeros((self.capacity, 2), dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done):
        i = self._next
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s2
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng):
        return rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size, rng):
        idx = self.sample_indices(batch_size, rng)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
        )


def select_action(net: BranchingQNet, x, epsilon, rng):
    """Independent epsilon-greedy choice per branch; ties go to the lowest index."""
    q_p, q_q = net.q_values(x)
    i_p = int(rng.integers(len(q_p))) if rng.random() < epsilon else int(np.argmax(q_p))
    i_q = int(rng.integers(len(q_q))) if rng.random() < epsilon else int(np.argmax(q_q))
    return i_p, i_q


def to_limit_order(action, state: LowState, book, grid: ActionGrid, tick) -> LimitOrderAction:
    """Translate grid indices into a limit order on the live book."""
    i_p, i_q = action
    prop = grid.proportions[i_q]
    remaining = state.private.remaining_quantity
    qty = prop * remaining
    if qty <= 0:
        return LimitOrderAction.skip()
    direction = state.private.direction
    offset = grid.price_offsets[i_p] * tick
    if direction is Direction.SELL:
        ref = book.best_ask if book.asks else book.best_bid + tick
        price = ref + offset
    else:
        ref = book.best_bid if book.bids else book.best_ask - tick
        price = ref - offset
    if price <= 0:
        logger.info("limit price %.6g clamped to one tick", price)
        price = tick
    return LimitOrderAction(price, direction.sign * qty)


def td_targets(online: BranchingQNet, target: BranchingQNet, rewards, next_states, dones, gamma):
    """Double-Q targets per branch: online net selects, target net evaluates."""
    on_p, on_q = online.q_values(next_states)
    tg_p, tg_q = target.q_values(next_states)
    rows = np.arange(len(rewards))
    boot = gamma * (~np.asarray(dones, dtype=bool))
    y_p = rewards + boot * tg_p[rows, on_p.argmax(axis=1)]
    y_q = rewards + boot * tg_q[rows, on_q.argmax(axis=1)]
    return y_p, y_q


def bdq_loss(online: BranchingQNet, targets, states, actions):
    """Batch mean of the branch-averaged squared TD error, with its gradient."""
    y_p, y_q = targets
    q_p, q_q = online.q_values(states)
    B = states.shape[0]
    rows = np.arange(B)
    err_p = y_p - q_p[rows, actions[:, 0]]
    err_q = y_q - q_q[rows, actions[:, 1]]
    loss = float(np.mean((err_p**2 + err_q**2) / 2.0))
    g_p = np.zeros_like(q_p)
    g_q = np.zeros_like(q_q)
    g_p[rows, actions[:, 0]] = -err_p / B
    g_q[rows, actions[:, 1]] = -err_q / B
    return loss, online.backward(g_p, g_q)


def state_features(state: LowState, q_scale, t_scale, price_scale=100.0):
    """Flatten a low-level state into the network input.

    Market prices are centred at the window's first mid and scaled by
    ``price_scale``. The private block holds remaining time and quantity both
    relative to the task and relative to the training maxima (saturating at 1).
    """
    m = state.market.copy()
    price = m[..., 0]
    m[..., 0] = np.where(price > 0, (price - 1.0) * price_scale, 0.0)
    p = state.private
    rq = p.remaining_quantity
    private = np.array(
        [
            p.remaining_time / state.window,
            rq / state.target_quantity if state.target_quantity > 0 else 0.0,
            min(rq / q_scale, 1.0),
            min(p.remaining_time / t_scale, 1.0),
        ]
    )
    return np.concatenate([m.ravel(), private])


class MarketOrderExecutor:
    """Naive executor: one marketable order for everything at the first step."""

    def order(self, state: LowState, book):
        q = state.private.remaining_quantity
        if q <= 0:
            return LimitOrderAction.skip()
        if state.private.direction is Direction.SELL:
            return LimitOrderAction(book.bids[-1][0] if book.bids else 1e-12, -q)
        return LimitOrderAction(book.asks[-1][0] if book.asks else 1e300, q)


def run_execution(env: ExecutionEnv, executor, task, start):
    """Run one execution episode; returns ``(total_reward, merged FillReport)``."""
    state = env.reset(task, start)
    reports = []
    total = 0.0
    while not env.done:
        action = executor.order(state, env.book)
        state, reward, _, report = env.step(action)
        reports.append(report)
        total += reward
    return total, FillReport.merge(task.direction, reports)


class ExecutionAgent(BaseEstimator):
    """Branching dueling double-Q execution agent.

    Parameters
    ----------
    price_offsets, proportions : tuple
        Action grid (see :class:`ActionGrid`).
    hidden : tuple of int
        Trunk widths.
    q_scale, t_scale : float
        Maximum training quantity and window used to normalize private state.
    tick : float
        Currency value of one price offset.
    reward_scale : str
        ``"notional_bps"`` scales rewards to basis points of task notional;
        ``"none"`` uses raw currency.
    """

    def __init__(
        self,
        price_offsets=(-2, -1, 0, 1, 2),
        proportions=(0.0, 0.25, 0.5, 0.75, 1.0),
        hidden=(128, 128),
        gamma=1.0,
        learning_rate=1e-3,
        batch_size=32,
        buffer_size=100_000,
        target_sync=1000,
        eps_start=1.0,
        eps_end=0.05,
        eps_decay_steps=10_000,
        q_scale=1000.0,
        t_scale=20,
        tick=0.05,
        lob_window=10,
        levels=5,
        price_scale=100.0,
        reward_scale="notional_bps",
        random_state=None,
    ):
        self.price_offsets = price_offsets
        self.proportions = proportions
        self.hidden = hidden
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.target_sync = target_sync
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_decay_steps = eps_decay_steps
        self.q_scale = q_scale
        self.t_scale = t_scale
        self.tick = tick
        self.lob_window = lob_window
        self.levels = levels
        self.price_scale = price_scale
        self.reward_scale = reward_scale
        self.random_state = random_state

    @property
    def grid(self):
        return ActionGrid(self.price_offsets, self.proportions)

    @property
    def n_inputs(self):
        return self.lob_window * self.levels * 4 + N_PRIVATE

    def initialize(self):
        for name in ("batch_size", "target_sync", "eps_decay_steps", "buffer_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValidationError("epsilon must lie in [0, 1]")
        self.rng_ = check_random_state(self.random_state)
        self.net_ = BranchingQNet(self.n_inputs, self.grid, self.hidden, random_state=self.rng_)
        self.target_net_ = self.net_.copy()
        self.optimizer_ = Adam(self.net_.mlp, lr=self.learning_rate)
        self.buffer_ = ReplayBuffer(self.buffer_size, self.n_inputs)
        self.steps_ = 0
        self.updates_ = 0
        self.episodes_ = 0
        self.episode_rewards_ = []
        self._episode = None
        return self

    def features(self, state):
        return state_features(state, self.q_scale, self.t_scale, self.price_scale)

    def epsilon(self, step=None):
        step = self.steps_ if step is None else step
        frac = min(1.0, step / self.eps_decay_steps)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def predict(self, state):
        """Greedy action indices for one state."""
        return select_action(self.net_, self.features(state), 0.0, self.rng_)

    def order(self, state, book):
        return to_limit_order(self.predict(state), state, book, self.grid, self.tick)

    def _scale(self, task):
        if self.reward_scale == "none" or task.quantity <= 0:
            return 1.0
        return 1e4 / (task.quantity * task.reference_price)

    def learn(self):
        if len(self.buffer_) < self.batch_size:
            return None
        s, a, r, s2, d = self.buffer_.sample(self.batch_size, self.rng_)
        targets = td_targets(self.net_, self.target_net_, r, s2, d, self.gamma)
        loss, tape = bdq_loss(self.net_, targets, s, a)
        if not tape.is_finite():
            raise NumericError("non-finite TD gradient")
        self.optimizer_.step(tape)
        self.updates_ += 1
        if self.updates_ % self.target_sync == 0:
            self.target_net_ = self.net_.copy()
        return loss

    def train_step(self, env: ExecutionEnv, tasks):
        """One environment step, buffer push and (after warm-up) one update.

        ``tasks`` yields ``(ExecutionTask, start_step)`` pairs and is consumed
        whenever a new episode begins. Returns the episode reward when an
        episode finishes, else None.
        """
        if self._episode is None:
            while True:
                task, start = next(tasks)
                state = env.reset(task, start)
                if not env.done:
                    break
            self._episode = (task, state, self.features(state), 0.0)
        task, state, x, ep_reward = self._episode
        action = select_action(self.net_, x, self.epsilon(), self.rng_)
        order = to_limit_order(action, state, env.book, self.grid, self.tick)
        state2, reward, done, _ = env.step(order)
        x2 = self.features(state2)
        self.buffer_.push(x, action, reward * self._scale(task), x2, done)
        self.steps_ += 1
        self.learn()
        ep_reward += reward
        if done:
            self._episode = None
            self.episodes_ += 1
            self.episode_rewards_.append(ep_reward)
            return ep_reward
        self._episode = (task, state2, x2, ep_reward)
        return None

    def fit(self, env: ExecutionEnv, tasks, n_steps):
        if not hasattr(self, "net_"):
            self.initialize()
        tasks = iter(tasks)
        for _ in range(n_steps):
            self.train_step(env, tasks)
        return self

    def sidecar(self):
        return {
            "grid": {"price_offsets": list(self.grid.price_offsets), "proportions": list(self.grid.proportions)},
            "normalization": {"q_scale": self.q_scale, "t_scale": self.t_scale, "price_scale": self.price_scale},
            "t_window": self.t_scale,
            "tick": self.tick,
            "lob_window": self.lob_window,
            "levels": self.levels,
            "hidden": list(self.hidden),
        }

    def save(self, path):
        path = Path(path)
        self.net_.mlp.save(path)
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        agent = cls(
            price_offsets=tuple(meta["grid"]["price_offsets"]),
            proportions=tuple(meta["grid"]["proportions"]),
            hidden=tuple(meta["hidden"]),
            q_scale=meta["normalization"]["q_scale"],
            t_scale=meta["normalization"]["t_scale"],
            price_scale=meta["normalization"]["price_scale"],
            tick=meta["tick"],
            lob_window=meta["lob_window"],
            levels=meta["levels"],
        )
        agent.rng_ = np.random.default_rng(0)
        agent.net_ = BranchingQNet.__new__(BranchingQNet)
        agent.net_.grid = agent.grid
        agent.net_.mlp = Mlp.load(path)
        return agent
