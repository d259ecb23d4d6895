"""Learning agents and the episode loop, with three shielding modes.

vanilla              no shield at all
priors-only          the prior-Q action check arms on every step
state-checked-priors full two-stage shield (latent gate, then the check)

The learner is tabular double Q-learning by default; a small dense-network
variant on raw observations is available behind `learner="dqn"` and borrows
the optimizer machinery from the latent module.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    NUM_ACTIONS,
    Action,
    GridSpec,
    observe,
    start_state,
    state_count,
    state_index,
    step,
)
from .latent import EncoderModel, adam_init, adam_update, relu
from .shield import (
    ShieldConfig,
    UnsafeEmbeddingBuffer,
    check_action,
    record_violation,
    shield_decide,
)
from .solver import QFunction

MODE_VANILLA = "vanilla"
MODE_PRIORS_ONLY = "priors-only"
MODE_STATE_CHECKED = "state-checked-priors"
MODES = (MODE_VANILLA, MODE_PRIORS_ONLY, MODE_STATE_CHECKED)


@dataclass
class AgentConfig:
    mode: str = MODE_VANILLA
    total_steps: int = 50_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int | None = None  # default: half the step budget
    learning_rate: float = 0.5
    gamma: float = 0.99
    seed: int = 0
    # optimistic starting value for both tabular Q tables; keeps greedy
    # exploration moving under the lowest-index tie-break
    initial_q: float = 1.0
    # optional cap below the environment's own max_steps truncation
    max_episode_steps: int | None = None
    learner: str = "tabular"  # or "dqn"
    dqn_hidden_dim: int = 128
    dqn_batch_size: int = 32
    dqn_replay_capacity: int = 10_000
    dqn_target_sync: int = 250
    dqn_train_every: int = 4
    dqn_learning_rate: float = 2.5e-4

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        if self.learner not in ("tabular", "dqn"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("epsilon schedule must decay within [0, 1]")


@dataclass
class EpisodeRecord:
    index: int
    steps: int
    ret: float
    violated: bool
    visits: np.ndarray  # (height, width) occupancy counts for this episode


@dataclass
class InterventionEvent:
    step: int
    state: int
    distance: float | None
    proposed: int
    chosen: int
    loop_iterations: int
    replaced: bool


@dataclass
class RunResult:
    episodes: list[EpisodeRecord]
    heatmap: np.ndarray
    interventions: list[InterventionEvent]
    buffer: UnsafeEmbeddingBuffer | None
    violation_count: int = 0

    def returns(self) -> np.ndarray:
        return np.array([ep.ret for ep in self.episodes])


def epsilon_at(cfg: AgentConfig, global_step: int) -> float:
    """Linear decay from start to end over the configured window."""
    decay = cfg.epsilon_decay_steps
    if decay is None:
        decay = max(1, cfg.total_steps // 2)
    frac = min(1.0, global_step / decay)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def select_action(q_values: np.ndarray, s: int, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties break toward the lowest action index."""
    if rng.random() < epsilon:
        return int(rng.integers(NUM_ACTIONS))
    return int(np.argmax(q_values[s]))


class TabularDoubleQ:
    """Two alternating Q tables; selection reads their sum."""

    def __init__(self, n_states: int, initial_value: float = 0.0):
        self.table_a = np.full((n_states, NUM_ACTIONS), initial_value,
                               dtype=np.float64)
        self.table_b = np.full((n_states, NUM_ACTIONS), initial_value,
                               dtype=np.float64)
        self._update_b = False

    @property
    def combined(self) -> np.ndarray:
        return self.table_a + self.table_b

    def update(self, s: int, a: int, reward: float, s_next: int,
               terminal: bool, lr: float, gamma: float) -> None:
        if self._update_b:
            primary, other = self.table_b, self.table_a
        else:
            primary, other = self.table_a, self.table_b
        self._update_b = not self._update_b
        if terminal:
            target = reward
        else:
            best = int(np.argmax(primary[s_next]))
            target = reward + gamma * other[s_next, best]
        primary[s, a] += lr * (target - primary[s, a])


def q_update(learner: TabularDoubleQ, spec: GridSpec, transition,
             lr: float, gamma: float) -> None:
    """Apply one double-Q update from a gridworld transition."""
    s = state_index(spec, transition.state.row, transition.state.col,
                    transition.state.direction)
    ns = transition.next_state
    s_next = state_index(spec, ns.row, ns.col, ns.direction)
    learner.update(s, int(transition.action), transition.reward, s_next,
                   transition.terminated, lr, gamma)


class DenseQLearner:
    """One-hidden-layer Q network on flattened observations with uniform
    replay and a periodically synced target copy."""

    def __init__(self, obs_size: int, cfg: AgentConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        hidden = cfg.dqn_hidden_dim
        bound1 = 1.0 / np.sqrt(obs_size)
        bound2 = 1.0 / np.sqrt(hidden)
        self.w1 = rng.uniform(-bound1, bound1, (obs_size, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.uniform(-bound2, bound2, (hidden, NUM_ACTIONS))
        self.b2 = np.zeros(NUM_ACTIONS)
        self._target = self._snapshot()
        self._replay: deque = deque(maxlen=cfg.dqn_replay_capacity)
        self._adam = adam_init(self._flat().size)
        self._updates = 0

    def _snapshot(self):
        return (self.w1.copy(), self.b1.copy(), self.w2.copy(),
                self.b2.copy())

    def _flat(self) -> np.ndarray:
        return np.concatenate([self.w1.reshape(-1), self.b1,
                               self.w2.reshape(-1), self.b2])

    def _load_flat(self, flat: np.ndarray) -> None:
        i = 0
        for arr in (self.w1, self.b1, self.w2, self.b2):
            arr[...] = flat[i:i + arr.size].reshape(arr.shape)
            i += arr.size

    def q_values(self, obs_flat: np.ndarray) -> np.ndarray:
        hidden = relu(obs_flat @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2

    def _target_q(self, obs_flat: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = self._target
        return relu(obs_flat @ w1 + b1) @ w2 + b2

    def record(self, obs, action, reward, next_obs, terminal,
               rng: np.random.Generator) -> None:
        self._replay.append((obs, action, reward, next_obs, terminal))
        self._updates += 1
        if (self._updates % self.cfg.dqn_train_every == 0
                and len(self._replay) >= self.cfg.dqn_batch_size):
            self._train_batch(rng)
        if self._updates % self.cfg.dqn_target_sync == 0:
            self._target = self._snapshot()

    def _train_batch(self, rng: np.random.Generator) -> None:
        idx = rng.choice(len(self._replay), self.cfg.dqn_batch_size,
                         replace=False)
        batch = [self._replay[int(i)] for i in idx]
        x = np.stack([b[0] for b in batch])
        actions = np.array([b[1] for b in batch])
        rewards = np.array([b[2] for b in batch])
        x_next = np.stack([b[3] for b in batch])
        cont = 1.0 - np.array([float(b[4]) for b in batch])
        targets = rewards + self.cfg.gamma * cont * self._target_q(x_next).max(axis=1)

        pre = x @ self.w1 + self.b1
        hidden = relu(pre)
        q = hidden @ self.w2 + self.b2
        rows = np.arange(len(batch))
        err = np.zeros_like(q)
        err[rows, actions] = 2.0 * (q[rows, actions] - targets) / len(batch)
        g_w2 = hidden.T @ err
        g_b2 = err.sum(axis=0)
        g_hidden = err @ self.w2.T
        g_pre = g_hidden * (pre > 0.0)
        g_w1 = x.T @ g_pre
        g_b1 = g_pre.sum(axis=0)
        grad = np.concatenate([g_w1.reshape(-1), g_b1, g_w2.reshape(-1),
                               g_b2])
        flat = self._flat()
        adam_update(flat, grad, self._adam, self.cfg.dqn_learning_rate)
        self._load_flat(flat)


def run_training(spec: GridSpec, cfg: AgentConfig, *,
                 q_p: QFunction | None = None,
                 encoder: EncoderModel | None = None,
                 shield_cfg: ShieldConfig | None = None) -> RunResult:
    """Train one agent for `cfg.total_steps` environment steps.

    Episodes reset on termination or on hitting the step cap; a final
    partial episode is recorded as-is.  In the shielded mode every violation
    appends the embedding of the state the violating action was taken from,
    so protection builds up online.
    """
    cfg.validate()
    if cfg.mode in (MODE_PRIORS_ONLY, MODE_STATE_CHECKED) and q_p is None:
        raise ValueError(f"mode {cfg.mode!r} needs a prior Q-table")
    if cfg.mode == MODE_STATE_CHECKED and encoder is None:
        raise ValueError("state-checked mode needs an encoder")
    if shield_cfg is None:
        shield_cfg = ShieldConfig()

    rng = np.random.default_rng(cfg.seed)
    needs_obs = cfg.mode == MODE_STATE_CHECKED or cfg.learner == "dqn"
    tabular: TabularDoubleQ | None = None
    dqn: DenseQLearner | None = None
    if cfg.learner == "tabular":
        tabular = TabularDoubleQ(state_count(spec), cfg.initial_q)
    else:
        dqn = DenseQLearner(observe(spec, start_state(spec)).size, cfg, rng)
    max_ep_steps = (cfg.max_episode_steps if cfg.max_episode_steps is not None
                    else spec.max_steps)

    buffer = (UnsafeEmbeddingBuffer(shield_cfg.buffer_capacity)
              if cfg.mode == MODE_STATE_CHECKED else None)
    heatmap = np.zeros((spec.height, spec.width), dtype=np.int64)
    episodes: list[EpisodeRecord] = []
    interventions: list[InterventionEvent] = []
    violations = 0

    global_step = 0
    episode_index = 0
    while global_step < cfg.total_steps:
        state = start_state(spec)
        visits = np.zeros_like(heatmap)
        visits[state.row, state.col] += 1
        ep_return = 0.0
        ep_steps = 0
        ep_violated = False
        while global_step < cfg.total_steps:
            s = state_index(spec, state.row, state.col, state.direction)
            obs = observe(spec, state).reshape(-1) if needs_obs else None
            eps = epsilon_at(cfg, global_step)
            if tabular is not None:
                proposed = select_action(tabular.combined, s, eps, rng)
            else:
                assert obs is not None
                if rng.random() < eps:
                    proposed = int(rng.integers(NUM_ACTIONS))
                else:
                    proposed = int(np.argmax(dqn.q_values(obs)))

            if cfg.mode == MODE_VANILLA:
                action = proposed
            elif cfg.mode == MODE_PRIORS_ONLY:
                action, armed, iters = check_action(
                    q_p, s, proposed, shield_cfg.check_probability, rng)
                if armed and action != proposed:
                    interventions.append(InterventionEvent(
                        global_step, s, None, proposed, action, iters, True))
            else:
                assert obs is not None and buffer is not None
                decision = shield_decide(s, obs.reshape(-1), proposed, q_p,
                                         encoder, buffer, shield_cfg, rng)
                action = decision.action
                if decision.gate_fired:
                    interventions.append(InterventionEvent(
                        global_step, s, decision.distance, proposed, action,
                        decision.loop_iterations, decision.replaced))

            tr = step(spec, state, Action(action))
            if tabular is not None:
                q_update(tabular, spec, tr, cfg.learning_rate, cfg.gamma)
            else:
                next_obs = observe(spec, tr.next_state).reshape(-1)
                dqn.record(obs, action, tr.reward, next_obs, tr.terminated,
                           rng)

            global_step += 1
            ep_steps += 1
            ep_return += tr.reward
            visits[tr.next_state.row, tr.next_state.col] += 1
            if tr.violated:
                ep_violated = True
                violations += 1
                if buffer is not None:
                    prev_obs = obs if obs is not None else observe(
                        spec, state).reshape(-1)
                    record_violation(buffer, encoder, prev_obs, global_step)
            if tr.terminated or ep_steps >= max_ep_steps:
                break
            state = tr.next_state
        heatmap += visits
        episodes.append(EpisodeRecord(episode_index, ep_steps, ep_return,
                                      ep_violated, visits))
        episode_index += 1
    return RunResult(episodes, heatmap, interventions, buffer, violations)
