"""Cross-task action priors distilled from a set of solved grids.

Each source task contributes, per (state, action), a scaled undesirability in
[0, 1]: how far the action's value falls below the row optimum, relative to
that optimum.  Pairs whose mean undesirability times the normalized entropy
of its softmax clears a threshold are judged consistently undesirable across
tasks; each selected pair becomes a transition whose prior reward blends the
per-task one-step value gaps at a shared successor.  A small Q-table trained
on those transitions is the domain prior: an action is flagged unsafe when
its prior value falls below its row mean.

All tasks must share one grid size.  Successor states come from the dynamics
of the first task in the list, so the lineup order matters: pairing wall and
lava renderings of the same layouts (wall task first) makes moves into lava
cells blocked at the supplier, which is what drives their prior reward
negative.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gridworld import NUM_ACTIONS, GridSpec
from .solver import QFunction, TransitionTables, build_transition_tables


@dataclass
class PriorConfig:
    consistency_threshold: float = 0.1
    gamma: float = 0.9
    learning_rate: float = 0.5
    convergence_tol: float = 1e-8
    max_sweeps: int = 100_000

    def __post_init__(self):
        # normalized entropy caps the score at mean(w) <= 1, so anything
        # above 1 would silently select nothing
        if not 0.0 < self.consistency_threshold <= 1.0:
            raise ValueError("consistency_threshold must lie in (0, 1], got "
                             f"{self.consistency_threshold}")


@dataclass(frozen=True)
class PriorTransition:
    state: int
    action: int
    next_state: int
    reward: float


def scaled_undesirability(q: QFunction, s: int, a: int) -> float:
    """|value gap to the row optimum| / |row optimum|; 0 when the row optimum
    is 0 (nothing is achievable from s, so no preference exists)."""
    row = q.values[s]
    best = float(row.max())
    if best == 0.0:
        return 0.0
    return abs((float(row[a]) - best) / best)


def undesirability_distribution(w: np.ndarray) -> np.ndarray:
    """Softmax over task undesirabilities, computed shift-invariantly."""
    w = np.asarray(w, dtype=float)
    if w.size < 2:
        raise ValueError("need undesirabilities from at least two tasks")
    shifted = np.exp(w - w.max())
    return shifted / shifted.sum()


def consistency_score(w: np.ndarray, w_prime: np.ndarray) -> float:
    """Mean undesirability scaled by the normalized entropy of its softmax.

    High only when the tasks agree both in level and in spread: the entropy
    term (in nats, divided by log n) discounts pairs that a single task
    dominates.
    """
    w = np.asarray(w, dtype=float)
    w_prime = np.asarray(w_prime, dtype=float)
    entropy = float(-(w_prime * np.log(w_prime)).sum())
    return float(w.mean()) * entropy / float(np.log(w.size))


def select_prior_transitions(tasks: list[tuple[GridSpec, QFunction]],
                             cfg: PriorConfig) -> list[PriorTransition]:
    """Scan every (state, action) pair and keep the consistently undesirable
    ones as prior transitions.

    Output order is deterministic (state-major, action-minor).  An empty
    selection is legal and warns, since it usually means the threshold is set
    above anything the task mix can produce.
    """
    if len(tasks) < 2:
        raise ValueError("need at least two source tasks")
    sizes = {(spec.width, spec.height) for spec, _ in tasks}
    if len(sizes) != 1:
        raise ValueError(f"source tasks disagree on grid size: {sorted(sizes)}")
    supplier_spec, _ = tasks[0]
    dynamics = build_transition_tables(supplier_spec)

    stacked = np.stack([q.values for _, q in tasks])          # (n, S, A)
    best = stacked.max(axis=2, keepdims=True)                 # (n, S, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_all = np.abs(np.where(best > 0.0, (stacked - best) / best, 0.0))

    selected = []
    for s in range(stacked.shape[1]):
        if not dynamics.actable[s]:
            continue
        for a in range(NUM_ACTIONS):
            w = w_all[:, s, a]
            w_prime = undesirability_distribution(w)
            if consistency_score(w, w_prime) <= cfg.consistency_threshold:
                continue
            s_next = int(dynamics.next_index[s, a])
            reward = _prior_reward(tasks, w_prime, s, a, s_next, cfg.gamma)
            selected.append(PriorTransition(s, a, s_next, reward))
    if not selected:
        warnings.warn("prior selection is empty; the consistency threshold "
                      "exceeds every score the task mix produces")
    return selected


def _prior_reward(tasks, w_prime, s: int, a: int, s_next: int,
                  gamma: float) -> float:
    total = 0.0
    for weight, (_, q) in zip(w_prime, tasks):
        gap = float(q.values[s, a]) - gamma * float(q.values[s_next].max())
        total += float(weight) * gap
    return total


def train_prior_q(transitions: list[PriorTransition], n_states: int,
                  cfg: PriorConfig) -> QFunction:
    """Fit the prior Q-table by repeated Q-learning sweeps over the fixed
    transition set (insertion order) until the largest update is tiny."""
    if not transitions:
        raise ValueError("cannot train a prior on an empty transition set")
    q = np.zeros((n_states, NUM_ACTIONS))
    for _ in range(cfg.max_sweeps):
        largest = 0.0
        for tr in transitions:
            target = tr.reward + cfg.gamma * float(q[tr.next_state].max())
            delta = cfg.learning_rate * (target - q[tr.state, tr.action])
            q[tr.state, tr.action] += delta
            largest = max(largest, abs(delta))
        if largest <= cfg.convergence_tol:
            return QFunction(q, cfg.gamma)
    warnings.warn(f"prior Q training stopped at sweep cap with last update "
                  f"{largest:.3e}")
    return QFunction(q, cfg.gamma)


def _row_threshold(row: np.ndarray) -> float:
    # mean <= max holds exactly in real arithmetic; clamping shields flat
    # rows whose float mean lands a ulp above the max and would flag all
    # three actions at once
    return min(float(row.mean()), float(row.max()))


def is_action_unsafe(q_p: QFunction, s: int, a: int) -> bool:
    """Unsafe when strictly below the row mean.  A flat row flags nothing, so
    at least one action always stays acceptable."""
    row = q_p.values[s]
    return bool(row[a] < _row_threshold(row))


def acceptable_actions(q_p: QFunction, s: int) -> np.ndarray:
    row = q_p.values[s]
    return np.flatnonzero(row >= _row_threshold(row))


# ---------------------------------------------------------------------------
# transitions file: 's a s_next reward' per line
# ---------------------------------------------------------------------------

def save_transitions(path, transitions: list[PriorTransition],
                     header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items())
                     + "\n")
        for tr in transitions:
            fh.write(f"{tr.state} {tr.action} {tr.next_state} "
                     f"{float(tr.reward).hex()}\n")


def load_transitions(path) -> list[PriorTransition]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            s, a, s_next, reward = line.split()
            out.append(PriorTransition(int(s), int(a), int(s_next),
                                       float.fromhex(reward)))
    return out
