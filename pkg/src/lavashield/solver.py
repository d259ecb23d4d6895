"""Exact Q-functions for crossing grids via synchronous value iteration.

States are (row, col, direction) triples indexed by `gridworld.state_index`;
the episode step counter is not part of the planning state.  Terminal states
(standing on lava or the goal) and wall cells keep all-zero Q rows, so any
action that enters lava is worth exactly 0 and any action that enters the
goal is worth exactly the goal reward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridworld import (
    NUM_ACTIONS,
    NUM_DIRECTIONS,
    Action,
    CellKind,
    GridSpec,
    grid_hash,
    is_terminal_cell,
    state_count,
    state_index,
    step,
    state_from_index,
)


@dataclass
class QFunction:
    """Dense (state_count, 3) action-value table."""

    values: np.ndarray
    gamma: float

    def row(self, s: int) -> np.ndarray:
        return self.values[s]


@dataclass
class TransitionTables:
    """Flat dynamics arrays: for each (state, action) the successor index,
    the reward, whether the move terminates, and whether the state can act."""

    next_index: np.ndarray   # (S, A) int
    rewards: np.ndarray      # (S, A) float
    terminal: np.ndarray     # (S, A) bool
    actable: np.ndarray      # (S,) bool, true for empty-cell states


def build_transition_tables(spec: GridSpec) -> TransitionTables:
    n = state_count(spec)
    next_index = np.arange(n).repeat(NUM_ACTIONS).reshape(n, NUM_ACTIONS)
    rewards = np.zeros((n, NUM_ACTIONS))
    terminal = np.zeros((n, NUM_ACTIONS), dtype=bool)
    actable = np.zeros(n, dtype=bool)
    for r in range(spec.height):
        for c in range(spec.width):
            if spec.cells[r][c] != CellKind.EMPTY:
                continue
            for d in range(NUM_DIRECTIONS):
                s = state_index(spec, r, c, d)
                actable[s] = True
                state = state_from_index(spec, s)
                for a in range(NUM_ACTIONS):
                    tr = step(spec, state, Action(a))
                    ns = tr.next_state
                    next_index[s, a] = state_index(spec, ns.row, ns.col,
                                                   ns.direction)
                    rewards[s, a] = tr.reward
                    # only cell-entry termination matters for planning; the
                    # step budget is an episode device, not part of the MDP
                    terminal[s, a] = is_terminal_cell(spec, ns.row, ns.col)
    return TransitionTables(next_index, rewards, terminal, actable)


def value_iteration(spec: GridSpec, gamma: float = 0.99, tol: float = 1e-8,
                    max_iters: int = 100_000) -> QFunction:
    """Iterate the Bellman optimality operator synchronously until the sup
    change drops to `tol`.  The returned table then satisfies a Bellman
    residual of at most gamma * tol."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    tables = build_transition_tables(spec)
    q = np.zeros((state_count(spec), NUM_ACTIONS))
    for _ in range(max_iters):
        q_next = _bellman_backup(q, tables, gamma)
        delta = float(np.max(np.abs(q_next - q)))
        q = q_next
        if delta <= tol:
            return QFunction(q, gamma)
    raise RuntimeError(
        f"value iteration failed to reach tol={tol} within {max_iters} sweeps "
        f"(last change {delta:.3e}); the grid dynamics are likely malformed")


def _bellman_backup(q: np.ndarray, tables: TransitionTables,
                    gamma: float) -> np.ndarray:
    state_values = q.max(axis=1)
    continuation = np.where(tables.terminal, 0.0,
                            state_values[tables.next_index])
    backed_up = tables.rewards + gamma * continuation
    backed_up[~tables.actable] = 0.0
    return backed_up


def bellman_residual(spec: GridSpec, q: QFunction) -> float:
    """Sup-norm distance between the table and its own backup."""
    tables = build_transition_tables(spec)
    return float(np.max(np.abs(_bellman_backup(q.values, tables, q.gamma)
                               - q.values)))


def greedy_policy(q: QFunction) -> np.ndarray:
    """Per-state argmax with ties broken toward the lowest action index."""
    return np.argmax(q.values, axis=1)


def greedy_rollout(spec: GridSpec, q: QFunction, max_steps: int | None = None):
    """Follow the greedy policy from the start; returns the transition list."""
    from .gridworld import start_state

    policy = greedy_policy(q)
    state = start_state(spec)
    trajectory = []
    budget = spec.max_steps if max_steps is None else max_steps
    for _ in range(budget):
        s = state_index(spec, state.row, state.col, state.direction)
        tr = step(spec, state, Action(int(policy[s])))
        trajectory.append(tr)
        if tr.terminated:
            break
        state = tr.next_state
    return trajectory


# ---------------------------------------------------------------------------
# serialization: '#'-prefixed header, then one hex-float row per state
# ---------------------------------------------------------------------------

def save_qtable(path, q: QFunction, grid: str | GridSpec | None = None,
                extra_header: dict | None = None) -> None:
    """Write the table as text.  Hex floats round-trip bit-exactly."""
    if isinstance(grid, GridSpec):
        grid = grid_hash(grid)
    n, a = q.values.shape
    fields = {"gamma": repr(q.gamma), "states": n, "actions": a}
    if grid is not None:
        fields["grid"] = grid
    if extra_header:
        fields.update(extra_header)
    header = " ".join(f"{k}={v}" for k, v in fields.items())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        for row in q.values:
            fh.write(" ".join(float(v).hex() for v in row) + "\n")


def load_qtable(path, spec: GridSpec | None = None) -> QFunction:
    """Read a table written by `save_qtable`.  If `spec` is given, the stored
    grid hash must match it."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("Q-table file is missing its header line")
    header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    gamma = float(header["gamma"])
    n, a = int(header["states"]), int(header["actions"])
    if spec is not None and "grid" in header and header["grid"] != grid_hash(spec):
        raise ValueError("Q-table was solved for a different grid")
    rows = [ln for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    if len(rows) != n:
        raise ValueError(f"expected {n} rows, found {len(rows)}")
    values = np.array([[float.fromhex(tok) for tok in ln.split()]
                       for ln in rows])
    if values.shape != (n, a):
        raise ValueError("Q-table body does not match its header shape")
    return QFunction(values, gamma)
