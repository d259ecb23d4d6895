"""Procedurally generated crossing gridworlds with exact safety labels.

A grid is a bordered rectangle of cells.  Obstacle "rivers" span the full
interior, alternate vertical/horizontal starting vertical, and each river is
pierced by exactly one opening.  The agent occupies a cell, faces one of four
directions, and acts with turn-left / turn-right / forward.  Entering lava
terminates the episode and counts as a safety violation; reaching the goal
pays 1.0, every other transition pays 0.

Layout draws use a splitmix64 generator implemented on Python integers so the
same (size, crossings, seed) triple yields a bit-identical grid on every
platform.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache

import numpy as np

GOAL_REWARD = 1.0

NUM_ACTIONS = 3
NUM_DIRECTIONS = 4


class CellKind(IntEnum):
    EMPTY = 0
    WALL = 1
    LAVA = 2
    GOAL = 3


class Direction(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2


class SafetyLabel(IntEnum):
    VIOLATION = 0
    UNDESIRABLE = 1
    SAFE = 2


# (row delta, col delta) indexed by Direction
DIR_VECTORS = ((-1, 0), (0, 1), (1, 0), (0, -1))

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Deterministic 64-bit generator (splitmix64) for layout draws.

    Implemented on plain Python integers so the stream does not depend on any
    numerics library or platform word size.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def randrange(self, n: int) -> int:
        # rejection sampling keeps the draw exactly uniform
        if n <= 0:
            raise ValueError("randrange needs a positive bound")
        span = _MASK64 + 1
        limit = span - span % n
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def sample(self, seq, k: int) -> list:
        """k distinct elements via partial Fisher-Yates."""
        pool = list(seq)
        if k > len(pool):
            raise ValueError("sample larger than population")
        for i in range(k):
            j = i + self.randrange(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.randrange(i + 1)
            seq[i], seq[j] = seq[j], seq[i]


@dataclass(frozen=True)
class GridSpec:
    """Immutable grid description.  `cells` is row-major; the border is Wall."""

    width: int
    height: int
    cells: tuple[tuple[CellKind, ...], ...]
    start: tuple[int, int, Direction]
    max_steps: int
    obstacle_kind: CellKind
    num_crossings: int
    seed: int

    def cell(self, row: int, col: int) -> CellKind:
        return self.cells[row][col]


@dataclass(frozen=True)
class AgentState:
    row: int
    col: int
    direction: Direction
    steps_elapsed: int = 0


@dataclass(frozen=True)
class Transition:
    state: AgentState
    action: Action
    next_state: AgentState
    reward: float
    terminated: bool
    violated: bool


def generate_crossing(size: int, num_crossings: int,
                      obstacle_kind: CellKind = CellKind.LAVA,
                      seed: int = 0) -> GridSpec:
    """Generate a size x size crossing grid with `num_crossings` rivers.

    Rivers sit on even interior rows/columns, which keeps at least one clear
    lane between them and keeps the start and goal corners free.  Openings are
    drawn along a shuffled monotone room walk from start to goal, so the goal
    is reachable by construction.  The layout depends only on
    (size, num_crossings, seed); `obstacle_kind` just picks how rivers render.
    """
    if size < 5:
        raise ValueError(f"grid size must be at least 5, got {size}")
    if num_crossings < 0:
        raise ValueError("num_crossings must be non-negative")
    if obstacle_kind not in (CellKind.LAVA, CellKind.WALL):
        raise ValueError("obstacle_kind must be LAVA or WALL")
    n_vertical = (num_crossings + 1) // 2
    n_horizontal = num_crossings // 2
    candidates = list(range(2, size - 2, 2))
    if n_vertical > len(candidates) or n_horizontal > len(candidates):
        raise ValueError(
            f"{num_crossings} crossings do not fit in a size-{size} grid")

    rng = SplitMix64(seed)
    river_cols = sorted(rng.sample(candidates, n_vertical))
    river_rows = sorted(rng.sample(candidates, n_horizontal))

    grid = [[CellKind.EMPTY] * size for _ in range(size)]
    for c in range(size):
        grid[0][c] = grid[size - 1][c] = CellKind.WALL
    for r in range(1, size - 1):
        grid[r][0] = grid[r][size - 1] = CellKind.WALL
    for c in river_cols:
        for r in range(1, size - 1):
            grid[r][c] = obstacle_kind
    for r in river_rows:
        for c in range(1, size - 1):
            grid[r][c] = obstacle_kind

    # Pierce each river with one opening.  The walk crosses rivers in a
    # shuffled monotone order and draws each opening from the band of rows or
    # columns of the room it currently occupies, so consecutive openings are
    # always mutually reachable.
    moves = ["right"] * n_vertical + ["down"] * n_horizontal
    rng.shuffle(moves)
    row_bounds = [0] + river_rows + [size - 1]
    col_bounds = [0] + river_cols + [size - 1]
    room_r = room_c = 0
    for move in moves:
        if move == "right":
            col = col_bounds[room_c + 1]
            band = range(row_bounds[room_r] + 1, row_bounds[room_r + 1])
            row = band[rng.randrange(len(band))]
            room_c += 1
        else:
            row = row_bounds[room_r + 1]
            band = range(col_bounds[room_c] + 1, col_bounds[room_c + 1])
            col = band[rng.randrange(len(band))]
            room_r += 1
        grid[row][col] = CellKind.EMPTY

    grid[size - 2][size - 2] = CellKind.GOAL

    # with no rivers the obstacle kind never renders; normalizing it keeps
    # the stored metadata identical to what a map parse would reconstruct
    stored_kind = obstacle_kind if num_crossings > 0 else CellKind.WALL
    spec = GridSpec(
        width=size,
        height=size,
        cells=tuple(tuple(row) for row in grid),
        start=(1, 1, Direction.EAST),
        max_steps=4 * size * size,
        obstacle_kind=stored_kind,
        num_crossings=num_crossings,
        seed=seed,
    )
    if not has_path_to_goal(spec):
        raise AssertionError("generator produced a disconnected grid")
    return spec


def start_state(spec: GridSpec) -> AgentState:
    row, col, direction = spec.start
    return AgentState(row, col, Direction(direction), 0)


def find_goal(spec: GridSpec) -> tuple[int, int]:
    for r in range(spec.height):
        for c in range(spec.width):
            if spec.cells[r][c] == CellKind.GOAL:
                return r, c
    raise ValueError("grid has no goal cell")


def has_path_to_goal(spec: GridSpec) -> bool:
    """Breadth-first reachability over empty/goal cells from the start."""
    sr, sc, _ = spec.start
    seen = {(sr, sc)}
    frontier = deque([(sr, sc)])
    while frontier:
        r, c = frontier.popleft()
        if spec.cells[r][c] == CellKind.GOAL:
            return True
        for dr, dc in DIR_VECTORS:
            nr, nc = r + dr, c + dc
            if (nr, nc) in seen:
                continue
            if spec.cells[nr][nc] in (CellKind.EMPTY, CellKind.GOAL):
                seen.add((nr, nc))
                frontier.append((nr, nc))
    return False


def is_terminal_cell(spec: GridSpec, row: int, col: int) -> bool:
    return spec.cells[row][col] in (CellKind.LAVA, CellKind.GOAL)


def step(spec: GridSpec, state: AgentState, action: Action) -> Transition:
    """Apply one action.  Raises if `state` is already terminal or truncated."""
    if is_terminal_cell(spec, state.row, state.col):
        raise ValueError("cannot step from a terminal state")
    if state.steps_elapsed >= spec.max_steps:
        raise ValueError("episode already exhausted its step budget")
    row, col, direction = state.row, state.col, state.direction
    if action == Action.TURN_LEFT:
        direction = Direction((direction - 1) % NUM_DIRECTIONS)
    elif action == Action.TURN_RIGHT:
        direction = Direction((direction + 1) % NUM_DIRECTIONS)
    elif action == Action.FORWARD:
        dr, dc = DIR_VECTORS[direction]
        target_r, target_c = row + dr, col + dc
        if spec.cells[target_r][target_c] != CellKind.WALL:
            row, col = target_r, target_c
    else:
        raise ValueError(f"unknown action {action!r}")
    steps = state.steps_elapsed + 1
    next_state = AgentState(row, col, Direction(direction), steps)
    landed = spec.cells[row][col]
    violated = landed == CellKind.LAVA
    reached_goal = landed == CellKind.GOAL
    terminated = violated or reached_goal or steps >= spec.max_steps
    reward = GOAL_REWARD if reached_goal else 0.0
    return Transition(state, Action(action), next_state, reward, terminated,
                      violated)


def classify_state(spec: GridSpec, state: AgentState) -> SafetyLabel:
    """Exact safety label: on lava -> VIOLATION; one forward move away from
    lava -> UNDESIRABLE; otherwise SAFE.  Turns never move the agent, so the
    forward target is the only cell that can violate."""
    if spec.cells[state.row][state.col] == CellKind.LAVA:
        return SafetyLabel.VIOLATION
    dr, dc = DIR_VECTORS[state.direction]
    if spec.cells[state.row + dr][state.col + dc] == CellKind.LAVA:
        return SafetyLabel.UNDESIRABLE
    return SafetyLabel.SAFE


# ---------------------------------------------------------------------------
# state indexing
# ---------------------------------------------------------------------------

def state_count(spec: GridSpec) -> int:
    return spec.width * spec.height * NUM_DIRECTIONS


def state_index(spec: GridSpec, row: int, col: int, direction: int) -> int:
    return (row * spec.width + col) * NUM_DIRECTIONS + int(direction)


def state_from_index(spec: GridSpec, index: int) -> AgentState:
    direction = index % NUM_DIRECTIONS
    cell = index // NUM_DIRECTIONS
    return AgentState(cell // spec.width, cell % spec.width,
                      Direction(direction), 0)


def iter_valid_states(spec: GridSpec):
    """All states on non-wall cells, in every facing direction."""
    for r in range(spec.height):
        for c in range(spec.width):
            if spec.cells[r][c] == CellKind.WALL:
                continue
            for d in Direction:
                yield AgentState(r, c, d, 0)


def iter_nonterminal_states(spec: GridSpec):
    for state in iter_valid_states(spec):
        if not is_terminal_cell(spec, state.row, state.col):
            yield state


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

# channel layout: 4 one-hot cell-kind planes, agent-present plane, then one
# plane per facing direction (marked at the agent's cell)
OBS_CHANNELS = 9
AGENT_CHANNEL = 4
DIRECTION_CHANNEL = 5


@lru_cache(maxsize=256)
def _kind_planes(spec: GridSpec) -> np.ndarray:
    planes = np.zeros((OBS_CHANNELS, spec.height, spec.width))
    for r in range(spec.height):
        for c in range(spec.width):
            planes[int(spec.cells[r][c]), r, c] = 1.0
    return planes


def observe(spec: GridSpec, state: AgentState) -> np.ndarray:
    """Channelized one-hot observation of shape (9, height, width)."""
    obs = _kind_planes(spec).copy()
    obs[AGENT_CHANNEL, state.row, state.col] = 1.0
    obs[DIRECTION_CHANNEL + int(state.direction), state.row, state.col] = 1.0
    return obs


def observation_size(spec: GridSpec) -> int:
    return OBS_CHANNELS * spec.height * spec.width


# ---------------------------------------------------------------------------
# plain-text map format
# ---------------------------------------------------------------------------

_CELL_CHARS = {
    CellKind.EMPTY: ".",
    CellKind.WALL: "#",
    CellKind.LAVA: "L",
    CellKind.GOAL: "G",
}
_CHAR_CELLS = {v: k for k, v in _CELL_CHARS.items()}


def to_text(spec: GridSpec) -> str:
    """Render the map: a `width height max_steps seed` header, then one
    character per cell ('.' empty, '#' wall, 'L' lava, 'G' goal, 'S' start).
    The start always faces east, so the text round-trips losslessly."""
    lines = [f"{spec.width} {spec.height} {spec.max_steps} {spec.seed}"]
    sr, sc, _ = spec.start
    for r in range(spec.height):
        chars = []
        for c in range(spec.width):
            if (r, c) == (sr, sc):
                chars.append("S")
            else:
                chars.append(_CELL_CHARS[spec.cells[r][c]])
        lines.append("".join(chars))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> GridSpec:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty map text")
    header = lines[0].split()
    if len(header) != 4:
        raise ValueError("map header must be 'width height max_steps seed'")
    width, height, max_steps, seed = (int(tok) for tok in header)
    rows = lines[1:]
    if len(rows) != height or any(len(row) != width for row in rows):
        raise ValueError("map body does not match the header dimensions")
    start = None
    cells = []
    for r, row in enumerate(rows):
        parsed = []
        for c, ch in enumerate(row):
            if ch == "S":
                if start is not None:
                    raise ValueError("map has more than one start cell")
                start = (r, c, Direction.EAST)
                parsed.append(CellKind.EMPTY)
            elif ch in _CHAR_CELLS:
                parsed.append(_CHAR_CELLS[ch])
            else:
                raise ValueError(f"unknown map character {ch!r}")
        cells.append(tuple(parsed))
    if start is None:
        raise ValueError("map has no start cell")
    cells = tuple(cells)
    obstacle_kind, num_crossings = _infer_layout_metadata(cells, width, height)
    return GridSpec(width=width, height=height, cells=cells, start=start,
                    max_steps=max_steps, obstacle_kind=obstacle_kind,
                    num_crossings=num_crossings, seed=seed)


def _infer_layout_metadata(cells, width: int,
                           height: int) -> tuple[CellKind, int]:
    """Recover obstacle kind and river count by scanning for fully spanning
    obstacle lines with a single opening.  Exact for generated maps."""
    any_lava = any(cells[r][c] == CellKind.LAVA
                   for r in range(height) for c in range(width))
    obstacle_kind = CellKind.LAVA if any_lava else CellKind.WALL
    obstacles = (CellKind.LAVA, CellKind.WALL)

    def is_river(line) -> bool:
        blocked = sum(kind in obstacles for kind in line)
        return blocked == len(line) - 1 and CellKind.EMPTY in line

    crossings = 0
    for c in range(1, width - 1):
        if is_river([cells[r][c] for r in range(1, height - 1)]):
            crossings += 1
    for r in range(1, height - 1):
        if is_river(list(cells[r][1:width - 1])):
            crossings += 1
    return obstacle_kind, crossings


def save_map(path, spec: GridSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(spec))


def load_map(path) -> GridSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return from_text(fh.read())


def grid_hash(spec: GridSpec) -> str:
    return hashlib.sha256(to_text(spec).encode("utf-8")).hexdigest()
