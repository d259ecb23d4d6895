"""Two-stage action shield: a latent distance gate, then a prior-Q check.

Stage one decides whether the current observation is close, in latent space,
to previously recorded pre-violation states; only then does stage two apply
the domain prior, which resamples the proposed action until it clears its
prior-Q row mean.  Keeping the stages separate is the point: the prior alone
second-guesses actions everywhere, the gate restricts it to the neighborhood
of remembered danger.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .gridworld import NUM_ACTIONS
from .latent import EncoderModel, encode
from .solver import QFunction


@dataclass
class ShieldConfig:
    distance_threshold: float = 2.5   # latent L2 below this opens the gate
    check_probability: float = 0.95   # chance the action check arms at all
    sample_size: int = 10             # embeddings drawn per distance query
    buffer_capacity: int = 100

    def __post_init__(self):
        if not 0.0 <= self.check_probability <= 1.0:
            raise ValueError("check_probability must lie in [0, 1], got "
                             f"{self.check_probability}")


@dataclass(frozen=True)
class ShieldDecision:
    action: int
    gate_fired: bool
    distance: float | None
    check_armed: bool
    replaced: bool
    loop_iterations: int


class UnsafeEmbeddingBuffer:
    """FIFO ring of latent embeddings of states that preceded a violation."""

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[tuple[int, np.ndarray]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, embedding: np.ndarray, step: int) -> None:
        self._items.append((step, np.array(embedding, dtype=float)))

    def embeddings(self) -> list[np.ndarray]:
        return [z for _, z in self._items]

    def sample(self, k: int, rng: np.random.Generator) -> list[np.ndarray]:
        """Up to k embeddings, uniform without replacement."""
        n = len(self._items)
        k = min(k, n)
        idx = rng.choice(n, size=k, replace=False)
        items = list(self._items)
        return [items[int(i)][1] for i in idx]

    def dump_tsv(self, path, header: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if header:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in
                                         header.items()) + "\n")
            for insert_step, z in self._items:
                coords = "\t".join(repr(float(v)) for v in z)
                fh.write(f"{insert_step}\t{coords}\n")


def record_violation(buffer: UnsafeEmbeddingBuffer, model: EncoderModel,
                     previous_obs: np.ndarray, step: int) -> None:
    """Remember the embedding of the state the violating action was taken
    from (the violation itself is terminal and never revisited)."""
    buffer.add(encode(model, previous_obs), step)


def state_distance(z: np.ndarray, sample: list[np.ndarray]) -> float:
    """Mean L2 distance from z to the sampled unsafe embeddings."""
    if not sample:
        raise ValueError("distance against an empty sample is undefined")
    return float(np.mean([np.linalg.norm(z - ref) for ref in sample]))


def check_action(q_p: QFunction, s: int, proposed: int, check_probability: float,
                 rng: np.random.Generator) -> tuple[int, bool, int]:
    """Prior-Q action check, the second shield stage.

    One probability coin per call.  If it arms, the proposed action is kept
    only when its prior value is at least its row mean; otherwise uniform
    resampling runs until some action clears the bar.  The loop always halts
    because the row argmax can never sit below the mean.  Returns the action,
    whether the check armed, and how many resamples it took.
    """
    armed = rng.random() < check_probability
    if not armed:
        return int(proposed), False, 0
    row = q_p.values[s]
    # clamp to the row max: float rounding can push the mean of a flat row
    # a ulp above every entry, which would never let the loop halt
    bar = min(float(row.mean()), float(row.max()))
    action = int(proposed)
    iterations = 0
    while row[action] < bar:
        action = int(rng.integers(NUM_ACTIONS))
        iterations += 1
    return action, True, iterations


def shield_decide(s: int, obs: np.ndarray, proposed: int, q_p: QFunction,
                  model: EncoderModel, buffer: UnsafeEmbeddingBuffer,
                  cfg: ShieldConfig,
                  rng: np.random.Generator) -> ShieldDecision:
    """Run both stages for one step.  An empty buffer means nothing unsafe
    has been seen yet, so the shield stays out of the way."""
    if len(buffer) == 0:
        return ShieldDecision(int(proposed), False, None, False, False, 0)
    sample = buffer.sample(cfg.sample_size, rng)
    distance = state_distance(encode(model, obs), sample)
    if distance >= cfg.distance_threshold:
        return ShieldDecision(int(proposed), False, distance, False, False, 0)
    action, armed, iterations = check_action(q_p, s, proposed,
                                             cfg.check_probability, rng)
    return ShieldDecision(action, True, distance, armed,
                          action != int(proposed), iterations)


def shield_action(s: int, obs: np.ndarray, proposed: int, q_p: QFunction,
                  model: EncoderModel, buffer: UnsafeEmbeddingBuffer,
                  cfg: ShieldConfig, rng: np.random.Generator) -> int:
    return shield_decide(s, obs, proposed, q_p, model, buffer, cfg,
                         rng).action
