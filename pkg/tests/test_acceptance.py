"""End-to-end acceptance checks.

Each test covers one headline behavior at its stated tolerance and prints a
single [PASS] line on success; a failing assertion prints the matching
[FAIL] line.  Heavyweight fixtures (exact solves, encoder training, 50K-step
agent runs) are module-scoped so the whole file stays within a desk-scale
time budget.
"""

from __future__ import annotations

import math
import os
from collections import deque
from contextlib import contextmanager

import numpy as np
import pytest

from lavashield.agent import (
    MODE_PRIORS_ONLY,
    MODE_STATE_CHECKED,
    MODE_VANILLA,
    AgentConfig,
    run_training,
)
from lavashield.gridworld import (
    Action,
    CellKind,
    SafetyLabel,
    classify_state,
    find_goal,
    generate_crossing,
    iter_nonterminal_states,
    observe,
    start_state,
    state_count,
    state_index,
    step,
)
from lavashield.harness import (
    cmd_gen,
    cmd_priors,
    cmd_report,
    cmd_run,
    cmd_solve,
    cmd_train_encoder,
)
from lavashield.config import ExperimentConfig
from lavashield.latent import (
    EncoderConfig,
    EncoderTrainer,
    LabeledReplayBuffer,
    batch_loss,
    batch_loss_and_grad,
    contrastive_loss,
    encode,
    encode_batch,
    enumerate_labeled_observations,
    init_model,
)
from lavashield.priors import (
    PriorConfig,
    scaled_undesirability,
    select_prior_transitions,
    train_prior_q,
    undesirability_distribution,
    consistency_score,
)
from lavashield.shield import (
    ShieldConfig,
    UnsafeEmbeddingBuffer,
    shield_decide,
)
from lavashield.solver import (
    QFunction,
    bellman_residual,
    greedy_rollout,
    value_iteration,
)


@contextmanager
def criterion(number: int, label: str):
    try:
        yield
    except Exception:
        print(f"[FAIL] criterion {number}: {label}")
        raise
    print(f"[PASS] criterion {number}: {label}")


# ---------------------------------------------------------------------------
# shared heavyweight fixtures
# ---------------------------------------------------------------------------

PRIOR_GAMMA = 0.9

PRIOR_LINEUP = (
    (CellKind.WALL, 1, 0),
    (CellKind.WALL, 2, 11),
    (CellKind.LAVA, 1, 0),
    (CellKind.LAVA, 2, 11),
)


@pytest.fixture(scope="module")
def eval_grid():
    return generate_crossing(9, 1, CellKind.LAVA, 0)


@pytest.fixture(scope="module")
def prior_q(eval_grid):
    """Prior table distilled from the four-task lineup; the first task
    supplies successor dynamics and shares its layout with the eval grid."""
    cfg = PriorConfig()
    tasks = [(spec, value_iteration(spec, gamma=PRIOR_GAMMA))
             for spec in (generate_crossing(9, n, kind, seed)
                          for kind, n, seed in PRIOR_LINEUP)]
    selected = select_prior_transitions(tasks, cfg)
    return train_prior_q(selected, state_count(tasks[0][0]), cfg)


@pytest.fixture(scope="module")
def trained_encoder(eval_grid):
    """Contrastive encoder fitted to the eval grid's labeled enumeration.
    Settings tuned for the 10-minute budget of the 50K-step comparison."""
    cfg = EncoderConfig(batch_size=256, learning_rate=1e-3)
    buffer = LabeledReplayBuffer(cfg.replay_capacity)
    buffer.extend(enumerate_labeled_observations(eval_grid))
    model = init_model(observe(eval_grid, start_state(eval_grid)).shape,
                       cfg, seed=7)
    EncoderTrainer(model, cfg, seed=7).train(buffer, 12_000)
    return model


def _bfs_optimal_steps(spec) -> int:
    """Fewest turn/forward actions from the start to the goal."""
    goal = find_goal(spec)
    start = start_state(spec)
    first = (start.row, start.col, int(start.direction))
    seen = {first}
    queue = deque([(first, 0)])
    while queue:
        (row, col, direction), dist = queue.popleft()
        state_like = type(start)(row, col, direction)
        for action in Action:
            tr = step(spec, state_like, action)
            if (tr.next_state.row, tr.next_state.col) == goal:
                return dist + 1
            if tr.terminated:
                continue
            key = (tr.next_state.row, tr.next_state.col,
                   int(tr.next_state.direction))
            if key not in seen:
                seen.add(key)
                queue.append((key, dist + 1))
    raise AssertionError("goal unreachable")


# ---------------------------------------------------------------------------
# 1. exact solver
# ---------------------------------------------------------------------------

def test_criterion_1_bellman_oracle():
    with criterion(1, "Bellman residual <= 1e-8; greedy rollouts are "
                      "BFS-optimal on 20 seeded grids"):
        for size, crossings, kind, seed in (
                (5, 0, CellKind.LAVA, 1), (5, 1, CellKind.LAVA, 0),
                (7, 1, CellKind.WALL, 2), (7, 2, CellKind.LAVA, 3),
                (9, 1, CellKind.LAVA, 0), (9, 2, CellKind.WALL, 11),
                (9, 2, CellKind.LAVA, 11), (11, 3, CellKind.LAVA, 4)):
            spec = generate_crossing(size, crossings, kind, seed)
            q = value_iteration(spec, gamma=0.99, tol=1e-10)
            assert bellman_residual(spec, q) <= 1e-8

        for seed in range(20):
            spec = generate_crossing(9, 1, CellKind.LAVA, seed)
            q = value_iteration(spec, gamma=0.99, tol=1e-10)
            trajectory = greedy_rollout(spec, q)
            assert trajectory[-1].reward == 1.0
            assert all(not tr.violated for tr in trajectory)
            assert len(trajectory) == _bfs_optimal_steps(spec)


# ---------------------------------------------------------------------------
# 2. formula suite
# ---------------------------------------------------------------------------

def test_criterion_2_formula_suite():
    with criterion(2, "undesirability, softmax, consistency, and hinge "
                      "identities over 1000 random instances"):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 8))
            row = rng.normal(size=n)
            table = QFunction(row.reshape(1, -1), PRIOR_GAMMA)
            assert scaled_undesirability(table, 0, int(np.argmax(row))) == 0.0

            dist = undesirability_distribution(row)
            assert abs(dist.sum() - 1.0) <= 1e-9
            assert np.all(dist > 0.0)
            shifted = undesirability_distribution(row + rng.normal())
            np.testing.assert_allclose(dist, shifted, atol=1e-9)

            c = float(rng.uniform(0.0, 1.0))
            weights = np.full(int(rng.integers(2, 6)), c)
            score = consistency_score(weights,
                                      undesirability_distribution(weights))
            assert score == pytest.approx(c, rel=1e-9)

            margin = float(rng.uniform(0.5, 20.0))
            direction = rng.normal(size=4)
            direction /= np.linalg.norm(direction)
            # 1.01 keeps rounding in the norm from dipping under the margin
            z_far = direction * math.sqrt(margin * rng.uniform(1.01, 4.0))
            assert contrastive_loss(np.zeros(4), z_far, False, margin) == 0.0
        # exact boundary: squared distance lands on the margin itself
        assert contrastive_loss(np.zeros(1), np.array([3.0]), False, 9.0) == 0.0


# ---------------------------------------------------------------------------
# 3. gradient check
# ---------------------------------------------------------------------------

def test_criterion_3_gradient_check():
    with criterion(3, "analytic batch-loss gradient matches central "
                      "differences within 1e-4 relative error"):
        cfg = EncoderConfig(hidden_dim=8, latent_dim=4, batch_size=6)
        rng = np.random.default_rng(0)
        spec = generate_crossing(5, 1, CellKind.LAVA, 0)
        items = enumerate_labeled_observations(spec)
        for seed in range(3):
            model = init_model(items[0].obs.shape, cfg, seed=seed)
            batch = [items[int(i)] for i in
                     rng.choice(len(items), size=6, replace=False)]
            _, grad = batch_loss_and_grad(model, batch, cfg)
            h = 1e-5
            probe = rng.choice(model.params.size, size=60, replace=False)
            for k in probe:
                saved = model.params[k]
                model.params[k] = saved + h
                up = batch_loss(model, batch, cfg)
                model.params[k] = saved - h
                down = batch_loss(model, batch, cfg)
                model.params[k] = saved
                fd = (up - down) / (2 * h)
                scale = max(abs(fd), abs(grad[k]), 1e-8)
                assert abs(fd - grad[k]) / scale <= 1e-4


# ---------------------------------------------------------------------------
# 4. shield soundness
# ---------------------------------------------------------------------------

def test_criterion_4_shield_soundness(eval_grid, prior_q):
    with criterion(4, "with the check certain and the gate open, the shield "
                      "never keeps forward-into-lava on any undesirable "
                      "state"):
        cfg = ShieldConfig(check_probability=1.0)
        enc_cfg = EncoderConfig(hidden_dim=32, latent_dim=8)
        model = init_model(observe(eval_grid, start_state(eval_grid)).shape,
                           enc_cfg, seed=0)
        rng = np.random.default_rng(0)
        checked = 0
        for state in iter_nonterminal_states(eval_grid):
            if classify_state(eval_grid, state) != SafetyLabel.UNDESIRABLE:
                continue
            s = state_index(eval_grid, state.row, state.col,
                            int(state.direction))
            row = prior_q.values[s]
            assert row[int(Action.FORWARD)] < row.mean(), \
                "prior table must flag forward on undesirable states"
            obs = observe(eval_grid, state)
            # a buffer holding this very state's embedding forces the
            # distance gate open (distance is exactly zero)
            buffer = UnsafeEmbeddingBuffer(cfg.buffer_capacity)
            buffer.add(encode(model, obs), step=0)
            for proposed in Action:
                decision = shield_decide(s, obs, int(proposed), prior_q,
                                         model, buffer, cfg, rng)
                assert decision.gate_fired and decision.check_armed
                assert decision.distance == 0.0
                assert decision.action != int(Action.FORWARD)
                assert row[decision.action] >= min(row.mean(), row.max())
            checked += 1
        assert checked == 14


# ---------------------------------------------------------------------------
# 5. three-regime separation at 50K steps
# ---------------------------------------------------------------------------

def test_criterion_5_mode_separation(eval_grid, prior_q, trained_encoder):
    with criterion(5, "at 50K steps x 3 seeds: priors-only <= 0.05 return, "
                      "state-checked >= 0.5, vanilla >= 3x the violations"):
        trailing, violations = {}, {}
        for mode, extra in (
                (MODE_VANILLA, {}),
                (MODE_PRIORS_ONLY, {"q_p": prior_q}),
                (MODE_STATE_CHECKED, {"q_p": prior_q,
                                      "encoder": trained_encoder})):
            trail, viol = [], []
            for seed in (1, 2, 3):
                cfg = AgentConfig(mode=mode, total_steps=50_000, seed=seed)
                result = run_training(eval_grid, cfg, **extra)
                returns = result.returns()
                trail.append(float(returns[-100:].mean()))
                viol.append(result.violation_count)
            trailing[mode] = float(np.mean(trail))
            violations[mode] = float(np.mean(viol))

        assert trailing[MODE_PRIORS_ONLY] <= 0.05
        assert trailing[MODE_STATE_CHECKED] >= 0.5
        assert trailing[MODE_VANILLA] > 0.0
        assert violations[MODE_VANILLA] >= 3.0 * violations[MODE_STATE_CHECKED]
        # the gated variant must also beat blanket checking on final return
        assert trailing[MODE_STATE_CHECKED] > trailing[MODE_PRIORS_ONLY]


# ---------------------------------------------------------------------------
# 6. latent separation and transfer
# ---------------------------------------------------------------------------

C6_TRAIN_SEEDS = (0, 1, 3, 9)
C6_UNSEEN_SEED = 5
C6_STEPS = 24_000


def _distance_verdicts(z_rows: np.ndarray, buffer_z: np.ndarray,
                       cfg: ShieldConfig, rng) -> np.ndarray:
    """True where the mean distance to a buffer sample is under threshold."""
    out = np.empty(len(z_rows), dtype=bool)
    for i, z in enumerate(z_rows):
        k = min(cfg.sample_size, len(buffer_z))
        idx = rng.choice(len(buffer_z), size=k, replace=False)
        dist = float(np.linalg.norm(buffer_z[idx] - z, axis=1).mean())
        out[i] = dist < cfg.distance_threshold
    return out


def _mean_pairwise_distance(a: np.ndarray, b: np.ndarray | None = None,
                            chunk: int = 128) -> float:
    """Exact mean L2 distance, within one group (b None) or across two,
    accumulated in row chunks to keep memory flat."""
    total = 0.0
    count = 0
    other = a if b is None else b
    for lo in range(0, len(a), chunk):
        rows = a[lo:lo + chunk]
        dists = np.linalg.norm(rows[:, None, :] - other[None, :, :], axis=2)
        if b is None:
            # only pairs beyond the diagonal of the full matrix
            for i in range(len(rows)):
                total += float(dists[i, lo + i + 1:].sum())
                count += len(a) - (lo + i + 1)
        else:
            total += float(dists.sum())
            count += dists.size
    return total / count


def test_criterion_6_latent_separation():
    with criterion(6, "inter/intra distance ratio > 2; held-out accuracy "
                      ">= 90% on training grids, >= 75% on an unseen grid"):
        cfg = EncoderConfig(batch_size=256, learning_rate=1e-3)
        shield_cfg = ShieldConfig()
        grids = [generate_crossing(9, 1, CellKind.LAVA, s)
                 for s in C6_TRAIN_SEEDS]
        unseen = generate_crossing(9, 1, CellKind.LAVA, C6_UNSEEN_SEED)

        items = []
        per_grid = []
        for spec in grids:
            grid_items = enumerate_labeled_observations(spec)
            per_grid.append(grid_items)
            items.extend(grid_items)
        buffer = LabeledReplayBuffer(max(cfg.replay_capacity, len(items)))
        buffer.extend(items)
        model = init_model(items[0].obs.shape, cfg, seed=7)
        EncoderTrainer(model, cfg, seed=7).train(buffer, C6_STEPS)

        rng = np.random.default_rng(123)
        unsafe_buffer, held = [], []
        for grid_items in per_grid:
            z = encode_batch(model, np.stack([it.obs for it in grid_items]))
            safe = np.array([it.safe for it in grid_items])
            unsafe_idx = np.flatnonzero(safe == 0)
            picked = rng.permutation(unsafe_idx)[: len(unsafe_idx) // 2]
            unsafe_buffer.append(z[picked])
            mask = np.ones(len(grid_items), dtype=bool)
            mask[picked] = False
            held.append((z, safe, mask))
        buffer_z = np.concatenate(unsafe_buffer)

        # separation ratio over the pooled training embeddings
        z_all = np.concatenate([h[0] for h in held])
        safe_all = np.concatenate([h[1] for h in held])
        z_unsafe, z_safe = z_all[safe_all == 0], z_all[safe_all == 1]
        intra = np.mean([_mean_pairwise_distance(z_unsafe),
                         _mean_pairwise_distance(z_safe)])
        inter = _mean_pairwise_distance(z_unsafe, z_safe)
        ratio = inter / intra
        assert ratio > 2.0

        # held-out accuracy across the training grids
        correct = total = 0
        for z, safe, mask in held:
            verdicts = _distance_verdicts(z[mask], buffer_z, shield_cfg, rng)
            correct += int((verdicts == (safe[mask] == 0)).sum())
            total += int(mask.sum())
        train_accuracy = correct / total
        assert train_accuracy >= 0.90

        # transfer: the same buffer classifies every state of a grid the
        # encoder never trained on
        unseen_items = enumerate_labeled_observations(unseen)
        z_unseen = encode_batch(model,
                                np.stack([it.obs for it in unseen_items]))
        safe_unseen = np.array([it.safe for it in unseen_items])
        verdicts = _distance_verdicts(z_unseen, buffer_z, shield_cfg, rng)
        unseen_accuracy = float((verdicts == (safe_unseen == 0)).mean())
        assert unseen_accuracy >= 0.75


# ---------------------------------------------------------------------------
# 7. byte-identical determinism
# ---------------------------------------------------------------------------

def _digest_tree(root) -> dict[str, bytes]:
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


def test_criterion_7_determinism(tmp_path):
    with criterion(7, "the full pipeline re-run writes byte-identical "
                      "outputs, figures included"):
        digests = []
        for attempt in ("first", "second"):
            root = tmp_path / attempt
            maps = cmd_gen(5, 1, CellKind.LAVA, [0, 1], root / "maps")
            walls = cmd_gen(5, 1, CellKind.WALL, [0], root / "maps")
            cmd_solve(maps[0], root / "solved.qt", gamma=0.99)
            qp_path, _ = cmd_priors([walls[0], maps[0], maps[1]],
                                    root / "priors", PriorConfig())
            encoder_path = cmd_train_encoder(
                [maps[0]], root / "encoder",
                EncoderConfig(hidden_dim=16, latent_dim=8, batch_size=8),
                steps=60, seed=3)
            exp = ExperimentConfig(
                map_path=maps[0],
                modes=["vanilla", "priors-only", "state-checked-priors"],
                seeds=[1, 2], steps=400, outdir=str(root / "runs"),
                qp_path=str(qp_path), encoder_path=encoder_path)
            cmd_run(exp)
            cmd_report(exp.outdir, root / "report", map_path=maps[0])
            digests.append(_digest_tree(root))
        assert digests[0] == digests[1]
