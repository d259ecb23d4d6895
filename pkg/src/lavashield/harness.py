"""Experiment pipeline: generate, solve, distill priors, train the encoder,
run shielded agents, and aggregate reports.

Every command is a plain function over paths plus config objects, so the CLI
stays a thin argument-parsing layer and tests can drive the pipeline
directly.  Each output file starts with '#'-prefixed provenance lines (the
resolved config and seed); re-running a command with identical inputs writes
byte-identical files.
"""

from __future__ import annotations

import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .agent import (
    MODE_STATE_CHECKED,
    MODE_VANILLA,
    AgentConfig,
    RunResult,
    run_training,
)
from .config import ExperimentConfig, provenance
from .gridworld import (
    CellKind,
    GridSpec,
    generate_crossing,
    grid_hash,
    load_map,
    save_map,
    state_count,
)
from .latent import (
    EncoderConfig,
    EncoderTrainer,
    LabeledReplayBuffer,
    enumerate_labeled_observations,
    export_embeddings,
    init_model,
    load_checkpoint,
    rollout_labeled_observations,
    save_checkpoint,
)
from .priors import (
    PriorConfig,
    save_transitions,
    select_prior_transitions,
    train_prior_q,
)
from .solver import QFunction, load_qtable, save_qtable, value_iteration


def map_filename(size: int, crossings: int, obstacle: CellKind,
                 seed: int) -> str:
    family = "Lava" if obstacle == CellKind.LAVA else "Simple"
    return f"{family}CrossingS{size}N{crossings}-s{seed}.map"


def _write_lines(path, header: dict, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items())
                 + "\n")
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# gen / solve
# ---------------------------------------------------------------------------

def cmd_gen(size: int, crossings: int, obstacle: CellKind, seeds: list[int],
            outdir) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for seed in seeds:
        spec = generate_crossing(size, crossings, obstacle, seed)
        path = os.path.join(outdir, map_filename(size, crossings, obstacle,
                                                 seed))
        save_map(path, spec)
        paths.append(path)
    return paths


def cmd_solve(map_path, out_path, gamma: float = 0.99,
              tol: float = 1e-8) -> QFunction:
    spec = load_map(map_path)
    q = value_iteration(spec, gamma=gamma, tol=tol)
    header = provenance("solve", {"map": os.path.basename(map_path),
                                  "tol": repr(tol)})
    save_qtable(out_path, q, grid=spec, extra_header=header)
    return q


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

def cmd_priors(map_paths: list, outdir, cfg: PriorConfig) -> tuple[str, str]:
    """Solve each source task exactly, select consistently undesirable pairs,
    and train the prior Q-table.  The first map supplies successor dynamics."""
    if len(map_paths) < 2:
        raise ValueError("need at least two source maps")
    os.makedirs(outdir, exist_ok=True)
    tasks = []
    for path in map_paths:
        spec = load_map(path)
        tasks.append((spec, value_iteration(spec, gamma=cfg.gamma)))
    supplier = tasks[0][0]
    transitions = select_prior_transitions(tasks, cfg)

    meta = provenance("priors", {
        "maps": [os.path.basename(p) for p in map_paths],
        "gamma": repr(cfg.gamma),
        "consistency_threshold": repr(cfg.consistency_threshold),
        "learning_rate": repr(cfg.learning_rate),
        "selected": len(transitions),
    })
    transitions_path = os.path.join(outdir, "prior_transitions.txt")
    save_transitions(transitions_path, transitions, header=meta)

    if transitions:
        q_p = train_prior_q(transitions, state_count(supplier), cfg)
    else:
        print("warning: empty prior selection, writing an all-zero table",
              file=sys.stderr)
        q_p = QFunction(np.zeros((state_count(supplier), 3)), cfg.gamma)
    qp_path = os.path.join(outdir, "prior_q.qt")
    save_qtable(qp_path, q_p, grid=supplier, extra_header=meta)
    return qp_path, transitions_path


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def cmd_train_encoder(map_paths: list, outdir, cfg: EncoderConfig,
                      steps: int, seed: int, labeling: str = "oracle",
                      rollout_steps: int = 5000) -> str:
    """Fill the labeled buffer from the given maps (full state enumeration
    for oracle labels, random rollouts for experiential ones), then train."""
    os.makedirs(outdir, exist_ok=True)
    specs = [load_map(p) for p in map_paths]
    obs_shapes = {spec.height * spec.width for spec in specs}
    if len(obs_shapes) != 1:
        raise ValueError("encoder maps must share one grid size")

    items = []
    rng = np.random.default_rng(seed)
    for spec in specs:
        if labeling == "oracle":
            items.extend(enumerate_labeled_observations(spec))
        else:
            items.extend(rollout_labeled_observations(spec, rollout_steps,
                                                      rng, labeling))
    capacity = max(cfg.replay_capacity, len(items))
    buffer = LabeledReplayBuffer(capacity)
    buffer.extend(items)

    model = init_model(items[0].obs.shape, cfg, seed)
    trainer = EncoderTrainer(model, cfg, seed + 1)
    losses = trainer.train(buffer, steps)

    meta = provenance("train-encoder", {
        "maps": [os.path.basename(p) for p in map_paths],
        "steps": steps,
        "seed": seed,
        "labeling": labeling,
        "buffer_size": len(buffer),
    })
    checkpoint_path = os.path.join(outdir, "encoder.ckpt")
    save_checkpoint(checkpoint_path, model, cfg, seed)
    _write_lines(os.path.join(outdir, "training_curve.csv"), meta,
                 ["step,loss"] + [f"{i},{loss!r}"
                                  for i, loss in enumerate(losses)])
    for path, spec in zip(map_paths, specs):
        stem = os.path.splitext(os.path.basename(path))[0]
        export_embeddings(os.path.join(outdir, f"embeddings_{stem}.tsv"),
                          spec, model,
                          header={**meta, "grid": grid_hash(spec)})
    return checkpoint_path


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _run_one(exp: ExperimentConfig, mode: str, seed: int) -> str:
    spec = load_map(exp.map_path)
    # the prior table is keyed to the grid that supplied its dynamics, which
    # is a different map file than the one being run; only the state-space
    # size has to line up
    q_p = load_qtable(exp.qp_path) if exp.qp_path else None
    if q_p is not None and q_p.values.shape[0] != state_count(spec):
        raise ValueError(
            f"prior table covers {q_p.values.shape[0]} states but the run "
            f"map has {state_count(spec)}")
    encoder = (load_checkpoint(exp.encoder_path)[0]
               if exp.encoder_path else None)
    cfg = replace(exp.agent, mode=mode, seed=seed, total_steps=exp.steps)
    result = run_training(spec, cfg, q_p=q_p, encoder=encoder,
                          shield_cfg=exp.shield)
    run_dir = os.path.join(exp.outdir, mode, f"seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    meta = provenance("run", {
        "map": os.path.basename(exp.map_path),
        "grid": grid_hash(spec),
        "mode": mode,
        "seed": seed,
        "steps": exp.steps,
        "learner": cfg.learner,
        "learning_rate": repr(cfg.learning_rate),
        "gamma": repr(cfg.gamma),
        "epsilon_start": repr(cfg.epsilon_start),
        "epsilon_end": repr(cfg.epsilon_end),
        "distance_threshold": repr(exp.shield.distance_threshold),
        "check_probability": repr(exp.shield.check_probability),
        "sample_size": exp.shield.sample_size,
        "buffer_capacity": exp.shield.buffer_capacity,
    })
    _write_run_outputs(run_dir, meta, result)
    return run_dir


def _write_run_outputs(run_dir, meta: dict, result: RunResult) -> None:
    rows = ["episode,steps,return,violated,cumulative_violations"]
    cumulative = 0
    for ep in result.episodes:
        cumulative += int(ep.violated)
        rows.append(f"{ep.index},{ep.steps},{ep.ret!r},{int(ep.violated)},"
                    f"{cumulative}")
    _write_lines(os.path.join(run_dir, "episodes.csv"), meta, rows)

    heat_rows = [",".join(str(v) for v in row) for row in result.heatmap]
    _write_lines(os.path.join(run_dir, "heatmap.csv"), meta, heat_rows)

    event_rows = ["step,state,distance,proposed,chosen,loop_iterations,"
                  "replaced"]
    for ev in result.interventions:
        distance = "" if ev.distance is None else repr(ev.distance)
        event_rows.append(f"{ev.step},{ev.state},{distance},{ev.proposed},"
                          f"{ev.chosen},{ev.loop_iterations},"
                          f"{int(ev.replaced)}")
    _write_lines(os.path.join(run_dir, "interventions.csv"), meta, event_rows)

    if result.buffer is not None:
        result.buffer.dump_tsv(os.path.join(run_dir, "unsafe_buffer.tsv"),
                               header=meta)


def cmd_run(exp: ExperimentConfig) -> list[str]:
    """Train every (mode, seed) combination; parallel across worker slots."""
    exp.validate()
    os.makedirs(exp.outdir, exist_ok=True)
    jobs = [(mode, seed) for mode in exp.modes for seed in exp.seeds]
    if exp.workers > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            futures = [pool.submit(_run_one, exp, mode, seed)
                       for mode, seed in jobs]
            return [f.result() for f in futures]
    return [_run_one(exp, mode, seed) for mode, seed in jobs]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _read_csv_rows(path) -> list[list[str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.split(","))
    return rows


def load_episode_table(path) -> dict[str, np.ndarray]:
    rows = _read_csv_rows(path)
    header, body = rows[0], rows[1:]
    columns = {name: np.array([float(r[i]) for r in body])
               for i, name in enumerate(header)}
    return columns


def trailing_mean_return(table: dict[str, np.ndarray],
                         window: int = 100) -> float:
    returns = table["return"]
    if len(returns) == 0:
        return 0.0
    return float(returns[-window:].mean())


def _binned_curve(step_points: np.ndarray, values: np.ndarray, total: int,
                  bins: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Mean of `values` per step bin, forward-filled over empty bins."""
    edges = np.linspace(0, total, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    out = np.full(bins, np.nan)
    which = np.clip(np.digitize(step_points, edges) - 1, 0, bins - 1)
    for b in range(bins):
        mask = which == b
        if mask.any():
            out[b] = values[mask].mean()
    last = 0.0
    for b in range(bins):
        if np.isnan(out[b]):
            out[b] = last
        else:
            last = out[b]
    return centers, out


def cmd_report(runs_dir, outdir, map_path=None) -> str:
    """Aggregate every mode/seed run into a summary table and figures."""
    from . import plots

    os.makedirs(outdir, exist_ok=True)
    modes = sorted(d for d in os.listdir(runs_dir)
                   if os.path.isdir(os.path.join(runs_dir, d)))
    if not modes:
        raise ValueError(f"no run directories under {runs_dir}")

    obstacle_mask = None
    if map_path is not None:
        spec = load_map(map_path)
        obstacle_mask = np.array(
            [[spec.cells[r][c] in (CellKind.LAVA, CellKind.WALL)
              for c in range(spec.width)] for r in range(spec.height)])

    summary_rows = ["mode,runs,episodes_mean,return_mean,"
                    "trailing_return_mean,violations_mean"]
    return_curves: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    violation_curves: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for mode in modes:
        mode_dir = os.path.join(runs_dir, mode)
        seed_dirs = sorted(d for d in os.listdir(mode_dir)
                           if os.path.isdir(os.path.join(mode_dir, d)))
        tables = [load_episode_table(os.path.join(mode_dir, d,
                                                  "episodes.csv"))
                  for d in seed_dirs]
        heat = sum(np.loadtxt(os.path.join(mode_dir, d, "heatmap.csv"),
                              delimiter=",", comments="#").astype(int)
                   for d in seed_dirs)

        step_points = np.concatenate([np.cumsum(t["steps"]) for t in tables])
        returns = np.concatenate([t["return"] for t in tables])
        violations = np.concatenate([t["cumulative_violations"]
                                     for t in tables])
        total = int(max(np.max(np.cumsum(t["steps"])) for t in tables))
        return_curves[mode] = _binned_curve(step_points, returns, total)
        centers, mean_cum = _binned_curve(step_points, violations, total)
        violation_curves[mode] = (centers, mean_cum)

        episodes_mean = float(np.mean([len(t["return"]) for t in tables]))
        return_mean = float(np.mean([t["return"].mean() for t in tables]))
        trailing = float(np.mean([trailing_mean_return(t) for t in tables]))
        violations_mean = float(np.mean(
            [t["cumulative_violations"][-1] for t in tables]))
        summary_rows.append(
            f"{mode},{len(tables)},{episodes_mean!r},{return_mean!r},"
            f"{trailing!r},{violations_mean!r}")

        plots.plot_visit_heatmap(
            heat, os.path.join(outdir, f"heatmap_{mode}.png"),
            title=f"visits: {mode}", obstacle_mask=obstacle_mask)

    meta = provenance("report", {"runs": os.path.basename(str(runs_dir)),
                                 "modes": modes})
    summary_path = os.path.join(outdir, "summary.csv")
    _write_lines(summary_path, meta, summary_rows)
    plots.plot_return_curves(return_curves,
                             os.path.join(outdir, "returns.png"))
    plots.plot_cumulative_violations(violation_curves,
                                     os.path.join(outdir, "violations.png"))
    return summary_path
