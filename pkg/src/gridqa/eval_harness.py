"""d_delta / QA-accuracy evaluation at T_{-k} spawns and the experiment protocols.

Agents are small objects with a ``run(jobs)`` method returning trajectories
and an ``answer_batch(envs, questions, trajectories)`` method; distances are geodesic
cells from the agent's position to the target object's cell.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_nn as nn
from .calibration import CalibrationConfig, calibrate_env
from .e2e_trainer import JointConfig, TrainSchedule, joint_train
from .grid_env import CELL_METERS, GridEnvironment, geodesic_distance, observe
from .nav_policy import NavModel, NavTrainConfig, Trajectory, rollout_batch, train_navigation
from .path_oracle import EnvTooSmall, goal_set, shortest_action_path, spawn_at
from .qa_model import QAModel, blindfold_answer, predict

DEFAULT_TIERS = (10, 20, 30)


def d_delta(env: GridEnvironment, target_pos, spawn_pos, stop_pos) -> int:
    """Progress towards the target in cells (positive = closer when stopping)."""
    return geodesic_distance(env, spawn_pos, target_pos) - geodesic_distance(env, stop_pos, target_pos)


def max_steps_for(k: int) -> int:
    return min(2 * k + 20, 120)


# ---------------------------------------------------------------- agents

class PolicyAgent:
    """Greedy rollouts of a navigation model (or one model per environment)."""

    def __init__(self, nav, qa: QAModel | None = None):
        self.nav = nav
        self.qa = qa

    def model_for(self, env_id: str) -> NavModel:
        return self.nav[env_id] if isinstance(self.nav, dict) else self.nav

    def run(self, jobs):
        groups: dict[int, list[int]] = {}
        models = {}
        for i, (env, *_rest) in enumerate(jobs):
            m = self.model_for(env.env_id)
            groups.setdefault(id(m), []).append(i)
            models[id(m)] = m
        out = [None] * len(jobs)
        for key, idx in groups.items():
            for i, traj in zip(idx, rollout_batch(models[key], [jobs[i] for i in idx])):
                out[i] = traj
        return out

    def answer_batch(self, envs, questions, trajectories):
        if self.qa is None:
            return [None] * len(questions)
        frames = np.stack([t.frames(env) for env, t in zip(envs, trajectories)])
        return predict(self.qa, frames, [q.tokens for q in questions])


class StillAgent:
    """Never moves; answers with the blindfold model (or not at all)."""

    def __init__(self, blindfold=None):
        self.blindfold = blindfold

    def run(self, jobs):
        return [Trajectory(q, spawn, [], "stop") for _, q, spawn, _ in jobs]

    def answer_batch(self, envs, questions, trajectories):
        if self.blindfold is None:
            return [None] * len(questions)
        vocab = self.blindfold.answer_vocab
        return [vocab[int(blindfold_answer(self.blindfold, q.tokens).argmax())] for q in questions]


class OracleAgent:
    """Replays the shortest path to the goal set; answers from the QA model."""

    def __init__(self, qa: QAModel | None = None):
        self.qa = qa

    def run(self, jobs):
        out = []
        for env, q, spawn, max_steps in jobs:
            path = shortest_action_path(env, spawn, goal_set(env, q.target_object_id))
            states = path.states(env)
            steps = [(observe(env, s), a, s2) for s, a, s2 in zip(states, path.actions, states[1:])][:max_steps]
            out.append(Trajectory(q, spawn, steps, "stop" if len(path) <= max_steps else "max_steps"))
        return out

    answer_batch = PolicyAgent.answer_batch


# ---------------------------------------------------------------- reports

@dataclass
class TierStats:
    k: int
    n: int
    skipped: int
    mean_d_delta: float
    mean_d_delta_m: float
    qa_accuracy: float
    stop_rate: float
    mean_length: float


@dataclass
class EvalReport:
    tiers: dict[int, TierStats]
    records: list[dict]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tiers": {str(k): asdict(v) for k, v in self.tiers.items()}, "records": self.records,
                "config": self.config}


def aggregate(records: list[dict], tiers, skipped: dict[int, int] | None = None) -> dict[int, TierStats]:
    """Tier statistics recomputed from per-question records."""
    skipped = skipped or {}
    out = {}
    for k in tiers:
        rows = [r for r in records if r["k"] == k]
        answered = [r for r in rows if r["predicted"] is not None]
        dd = [r["d_delta"] for r in rows]
        out[k] = TierStats(
            k=k,
            n=len(rows),
            skipped=skipped.get(k, 0),
            mean_d_delta=float(np.mean(dd)) if rows else math.nan,
            mean_d_delta_m=float(np.mean(dd)) * CELL_METERS if rows else math.nan,
            qa_accuracy=float(np.mean([r["correct"] for r in answered])) if answered else math.nan,
            stop_rate=float(np.mean([r["terminated_by"] == "stop" for r in rows])) if rows else math.nan,
            mean_length=float(np.mean([r["steps"] for r in rows])) if rows else math.nan,
        )
    return out


def spawn_jobs(items, tiers, seed: int):
    """One fixed spawn per (question, k, seed), shared by every agent."""
    jobs, meta, skipped = [], [], {k: 0 for k in tiers}
    for env, q in items:
        for k in tiers:
            try:
                spawn = spawn_at(env, q.target_object_id, k, nn.make_rng(seed, f"spawn/{q.qid}/{k}"))
            except EnvTooSmall:
                skipped[k] += 1
                continue
            jobs.append((env, q, spawn, max_steps_for(k)))
            meta.append(k)
    return jobs, meta, skipped


def _run_chunk(args):
    agent, jobs = args
    return agent.run(jobs)


def run_jobs(agent, jobs, n_jobs: int = 1):
    """``agent.run`` over contiguous chunks in worker processes; order is preserved."""
    if n_jobs <= 1 or len(jobs) < 2:
        return agent.run(jobs)
    size = -(-len(jobs) // n_jobs)
    chunks = [(agent, jobs[i : i + size]) for i in range(0, len(jobs), size)]
    with ProcessPoolExecutor(n_jobs) as pool:
        return [t for part in pool.map(_run_chunk, chunks) for t in part]


def evaluate(agent, items, tiers=DEFAULT_TIERS, seed: int = 0, n_jobs: int = 1) -> EvalReport:
    """Evaluate ``agent`` on ``(env, question)`` items at every tier.

    Agents always act in the item's own environment, so calibrated models
    are scored on the original layout without markers.
    """
    tiers = tuple(tiers)
    jobs, ks, skipped = spawn_jobs(items, tiers, seed)
    trajs = run_jobs(agent, jobs, n_jobs)
    envs = [job[0] for job in jobs]
    questions = [job[1] for job in jobs]
    answers = agent.answer_batch(envs, questions, trajs) if jobs else []
    records = []
    for (env, q, spawn, max_steps), k, traj, pred in zip(jobs, ks, trajs, answers):
        target = env.object_by_id(q.target_object_id).position
        stop = traj.final_state
        d0 = geodesic_distance(env, spawn.pos, target)
        d1 = geodesic_distance(env, stop.pos, target)
        records.append({
            "qid": q.qid, "env_id": env.env_id, "k": k, "qtype": q.qtype,
            "spawn": [spawn.x, spawn.y, int(spawn.heading)], "stop": [stop.x, stop.y, int(stop.heading)],
            "d_start": d0, "d_end": d1, "d_delta": d0 - d1, "steps": len(traj.steps),
            "terminated_by": traj.terminated_by, "predicted": pred, "gold": q.answer_token,
            "correct": None if pred is None else pred == q.answer_token,
        })
    return EvalReport(aggregate(records, tiers, skipped), records, {"tiers": list(tiers), "seed": seed})


# ---------------------------------------------------------------- protocols

@dataclass(frozen=True)
class ExperimentConfig:
    nav: NavTrainConfig = NavTrainConfig()
    calib: CalibrationConfig = CalibrationConfig()
    tiers: tuple[int, ...] = DEFAULT_TIERS
    train_qa: bool = True
    warm_start: int = 3
    p_max: float = 0.5


def pretrain(dataset, seed: int, cfg: ExperimentConfig, log=None):
    """Standard pre-training for one seed; returns ``(nav, qa or None, curve rows)``.

    Without QA this is plain imitation; the joint trainer yields the same
    navigation weights because the QA side draws from its own RNG streams.
    """
    n = replace(cfg.nav, seed=seed)
    if not cfg.train_qa:
        nav, curve = train_navigation(dataset, n, log=log)
        return nav, None, curve
    jcfg = JointConfig(epochs=n.epochs, warm_start=min(cfg.warm_start, n.epochs), lr=n.lr, batch=n.batch,
                       seed=seed, clip=n.clip, schedule=TrainSchedule(n.epochs, cfg.p_max))
    nav, qa, jlog = joint_train(dataset, jcfg, log=log)
    return nav, qa, jlog.rows


def calibrated_agent(nav: NavModel, qa, items_envs, calib: CalibrationConfig, method: str) -> PolicyAgent:
    models = {}
    for env in items_envs:
        models[env.env_id], _, _ = calibrate_env(nav, env, calib, method)
    return PolicyAgent(models, qa)


def _tier_means(report: EvalReport, tiers):
    return {k: report.tiers[k].mean_d_delta for k in tiers}, {k: report.tiers[k].qa_accuracy for k in tiers}


def compare_settings(dataset, seeds, cfg: ExperimentConfig, pretrained=None, split: str = "test", log=None) -> dict:
    """Standard vs calibration (fine-tune / distill) over seeds.

    Returns ``{"rows": {setting: {"d_delta": {k: [per seed]}, "qa": {...}}}, "reports": ...}``.
    """
    items = dataset.questions(split)
    envs = [env for env, _ in dataset.split(split)]
    settings = ("standard", "finetune", "distill")
    rows = {s: {"d_delta": {k: [] for k in cfg.tiers}, "qa": {k: [] for k in cfg.tiers}} for s in settings}
    reports = {s: [] for s in settings}
    pretrained = pretrained if pretrained is not None else {}
    for seed in seeds:
        if seed not in pretrained:
            pretrained[seed] = pretrain(dataset, seed, cfg, log=log)[:2]
        nav, qa = pretrained[seed]
        calib = replace(cfg.calib, seed=seed)
        agents = {
            "standard": PolicyAgent(nav, qa),
            "finetune": calibrated_agent(nav, qa, envs, calib, "finetune"),
            "distill": calibrated_agent(nav, qa, envs, calib, "distill"),
        }
        for name, agent in agents.items():
            rep = evaluate(agent, items, cfg.tiers, seed)
            reports[name].append(rep)
            dd, acc = _tier_means(rep, cfg.tiers)
            for k in cfg.tiers:
                rows[name]["d_delta"][k].append(dd[k])
                rows[name]["qa"][k].append(acc[k])
            if log:
                log(f"seed {seed} {name}: " + " ".join(f"T-{k} d={dd[k]:.3f} qa={acc[k]:.3f}" for k in cfg.tiers))
    deltas = {}
    for a, b in (("finetune", "standard"), ("distill", "standard"), ("distill", "finetune")):
        deltas[f"{a}-{b}"] = {k: [x - y for x, y in zip(rows[a]["d_delta"][k], rows[b]["d_delta"][k])]
                              for k in cfg.tiers}
    return {"rows": rows, "deltas": deltas, "reports": reports, "tiers": list(cfg.tiers), "seeds": list(seeds)}


def sweep_markers(dataset, seeds, cfg: ExperimentConfig, counts=(1, 2, 3, 4, 5), pretrained=None,
                  split: str = "test", include_zero: bool = True, log=None) -> dict:
    """d_delta per tier as a function of the number of placed markers (0 = standard)."""
    items = dataset.questions(split)
    envs = [env for env, _ in dataset.split(split)]
    pretrained = pretrained if pretrained is not None else {}
    xs = ([0] if include_zero else []) + list(counts)
    curve = {n: {k: [] for k in cfg.tiers} for n in xs}
    for seed in seeds:
        if seed not in pretrained:
            pretrained[seed] = pretrain(dataset, seed, cfg, log=log)[:2]
        nav, qa = pretrained[seed]
        for n in xs:
            if n == 0:
                agent = PolicyAgent(nav, qa)
            else:
                agent = calibrated_agent(nav, qa, envs, replace(cfg.calib, seed=seed, n_markers=n), "distill")
            dd, _ = _tier_means(evaluate(agent, items, cfg.tiers, seed), cfg.tiers)
            for k in cfg.tiers:
                curve[n][k].append(dd[k])
            if log:
                log(f"seed {seed} markers {n}: " + " ".join(f"T-{k} d={dd[k]:.3f}" for k in cfg.tiers))
    return {"curve": curve, "tiers": list(cfg.tiers), "seeds": list(seeds), "x": xs}


def sweep_lambda(dataset, seeds, cfg: ExperimentConfig, lams=(0.0, 0.1, 0.2, 0.5, 0.8, 1.0), pretrained=None,
                 split: str = "val", log=None) -> dict:
    """d_delta per tier as a function of the distillation weight."""
    items = dataset.questions(split)
    envs = [env for env, _ in dataset.split(split)]
    pretrained = pretrained if pretrained is not None else {}
    curve = {lam: {k: [] for k in cfg.tiers} for lam in lams}
    for seed in seeds:
        if seed not in pretrained:
            pretrained[seed] = pretrain(dataset, seed, cfg, log=log)[:2]
        nav, qa = pretrained[seed]
        for lam in lams:
            agent = calibrated_agent(nav, qa, envs, replace(cfg.calib, seed=seed, lam=lam), "distill")
            dd, _ = _tier_means(evaluate(agent, items, cfg.tiers, seed), cfg.tiers)
            for k in cfg.tiers:
                curve[lam][k].append(dd[k])
            if log:
                log(f"seed {seed} lambda {lam}: " + " ".join(f"T-{k} d={dd[k]:.3f}" for k in cfg.tiers))
    return {"curve": curve, "tiers": list(cfg.tiers), "seeds": list(seeds), "x": list(lams)}


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def format_comparison(result: dict) -> str:
    """Aligned plain-text table: one row per method, d_delta then QA accuracy per tier."""
    tiers = result["tiers"]
    head = f"{'Method':<28}{'Test Envs':<13}" + "".join(f"{'d T-' + str(k):>16}" for k in tiers) + "".join(
        f"{'QA T-' + str(k):>16}" for k in tiers
    )
    lines = [head, "-" * len(head)]
    labels = {"standard": ("E2E", "Standard"), "finetune": ("E2E (Fine-tuning)", "Calibration"),
              "distill": ("E2E (Distillation)", "Calibration"), "blindfold": ("Blindfold", "Blind")}
    for name, row in result["rows"].items():
        method, setting = labels.get(name, (name, ""))
        cells = ""
        for k in tiers:
            m, s = mean_std(row["d_delta"][k])
            cells += f"{m:>9.2f} ±{s:<5.2f}"
        for k in tiers:
            vals = [v for v in row["qa"][k] if v is not None and not math.isnan(v)]
            if vals:
                m, s = mean_std(vals)
                cells += f"{100 * m:>8.1f}% ±{100 * s:<4.1f}"
            else:
                cells += f"{'-':>16}"
        lines.append(f"{method:<28}{setting:<13}{cells}")
    return "\n".join(lines)


def format_deltas(result: dict) -> str:
    """Seed-paired d_delta differences between settings, mean ± std per tier."""
    tiers = result["tiers"]
    lines = [f"{'Difference':<24}" + "".join(f"{'T-' + str(k):>16}" for k in tiers)]
    for name, per_k in result["deltas"].items():
        cells = ""
        for k in tiers:
            m, s = mean_std(per_k[k])
            cells += f"{m:>9.2f} ±{s:<5.2f}"
        lines.append(f"{name:<24}{cells}")
    return "\n".join(lines)


def curve_table(result: dict) -> tuple[list[str], list[list]]:
    """Sweep curve as rows per tier with one column of seed means per x value."""
    xs = result["x"]
    header = ["k"] + [str(x) for x in xs]
    rows = [[k] + [mean_std(result["curve"][x][k])[0] for x in xs] for k in result["tiers"]]
    return header, rows
