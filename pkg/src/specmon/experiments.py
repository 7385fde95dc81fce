"""Config-driven experiment runner: evaluation sweeps, training pipelines,
feedback loops, CSV outputs.

Everything an experiment produces is CSV (checkpoints are the only binary
artifacts) and every run writes a manifest with the fully resolved config
and seed lists, so a rerun with the same manifest regenerates every output
byte-exactly.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .baselines import (ExpertController, RandomController,
                        ScanAndDwellController, ScanController)
from .dan import (AGENT_KINDS, DanAgent, DanController, SpecSource,
                  TrainConfig, TrainingCurve, train)
from .env import EnvSpec, load_spec, sample_environment
from .feedback import (FieldExperience, StateDatabase, bootstrap,
                       collect_field_experience, estimate_field_spec,
                       feedback_pool, finetune_partial, reconstruct_states,
                       retrain_on_states, retrain_pooled, train_reconstructor,
                       widen_spec)
from .harness import EpisodeLog, run_episode
from .metrics import block_iou_curve, cumulative_iou_curve, iou_instant
from .nn import load_checkpoint, save_checkpoint

BASELINE_KINDS = ("random", "scan", "scan_dwell", "expert")
EXPERIMENT_KINDS = ("train", "evaluate", "compare_baselines", "feedback_spec",
                    "feedback_bootstrap", "feedback_state", "finetune_partial")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists the problems."""


def fmt(x: float) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------------------
# Controller construction
# ---------------------------------------------------------------------------

def controller_factory(kind: str, prior_spec: Optional[EnvSpec] = None,
                       agent: Optional[DanAgent] = None) -> Callable[[int], object]:
    """Per-episode controller builder keyed by explicit seed."""
    if kind == "random":
        return lambda seed: RandomController(seed)
    if kind == "scan":
        return lambda seed: ScanController(seed)
    if kind == "scan_dwell":
        if prior_spec is None:
            raise ConfigError("scan_dwell needs a prior spec")
        return lambda seed: ScanAndDwellController(prior_spec, seed)
    if kind == "expert":
        if prior_spec is None:
            raise ConfigError("expert needs a prior spec")
        return lambda seed: ExpertController(prior_spec, seed)
    if kind in AGENT_KINDS:
        if agent is None:
            raise ConfigError(f"{kind} needs a trained agent or checkpoint")
        return lambda seed: DanController(agent, seed=seed)
    raise ConfigError(f"unknown controller kind {kind!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalSummary:
    """Per-episode and per-step aggregates for one controller on one spec."""

    controller_id: str
    spec_id: str
    seeds: List[int]
    T: int
    block_n: int
    cum_curves: np.ndarray        # (episodes, T)
    block_curves: np.ndarray      # (episodes, T)
    inst_curves: np.ndarray       # (episodes, T)
    logs: Optional[List[EpisodeLog]] = None

    @property
    def final_cum(self) -> np.ndarray:
        return self.cum_curves[:, -1]

    @property
    def final_block(self) -> np.ndarray:
        return self.block_curves[:, -1]

    def mean_cum_at(self, t: int) -> float:
        return float(self.cum_curves[:, t].mean())

    def curve_csv(self, path) -> None:
        n = self.block_n
        header = (f"t,cum_mean,cum_std,block{n}_mean,block{n}_std,inst_mean")
        lines = [header]
        for t in range(self.T):
            lines.append(",".join([
                str(t),
                fmt(self.cum_curves[:, t].mean()), fmt(self.cum_curves[:, t].std()),
                fmt(self.block_curves[:, t].mean()), fmt(self.block_curves[:, t].std()),
                fmt(self.inst_curves[:, t].mean()),
            ]))
        Path(path).write_text("\n".join(lines) + "\n")

    def episodes_csv(self, path) -> None:
        header = f"seed,cum_final,block{self.block_n}_final,inst_mean"
        lines = [header]
        for i, seed in enumerate(self.seeds):
            lines.append(",".join([
                str(seed),
                fmt(self.cum_curves[i, -1]),
                fmt(self.block_curves[i, -1]),
                fmt(self.inst_curves[i].mean()),
            ]))
        Path(path).write_text("\n".join(lines) + "\n")


def _eval_one(factory, spec, seed, T, block_n, prob_threshold, keep_log):
    env = sample_environment(spec, seed)
    controller = factory(seed)
    log = run_episode(controller, env, T, prob_threshold=prob_threshold)
    pred = log.pred_masks(prob_threshold)
    truth = log.truth_masks()
    cum = cumulative_iou_curve(pred, truth)
    block = block_iou_curve(pred, truth, block_n)
    inst = np.array([iou_instant(pred[t], truth[t]) for t in range(T)])
    return cum, block, inst, (log if keep_log else None)


def evaluate_controller(factory: Callable[[int], object], spec: EnvSpec,
                        seeds: Sequence[int], T: int = 100, block_n: int = 5,
                        prob_threshold: float = 0.5, threads: int = 1,
                        controller_id: str = "", keep_logs: bool = False) -> EvalSummary:
    """Fixed seed list -> fixed environments; returns stacked metric curves."""
    seeds = [int(s) for s in seeds]
    results = {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                seed: pool.submit(_eval_one, factory, spec, seed, T, block_n,
                                  prob_threshold, keep_logs)
                for seed in seeds
            }
            for seed, fut in futures.items():
                results[seed] = fut.result()
    else:
        for seed in seeds:
            results[seed] = _eval_one(factory, spec, seed, T, block_n,
                                      prob_threshold, keep_logs)
    cum = np.stack([results[s][0] for s in seeds])
    block = np.stack([results[s][1] for s in seeds])
    inst = np.stack([results[s][2] for s in seeds])
    logs = [results[s][3] for s in seeds] if keep_logs else None
    return EvalSummary(controller_id=controller_id, spec_id=spec.name,
                       seeds=seeds, T=T, block_n=block_n, cum_curves=cum,
                       block_curves=block, inst_curves=inst, logs=logs)


def export_episode_render(log: EpisodeLog, path) -> None:
    """Aligned CSV blocks (truth, prediction, action values, reward) for plotting."""
    n = log.n_bands
    band_header = "t," + ",".join(f"band_{b}" for b in range(n))
    lines = ["# block: truth", band_header]
    for t in range(log.T):
        lines.append(str(t) + "," + ",".join(str(int(v)) for v in log.truths[t]))
    lines += ["# block: prediction", band_header]
    for t in range(log.T):
        lines.append(str(t) + "," + ",".join(fmt(v) for v in log.preds[t]))
    lines += ["# block: q_values", band_header]
    q = log.q_values if log.q_values is not None else np.zeros((log.T, n))
    for t in range(log.T):
        lines.append(str(t) + "," + ",".join(fmt(v) for v in q[t]))
    lines += ["# block: reward", "t,reward"]
    for t in range(log.T):
        lines.append(f"{t},{fmt(log.rewards[t])}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

_TRAIN_KEYS = ("episodes", "T", "batch_episodes", "gamma", "epsilon_start",
               "epsilon_final", "target_sync", "infogain_weight",
               "updates_per_episode", "lr", "replay_capacity", "eval_every",
               "eval_episodes", "block_n", "w_neg")


@dataclass
class ExperimentConfig:
    kind: str
    spec: Optional[str] = None
    specs: List[str] = field(default_factory=list)
    field_specs: List[str] = field(default_factory=list)
    prior_spec: Optional[str] = None
    agent: str = "convlstm_dan"
    arch: str = "convlstm"
    reward: Optional[str] = None
    controllers: List[str] = field(default_factory=list)
    checkpoint: Optional[str] = None
    train_seed: int = 0
    eval_seeds: List[int] = field(default_factory=list)
    budget_episodes: int = 20
    reconstructor_episodes: int = 200
    log_episodes: bool = False
    threads: int = 1
    train: Dict = field(default_factory=dict)

    def resolved(self) -> Dict:
        d = dataclasses.asdict(self)
        d["version"] = __version__
        return d


def _expand_seeds(raw) -> List[int]:
    if isinstance(raw, dict):
        missing = {"base", "count"} - set(raw)
        if missing:
            raise ConfigError(f"eval_seeds object needs keys base+count, missing {missing}")
        return [int(raw["base"]) + i for i in range(int(raw["count"]))]
    if isinstance(raw, list):
        return [int(s) for s in raw]
    raise ConfigError("eval_seeds must be a list or {base, count}")


def parse_experiment_config(raw: Dict, base_dir: Path) -> ExperimentConfig:
    problems = []
    kind = raw.get("kind")
    if kind not in EXPERIMENT_KINDS:
        problems.append(f"kind must be one of {EXPERIMENT_KINDS}, got {kind!r}")
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in raw:
        if key not in known:
            problems.append(f"unknown config key {key!r}")
    for key in raw.get("train", {}):
        if key not in _TRAIN_KEYS + ("seed",):
            problems.append(f"unknown train key {key!r}")
    if problems:
        raise ConfigError("; ".join(problems))

    cfg = ExperimentConfig(
        kind=kind,
        spec=raw.get("spec"),
        specs=list(raw.get("specs", [])),
        field_specs=list(raw.get("field_specs", [])),
        prior_spec=raw.get("prior_spec"),
        agent=raw.get("agent", "convlstm_dan"),
        arch=raw.get("arch", "convlstm"),
        reward=raw.get("reward"),
        controllers=list(raw.get("controllers", [])),
        checkpoint=raw.get("checkpoint"),
        train_seed=int(raw.get("train_seed", 0)),
        eval_seeds=_expand_seeds(raw.get("eval_seeds", [])),
        budget_episodes=int(raw.get("budget_episodes", 20)),
        reconstructor_episodes=int(raw.get("reconstructor_episodes", 200)),
        log_episodes=bool(raw.get("log_episodes", False)),
        threads=int(raw.get("threads", 1)),
        train=dict(raw.get("train", {})),
    )

    def check_spec(path_str, label):
        if path_str is None:
            problems.append(f"{label} is required for kind {kind!r}")
            return
        p = (base_dir / path_str)
        if not p.exists():
            problems.append(f"{label} file not found: {p}")

    if kind in ("train", "evaluate", "feedback_spec", "feedback_bootstrap",
                "feedback_state", "finetune_partial"):
        check_spec(cfg.spec, "spec")
    if kind == "compare_baselines":
        if not cfg.specs:
            problems.append("compare_baselines needs a non-empty specs list")
        for s in cfg.specs:
            check_spec(s, "specs entry")
        if not cfg.controllers:
            problems.append("compare_baselines needs a controllers list")
    if kind in ("feedback_spec", "feedback_bootstrap", "feedback_state",
                "finetune_partial") and not cfg.field_specs:
        problems.append(f"{kind} needs at least one field spec")
    for s in cfg.field_specs:
        check_spec(s, "field_specs entry")
    if cfg.prior_spec is not None:
        check_spec(cfg.prior_spec, "prior_spec")
    if not cfg.eval_seeds:
        problems.append("eval_seeds must be explicit and non-empty")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_experiment_config(raw, path.parent)


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    kwargs = {k: v for k, v in cfg.train.items() if k in _TRAIN_KEYS}
    kwargs["seed"] = int(cfg.train.get("seed", cfg.train_seed))
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# Experiment kinds
# ---------------------------------------------------------------------------

def _write_training_curve(curve: TrainingCurve, path) -> None:
    lines = ["episode,eval_cum_iou,loss,loss_q,loss_m,loss_p"]
    for i, ep in enumerate(curve.episodes):
        lines.append(",".join([
            str(ep), fmt(curve.eval_cum_iou[i]), fmt(curve.loss[i]),
            fmt(curve.loss_q[i]), fmt(curve.loss_m[i]), fmt(curve.loss_p[i])]))
    Path(path).write_text("\n".join(lines) + "\n")


def _load_agent_for_eval(cfg: ExperimentConfig, base_dir: Path,
                         spec: EnvSpec) -> Optional[DanAgent]:
    if cfg.agent not in AGENT_KINDS:
        return None
    if cfg.checkpoint is None:
        raise ConfigError(f"evaluating {cfg.agent} requires a checkpoint")
    net = load_checkpoint(base_dir / cfg.checkpoint)
    agent = DanAgent(cfg.agent, spec.n_bands, spec.n_classes,
                     net_config=net.config, seed=cfg.train_seed,
                     reward_kind=cfg.reward)
    agent.net.load_params_from(net)
    agent.sync_target()
    return agent


def _emit_eval(summary: EvalSummary, out: Path, stem: str,
               log_episodes: bool) -> None:
    summary.curve_csv(out / f"{stem}_curve.csv")
    summary.episodes_csv(out / f"{stem}_episodes.csv")
    if log_episodes and summary.logs:
        logdir = out / f"{stem}_episodes"
        logdir.mkdir(exist_ok=True)
        for log in summary.logs:
            log.to_csv(logdir / f"episode_{log.seed}.csv")
        export_episode_render(summary.logs[0], out / f"{stem}_render.csv")


def run_experiment(config_path, out_dir=None, seed_override: Optional[int] = None,
                   log_episodes: Optional[bool] = None,
                   threads: Optional[int] = None) -> Path:
    """Execute one experiment config; returns the artifact directory."""
    config_path = Path(config_path)
    cfg = load_experiment_config(config_path)
    if seed_override is not None:
        cfg.train_seed = int(seed_override)
    if log_episodes is not None:
        cfg.log_episodes = bool(log_episodes)
    if threads is not None:
        cfg.threads = int(threads)
    base_dir = config_path.parent
    out = Path(out_dir) if out_dir is not None else base_dir / f"{config_path.stem}_out"
    out.mkdir(parents=True, exist_ok=True)

    (out / "manifest.json").write_text(
        json.dumps(cfg.resolved(), sort_keys=True, indent=2) + "\n")

    kind = cfg.kind
    if kind == "train":
        _run_train(cfg, base_dir, out)
    elif kind == "evaluate":
        _run_evaluate(cfg, base_dir, out)
    elif kind == "compare_baselines":
        _run_compare(cfg, base_dir, out)
    elif kind == "feedback_spec":
        _run_feedback_spec(cfg, base_dir, out)
    elif kind == "feedback_bootstrap":
        _run_feedback_bootstrap(cfg, base_dir, out)
    elif kind == "feedback_state":
        _run_feedback_state(cfg, base_dir, out)
    elif kind == "finetune_partial":
        _run_finetune_partial(cfg, base_dir, out)
    return out


def _run_train(cfg: ExperimentConfig, base_dir: Path, out: Path) -> DanAgent:
    spec = load_spec(base_dir / cfg.spec)
    tc = _train_config(cfg)
    agent = DanAgent(cfg.agent, spec.n_bands, spec.n_classes, config=tc,
                     seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    curve = train(agent, SpecSource(spec), tc)
    _write_training_curve(curve, out / "training_curve.csv")
    save_checkpoint(agent.net, out / "agent.ckpt")
    factory = controller_factory(cfg.agent, agent=agent)
    summary = evaluate_controller(factory, spec, cfg.eval_seeds, tc.T,
                                  tc.block_n, threads=cfg.threads,
                                  controller_id=cfg.agent,
                                  keep_logs=cfg.log_episodes)
    _emit_eval(summary, out, "eval", cfg.log_episodes)
    return agent


def _run_evaluate(cfg: ExperimentConfig, base_dir: Path, out: Path) -> None:
    spec = load_spec(base_dir / cfg.spec)
    prior = load_spec(base_dir / cfg.prior_spec) if cfg.prior_spec else spec
    agent = _load_agent_for_eval(cfg, base_dir, spec)
    tc = _train_config(cfg)
    factory = controller_factory(cfg.agent, prior_spec=prior, agent=agent)
    summary = evaluate_controller(factory, spec, cfg.eval_seeds, tc.T,
                                  tc.block_n, threads=cfg.threads,
                                  controller_id=cfg.agent,
                                  keep_logs=cfg.log_episodes)
    _emit_eval(summary, out, f"eval_{cfg.agent}_{spec.name}", cfg.log_episodes)


def _run_compare(cfg: ExperimentConfig, base_dir: Path, out: Path) -> None:
    tc = _train_config(cfg)
    for spec_path in cfg.specs:
        spec = load_spec(base_dir / spec_path)
        prior = load_spec(base_dir / cfg.prior_spec) if cfg.prior_spec else spec
        summaries = []
        for ctrl in cfg.controllers:
            agent = None
            if ctrl in AGENT_KINDS:
                saved = dataclasses.replace(cfg, agent=ctrl)
                agent = _load_agent_for_eval(saved, base_dir, spec)
            factory = controller_factory(ctrl, prior_spec=prior, agent=agent)
            summaries.append((ctrl, evaluate_controller(
                factory, spec, cfg.eval_seeds, tc.T, tc.block_n,
                threads=cfg.threads, controller_id=ctrl)))
        header = "t," + ",".join(
            f"{ctrl}_cum_mean,{ctrl}_block{tc.block_n}_mean" for ctrl, _ in summaries)
        lines = [header]
        for t in range(tc.T):
            cells = [str(t)]
            for _, s in summaries:
                cells.append(fmt(s.cum_curves[:, t].mean()))
                cells.append(fmt(s.block_curves[:, t].mean()))
            lines.append(",".join(cells))
        (out / f"compare_{spec.name}.csv").write_text("\n".join(lines) + "\n")


def _spec_scores_csv(rows, path) -> None:
    lines = ["arm,spec,mean_cum_iou"]
    for arm, spec_name, score in rows:
        lines.append(f"{arm},{spec_name},{fmt(score)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _eval_mean_cum(agent: DanAgent, spec: EnvSpec, seeds, T, block_n,
                   threads=1) -> float:
    factory = controller_factory(agent.kind, agent=agent)
    summary = evaluate_controller(factory, spec, seeds, T, block_n,
                                  threads=threads, controller_id=agent.kind)
    return float(summary.final_cum.mean())


def _run_feedback_spec(cfg: ExperimentConfig, base_dir: Path, out: Path) -> None:
    """Estimate a field spec from deployed experience, retrain on the 0.7/0.3 pool."""
    lab = load_spec(base_dir / cfg.spec)
    fields = [load_spec(base_dir / p) for p in cfg.field_specs]
    field_spec = fields[0]
    tc = _train_config(cfg)

    lab_agent = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                         seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    train(lab_agent, SpecSource(lab), tc)
    save_checkpoint(lab_agent.net, out / "lab_agent.ckpt")

    exp = collect_field_experience(
        lambda s: DanController(lab_agent, seed=s), field_spec,
        cfg.budget_episodes, tc.T, seed=cfg.train_seed + 7000)
    estimated = estimate_field_spec(exp, widen_spec(lab))
    from .env import save_spec
    save_spec(estimated, out / "estimated_spec.spec")

    arms = {}
    arms["lab_only"] = lab_agent
    est_only = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                        seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    est_only.net.load_params_from(lab_agent.net)
    est_only.sync_target()
    retrain_pooled(est_only, feedback_pool([estimated], lab, estimated_weight=1.0), tc)
    arms["retrain_estimate_only"] = est_only
    pooled = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                      seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    pooled.net.load_params_from(lab_agent.net)
    pooled.sync_target()
    retrain_pooled(pooled, feedback_pool([estimated], lab, estimated_weight=0.7), tc)
    arms["retrain_pooled_07_03"] = pooled
    save_checkpoint(pooled.net, out / "retrained_agent.ckpt")

    rows = []
    for arm, agent in arms.items():
        for spec in (lab, field_spec):
            rows.append((arm, spec.name,
                         _eval_mean_cum(agent, spec, cfg.eval_seeds, tc.T,
                                        tc.block_n, cfg.threads)))
    _spec_scores_csv(rows, out / "feedback_spec_scores.csv")


def _run_feedback_bootstrap(cfg: ExperimentConfig, base_dir: Path, out: Path) -> None:
    lab = load_spec(base_dir / cfg.spec)
    fields = [load_spec(base_dir / p) for p in cfg.field_specs]
    tc = _train_config(cfg)
    agent = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                     seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    train(agent, SpecSource(lab), tc)
    agent, iterations = bootstrap(agent, lab, fields, cfg.budget_episodes, tc,
                                  eval_episodes=len(cfg.eval_seeds),
                                  seed=cfg.train_seed + 5000)
    lines = ["iteration,field_spec,spec,mean_cum_iou"]
    for it in iterations:
        for spec_name, score in sorted(it.eval_scores.items()):
            lines.append(f"{it.iteration},{it.field_spec_id},{spec_name},{fmt(score)}")
    (out / "bootstrap_evals.csv").write_text("\n".join(lines) + "\n")
    save_checkpoint(agent.net, out / "bootstrap_agent.ckpt")


def _field_eval_block33(agent: DanAgent, field_spec: EnvSpec, seeds, T,
                        threads=1) -> float:
    factory = controller_factory(agent.kind, agent=agent)
    summary = evaluate_controller(factory, field_spec, seeds, T, block_n=33,
                                  threads=threads, controller_id=agent.kind)
    return float(summary.final_block.mean())


def _run_feedback_state(cfg: ExperimentConfig, base_dir: Path, out: Path) -> None:
    """Reconstruct field states from partial samples; retrain on the grids."""
    lab = load_spec(base_dir / cfg.spec)
    field_spec = load_spec(base_dir / cfg.field_specs[0])
    tc = _train_config(cfg)
    agent = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                     seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    train(agent, SpecSource(lab), tc)

    exp = collect_field_experience(
        lambda s: DanController(agent, seed=s), field_spec,
        cfg.budget_episodes, tc.T, seed=cfg.train_seed + 7000)
    rec = train_reconstructor(lambda s: DanController(agent, seed=s), lab,
                              cfg.reconstructor_episodes, tc.T,
                              seed=cfg.train_seed + 8000)
    db = StateDatabase()
    for ep in exp.episodes:
        db.add(reconstruct_states(rec, ep, lab.n_bands), "reconstructed")
    db.save(out / "state_db")

    retrained = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                         seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    retrained.net.load_params_from(agent.net)
    retrained.sync_target()
    retrain_on_states(retrained, db.select("reconstructed"), lab, tc)
    save_checkpoint(retrained.net, out / "retrained_agent.ckpt")

    rows = [
        ("lab_only", field_spec.name,
         _field_eval_block33(agent, field_spec, cfg.eval_seeds, tc.T, cfg.threads)),
        (f"retrained_{len(db)}_states", field_spec.name,
         _field_eval_block33(retrained, field_spec, cfg.eval_seeds, tc.T,
                             cfg.threads)),
    ]
    lines = ["arm,spec,block33_final"]
    for arm, spec_name, score in rows:
        lines.append(f"{arm},{spec_name},{fmt(score)}")
    (out / "feedback_state_scores.csv").write_text("\n".join(lines) + "\n")


def _run_finetune_partial(cfg: ExperimentConfig, base_dir: Path, out: Path) -> None:
    lab = load_spec(base_dir / cfg.spec)
    field_spec = load_spec(base_dir / cfg.field_specs[0])
    tc = _train_config(cfg)
    agent = DanAgent(cfg.agent, lab.n_bands, lab.n_classes, config=tc,
                     seed=cfg.train_seed, arch=cfg.arch, reward_kind=cfg.reward)
    train(agent, SpecSource(lab), tc)
    before = _field_eval_block33(agent, field_spec, cfg.eval_seeds, tc.T, cfg.threads)

    exp = collect_field_experience(
        lambda s: DanController(agent, seed=s), field_spec,
        cfg.budget_episodes, tc.T, seed=cfg.train_seed + 7000)
    finetune_partial(agent, exp, tc)
    save_checkpoint(agent.net, out / "finetuned_agent.ckpt")
    after = _field_eval_block33(agent, field_spec, cfg.eval_seeds, tc.T, cfg.threads)
    lines = ["arm,spec,block33_final",
             f"lab_only,{field_spec.name},{fmt(before)}",
             f"finetuned_partial,{field_spec.name},{fmt(after)}"]
    (out / "finetune_partial_scores.csv").write_text("\n".join(lines) + "\n")
