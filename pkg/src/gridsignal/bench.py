"""Benchmark harness: scenario generation, training, evaluation, ablation, timing, reports.

Run directories are laid out as ``<out>/<scene>/<agent label>/seed<k>/`` holding
``checkpoint.npz`` and ``curves.csv``.  Training is skipped when a checkpoint
with identical metadata already exists, so reruns are cheap and idempotent.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import re
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .agents import AgentConfig, count_parameters, make_controller, rollout, select_action, train
from .agents.training import GreedyController, build_network, uses_phase_features
from .env import TrafficEnv
from .netmodel import (
    FlowSpec,
    Scenario,
    ScenarioError,
    SimParams,
    build_grid_map,
    grid_scenario,
    load_scenario,
    save_scenario,
    scenario_to_dict,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
HOUR = 3600.0

AGENTS = {
    "random": dict(variant="random"),
    "fixed": dict(variant="fixed"),
    "auction": dict(variant="auction"),
    "marl_s": dict(variant="marl_s"),
    "marl_g": dict(variant="marl_g"),
    "egu_rl": dict(variant="egu_rl"),
    "egu_rl_wo_usd": dict(variant="egu_rl", use_usd=False),
    "egu_rl_wo_ege": dict(variant="egu_rl", use_ege=False),
    "egu_rl_wo_ew": dict(variant="egu_rl", use_edge_weights=False),
    "egu_rl_ac": dict(variant="egu_rl", learner="actor_critic"),
}
ABLATIONS = ("egu_rl", "egu_rl_wo_usd", "egu_rl_wo_ege", "egu_rl_wo_ew")


class UsageError(ValueError):
    """Bad command-line input (exit code 2)."""


class EmptyReportError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    scenario: Scenario
    config: AgentConfig
    seeds: list[int] = field(default_factory=lambda: [0])
    train_episodes: int = 500
    episode_steps: int = 1000
    eval_steps_seen: int = 1000
    eval_steps_unseen: int = 5000
    out: Path = Path("runs")

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if min(self.train_episodes, self.episode_steps, self.eval_steps_seen, self.eval_steps_unseen) <= 0:
            raise ValueError("episode and step counts must be positive")
        self.out = Path(self.out)

    @property
    def scene(self) -> str:
        return scene_label(self.scenario)

    def run_dir(self, seed: int) -> Path:
        return self.out / self.scene / self.config.label / f"seed{seed}"


@dataclass
class ResultRow:
    scene: str
    flow: str
    agent: str
    seed: int
    split: str
    cost_wt_hours: float
    stop_time_hours: float
    reward_sum: float
    param_count: int
    mean_inference_ms: float


ROW_FIELDS = [f.name for f in fields(ResultRow)]


def agent_config(name: str, alpha: float = 1.0) -> AgentConfig:
    if name not in AGENTS:
        raise UsageError(f"unknown agent {name!r}; choose from {', '.join(AGENTS)}")
    return AgentConfig(alpha=alpha, **AGENTS[name])


def flow_label(scenario: Scenario) -> str:
    return ",".join(f"{f.period:g}" for f in scenario.flows)


def scene_label(scenario: Scenario) -> str:
    flow = flow_label(scenario)
    return f"{scenario.name}_p{flow}" if flow else scenario.name


_GRID = re.compile(r"grid(\d+)x(\d+)(?:@([0-9.]+))?(?:#(\d+))?$")


def resolve_scenario(arg: str, horizon: int = 1000) -> Scenario:
    """A scenario file, or a built-in ``gridRxC[@period][#seed]`` name."""
    path = Path(arg)
    if path.exists():
        return load_scenario(path)
    m = _GRID.match(arg)
    if m is None:
        raise UsageError(f"scenario {arg!r} is neither a file nor gridRxC[@period][#seed]")
    rows, cols = int(m[1]), int(m[2])
    period = float(m[3]) if m[3] else 1.0
    seed = int(m[4]) if m[4] else 0
    return grid_scenario(rows, cols, period=period, horizon=horizon, seed=seed)


def scenario_digest(scenario: Scenario) -> str:
    text = json.dumps(scenario_to_dict(scenario), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- training ---------------------------------------------------------------


def _train_meta(spec: ExperimentSpec, seed: int) -> dict:
    return {
        "config": spec.config.to_dict(),
        "scenario": scenario_digest(spec.scenario),
        "episodes": spec.train_episodes,
        "steps": spec.episode_steps,
        "seed": seed,
    }


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[k] for k in header] if isinstance(r, dict) else r)


def read_curves(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "episode" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def train_run(spec: ExperimentSpec, seed: int, on_episode=None):
    """Train one seed (or reuse a matching checkpoint); returns ``(net, curves)``."""
    run = spec.run_dir(seed)
    ck, curves_path = run / "checkpoint.npz", run / "curves.csv"
    meta = _train_meta(spec, seed)
    net = build_network(spec.config, spec.scenario, seed)
    shapes = {k: v.shape for k, v in net.params.items()}
    if ck.exists() and curves_path.exists():
        params, old = T.load_checkpoint(ck, shapes)
        if old == meta:
            log.info("reusing %s", ck)
            net.params = params
            return net, read_curves(curves_path)
    result = train(spec.scenario, spec.config, spec.train_episodes, spec.episode_steps, seed, on_episode)
    run.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(ck, result.net.params, meta)
    _write_rows(curves_path, ["episode", "cost", "reward", "epsilon", "loss"], result.curves)
    return result.net, result.curves


def load_run(spec: ExperimentSpec, seed: int):
    ck = spec.run_dir(seed) / "checkpoint.npz"
    if not ck.exists():
        raise FileNotFoundError(f"no checkpoint at {ck}; run train first")
    net = build_network(spec.config, spec.scenario, seed)
    net.params, meta = T.load_checkpoint(ck, {k: v.shape for k, v in net.params.items()})
    # the shared-weight nets have scene-independent shapes, so check provenance too
    if meta.get("scenario") != scenario_digest(spec.scenario) or meta.get("config") != spec.config.to_dict():
        raise ValueError(f"{ck} was trained for a different scenario or config")
    return net


# -- evaluation -------------------------------------------------------------


def time_inference(net, scenario: Scenario, trials: int = 10, include_phases: bool = True) -> float:
    """Mean milliseconds of one greedy decision (forward pass + epsilon-0 selection)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    env = TrafficEnv(scenario, 10**9, include_phases=include_phases)
    obs = env.reset()
    rng = np.random.default_rng(0)
    for _ in range(50):
        obs, _, _ = env.step(act_random_phases(env, rng))
    rows = env.features(obs)
    for _ in range(3):
        select_action(net.action_matrix(rows), 0.0, rng)
    total = 0.0
    for _ in range(trials):
        t0 = time.perf_counter()
        select_action(net.action_matrix(rows), 0.0, rng)
        total += time.perf_counter() - t0
    return 1000.0 * total / trials


def act_random_phases(env, rng):
    return np.array([rng.integers(k) for k in env.state.phase_count])


def eval_split(scenario: Scenario, split: str, seen_steps: int, unseen_steps: int):
    if split == "seen":
        return scenario, seen_steps
    if split == "unseen":
        return scenario.with_horizon(unseen_steps), unseen_steps
    raise UsageError(f"unknown split {split!r}")


def evaluate(spec: ExperimentSpec, seed: int, split: str, net=None, timing: bool = True) -> ResultRow:
    """Greedy rollout on one split.  reward_sum is scored with the hybrid reward (alpha = 1)."""
    cfg = spec.config
    scen, steps = eval_split(spec.scenario, split, spec.eval_steps_seen, spec.eval_steps_unseen)
    phases = uses_phase_features(cfg)
    if cfg.learned:
        if net is None:
            net = load_run(spec, seed)
        ctl = GreedyController(net)
        params = int(sum(v.size for v in net.params.values()))
        ms = time_inference(net, spec.scenario, include_phases=phases) if timing else float("nan")
    else:
        ctl = make_controller(cfg, scen, seed)
        params, ms = 0, float("nan")
    m = rollout(scen, ctl, steps, alpha=1.0, include_phases=phases)
    return ResultRow(
        scene=spec.scene,
        flow=flow_label(spec.scenario),
        agent=cfg.label,
        seed=seed,
        split=split,
        cost_wt_hours=m.cost_wt_total / HOUR,
        stop_time_hours=m.total_stop_time / HOUR,
        reward_sum=m.reward_sum,
        param_count=params,
        mean_inference_ms=ms,
    )


def write_results(path: Path, rows: list[ResultRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(path, ROW_FIELDS, [asdict(r) for r in rows])


def read_results(path) -> list[ResultRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out.append(ResultRow(
                r["scene"], r["flow"], r["agent"], int(r["seed"]), r["split"],
                float(r["cost_wt_hours"]), float(r["stop_time_hours"]), float(r["reward_sum"]),
                int(r["param_count"]), float(r["mean_inference_ms"]),
            ))
    return out


# -- report -----------------------------------------------------------------


def collect_results(paths) -> list[ResultRow]:
    rows = []
    for p in map(Path, paths):
        files = sorted(p.rglob("results*.csv")) if p.is_dir() else [p]
        for f in files:
            rows.extend(read_results(f))
    return rows


def build_report(rows: list[ResultRow], metric: str = "cost_wt_hours"):
    """Median over seeds per (scene, flow, split) x agent; the best (lowest) entry is marked.

    Returns ``(text, machine_rows)``.
    """
    if not rows:
        raise EmptyReportError("no result rows to report")
    if metric not in ("cost_wt_hours", "stop_time_hours"):
        raise UsageError(f"cannot rank by {metric!r}")
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.scene, r.flow, r.split), {}).setdefault(r.agent, []).append(getattr(r, metric))
    agents = sorted({r.agent for r in rows})
    head = ["scene", "flow", "split"] + agents
    lines, machine = [], []
    for key in sorted(cells):
        med = {a: statistics.median(v) for a, v in cells[key].items()}
        best = min(med.values())
        row = list(key)
        for a in agents:
            if a not in med:
                row.append("-")
                continue
            mark = "*" if med[a] == best else ""
            row.append(f"{med[a]:.3f}{mark}")
            machine.append({"scene": key[0], "flow": key[1], "split": key[2], "agent": a,
                            metric: med[a], "best": int(med[a] == best)})
        lines.append(row)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = "\n".join([fmt.format(*head), fmt.format(*("-" * w for w in widths))]
                     + [fmt.format(*r) for r in lines])
    return text, machine


# -- ablation ---------------------------------------------------------------


def ablate(scenario: Scenario, seeds, episodes: int, steps: int, out: Path, eval_steps: int = 1000):
    """Four ablation configs plus an alpha = 0 run of the full model, seen split."""
    rows = []
    names = [(n, 1.0) for n in ABLATIONS] + [("egu_rl", 0.0)]
    for name, alpha in names:
        spec = ExperimentSpec(scenario, agent_config(name, alpha), list(seeds), episodes, steps,
                              eval_steps_seen=eval_steps, out=out)
        for seed in seeds:
            net, _ = train_run(spec, seed)
            rows.append(evaluate(spec, seed, "seen", net))
    return rows


def ablation_tables(rows: list[ResultRow]) -> str:
    stop = build_report([r for r in rows if "alpha" not in r.agent], "stop_time_hours")[0]
    alpha = [r for r in rows if r.agent in ("egu_rl", "egu_rl_alpha0")]
    lines = ["stop time (hours)", stop, "", "hybrid reward, alpha 1 vs alpha 0"]
    for agent in ("egu_rl", "egu_rl_alpha0"):
        vals = [r.reward_sum for r in alpha if r.agent == agent]
        if vals:
            lines.append(f"{agent:<16}{statistics.median(vals):.1f}")
    return "\n".join(lines)


# -- command line -----------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridsignal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-map", help="write a grid road network as a scenario without flows")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--lane-lengths", type=float, nargs="+", default=[200.0])
    g.add_argument("--phases", type=int, default=4)
    g.add_argument("--name")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    f = sub.add_parser("gen-flows", help="attach an equidistant flow to a map")
    f.add_argument("--scenario", required=True)
    f.add_argument("--period", type=float, default=1.0)
    f.add_argument("--horizon", type=int, default=1000)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--scenario", required=True, help="scenario file or gridRxC[@period][#seed]")
        sp.add_argument("--agent", default="egu_rl", choices=list(AGENTS))
        sp.add_argument("--alpha", type=float, default=1.0, help="trade-off used for the training reward")
        if seeds:
            sp.add_argument("--seeds", "--seed", type=int, nargs="+", default=[0], dest="seeds")
        sp.add_argument("--out", default="runs")

    t = sub.add_parser("train", help="train an agent per seed")
    common(t)
    t.add_argument("--episodes", type=int, default=500)
    t.add_argument("--steps", type=int, default=1000)

    e = sub.add_parser("eval", help="greedy evaluation on the seen and/or unseen split")
    common(e)
    e.add_argument("--episodes", type=int, default=500, help="episodes of the run to load")
    e.add_argument("--steps", type=int, default=1000, help="seen-split length")
    e.add_argument("--unseen-steps", type=int, default=5000)
    e.add_argument("--split", choices=["seen", "unseen", "both"], default="both")

    a = sub.add_parser("ablate", help="train and evaluate the ablation set")
    a.add_argument("--scenario", required=True)
    a.add_argument("--seeds", "--seed", type=int, nargs="+", default=[0], dest="seeds")
    a.add_argument("--episodes", type=int, default=500)
    a.add_argument("--steps", type=int, default=1000)
    a.add_argument("--out", default="runs")

    tm = sub.add_parser("time", help="mean greedy inference latency")
    common(tm)
    tm.add_argument("--episodes", type=int, default=500)
    tm.add_argument("--steps", type=int, default=1000)
    tm.add_argument("--trials", type=int, default=10)

    r = sub.add_parser("report", help="tabulate result files")
    r.add_argument("results", nargs="+", help="result files or directories")
    r.add_argument("--metric", default="cost_wt_hours", choices=["cost_wt_hours", "stop_time_hours"])
    r.add_argument("--out")
    return p


def _spec(args) -> ExperimentSpec:
    steps = getattr(args, "steps", 1000)
    try:
        return ExperimentSpec(
            resolve_scenario(args.scenario, horizon=steps),
            agent_config(args.agent, args.alpha),
            args.seeds,
            train_episodes=getattr(args, "episodes", 500),
            episode_steps=steps,
            eval_steps_seen=steps,
            eval_steps_unseen=getattr(args, "unseen_steps", 5000),
            out=args.out,
        )
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def _cmd_gen_map(args):
    try:
        net = build_grid_map(args.rows, args.cols, args.lane_lengths, args.phases)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    name = args.name or f"grid{args.rows}x{args.cols}"
    save_scenario(Scenario(net, (), SimParams(), args.seed, name), args.out)
    print(f"wrote {args.out}: {net.n_intersections} intersections, {len(net.lanes)} lanes")


def _cmd_gen_flows(args):
    try:
        base = load_scenario(args.scenario)
        flow = FlowSpec(args.period, args.horizon)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    seed = base.seed if args.seed is None else args.seed
    scen = Scenario(base.network, base.flows + (flow,), base.sim_params, seed, base.name)
    save_scenario(scen, args.out)
    print(f"wrote {args.out}: period {args.period:g}, horizon {args.horizon}")


def _cmd_train(args):
    spec = _spec(args)
    if not spec.config.learned:
        raise UsageError(f"{args.agent} has nothing to train")
    for seed in spec.seeds:
        _, curves = train_run(spec, seed)
        last = curves[-1]
        print(f"{spec.config.label} seed {seed}: final episode cost {last['cost'] / HOUR:.3f} h"
              f" -> {spec.run_dir(seed)}")


def _cmd_eval(args):
    spec = _spec(args)
    splits = ["seen", "unseen"] if args.split == "both" else [args.split]
    rows = [evaluate(spec, seed, split) for seed in spec.seeds for split in splits]
    path = spec.out / spec.scene / spec.config.label / f"results_{args.split}.csv"
    write_results(path, rows)
    for r in rows:
        print(f"{r.agent} seed {r.seed} {r.split}: cost {r.cost_wt_hours:.3f} h, "
              f"stop {r.stop_time_hours:.3f} h")
    print(f"wrote {path}")


def _cmd_ablate(args):
    try:
        scen = resolve_scenario(args.scenario, horizon=args.steps)
        if args.episodes < 1 or args.steps < 1 or not args.seeds:
            raise UsageError("episodes, steps and seeds must be positive")
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    rows = ablate(scen, args.seeds, args.episodes, args.steps, Path(args.out), args.steps)
    path = Path(args.out) / scene_label(scen) / "results_ablation.csv"
    write_results(path, rows)
    print(ablation_tables(rows))
    print(f"wrote {path}")


def _cmd_time(args):
    spec = _spec(args)
    phases = uses_phase_features(spec.config)
    if not spec.config.learned:
        raise UsageError("timing applies to learned agents")
    for seed in spec.seeds:
        try:
            net = load_run(spec, seed)
        except FileNotFoundError:
            print("no checkpoint found; timing freshly initialised weights", file=sys.stderr)
            net = build_network(spec.config, spec.scenario, seed)
        ms = time_inference(net, spec.scenario, args.trials, phases)
        n = count_parameters(net.spec) if hasattr(net, "spec") else sum(v.size for v in net.params.values())
        print(f"{spec.config.label} on {spec.scene}: {ms:#.4g} ms over {args.trials} trials ({n} parameters)")


def _cmd_report(args):
    missing = [p for p in args.results if not Path(p).exists()]
    if missing:
        raise UsageError(f"no such result path: {', '.join(missing)}")
    text, machine = build_report(collect_results(args.results), args.metric)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_rows(out, ["scene", "flow", "split", "agent", args.metric, "best"], machine)


COMMANDS = {
    "gen-map": _cmd_gen_map,
    "gen-flows": _cmd_gen_flows,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "time": _cmd_time,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        COMMANDS[args.cmd](args)
    except (UsageError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
