"""Command-line entry point for the dense-reward experiments.

Subcommands:
- `g4rl-run`: graph-shaped hierarchical agent on a grid maze, every variant x seed.
  Writes `g4rl/<variant>/seed_<n>.csv`, `g4rl_summary.csv`, `g4rl_compare.csv`
  (and `g4rl_curves.svg` with `--plot`).
- `scar-credit`: Shapley/Owen credit for one scored sequence (toy task or game dump).
  Writes `scar_credit.csv`, `scar_rewards.csv` and `scar_game.json`.
- `scar-invariance`: checks that dense credit leaves optimal actions unchanged on
  small MDPs and that a deliberately broken decomposition changes some. Writes
  `scar_invariance.csv`.
- `transfer-run`: spectral matching and value transfer between a maze and its
  transpose. Writes `transfer.csv` (and `transfer_curves.svg` with `--plot`).
- `calibrate`: spectral and row-matching distances from a maze graph to its mirror
  image, to the same maze explored under another seed, and to a different maze.
  Writes `calibration.csv`.

Every subcommand also writes `<command>.log` (JSON run metadata) into the output
directory (`--out-dir`, env `DENSEREW_OUT`, default `results`).

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from dotenv import load_dotenv

from config import ExperimentConfig, load_config
from errors import DenseRewardError, ValidationError
from gchrl_shaping import MetricsTable, Variant, compare_variants, run_experiment
from gridworld import GridEnv, RewardMode, load_map
from plots import plot_learning_curves
from policy_invariance import (
    broken_decomposition,
    chain_mdp,
    random_terminal_mdp,
    shapley_decomposition,
    verify_policy_invariance,
)
from shapley_credit import (
    CoalitionGame,
    CoalitionStructure,
    CreditVector,
    RewardTrace,
    Segmentation,
    balanced_tree,
    dump_game,
    exact_shapley,
    hierarchical_owen,
    load_game,
    owen_value,
    place_rewards,
    segment,
    sentence_partition,
    total_reward,
    uniform_credit,
    write_credit_csv,
)
from spectral_transfer import MatchKind, SpectralSummary, graph_summary, match_nodes, spectral_distance
from state_graph import StateGraph
from toy_oracle import load_task
from transfer_experiment import (
    GraphSource,
    ShapingMode,
    TransferResult,
    episodes_to_success,
    record_graph,
    run_transfer,
    sweep_graph,
    write_transfer_csv,
)

logger = logging.getLogger("denserew")

COMMANDS = ("g4rl-run", "scar-credit", "scar-invariance", "transfer-run", "calibrate")
RESEED_OFFSET = 1000


def _atomic_write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    tmp_path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    tmp_path.replace(path)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_argparser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Experiment config file (key = value)")
    common.add_argument("--out-dir", type=Path, default=Path(os.getenv("DENSEREW_OUT", "results")))
    common.add_argument("--seeds", type=int, default=None, help="Number of seeds (0..n-1)")
    common.add_argument(
        "--max-workers",
        type=int,
        default=int(os.getenv("MAX_WORKERS", "0")) or None,
        help="Worker processes for the seed fan-out (or set MAX_WORKERS)",
    )
    common.add_argument("--log-level", default=os.getenv("LOG_LEVEL", "WARNING"))
    common.add_argument("--plot", action="store_true", help="Also write SVG learning curves")

    parser = argparse.ArgumentParser(prog="denserew", description="Dense reward shaping experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    g4rl = sub.add_parser("g4rl-run", parents=[common], help="Graph-shaped hierarchical agent")
    g4rl.add_argument("--map", default=None)
    g4rl.add_argument("--episodes", type=int, default=None)
    g4rl.add_argument("--variants", default=None, help="Comma-separated subset of both,high_only,low_only,vanilla")
    g4rl.add_argument("--alpha-h", type=float, default=None)
    g4rl.add_argument("--alpha-l", type=float, default=None)
    g4rl.add_argument("--k", type=int, default=None)
    g4rl.add_argument("--beta", type=float, default=None)
    g4rl.add_argument("--reward-mode", choices=[m.value for m in RewardMode], default=None)

    scar = sub.add_parser("scar-credit", parents=[common], help="Shapley/Owen credit for one sequence")
    scar.add_argument("--game", default=None, help="Toy task JSON or game dump JSON")
    scar.add_argument("--method", choices=["exact", "owen", "hierarchical", "uniform"], default=None)
    scar.add_argument("--partition", choices=["singletons", "sentences", "balanced"], default=None)
    scar.add_argument("--segmentation", choices=[s.value for s in Segmentation], default=None)
    scar.add_argument("--alpha", type=float, default=None)
    scar.add_argument("--kl-beta", type=float, default=None)
    scar.add_argument("--workers", type=int, default=None, help="Threads for oracle evaluation")
    scar.add_argument("--placeholder", default=None, help="Token rendered for absent units")

    inv = sub.add_parser("scar-invariance", parents=[common], help="Optimal-policy invariance check")
    inv.add_argument("--alphas", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    inv.add_argument("--horizon", type=int, default=3)
    inv.add_argument("--states", type=int, default=6)

    tr = sub.add_parser("transfer-run", parents=[common], help="Spectral value transfer")
    tr.add_argument("--map", default=None)
    tr.add_argument("--beta", type=float, default=None)
    tr.add_argument("--mode", choices=[m.value for m in ShapingMode], default=None)
    tr.add_argument("--eps-lambda", type=float, default=None)
    tr.add_argument("--eps-v", type=float, default=None)
    tr.add_argument("--graph-source", choices=[s.value for s in GraphSource], default=None)
    tr.add_argument("--graph-episodes", type=int, default=None)

    cal = sub.add_parser("calibrate", parents=[common], help="Suggest eps_lambda / eps_v")
    cal.add_argument("--map", default=None)
    cal.add_argument("--compare-map", default=None)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    out: dict[str, Any] = {
        "run.seeds": get("seeds"),
        "run.max_workers": get("max_workers"),
        "run.plot": True if get("plot") else None,
    }
    if args.command == "g4rl-run":
        variants = get("variants")
        out |= {
            "gchrl.map": get("map"),
            "gchrl.episodes": get("episodes"),
            "gchrl.variants": tuple(v.strip() for v in variants.split(",")) if variants else None,
            "gchrl.alpha_h": get("alpha_h"),
            "gchrl.alpha_l": get("alpha_l"),
            "gchrl.k": get("k"),
            "gchrl.beta": get("beta"),
            "gchrl.reward_mode": get("reward_mode"),
        }
    elif args.command == "scar-credit":
        out |= {
            "scar.game": get("game"),
            "scar.method": get("method"),
            "scar.partition": get("partition"),
            "scar.segmentation": get("segmentation"),
            "scar.alpha": get("alpha"),
            "scar.kl_beta": get("kl_beta"),
            "scar.workers": get("workers"),
            "scar.placeholder": get("placeholder"),
        }
    elif args.command == "transfer-run":
        out |= {
            "transfer.map": get("map"),
            "transfer.beta": get("beta"),
            "transfer.mode": get("mode"),
            "transfer.eps_lambda": get("eps_lambda"),
            "transfer.eps_v": get("eps_v"),
            "transfer.graph_source": get("graph_source"),
            "transfer.graph_episodes": get("graph_episodes"),
        }
    elif args.command == "calibrate":
        out |= {"transfer.map": get("map"), "transfer.compare_map": get("compare_map")}
    return out


def _fan_out(jobs: Sequence[tuple[Any, ...]], fn: Callable[..., Any], max_workers: int) -> list[Any]:
    """Run `fn(*job)` for every job; inline when `max_workers == 1`."""
    if max_workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    results: list[Any] = []
    with ProcessPoolExecutor(max_workers=max_workers) as ex:
        futures = [ex.submit(fn, *job) for job in jobs]
        for fut in as_completed(futures):
            results.append(fut.result())
    return results


def _g4rl_job(env: GridEnv, cfg: ExperimentConfig, variant: str, seed: int) -> tuple[str, int, MetricsTable]:
    table = run_experiment(
        env,
        cfg.shaping_config(),
        variant,
        cfg.gchrl.episodes,
        seed,
        graph_settings=cfg.graph_settings(),
        train_config=cfg.train_config(seed),
        agent_config=cfg.agent_config(),
    )
    return variant, seed, table


def cmd_g4rl_run(cfg: ExperimentConfig, out_dir: Path) -> dict[str, Any]:
    env = load_map(Path(cfg.gchrl.map), cfg.gchrl.reward_mode)
    env.validate()
    seeds = list(range(cfg.run.seeds))
    jobs = [(env, cfg, v, s) for v in cfg.gchrl.variants for s in seeds]
    results = sorted(_fan_out(jobs, _g4rl_job, cfg.run.max_workers), key=lambda r: (r[0], r[1]))

    by_variant: dict[str, list[MetricsTable]] = {v: [] for v in cfg.gchrl.variants}
    summary_path = out_dir / "g4rl_summary.csv"
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    with summary_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "final_success", "auc", "mean_steps"])
        for variant, seed, table in results:
            table.to_csv(out_dir / "g4rl" / variant / f"seed_{seed}.csv")
            by_variant[variant].append(table)
            mean_steps = float(np.mean([r.steps for r in table.rows]))
            writer.writerow([variant, seed, repr(table.final_success()), repr(table.auc()), repr(mean_steps)])
    print(f"saved {summary_path}")

    compare: dict[str, dict[str, float]] = {}
    if Variant.VANILLA.value in by_variant:
        compare_path = out_dir / "g4rl_compare.csv"
        with compare_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "final_success", "vanilla_final_success", "auc_win_fraction", "sign_test_p"])
            for variant, tables in by_variant.items():
                if variant == Variant.VANILLA.value:
                    continue
                stats = compare_variants(tables, by_variant[Variant.VANILLA.value])
                compare[variant] = stats
                writer.writerow([
                    variant,
                    repr(stats["final_success_a"]),
                    repr(stats["final_success_b"]),
                    repr(stats["auc_win_fraction"]),
                    repr(stats["sign_test_p"]),
                ])
                print(
                    f"{variant}: final success {stats['final_success_a']:.3f} "
                    f"vs vanilla {stats['final_success_b']:.3f} (sign test p={stats['sign_test_p']:.3g})"
                )
        print(f"saved {compare_path}")

    if cfg.run.plot:
        path = plot_learning_curves(by_variant, out_dir / "g4rl_curves.svg", title=Path(cfg.gchrl.map).stem)
        print(f"saved {path}")
    return {"compare": compare}


def _load_scar_game(cfg: ExperimentConfig) -> tuple[CoalitionGame, list[str] | None, dict[str, Any]]:
    path = Path(cfg.scar.game)
    if not path.is_file():
        raise ValidationError(f"game file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if "evaluations" in data:
        game = load_game(path)
        if cfg.scar.placeholder is not None and cfg.scar.placeholder != game.placeholder:
            raise ValidationError(
                f"{path} was recorded with placeholder {game.placeholder!r}, "
                f"not {cfg.scar.placeholder!r}"
            )
        return game, None, data
    tokens, oracle = load_task(path)
    if cfg.scar.placeholder is not None:
        oracle = dataclasses.replace(oracle, placeholder=cfg.scar.placeholder)
    units, _ = segment(tokens, cfg.scar.segmentation, delimiters=cfg.scar.delimiters)
    game = CoalitionGame.from_scorer(units, oracle, oracle.placeholder)
    return game, tokens, data


def _scar_structure(cfg: ExperimentConfig, game: CoalitionGame) -> CoalitionStructure:
    n = game.n_players
    if cfg.scar.partition == "singletons":
        return CoalitionStructure(CoalitionStructure.singletons(n).unions, balanced_tree(range(n)))
    if cfg.scar.partition == "balanced":
        half = (n + 1) // 2
        unions = tuple(u for u in (tuple(range(half)), tuple(range(half, n))) if u)
        return CoalitionStructure(unions, balanced_tree(range(n)))
    assert game.units is not None
    return sentence_partition([u.tokens[-1] for u in game.units], cfg.scar.delimiters)


def cmd_scar_credit(cfg: ExperimentConfig, out_dir: Path) -> dict[str, Any]:
    game, _, data = _load_scar_game(cfg)
    method = cfg.scar.method
    credits: CreditVector
    if method == "exact":
        credits = exact_shapley(game, max_players=cfg.scar.max_players, max_workers=cfg.scar.workers)
    elif method == "owen":
        credits = owen_value(game, _scar_structure(cfg, game), max_players=cfg.scar.max_players)
    elif method == "hierarchical":
        credits = hierarchical_owen(game, _scar_structure(cfg, game))
    else:
        credits = uniform_credit(game)

    assert game.units is not None
    T = game.units[-1].end_t
    log_probs = None
    if "logp_policy" in data and "logp_ref" in data:
        log_probs = (data["logp_policy"], data["logp_ref"])
    trace = RewardTrace.for_game(
        game, cfg.scar.alpha, kl_coefficient=cfg.scar.kl_beta, log_probs=log_probs
    )
    shap = place_rewards(credits, trace)
    rewards = total_reward(trace, shap)

    write_credit_csv(out_dir / "scar_credit.csv", game.units, credits)
    rewards_path = out_dir / "scar_rewards.csv"
    with rewards_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "kl", "shap", "total"])
        for t in range(T):
            writer.writerow([t + 1, repr(float(trace.kl_terms[t])), repr(float(shap[t])), repr(float(rewards[t]))])
    dump_game(game, out_dir / "scar_game.json")

    grand = game.value(game.grand)
    print(f"{method}: {game.n_players} units, {game.evaluations} oracle calls")
    print(f"sum of credits {credits.total:.6f}, v(all) {grand:.6f}, baseline {game.baseline:.6f}")
    print(f"saved {out_dir / 'scar_credit.csv'}")
    return {
        "method": method,
        "units": game.n_players,
        "oracle_calls": game.evaluations,
        "credit_sum": credits.total,
        "grand_value": grand,
    }


def cmd_scar_invariance(cfg: ExperimentConfig, out_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    alphas = list(args.alphas)
    rows: list[list[Any]] = []
    mdps = [("chain", chain_mdp(5))]
    mdps += [
        (f"random_{s}", random_terminal_mdp(n_states=args.states, horizon=args.horizon, seed=s))
        for s in range(cfg.run.seeds)
    ]
    failures = 0
    control_flips = 0
    for name, mdp in mdps:
        ok = verify_policy_invariance(mdp, alphas, shapley_decomposition)
        control = verify_policy_invariance(mdp, alphas, broken_decomposition())
        failures += int(not ok)
        control_flips += int(not control)
        rows.append([name, "shapley", ok])
        rows.append([name, "broken", control])
    path = out_dir / "scar_invariance.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mdp", "decomposition", "alphas", "invariant"])
        for name, decomposition, ok in rows:
            writer.writerow([name, decomposition, " ".join(str(a) for a in alphas), int(ok)])
    print(f"shapley credit invariant on {len(mdps) - failures}/{len(mdps)} mdps")
    print(f"broken control changed optimal actions on {control_flips}/{len(mdps)} mdps")
    print(f"saved {path}")
    if failures:
        raise DenseRewardError(f"optimal actions changed on {failures} mdps")
    if not control_flips:
        raise DenseRewardError(
            "the broken control changed no optimal action, so the check cannot detect a "
            f"broken decomposition at alphas {alphas}"
        )
    return {"mdps": len(mdps), "failures": failures, "control_flips": control_flips}


def _transfer_job(env: GridEnv, cfg: ExperimentConfig, seed: int) -> TransferResult:
    return run_transfer(env, cfg.transfer_settings(), seed, cfg.agent_config())


def cmd_transfer_run(cfg: ExperimentConfig, out_dir: Path) -> dict[str, Any]:
    env = load_map(Path(cfg.transfer.map))
    jobs = [(env, cfg, s) for s in range(cfg.run.seeds)]
    results = sorted(_fan_out(jobs, _transfer_job, cfg.run.max_workers), key=lambda r: r.seed)
    path = out_dir / "transfer.csv"
    write_transfer_csv(path, results)
    matched = sum(1 for r in results if r.match is MatchKind.MATCHED)
    faster = sum(
        1 for r in results if episodes_to_success(r.shaped) < episodes_to_success(r.baseline)
    )
    print(f"matched {matched}/{len(results)} seeds")
    print(f"transfer reached the success target sooner on {faster}/{len(results)} seeds")
    print(f"saved {path}")
    if cfg.run.plot:
        curves = {
            "transfer": [r.shaped for r in results],
            "no transfer": [r.baseline for r in results],
        }
        plot_path = plot_learning_curves(curves, out_dir / "transfer_curves.svg", title="Target maze")
        print(f"saved {plot_path}")
    return {"matched": matched, "shaped_faster": faster}


def _calibration_graph(env: GridEnv, cfg: ExperimentConfig, seed: int) -> StateGraph:
    settings = cfg.transfer_settings()
    if settings.graph_source is GraphSource.SWEEP:
        return sweep_graph(env, np.random.default_rng(seed), epsilon_d=settings.epsilon_d)
    graph, _, _ = record_graph(env, settings, seed, cfg.agent_config())
    return graph


def _calibration_job(env: GridEnv, other: GridEnv, cfg: ExperimentConfig, seed: int) -> list[list[Any]]:
    settings = cfg.transfer_settings()

    def summary(graph: StateGraph) -> SpectralSummary:
        return graph_summary(graph, settings.gap_tol, eigensolver=settings.eigensolver)

    base = summary(_calibration_graph(env, cfg, seed))
    pairs = {
        "mirrored": _calibration_graph(env.transposed(), cfg, seed),
        "reseeded": _calibration_graph(env, cfg, seed + RESEED_OFFSET),
        "different": _calibration_graph(other, cfg, seed),
    }
    rows: list[list[Any]] = []
    for kind, graph in pairs.items():
        other_summary = summary(graph)
        if other_summary.size != base.size:
            rows.append([seed, kind, math.inf, MatchKind.SPECTRA_MISMATCH.value, math.inf])
            continue
        match = match_nodes(base, other_summary, math.inf, eps_lambda=math.inf)
        row_dist = match.max_row_distance if match.matched else math.inf
        rows.append([seed, kind, spectral_distance(base, other_summary), match.kind.value, row_dist])
    return rows


def cmd_calibrate(cfg: ExperimentConfig, out_dir: Path) -> dict[str, Any]:
    env = load_map(Path(cfg.transfer.map))
    other = load_map(Path(cfg.transfer.compare_map))
    jobs = [(env, other, cfg, s) for s in range(cfg.run.seeds)]
    rows = sorted(
        (row for rows in _fan_out(jobs, _calibration_job, cfg.run.max_workers) for row in rows),
        key=lambda r: (r[0], r[1]),
    )
    path = out_dir / "calibration.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "pair", "spectral_distance", "match", "max_row_distance"])
        for row in rows:
            writer.writerow([row[0], row[1], repr(float(row[2])), row[3], repr(float(row[4]))])

    same = [r for r in rows if r[1] == "mirrored"]
    different = [r for r in rows if r[1] == "different"]
    reseeded = [r[2] for r in rows if r[1] == "reseeded"]
    worst_same = max(max(r[2] for r in same), 1e-12)
    best_diff = min(r[2] for r in different)
    eps_lambda = math.sqrt(worst_same * best_diff) if math.isfinite(best_diff) else 10.0 * worst_same
    finite_rows = [r[4] for r in same if math.isfinite(r[4])]
    eps_v = 10.0 * max(max(finite_rows), 1e-9) if finite_rows else None
    print(f"same maze, other seed: median spectral distance {float(np.median(reseeded)):.3g}")
    print(f"suggested eps_lambda = {eps_lambda:.3g}")
    print("suggested eps_v = " + (f"{eps_v:.3g}" if eps_v is not None else "n/a (no matched pair)"))
    print(f"saved {path}")
    return {"eps_lambda": eps_lambda, "eps_v": eps_v}


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    parser = build_argparser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=str(args.log_level).upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )

    out_dir: Path = args.out_dir
    start = time.time()
    try:
        cfg = load_config(args.config).with_overrides(_overrides(args)).validate()
        if args.command == "g4rl-run":
            details = cmd_g4rl_run(cfg, out_dir)
        elif args.command == "scar-credit":
            details = cmd_scar_credit(cfg, out_dir)
        elif args.command == "scar-invariance":
            details = cmd_scar_invariance(cfg, out_dir, args)
        elif args.command == "transfer-run":
            details = cmd_transfer_run(cfg, out_dir)
        else:
            details = cmd_calibrate(cfg, out_dir)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DenseRewardError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    duration_s = round(time.time() - start, 3)
    _atomic_write_json(
        out_dir / f"{args.command}.log",
        {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "command": args.command,
            "seeds": cfg.run.seeds,
            "duration_s": duration_s,
            "config": dataclasses.asdict(cfg),
            "result": details,
        },
    )
    print(f"finished {args.command} in {duration_s} seconds")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
