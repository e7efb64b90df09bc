"""Command-line entry point.

Exit codes: 0 success, 1 configuration/input error, 2 invariant violation
during simulation, 3 greedy-vs-oracle quality failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import datasim
from ._validation import check_rank_seq_lens
from .balancer import brute_force_assign, greedy_max_load, plan_routing, plan_to_json
from .exceptions import ConfigError, FitError, InstanceTooLarge, IntegrityError, ParseError
from .exchange import simulate_step
from .metrics import CostModel, average, markdown_table, to_csv, to_json
from .topology import parse_topology, replicate
from .workload import (
    DEFAULT_K,
    GAMMA_PRESETS,
    ModelShape,
    WorkloadModel,
    fit_gamma,
    fit_k_unweighted,
    flops_per_block,
    read_latency_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_ORACLE = 0, 1, 2, 3
ORACLE_RATIO_LIMIT = 2.0


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _gamma(value: str) -> float:
    if value in GAMMA_PRESETS:
        return GAMMA_PRESETS[value]
    try:
        g = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number or one of {sorted(GAMMA_PRESETS)}") from None
    if not g > 0:
        raise argparse.ArgumentTypeError("gamma must be positive")
    return g


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=3072)
    p.add_argument("--d-head", type=int, default=128)
    p.add_argument("--n-blocks", type=int, default=57)
    p.add_argument("--gamma", type=_gamma, default="h100", help="value or preset: " + ", ".join(f"{k}={v}" for k, v in GAMMA_PRESETS.items()))
    p.add_argument("--k", type=float, default=DEFAULT_K, help="seconds per weighted FLOP")


def _model(args) -> WorkloadModel:
    if args.d_model % args.d_head:
        raise ConfigError(f"d_model {args.d_model} is not a multiple of d_head {args.d_head}")
    shape = ModelShape(args.d_model, args.d_model // args.d_head, args.d_head, args.n_blocks)
    return WorkloadModel(shape, args.gamma, args.k)


@dataclass
class ScenarioConfig:
    topologies: list
    scenario: datasim.ShardingGroupConfig
    world_size: int
    seed: int
    steps: int
    model: WorkloadModel
    cost: CostModel


def _scenario_config(args) -> ScenarioConfig:
    sources = [args.preset is not None, args.data_codes is not None, args.scenario is not None]
    if sum(sources) > 1:
        raise ConfigError("use only one of --preset, --data-codes, --scenario")
    if args.data_codes is not None:
        scenario = datasim.ShardingGroupConfig.from_codes([c for c in args.data_codes.split(",") if c])
    elif args.scenario is not None:
        scenario = datasim.load_scenario(args.scenario)
    else:
        scenario = datasim.preset(args.preset or "mixed_image")
    world = args.world if args.world is not None else scenario.group_size
    if world % scenario.group_size:
        raise ConfigError(f"world size {world} is not a multiple of the data group size {scenario.group_size}")
    model = _model(args)
    topologies = []
    for name in [t.strip() for t in args.topologies.split(",") if t.strip()]:
        if name == "none":
            topologies.append(("w/o Balancer", None))
            continue
        layout = replicate(parse_topology(name), world)
        for size in set(layout.topology.bag_sizes):
            if model.shape.n_heads % size:
                raise ConfigError(f"{name}: bag of {size} GPUs cannot split {model.shape.n_heads} heads")
        topologies.append((f"Balancer {name}", layout))
    if not topologies:
        raise ConfigError("no topologies requested")
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    cost = CostModel(
        peak_flops=args.peak_flops,
        intra_node_bw=args.intra_bw,
        inter_node_bw=args.inter_bw,
        bytes_per_element=args.bytes_per_element,
        gpus_per_node=args.gpus_per_node,
    )
    return ScenarioConfig(topologies, scenario, world, args.seed, args.steps, model, cost)


def cmd_simulate(args, out) -> int:
    cfg = _scenario_config(args)
    rows = []
    for label, layout in cfg.topologies:
        steps = [
            simulate_step(layout, cfg.scenario, cfg.model, cfg.cost, cfg.seed, step, world_size=cfg.world_size, verify=not args.no_verify).metrics
            for step in range(cfg.steps)
        ]
        rows.append((label, average(steps)))
    if args.format == "json":
        payload = {
            "config": {
                "data_codes": cfg.scenario.codes,
                "group_size": cfg.scenario.group_size,
                "world_size": cfg.world_size,
                "seed": cfg.seed,
                "steps": cfg.steps,
                "gamma": cfg.model.gamma,
                "n_blocks": cfg.model.shape.n_blocks,
                "d_model": cfg.model.shape.d_model,
            },
            "rows": json.loads(to_json(rows)),
        }
        out.write(json.dumps(payload, indent=2) + "\n")
    elif args.format == "csv":
        out.write(to_csv(rows))
    else:
        out.write("Data codes: " + ", ".join(cfg.scenario.codes) + "\n\n")
        out.write(markdown_table(rows))
    return EXIT_OK


def _read_seq_lens(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from None
    if isinstance(data, dict):
        data = data.get("ranks")
    if not isinstance(data, list):
        raise ConfigError("sequence-length file must be a JSON list of per-rank lists (or {\"ranks\": [...]})")
    try:
        return check_rank_seq_lens(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def cmd_plan(args, out) -> int:
    seqs = _read_seq_lens(args.seq_lens)
    model = _model(args)
    layout = replicate(parse_topology(args.topology), len(seqs))
    plan, report = plan_routing(seqs, model, layout)
    data = json.loads(plan_to_json(plan, report))
    data["moves"] = len(plan.moves)
    data["replicas"] = len(layout.replicas)
    out.write(json.dumps(data, indent=2 if args.pretty else None) + "\n")
    return EXIT_OK


def cmd_fit_gamma(args, out) -> int:
    samples = read_latency_csv(args.csv)
    fit = fit_gamma(samples, args.d_model, args.n_blocks)
    k1 = fit_k_unweighted(samples, args.d_model, args.n_blocks)
    report = {"k": fit.k, "gamma": fit.gamma, "r2": fit.r2, "k_flops_only": k1, "samples": len(samples), "n_blocks": args.n_blocks}
    out.write(json.dumps(report) + "\n")
    if args.plot_csv:
        d = args.d_model
        with open(args.plot_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seq_len", "measured_s", "eq1_prediction_s", "eq2_prediction_s"])
            for s in samples:
                l = s.seq_len
                raw = k1 * args.n_blocks * flops_per_block(l, d)
                weighted = fit.k * args.n_blocks * (24 * l * d * d + fit.gamma * 4 * l * l * d)
                w.writerow([l, repr(s.latency), repr(raw), repr(weighted)])
    return EXIT_OK


def oracle_compare(trials: int, n: int, m: int, seed: int, bag_sizes=(1,)) -> dict:
    """Greedy vs exhaustive max per-GPU load on random instances."""
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(trials):
        w = rng.uniform(1, 100, size=n).tolist()
        sizes = [int(s) for s in rng.choice(bag_sizes, size=m)]
        _, opt = brute_force_assign(w, sizes)
        ratios.append(greedy_max_load(w, sizes) / opt)
    return {
        "trials": trials,
        "n": n,
        "m": m,
        "bag_sizes": list(bag_sizes),
        "mean_ratio": float(np.mean(ratios)),
        "max_ratio": float(np.max(ratios)),
        "optimal_fraction": float(np.mean(np.isclose(ratios, 1.0, rtol=1e-12, atol=0))),
    }


def cmd_oracle_compare(args, out) -> int:
    sizes = tuple(int(s) for s in args.bag_sizes.split(","))
    if args.trials < 1 or args.n < 1 or args.m < 1 or any(s < 1 for s in sizes):
        raise ConfigError("trials, n, m and bag sizes must be positive")
    report = oracle_compare(args.trials, args.n, args.m, args.seed, sizes)
    out.write(json.dumps(report) + "\n")
    return EXIT_ORACLE if report["max_ratio"] > ORACLE_RATIO_LIMIT else EXIT_OK


def cmd_layout(args, out) -> int:
    layout = replicate(parse_topology(args.topology), args.world)
    out.write(layout.to_json(indent=2 if args.pretty else None) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqbalance", description="Sequence balancing planner and training-step simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate training steps and print WIR/FBL/TPS/HFU")
    p.add_argument("--preset", choices=sorted(datasim.PRESETS))
    p.add_argument("--data-codes", help="comma-separated data codes, e.g. g16b4i256f1s0,g16b1i1024f1s0")
    p.add_argument("--scenario", help="scenario file (group_size header + one data code per line)")
    p.add_argument("--topologies", default="none,g8n4", help="comma-separated; 'none' means no balancer")
    p.add_argument("--world", type=int, default=None, help="number of simulated ranks (default: data group size)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--format", choices=["md", "json", "csv"], default="md")
    p.add_argument("--no-verify", action="store_true", help="skip the physical route/attention round-trip check")
    p.add_argument("--peak-flops", type=float, default=989e12)
    p.add_argument("--intra-bw", type=float, default=400e9)
    p.add_argument("--inter-bw", type=float, default=50e9)
    p.add_argument("--bytes-per-element", type=int, default=2)
    p.add_argument("--gpus-per-node", type=int, default=8)
    _add_model_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="plan routing for a JSON file of per-rank sequence lengths")
    p.add_argument("seq_lens")
    p.add_argument("--topology", required=True)
    p.add_argument("--pretty", action="store_true")
    _add_model_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("fit-gamma", help="fit k and gamma to a seq_len,latency_s CSV")
    p.add_argument("csv")
    p.add_argument("--d-model", type=int, default=3072)
    p.add_argument("--n-blocks", type=int, default=1, help="blocks covered by each measured latency")
    p.add_argument("--plot-csv", help="write measured vs predicted latencies here")
    p.set_defaults(func=cmd_fit_gamma)

    p = sub.add_parser("oracle-compare", help="greedy vs exhaustive assignment quality")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bag-sizes", default="1", help="comma-separated bag sizes drawn at random per bag")
    p.set_defaults(func=cmd_oracle_compare)

    p = sub.add_parser("layout", help="dump the rank layout of a topology as JSON")
    p.add_argument("--topology", required=True)
    p.add_argument("--world", type=int, required=True)
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_layout)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # buffer output so a failing command prints nothing but its error
    buf = io.StringIO()
    try:
        code = args.func(args, buf)
    except IntegrityError as e:
        print(f"error: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, ParseError, FitError, InstanceTooLarge, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(buf.getvalue())
    return code


if __name__ == "__main__":
    sys.exit(main())
