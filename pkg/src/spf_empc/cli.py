"""Command-line entry point: run, batch, gradcheck, export."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from multiprocessing import Pool
from pathlib import Path

from .gradcheck import run_gradcheck
from .sim import (SUMMARY_COLUMNS, RunMetrics, metrics_of, run_simulation, run_to_completion,
                  summarize, write_run_outputs, write_table, write_trajectory_trace)
from .world import (ScenarioError, apply_overrides, load_scenario_dict, scenario_from_dict,
                    scenario_to_dict, crossing_scenario)

OUT_ENV = "SPF_EMPC_OUT"
DEFAULT_OUT = "out"
RUN_COLUMNS = ("seed", "noise_scale", "success", "overtime", "collision", "dynamic_distance",
               "path_length", "travel_time", "iterations", "sim_time", "error")


def output_dir(arg: str | None) -> Path:
    """--out wins, then $SPF_EMPC_OUT, then ./out."""
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def scenario_data(path: str | None, seed: int, scale: float | None, overrides=()) -> dict:
    """Scenario structure for one run: file (or the generated crossing layout) + seed/noise/overrides."""
    if path is None:
        data = scenario_to_dict(crossing_scenario(seed, 1.0 if scale is None else scale))
    else:
        data = load_scenario_dict(path)
    data["seed"] = seed
    if scale is not None:
        data.setdefault("noise", {})["scale"] = scale
    return apply_overrides(data, overrides)


def parse_seeds(text: str) -> list[int]:
    """'50' -> 0..49, '3,5,7' -> those seeds, '10-19' -> inclusive range."""
    text = text.strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    if "-" in text.lstrip("-"):
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    n = int(text)
    if n < 1:
        raise ValueError("seed count must be >= 1")
    return list(range(n))


def _batch_job(data: dict):
    try:
        return run_to_completion(scenario_from_dict(data))
    except Exception as exc:  # recorded per run; the batch continues
        return f"{type(exc).__name__}: {exc}"


def cmd_run(args) -> int:
    data = scenario_data(args.scenario, args.seed, args.noise_scale, args.override)
    sc = scenario_from_dict(data)
    out = output_dir(args.out)
    sim = run_simulation(sc)
    paths = write_run_outputs(sim, out)
    if args.command == "export":
        paths["trajectories"] = write_trajectory_trace(sim, out)
        scen = out / f"scenario_seed{sc.seed}.json"
        scen.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        paths["scenario"] = scen
    m = metrics_of(sim)
    print(f"seed {sc.seed} noise {sc.noise.scale:g}: success={int(m.success)} "
          f"collision={int(m.collision)} overtime={int(m.overtime)} sim_time={m.sim_time:.2f}s")
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return 0


def cmd_batch(args) -> int:
    seeds = parse_seeds(args.seeds)
    scales = args.noise_scale or [1.0]
    out = output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(scale, seed, scenario_data(args.scenario, seed, scale, args.override))
            for scale in scales for seed in seeds]
    for _, _, data in jobs:            # fail fast on configuration errors before spawning
        scenario_from_dict(data)
    t0 = time.perf_counter()
    workers = max(1, args.jobs or os.cpu_count() or 1)
    if workers == 1:
        results = [_batch_job(d) for _, _, d in jobs]
    else:
        with Pool(workers) as pool:
            results = pool.map(_batch_job, [d for _, _, d in jobs], chunksize=1)
    run_rows, summary_rows = [], []
    for scale in scales:
        ok = []
        for (s, seed, _), res in zip(jobs, results):
            if s != scale:
                continue
            if isinstance(res, RunMetrics):
                ok.append(res)
                run_rows.append({**res.row(), "error": ""})
            else:
                run_rows.append({"seed": seed, "noise_scale": scale, "error": res})
                print(f"seed {seed} noise {scale:g}: {res}", file=sys.stderr)
        row = summarize(ok)
        row["noise_scale"] = scale
        summary_rows.append(row)
    write_table(out / "runs.csv", RUN_COLUMNS, run_rows)
    write_table(out / "summary.csv", SUMMARY_COLUMNS, summary_rows)
    elapsed = time.perf_counter() - t0
    print(",".join(SUMMARY_COLUMNS))
    for row in summary_rows:
        print(",".join(f"{row[c]:.4g}" if isinstance(row[c], float) else str(row[c])
                       for c in SUMMARY_COLUMNS))
    print(f"{len(jobs)} runs in {elapsed:.1f}s on {workers} worker(s); summary: {out / 'summary.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(args.trials, args.seed)
    for name, err in rep.errors.items():
        label = name if name in ("minco", "total") else f"cost_{name}"
        flag = "ok" if err <= rep.tolerance else "FAIL"
        print(f"{label:15s} max rel err {err:.3e}  {flag}")
    print(f"{rep.trials} instances in {rep.seconds:.1f}s")
    if not rep.ok:
        names = [n if n in ("minco", "total") else f"cost_{n}" for n in rep.failing]
        print(f"gradient check failed: {', '.join(names)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spf-empc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_flags(p):
        p.add_argument("--scenario", help="scenario JSON file (default: generated 5-robot crossing)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override into the scenario, e.g. noise.scale=0.25")

    for name in ("run", "export"):
        p = sub.add_parser(name, help="simulate one seed and write metrics/traces" if name == "run"
                           else "like run, plus planned trajectories and the resolved scenario")
        scenario_flags(p)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--noise-scale", type=float)
    p = sub.add_parser("batch", help="Monte-Carlo over seeds with a summary table")
    scenario_flags(p)
    p.add_argument("--seeds", default="50", help="count N (seeds 0..N-1), list a,b,c, or range lo-hi")
    p.add_argument("--noise-scale", type=float, action="append",
                   help="noise scale; repeat for several summary rows (default 1)")
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    p = sub.add_parser("gradcheck", help="finite-difference check of all cost gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "export": cmd_run, "batch": cmd_batch,
               "gradcheck": cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except (ScenarioError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
