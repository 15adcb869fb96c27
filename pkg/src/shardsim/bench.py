"""Benchmark driver: single runs, shard-count and constraint-count sweeps.

Defaults mirror the evaluation setup: 1000 accounts at balance 3000, 1500
four-constraint transfers, a 30 ms consensus delay.  Arrivals are spread 8
ms apart by default so that wide configurations are paced by the offered
load rather than by pipeline depth; the narrow ones stay capacity-bound,
which is what separates the protocols.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
from pathlib import Path

from .model import ShardConfig, load_accounts, load_transactions
from .sim import RunReport, SimulationStalled, Simulator
from .verifier import verify_run
from .workload import gen_accounts, gen_transactions

log = logging.getLogger("shardsim.bench")

DEFAULT_ACCOUNTS = 1000
DEFAULT_BALANCE = 3000
DEFAULT_TXS = 1500
DEFAULT_CONSTRAINTS = 4
DEFAULT_SPACING_MS = 8
PROTOCOLS = ("lockless", "locked", "nolock")
VERIFIED_PROTOCOLS = ("lockless", "locked")


def default_workload(seed: int, shards: int, constraints: int = DEFAULT_CONSTRAINTS,
                     txs: int = DEFAULT_TXS, spacing_ms: int = DEFAULT_SPACING_MS):
    balances = gen_accounts(DEFAULT_ACCOUNTS, DEFAULT_BALANCE, seed)
    transactions = gen_transactions(
        txs, balances, constraints_per_tx=constraints, seed=seed, shards=shards,
        spacing_ms=spacing_ms,
    )
    return balances, transactions


def run_and_verify(cfg: ShardConfig, balances, txs, trace=False):
    sim = Simulator(cfg, balances, txs, trace=trace)
    report = sim.run()
    verdict = None
    if cfg.protocol in VERIFIED_PROTOCOLS:
        verdict = verify_run(report.chains, txs, balances, report.final_balances)
    return sim, report, verdict


def write_run_dir(out_dir: Path, cfg: ShardConfig, report: RunReport, sim: Simulator) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    (out_dir / "report.json").write_text(report.to_json_str() + "\n")
    (out_dir / "final_state.json").write_text(
        json.dumps({"balances": report.final_balances, "versions": report.final_versions},
                   sort_keys=True) + "\n"
    )
    chain_dir = out_dir / "chains"
    chain_dir.mkdir(exist_ok=True)
    for shard, entries in report.chains.items():
        with open(chain_dir / f"shard_{shard}.jsonl", "w", encoding="utf-8") as fh:
            for entry in entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if sim.trace_enabled:
        with open(out_dir / "trace.jsonl", "w", encoding="utf-8") as fh:
            for line in sim.trace:
                fh.write(json.dumps(line, sort_keys=True) + "\n")


def _row(report: RunReport, flagged: str | None = None) -> dict:
    return {
        "shard_count": report.shard_count,
        "protocol": report.protocol,
        "throughput": f"{report.throughput:.6f}",
        "avg_exec_time": f"{report.avg_exec_time_ms:.6f}",
        "restarts": report.restarts_total,
        "rollbacks": report.rollbacks_total,
        "committed": report.committed,
        "discarded": report.discarded,
        "flagged": flagged or "",
    }


def sweep_shards(shard_counts, protocols, seed, out_dir: Path, base_cfg: dict | None = None,
                 workload_params: dict | None = None) -> list[dict]:
    rows = []
    failures = 0
    params = workload_params or {}
    for shards in shard_counts:
        balances, txs = default_workload(seed, shards, **params)
        for protocol in protocols:
            cfg = ShardConfig(shards=shards, seed=seed, protocol=protocol, **(base_cfg or {}))
            try:
                _, report, verdict = run_and_verify(cfg, balances, txs)
            except SimulationStalled as exc:
                log.error("stalled: shards=%s protocol=%s: %s", shards, protocol, exc)
                rows.append({"shard_count": shards, "protocol": protocol, "flagged": "stalled"})
                failures += 1
                continue
            flagged = None
            if verdict is not None and not verdict.ok:
                flagged = "verification-failed"
                failures += 1
            rows.append(_row(report, flagged))
            log.info("shards=%s protocol=%s throughput=%.1f", shards, protocol, report.throughput)
    emit_plotdata(rows, out_dir / "fig1_throughput_vs_shards.csv",
                  ["shard_count", "protocol", "throughput", "avg_exec_time",
                   "restarts", "rollbacks", "committed", "discarded", "flagged"])
    if failures:
        raise SystemExit(1)
    return rows


def sweep_constraints(k_values, protocols, seed, out_dir: Path, shards: int = 4,
                      base_cfg: dict | None = None, workload_params: dict | None = None) -> list[dict]:
    rows = []
    failures = 0
    params = dict(workload_params or {})
    for k in k_values:
        balances, txs = default_workload(seed, shards, constraints=k, **params)
        for protocol in protocols:
            cfg = ShardConfig(shards=shards, seed=seed, protocol=protocol, **(base_cfg or {}))
            try:
                _, report, verdict = run_and_verify(cfg, balances, txs)
            except SimulationStalled as exc:
                log.error("stalled: k=%s protocol=%s: %s", k, protocol, exc)
                rows.append({"constraints": k, "protocol": protocol, "flagged": "stalled"})
                failures += 1
                continue
            flagged = None
            if verdict is not None and not verdict.ok:
                flagged = "verification-failed"
                failures += 1
            rows.append(
                {
                    "constraints": k,
                    "protocol": protocol,
                    "avg_exec_time": f"{report.avg_exec_time_ms:.6f}",
                    "throughput": f"{report.throughput:.6f}",
                    "restarts": report.restarts_total,
                    "rollbacks": report.rollbacks_total,
                    "flagged": flagged or "",
                }
            )
            log.info("k=%s protocol=%s exec=%.1fms", k, protocol, report.avg_exec_time_ms)
    emit_plotdata(rows, out_dir / "fig2_exectime_vs_constraints.csv",
                  ["constraints", "protocol", "avg_exec_time", "throughput",
                   "restarts", "rollbacks", "flagged"])
    if failures:
        raise SystemExit(1)
    return rows


def emit_plotdata(rows: list[dict], path: Path, columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def _load_or_generate(args, shards: int):
    if args.workload:
        txs = load_transactions(args.workload)
        balances = load_accounts(args.accounts or args.workload + ".accounts")
    else:
        balances, txs = default_workload(args.seed, shards)
    return balances, txs


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SHARDSIM_LOG", "WARNING").upper())
    parser = argparse.ArgumentParser(prog="shardsim-bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one protocol once and verify it")
    run_p.add_argument("--config", help="JSON config file")
    run_p.add_argument("--protocol", choices=PROTOCOLS)
    run_p.add_argument("--shards", type=int, default=4)
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--workload", help="transaction file (JSONL)")
    run_p.add_argument("--accounts", help="initial balances file")
    run_p.add_argument("--trace", action="store_true")
    run_p.add_argument("--out", default="runs/run")

    ss = sub.add_parser("sweep-shards", help="throughput vs shard count")
    ss.add_argument("--shard-counts", type=int, nargs="+", default=[2, 4, 8, 16])
    ss.add_argument("--protocols", nargs="+", default=list(PROTOCOLS))
    ss.add_argument("--seed", type=int, default=0)
    ss.add_argument("--out", default="runs/sweep_shards")

    sc = sub.add_parser("sweep-constraints", help="execution time vs constraint count")
    sc.add_argument("--k-values", type=int, nargs="+", default=[1, 2, 4, 6, 8])
    sc.add_argument("--protocols", nargs="+", default=list(PROTOCOLS))
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--shards", type=int, default=4)
    sc.add_argument("--out", default="runs/sweep_constraints")

    vf = sub.add_parser("verify", help="re-verify a finished run directory")
    vf.add_argument("--run-dir", required=True)
    vf.add_argument("--workload", required=True)
    vf.add_argument("--accounts")
    vf.add_argument("--report", default=None)

    args = parser.parse_args(argv)

    if args.command == "run":
        if args.config:
            cfg = ShardConfig.from_json(json.loads(Path(args.config).read_text()))
            if args.protocol:
                cfg = ShardConfig.from_json({**cfg.to_json(), "protocol": args.protocol})
        else:
            cfg = ShardConfig(shards=args.shards, seed=args.seed,
                              protocol=args.protocol or "lockless").validate()
        balances, txs = _load_or_generate(args, cfg.shards)
        sim, report, verdict = run_and_verify(cfg, balances, txs, trace=args.trace)
        write_run_dir(Path(args.out), cfg, report, sim)
        print(
            f"{cfg.protocol}: committed={report.committed} discarded={report.discarded} "
            f"throughput={report.throughput:.1f} tx/s avg_exec={report.avg_exec_time_ms:.1f} ms"
        )
        if verdict is not None:
            (Path(args.out) / "verify.json").write_text(
                json.dumps(verdict.to_json(), indent=2, sort_keys=True) + "\n"
            )
            print(f"verifier: valid={verdict.valid} coherent={verdict.shard_coherent} "
                  f"replay_match={verdict.replay_match}")
            if not verdict.ok:
                return 1
        return 0

    if args.command == "sweep-shards":
        sweep_shards(args.shard_counts, args.protocols, args.seed, Path(args.out))
        print(f"wrote {Path(args.out) / 'fig1_throughput_vs_shards.csv'}")
        return 0

    if args.command == "sweep-constraints":
        sweep_constraints(args.k_values, args.protocols, args.seed, Path(args.out),
                          shards=args.shards)
        print(f"wrote {Path(args.out) / 'fig2_exectime_vs_constraints.csv'}")
        return 0

    if args.command == "verify":
        from .verifier import main as verify_main

        report_path = args.report or str(Path(args.run_dir) / "verify.json")
        rc = verify_main(
            ["--chains", args.run_dir, "--workload", args.workload, "--report", report_path]
            + (["--accounts", args.accounts] if args.accounts else [])
        )
        return rc

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
