"""Command line entry point.

Exit codes: 0 on success, 1 when a workflow ran but failed, 2 for invalid
configuration or arguments.
"""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .fed_ml.data import DataError
from .controller import ConfigError, RunReport, load_workflow, parse_address, run_workflow

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("fedmesh")


def _load_structured(path: Path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return raw


def cmd_run(args) -> int:
    spec = load_workflow(args.workflow)
    if args.relay:
        parse_address(args.relay)
        spec = dataclasses.replace(spec, relay=args.relay)
    if args.id not in spec.clients:
        raise ConfigError(f"client {args.id!r} is not part of workflow {spec.workflow_id!r}")
    if args.role and args.role != spec.role_of(args.id).value:
        raise ConfigError(f"client {args.id!r} has role {spec.role_of(args.id).value}, not {args.role}")
    report = asyncio.run(run_workflow(spec, args.id, Path(args.data), Path(args.out), args.poll_interval))
    print(report.table())
    return EXIT_OK if report.status == "ok" else EXIT_FAILED


def cmd_report(args) -> int:
    path = Path(args.run_dir)
    if path.is_dir():
        path = path / "run_report.json"
    try:
        report = RunReport.from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read run report {path}: {exc}") from exc
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.table())
    return EXIT_OK if report.status == "ok" else EXIT_FAILED


def cmd_relay(args) -> int:
    from .relay import RelayCore, RelayServer

    async def serve() -> None:
        server = RelayServer(RelayCore(), args.bandwidth)
        host, port = await server.start(args.host, args.port)
        print(f"relay listening on {host}:{port}", flush=True)
        await server.serve_forever()

    try:
        asyncio.run(serve())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_sim(args) -> int:
    from .testbed.simulation import SimConfig, run_simulation

    path = Path(args.config)
    raw = _load_structured(path)
    if args.repetitions is not None:
        raw["repetitions"] = args.repetitions
    try:
        config = SimConfig.from_dict(raw, base=path.parent)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from exc
    report = run_simulation(config)
    print(report.table())
    if args.json:
        Path(args.json).write_text(json.dumps({"summary": report.summary(), "runs": [r.to_dict() for r in report.runs]}, indent=2))
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_partition(args) -> int:
    from .testbed.partition import SplitPlan, partition_dataset

    try:
        plan = SplitPlan.parse(args.plan)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dirs = partition_dataset(Path(args.csv), plan, args.seed, Path(args.out), sentinel=args.sentinel)
    for d in dirs:
        print(d)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .testbed.comparison import run_comparison
    from .testbed.partition import SplitPlan

    plan = SplitPlan.parse(args.plan) if args.plan else SplitPlan.equal(args.clients)
    if len(plan.fractions) != args.clients:
        raise ConfigError(f"plan has {len(plan.fractions)} parts but --clients is {args.clients}")
    result = run_comparison(
        Path(args.dataset), plan, args.model, k_folds=args.folds, seed=args.seed,
        work_dir=Path(args.out) / "work" if args.out else None,
        label_column=args.label, poll_interval=args.poll_interval,
    )
    print(result.summary())
    if args.out:
        result.write(Path(args.out))
    return EXIT_OK


def cmd_generate(args) -> int:
    from .testbed.datasets import make_classification, make_regression

    if args.kind == "regression":
        df, _ = make_regression(n=args.rows, p=args.features, seed=args.seed)
    else:
        df = make_classification(n=args.rows, p=args.features, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(args.out, index=False, float_format="%.17g")
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmesh", description="Federated workflow runtime and desk-scale testbed.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one client of a workflow against a relay")
    r.add_argument("--workflow", required=True, help="workflow file (YAML or JSON)")
    r.add_argument("--data", required=True, help="this client's data directory")
    r.add_argument("--id", required=True, help="this client's id")
    r.add_argument("--role", choices=["coordinator", "participant"], help="assert the expected role")
    r.add_argument("--relay", help="override the relay address host:port")
    r.add_argument("--out", required=True, help="run directory")
    r.add_argument("--poll-interval", type=float, default=None, help="seconds between app polls (default 3)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="print a run report")
    rep.add_argument("run_dir")
    rep.add_argument("--json", action="store_true", help="print the raw JSON instead of a table")
    rep.set_defaults(func=cmd_report)

    rl = sub.add_parser("relay", help="start a relay server")
    rl.add_argument("--host", default="127.0.0.1")
    rl.add_argument("--port", type=int, default=7400)
    rl.add_argument("--bandwidth", type=float, default=None, help="per-link limit in bytes per second")
    rl.set_defaults(func=cmd_relay)

    s = sub.add_parser("sim", help="run an in-process simulation")
    s.add_argument("--config", required=True)
    s.add_argument("--repetitions", type=int, default=None)
    s.add_argument("--json", help="also write the full result as JSON to this file")
    s.set_defaults(func=cmd_sim)

    pa = sub.add_parser("partition", help="split a CSV into client directories")
    pa.add_argument("--csv", required=True)
    pa.add_argument("--plan", required=True, help="comma separated fractions, e.g. 0.10,0.15,0.15,0.30,0.30")
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--out", required=True)
    pa.add_argument("--sentinel", default=None, help="add a record_id column carrying this marker")
    pa.set_defaults(func=cmd_partition)

    c = sub.add_parser("compare", help="federated vs centralized vs individual models")
    c.add_argument("--dataset", required=True)
    c.add_argument("--model", required=True, choices=["linreg", "logreg", "rf_class", "rf_reg"])
    c.add_argument("--folds", type=int, default=10)
    c.add_argument("--clients", type=int, default=5)
    c.add_argument("--plan", default=None, help="split fractions; equal split when omitted")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--label", default="y")
    c.add_argument("--poll-interval", type=float, default=0.001)
    c.add_argument("--out", default=None, help="write comparison.csv and comparison.txt here")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--kind", choices=["regression", "classification"], required=True)
    g.add_argument("--rows", type=int, default=579)
    g.add_argument("--features", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"workflow failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
