"""Command-line front end.

Exit codes: 0 success, 1 verification failed, 2 invalid input or
configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import AssumptionError, BSLQError, NumericalError
from .oracle import (
    DEFAULT_QP_CAP,
    DEFAULT_THRESHOLDS,
    assemble_qp,
    control_dimension,
    evaluate_bsde,
    evaluate_cost,
    qp_solve,
    tamper_offsets,
    verify,
)
from .problem import ProblemSpec, example_text, load_spec, prepare, spec_schema
from .reporting import (
    TOOL_NAME,
    dumps,
    solution_report,
    solution_schema,
    to_jsonable,
    verification_report,
    verification_schema,
)
from .solver import FeedbackSolution, ValueVariant, solve
from .tree import write_csv

EXIT_OK, EXIT_VERIFY, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("bslq")


class UsageError(BSLQError):
    pass


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    output: str | None = None
    method: str = "transform"
    value_variant: str = "derivation"
    seed: int = 0
    qp: bool = False
    dump_trajectories: str | None = None
    tolerances: dict[str, float] = field(default_factory=dict)
    tamper: list[str] = field(default_factory=list)
    kind: str = "spec"

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        cfg = cls(command=args.command)
        for name in ("input", "output", "method", "value_variant", "seed", "qp", "dump_trajectories", "kind"):
            if hasattr(args, name):
                setattr(cfg, name, getattr(args, name))
        cfg.tolerances = parse_tolerances(getattr(args, "tol", None) or [])
        cfg.tamper = list(getattr(args, "tamper", None) or [])
        cfg.validate_paths()
        return cfg

    def validate_paths(self):
        if self.command in ("solve", "verify", "oracle"):
            if not self.input:
                raise UsageError("--input is required")
            if self.input != "-" and not os.path.isfile(self.input):
                raise UsageError(f"input file not found: {self.input}")
        for path in (self.output, self.dump_trajectories):
            if path:
                parent = os.path.dirname(os.path.abspath(path))
                if not os.path.isdir(parent):
                    raise UsageError(f"output directory does not exist: {parent}")


def parse_tolerances(items: list[str]) -> dict[str, float]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--tol expects KEY=VAL, got {item!r}")
        if key not in DEFAULT_THRESHOLDS:
            raise UsageError(f"unknown tolerance {key!r}; known: {', '.join(sorted(DEFAULT_THRESHOLDS))}")
        try:
            out[key] = float(val)
        except ValueError as exc:
            raise UsageError(f"tolerance {key} must be a number, got {val!r}") from exc
    return out


def _read_input(path: str) -> ProblemSpec:
    if path == "-":
        return load_spec(sys.stdin.read())
    with open(path, "rb") as fh:
        return load_spec(fh.read())


def _emit(text: str, path: str | None):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _g(x: float) -> str:
    return f"{x:.6g}"


def _solve(cfg: RunConfig, spec: ProblemSpec) -> tuple[FeedbackSolution, float, list[str]]:
    """Solve, evaluate the oracle cost and resolve ``auto`` variant selection."""
    explicit = None if cfg.value_variant == "auto" else cfg.value_variant
    sol = solve(spec, method=cfg.method, value_variant=explicit)
    cost = evaluate_cost(spec, sol.u_star)
    warnings = []
    if cfg.method == "transform":
        if cfg.value_variant == "auto":
            best = min(sol.values, key=lambda v: abs(sol.values[v] - cost))
            sol = sol.replace(value=sol.values[best], value_variant=ValueVariant(best))
        if len({round(v, 12) for v in sol.values.values()}) > 1:
            warnings.append("value-function variants differ")
        if abs(sol.value - cost) > 1e-8 * max(1.0, abs(cost)):
            warnings.append(f"value {_g(sol.value)} differs from the oracle cost {_g(cost)} of u*")
    elif cfg.value_variant not in ("auto", "derivation"):
        warnings.append(f"--value-variant {cfg.value_variant} ignored by the direct method")
    return sol, cost, warnings


def _dump(cfg: RunConfig, processes: dict):
    if cfg.dump_trajectories:
        with open(cfg.dump_trajectories, "w", encoding="utf-8", newline="") as fh:
            write_csv(processes, fh)


def cmd_solve(cfg: RunConfig) -> int:
    spec = _read_input(cfg.input)
    sol, cost, warnings = _solve(cfg, spec)
    qp = None
    if cfg.qp:
        model = assemble_qp(spec)
        u_qp = qp_solve(model, spec)
        qp = {"cost": evaluate_cost(spec, u_qp), "control_gap": sol.u_star.max_abs_diff(u_qp),
              "probes": model.probes}
    report = solution_report(sol, version=__version__, seed=cfg.seed, oracle_cost=cost,
                             warnings=warnings, qp=qp)
    _emit(dumps(report), cfg.output)
    _dump(cfg, {"x": sol.x_star, "y": sol.y_star, "u": sol.u_star, "phi": sol.phi})
    if cfg.output:
        print(f"method {sol.method}: value ({sol.value_variant.value}) = {_g(sol.value)}")
        for name, val in sorted(sol.values.items()):
            print(f"  {name:<10} {_g(val)}")
        print(f"  oracle cost of u* = {_g(cost)}")
        if qp:
            print(f"  qp optimum = {_g(qp['cost'])}, max |u* - u_qp| = {_g(qp['control_gap'])}")
        for w in warnings:
            print(f"warning: {w}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    spec = _read_input(cfg.input)
    sol, _, _ = _solve(cfg, spec)
    if "b" in cfg.tamper:
        sol = tamper_offsets(sol)
    report = verify(prepare(spec), sol, seed=cfg.seed, qp=True if cfg.qp else None,
                    thresholds=cfg.tolerances)
    _emit(dumps(verification_report(sol, report, version=__version__, tampered=cfg.tamper)), cfg.output)
    _dump(cfg, {"x": sol.x_star, "y": sol.y_star, "u": sol.u_star, "phi": sol.phi})
    status = "PASS" if report.passed else "FAIL"
    stream = sys.stdout if cfg.output else sys.stderr
    print(f"verify {status} (method {sol.method}, seed {cfg.seed})", file=stream)
    for name, ok in report.checks.items():
        if not ok:
            print(f"  failed: {name}", file=stream)
    if not report.checks.get("stationarity", True):
        steps = ", ".join(f"k={k}: {_g(r)}" for k, r in enumerate(report.stationarity_per_step))
        print(f"  stationarity residual per step: {steps}", file=stream)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_oracle(cfg: RunConfig) -> int:
    """Solve by the brute-force quadratic program alone."""
    spec = prepare(_read_input(cfg.input))
    model = assemble_qp(spec, DEFAULT_QP_CAP)
    u_qp = qp_solve(model, spec)
    cost = evaluate_cost(spec, u_qp)
    report = to_jsonable({
        "tool": TOOL_NAME,
        "version": __version__,
        "seed": cfg.seed,
        "control_dimension": control_dimension(spec),
        "probes": model.probes,
        "hessian_min_eigenvalue": float(np.linalg.eigvalsh(model.hessian)[0]),
        "cost": cost,
        "u": u_qp,
    })
    _emit(dumps(report), cfg.output)
    _dump(cfg, {"y": evaluate_bsde(spec, u_qp), "u": u_qp})
    if cfg.output:
        print(f"qp optimum {_g(cost)} over {control_dimension(spec)} control coordinates")
    return EXIT_OK


def cmd_example(cfg: RunConfig) -> int:
    _emit(example_text(), cfg.output)
    return EXIT_OK


def cmd_schema(cfg: RunConfig) -> int:
    schema = {"spec": spec_schema, "solution": solution_schema, "verification": verification_schema}[cfg.kind]()
    _emit(json.dumps(schema, sort_keys=True, indent=2) + "\n", cfg.output)
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "verify": cmd_verify,
    "oracle": cmd_oracle,
    "example": cmd_example,
    "schema": cmd_schema,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bslq",
        description="Backward stochastic LQ control on a binary noise tree.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", "-i", help="problem file (JSON), or - for stdin")
        p.add_argument("--output", "-o", help="write the report here instead of stdout")

    def add_solver(p):
        p.add_argument("--method", choices=["transform", "direct"], default="transform",
                       help="transformation pipeline (default) or direct decoupling")
        p.add_argument("--value-variant", choices=["theorem", "derivation", "completed", "auto"], default="derivation",
                       help="closed-form value variant; auto picks the one closest to the oracle cost")
        p.add_argument("--seed", type=int, default=0, help="seed for random test directions")
        p.add_argument("--qp", action="store_true", help="also solve the brute-force QP")
        p.add_argument("--dump-trajectories", metavar="PATH", help="write x, y, u, phi per atom as CSV")

    p = sub.add_parser("solve", help="solve a problem file")
    add_io(p)
    add_solver(p)

    p = sub.add_parser("verify", help="solve and check the result against the tree oracle")
    add_io(p)
    add_solver(p)
    p.add_argument("--tol", action="append", metavar="KEY=VAL",
                   help=f"override a threshold ({', '.join(sorted(DEFAULT_THRESHOLDS))})")
    p.add_argument("--tamper", action="append", choices=["b"],
                   help="test hook: zero the feedback offsets before verifying")

    p = sub.add_parser("oracle", help="solve by the brute-force quadratic program only")
    add_io(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-trajectories", metavar="PATH")

    p = sub.add_parser("example", help="write the built-in four-period example problem")
    add_io(p, needs_input=False)

    p = sub.add_parser("schema", help="print a JSON Schema")
    add_io(p, needs_input=False)
    p.add_argument("--kind", choices=["spec", "solution", "verification"], default="spec")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = RunConfig.from_args(args)
        return COMMANDS[cfg.command](cfg)
    except AssumptionError as exc:
        sys.stdout.write(dumps({"validation": exc.report.to_dict()}))
        for msg in exc.report.messages():
            print(f"bslq: invalid problem: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"bslq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BSLQError, OSError) as exc:
        print(f"bslq: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
