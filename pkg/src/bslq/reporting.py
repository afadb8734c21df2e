"""JSON reports for solver and verification output."""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from .oracle import VerificationReport
from .solver import FeedbackSolution
from .tree import AdaptedProcess

TOOL_NAME = "bslq"
ATOM_ORDER = "binary path of noise signs, +1 as bit 0, earliest noise most significant"


def _tree_values(proc: AdaptedProcess) -> list:
    return [v.tolist() for v in proc.values]


def _matrices(seq) -> list | None:
    return None if seq is None else [np.asarray(m).tolist() for m in seq]


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, AdaptedProcess):
        return _tree_values(obj)
    return obj


def solution_report(solution: FeedbackSolution, *, version: str, seed: int, oracle_cost: float,
                    warnings: list[str] | None = None, qp: dict | None = None) -> dict[str, Any]:
    n = solution.Sigma[0].shape[0]
    return to_jsonable({
        "tool": TOOL_NAME,
        "version": version,
        "seed": seed,
        "method": solution.method,
        "horizon": len(solution.K),
        "state_dim": n,
        "control_dim": solution.K[0].shape[0],
        "atom_order": ATOM_ORDER,
        "value_variant": solution.value_variant.value,
        "value": solution.value,
        "values": dict(sorted(solution.values.items())),
        "oracle_cost": oracle_cost,
        "H": _matrices(solution.H),
        "Sigma": _matrices(solution.Sigma),
        "K": _matrices(solution.K),
        "b": solution.b,
        "phi": solution.phi,
        "diagnostics": solution.diagnostics,
        "warnings": list(warnings or []),
        "qp": qp,
    })


def verification_report(solution: FeedbackSolution, report: VerificationReport, *, version: str,
                        tampered: list[str] | None = None) -> dict[str, Any]:
    return to_jsonable({
        "tool": TOOL_NAME,
        "version": version,
        "seed": report.seed,
        "method": solution.method,
        "value_variant": solution.value_variant.value,
        "value": solution.value,
        "values": dict(sorted(solution.values.items())),
        "tampered": list(tampered or []),
        "verification": report.to_dict(),
    })


def dumps(report: dict[str, Any]) -> str:
    """Canonical serialization: sorted keys, full float precision, no NaN."""
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_MATRICES = {"type": "array", "items": {"type": "array", "items": {"type": "array", "items": _NUM}}}
_TREE = _MATRICES  # time -> atom -> component

_COMMON = {
    "tool": {"const": TOOL_NAME},
    "version": {"type": "string"},
    "seed": {"type": "integer"},
    "method": {"enum": ["transform", "direct"]},
    "value_variant": {"enum": ["theorem", "derivation", "completed", "pairing"]},
    "value": _NUM,
    "values": {"type": "object", "additionalProperties": _NUM, "minProperties": 1},
}


def solution_schema() -> dict[str, Any]:
    props = dict(_COMMON)
    props.update({
        "horizon": {"type": "integer", "minimum": 1},
        "state_dim": {"type": "integer", "minimum": 1},
        "control_dim": {"type": "integer", "minimum": 1},
        "atom_order": {"type": "string"},
        "oracle_cost": _NUM,
        "H": {"oneOf": [_MATRICES, {"type": "null"}]},
        "Sigma": _MATRICES,
        "K": _MATRICES,
        "b": _TREE,
        "phi": _TREE,
        "diagnostics": {"type": "object"},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "qp": {"oneOf": [{"type": "null"}, {
            "type": "object",
            "required": ["cost", "control_gap", "probes"],
            "properties": {"cost": _NUM, "control_gap": _NUM, "probes": {"type": "integer"}},
        }]},
    })
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "bslq solution report",
        "type": "object",
        "required": sorted(props),
        "properties": props,
        "additionalProperties": False,
    }


def verification_schema() -> dict[str, Any]:
    checks = {
        "type": "object",
        "required": [
            "seed", "thresholds", "oracle_cost", "stationarity_max_residual", "stationarity_per_step",
            "homogeneous_min", "expansion_max_error", "superposition_error", "value_match",
            "matching_variant", "checks", "warnings", "pass",
        ],
        "properties": {
            "seed": {"type": "integer"},
            "thresholds": {"type": "object", "additionalProperties": _NUM},
            "stationarity_per_step": {"type": "array", "items": _NUM},
            "value_match": {"type": "object", "additionalProperties": _NUM},
            "matching_variant": {"type": "string"},
            "cost_gap_vs_qp": _NUM_OR_NULL,
            "control_gap_vs_qp": _NUM_OR_NULL,
            "qp_cost": _NUM_OR_NULL,
            "qp_value_gap": _NUM_OR_NULL,
            "checks": {"type": "object", "additionalProperties": {"type": "boolean"}},
            "warnings": {"type": "array", "items": {"type": "string"}},
            "pass": {"type": "boolean"},
        },
        "additionalProperties": _NUM,
    }
    props = dict(_COMMON)
    props.update({"tampered": {"type": "array", "items": {"type": "string"}}, "verification": checks})
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "bslq verification report",
        "type": "object",
        "required": sorted(props),
        "properties": props,
        "additionalProperties": False,
    }
