"""Structured result records shared by the verification modules.

Every numeric outcome travels in one of these containers so the CLI can
serialize report rows uniformly and the replay check can compare them
field by field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional


def canonical_json(obj: Any) -> str:
    """Deterministic serialization: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class AssumptionReport:
    """Outcome of checking one structural assumption on a window."""

    assumption_id: str  # "A1" | "A2" | "A3" | "A4"
    window: str
    constants: dict = field(default_factory=dict)
    passed: bool = False
    witness: Optional[Any] = None
    notes: list = field(default_factory=list)

    def to_row(self) -> dict:
        return {
            "assumption": self.assumption_id,
            "window": self.window,
            "constants": _jsonable(self.constants),
            "pass": bool(self.passed),
            "witness": _jsonable(self.witness),
            "notes": list(self.notes),
        }


@dataclass
class EstimatorResult:
    """A Monte Carlo point estimate with its error budget and provenance."""

    estimate: float
    std_error: float
    n_samples: int
    n_censored: int
    seed: int
    extras: dict = field(default_factory=dict)

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / self.n_samples if self.n_samples else 0.0

    def to_row(self) -> dict:
        return {
            "estimate": float(self.estimate),
            "std_error": float(self.std_error),
            "n_samples": int(self.n_samples),
            "n_censored": int(self.n_censored),
            "censored_fraction": self.censored_fraction,
            "seed": int(self.seed),
            "extras": _jsonable(self.extras),
        }


@dataclass
class CheckReport:
    """Generic pass/fail record for a kernel or path estimate check."""

    op: str
    passed: bool
    inconclusive: bool = False
    values: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_row(self) -> dict:
        return {
            "op": self.op,
            "pass": bool(self.passed),
            "inconclusive": bool(self.inconclusive),
            "values": _jsonable(self.values),
            "notes": list(self.notes),
        }


def _jsonable(obj):
    """Recursively coerce numpy scalars/arrays into plain JSON types."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
