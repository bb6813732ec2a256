"""Uniform pass/fail report type shared by every checker in the package."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

__all__ = ["ConditionReport"]


@dataclass
class ConditionReport:
    """Outcome of a structural-condition check.

    ``passed`` is the verdict; ``applicable`` is False when the check's
    hypothesis was not met (the verdict is then vacuous and callers should
    not treat it as a failure).  ``witness`` carries the worst offending
    sample for failed checks so a failure is always reproducible.
    """

    name: str
    passed: bool
    applicable: bool = True
    details: dict[str, Any] = field(default_factory=dict)
    witness: dict[str, Any] | None = None

    @property
    def failed(self) -> bool:
        return self.applicable and not self.passed

    def to_dict(self) -> dict[str, Any]:
        out = {
            "name": self.name,
            "passed": bool(self.passed),
            "applicable": bool(self.applicable),
            "details": _jsonable(self.details),
        }
        if self.witness is not None:
            out["witness"] = _jsonable(self.witness)
        return out


def _jsonable(value):
    import numpy as np

    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    return value
