"""Test-record bookkeeping shared by the simulator and all estimators.

A tested scenario is summarized by its crash outcome plus, for every step at
which the background vehicle was adversarially controlled, the probability of
the chosen action under the naturalistic model, under the sampling mixture,
and under each individual importance function.  These are the sufficient
statistics for every estimator in the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

__all__ = [
    "CriticalStepRecord",
    "TestRecord",
    "read_records",
    "iter_records",
    "write_records",
    "record_to_json",
    "record_from_json",
]


@dataclass(frozen=True, slots=True)
class CriticalStepRecord:
    """Likelihoods of the action chosen at one controlled step.

    p           naturalistic probability of the chosen action
    q_alpha     probability under the sampling mixture
    q_individual probability under each of the J individual importance
                functions (the mixture components)
    """

    p: float
    q_alpha: float
    q_individual: tuple[float, ...]

    def validate(self, alpha: Sequence[float] | None = None) -> None:
        if not (self.q_alpha > 0.0):
            raise ValueError(f"q_alpha must be positive, got {self.q_alpha}")
        if self.p < 0.0:
            raise ValueError(f"p must be nonnegative, got {self.p}")
        if any(q < 0.0 for q in self.q_individual):
            raise ValueError("individual probabilities must be nonnegative")
        if alpha is not None:
            if len(alpha) != len(self.q_individual):
                raise ValueError("mixture weight count does not match q_individual")
            mix = sum(a * q for a, q in zip(alpha, self.q_individual))
            if abs(mix - self.q_alpha) > 1e-12:
                raise ValueError(
                    f"mixture identity violated: sum(alpha*q)={mix!r} != q_alpha={self.q_alpha!r}"
                )


@dataclass(frozen=True, slots=True)
class TestRecord:
    """Outcome and likelihood bookkeeping for one tested scenario."""

    test_id: int
    crash_prob: float
    steps: tuple[CriticalStepRecord, ...] = field(default=())

    @property
    def num_control_steps(self) -> int:
        return len(self.steps)

    def weight(self) -> float:
        """Importance weight: product of p/q_alpha over the controlled steps.

        The empty product is 1, so uncontrolled scenarios carry unit weight.
        """
        w = 1.0
        for s in self.steps:
            w *= s.p / s.q_alpha
        return w

    def component_ratio(self, j: int) -> float:
        """Product over controlled steps of q_individual[j] / q_alpha."""
        r = 1.0
        for s in self.steps:
            r *= s.q_individual[j] / s.q_alpha
        return r

    def validate(self, alpha: Sequence[float] | None = None) -> None:
        if not (0.0 <= self.crash_prob <= 1.0):
            raise ValueError(f"crash_prob must be in [0, 1], got {self.crash_prob}")
        if not math.isfinite(self.crash_prob):
            raise ValueError("crash_prob must be finite")
        for s in self.steps:
            s.validate(alpha)


def record_to_json(record: TestRecord) -> str:
    """Serialize one record to the canonical single-line JSON form.

    Schema: {"test_id", "num_control_steps", "crash", "steps": [{"p",
    "q_alpha", "q"}]}.  Floats use Python repr, which round-trips exactly.
    """
    obj = {
        "test_id": record.test_id,
        "num_control_steps": record.num_control_steps,
        "crash": record.crash_prob == 1.0,
        "steps": [
            {"p": s.p, "q_alpha": s.q_alpha, "q": list(s.q_individual)}
            for s in record.steps
        ],
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(line: str) -> TestRecord:
    obj = json.loads(line)
    steps = tuple(
        CriticalStepRecord(p=s["p"], q_alpha=s["q_alpha"], q_individual=tuple(s["q"]))
        for s in obj["steps"]
    )
    if obj["num_control_steps"] != len(steps):
        raise ValueError(
            f"record {obj.get('test_id')}: num_control_steps={obj['num_control_steps']} "
            f"but {len(steps)} steps present"
        )
    return TestRecord(
        test_id=obj["test_id"],
        crash_prob=1.0 if obj["crash"] else 0.0,
        steps=steps,
    )


def write_records(path, records: Iterable[TestRecord]) -> int:
    """Write records to a JSONL file; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")
            n += 1
    return n


def iter_records(path) -> Iterator[TestRecord]:
    """Stream records from a JSONL file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield record_from_json(line)


def read_records(path) -> list[TestRecord]:
    return list(iter_records(path))
