"""Macro-averaged mean absolute error for ordinal, imbalanced Koos grades.

Per grade ``j`` present in the truth, MAE_j is the mean ``|predicted - true|``
over the cases whose true grade is ``j``. MA-MAE is the unweighted mean of
those per-grade values, so a grade with three cases weighs as much as one
with three hundred. Strict mode divides by all four grades instead and
refuses a truth set that lacks one.
"""

from __future__ import annotations

import json
import operator
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

from .errors import KoosError
from .features import GRADES


class MetricsError(KoosError):
    code = "metrics_error"


class EmptyInput(MetricsError):
    code = "empty_input"


class GradeOutOfRange(MetricsError):
    code = "grade_out_of_range"


class AbsentClass(MetricsError):
    code = "absent_class"


@dataclass(frozen=True)
class EvalReport:
    per_class_mae: Tuple[Optional[float], ...]
    ma_mae: float
    confusion: Tuple[Tuple[int, ...], ...]
    n_cases: int
    strict: bool = False

    @property
    def class_counts(self) -> Tuple[int, ...]:
        return tuple(sum(row) for row in self.confusion)

    def to_dict(self) -> dict:
        return {
            "ma_mae": self.ma_mae,
            "per_class_mae": {
                str(grade): mae for grade, mae in zip(GRADES, self.per_class_mae)
            },
            "confusion": [list(row) for row in self.confusion],
            "n_cases": self.n_cases,
            "normalization": "fixed" if self.strict else "macro",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def render_table(self) -> str:
        present = sum(mae is not None for mae in self.per_class_mae)
        divisor = len(GRADES) if self.strict else present
        lines = [
            f"MA-MAE  {self.ma_mae:.4f}  (n={self.n_cases}, averaged over {divisor} grades)",
            "",
            "grade  cases  MAE",
        ]
        for grade, count, mae in zip(GRADES, self.class_counts, self.per_class_mae):
            shown = "-" if mae is None else f"{mae:.4f}"
            lines.append(f"{grade:>5}  {count:>5}  {shown}")
        width = max(5, max(len(str(v)) for row in self.confusion for v in row))
        lines += ["", "confusion (rows = true, columns = predicted)"]
        lines.append("      " + " ".join(f"{g:>{width}}" for g in GRADES))
        for grade, row in zip(GRADES, self.confusion):
            lines.append(f"{grade:>5} " + " ".join(f"{v:>{width}}" for v in row))
        return "\n".join(lines) + "\n"


def _check_grade(value: object, role: str, position: int) -> int:
    try:
        grade = operator.index(value)
    except TypeError:
        grade = None
    if isinstance(value, bool) or grade not in GRADES:
        raise GradeOutOfRange(f"pair {position}: {role} grade {value!r} is not in 1..4")
    return grade


def evaluate(pairs: Iterable[Tuple[int, int]], strict: bool = False) -> EvalReport:
    """Score ``(predicted, true)`` grade pairs."""
    confusion = [[0] * len(GRADES) for _ in GRADES]
    abs_error = [0] * len(GRADES)
    n_cases = 0
    for position, (predicted, true) in enumerate(pairs):
        predicted = _check_grade(predicted, "predicted", position)
        true = _check_grade(true, "true", position)
        confusion[true - 1][predicted - 1] += 1
        abs_error[true - 1] += abs(predicted - true)
        n_cases += 1
    if n_cases == 0:
        raise EmptyInput("evaluation needs at least one (predicted, true) pair")

    counts = [sum(row) for row in confusion]
    per_class = tuple(
        abs_error[j] / counts[j] if counts[j] else None for j in range(len(GRADES))
    )
    present = [mae for mae in per_class if mae is not None]
    if strict:
        absent = [g for g, mae in zip(GRADES, per_class) if mae is None]
        if absent:
            raise AbsentClass(f"strict evaluation needs every grade; missing {absent}")
        ma_mae = sum(present) / len(GRADES)
    else:
        ma_mae = sum(present) / len(present)
    return EvalReport(
        per_class_mae=per_class,
        ma_mae=ma_mae,
        confusion=tuple(tuple(row) for row in confusion),
        n_cases=n_cases,
        strict=strict,
    )
