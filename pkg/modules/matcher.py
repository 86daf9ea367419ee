"""
Matcher Module
Optimal matching layer: pairwise scores, dustbin augmentation, log-domain
Sinkhorn normalization, and mutual-argmax match extraction. Also holds the
exact assignment oracle used to check the soft assignment.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from modules.autodiff import Tape, Var, broadcast_to, concat, exp, logsumexp, reshape
from modules.errors import MatchingError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.2
DEFAULT_ITERATIONS = 100
MAX_ITERATION_FACTOR = 50
ORACLE_LIMIT = 12


def compute_scores(f_a: Var, f_b: Var) -> Var:
    """S[i, j] = <f_a[i], f_b[j]>, unnormalized."""
    if f_a.ndim != 2 or f_b.ndim != 2 or f_a.shape[1] != f_b.shape[1]:
        raise MatchingError(f"matching descriptor widths differ: {f_a.shape} vs {f_b.shape}")
    return f_a @ f_b.T


def augment_with_dustbins(scores: Var, z: Var) -> Var:
    """Append a dustbin row and column, every border entry equal to z."""
    if z.size != 1:
        raise MatchingError(f"dustbin score must be a scalar, got shape {z.shape}")
    m, n = scores.shape
    z = reshape(z, (1, 1))
    column = broadcast_to(z, (m, 1))
    row = broadcast_to(z, (1, n + 1))
    return concat([concat([scores, column], axis=1), row], axis=0)


@dataclass
class PartialAssignment:
    """Augmented soft assignment P-bar, with its log for the loss."""

    p_bar: Var
    log_p_bar: Optional[Var] = None
    column_residual: float = 0.0
    row_residual: float = 0.0
    iterations: int = 0

    @property
    def values(self) -> np.ndarray:
        return self.p_bar.value

    @property
    def interior(self) -> np.ndarray:
        return self.p_bar.value[:-1, :-1]

    @classmethod
    def from_probabilities(cls, tape: Tape, p_bar) -> "PartialAssignment":
        """Wrap a given P-bar, e.g. a hand-made fixture; no log is kept."""
        return cls(tape.constant(p_bar))


def marginals(m: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """a = [1..1, N], b = [1..1, M]."""
    return np.r_[np.ones(m), float(n)], np.r_[np.ones(n), float(m)]


def _column_residual(s_bar: Var, u: Var, v: Var, b: np.ndarray) -> float:
    return float(np.abs(np.exp(s_bar.value + u.value + v.value).sum(axis=0) - b).max())


def sinkhorn(
    s_bar: Var,
    iterations: int = DEFAULT_ITERATIONS,
    tolerance: Optional[float] = None,
    max_iterations: Optional[int] = None,
) -> PartialAssignment:
    """
    Log-domain Sinkhorn with dual potentials u, v. Each iteration updates the
    columns, then the rows, so the row marginals hold exactly on return and
    the column residual measures convergence.

    Given a tolerance, iterations continue past the requested count until the
    column residual is at most the tolerance, or max_iterations (default
    MAX_ITERATION_FACTOR times the count) is reached.
    """
    if iterations < 1:
        raise MatchingError(f"Sinkhorn needs at least one iteration, got {iterations}")
    if tolerance is not None and tolerance <= 0:
        raise MatchingError(f"Sinkhorn tolerance must be positive, got {tolerance}")
    if not np.all(np.isfinite(s_bar.value)):
        raise NumericalError("Sinkhorn received non-finite scores")
    m, n = s_bar.shape[0] - 1, s_bar.shape[1] - 1
    if m < 1 or n < 1:
        raise MatchingError(f"Sinkhorn needs keypoints in both images, got {m} and {n}")
    limit = iterations
    if tolerance is not None:
        limit = max(iterations, max_iterations or MAX_ITERATION_FACTOR * iterations)
    tape = s_bar.tape
    a, b = marginals(m, n)
    log_a = tape.constant(np.log(a).reshape(-1, 1))
    log_b = tape.constant(np.log(b).reshape(1, -1))
    u = tape.constant(np.zeros((m + 1, 1)))
    v = tape.constant(np.zeros((1, n + 1)))
    done = 0
    while done < limit:
        v = log_b - logsumexp(s_bar + u, axis=0)
        u = log_a - logsumexp(s_bar + v, axis=1)
        done += 1
        if done >= iterations and tolerance is not None and _column_residual(s_bar, u, v, b) <= tolerance:
            break
    log_p = s_bar + u + v
    p = exp(log_p)
    column_residual = float(np.abs(p.value.sum(axis=0) - b).max())
    row_residual = float(np.abs(p.value.sum(axis=1) - a).max())
    if tolerance is not None and column_residual > tolerance:
        logger.warning(
            "sinkhorn %dx%d: column residual %.2e above %.1e after %d iterations",
            m, n, column_residual, tolerance, done,
        )
    logger.debug(
        "sinkhorn %dx%d: %d iterations, row residual %.2e, column residual %.2e",
        m, n, done, row_residual, column_residual,
    )
    return PartialAssignment(p, log_p, column_residual, row_residual, done)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

class Match(NamedTuple):
    i: int
    j: int
    confidence: float


@dataclass(frozen=True)
class MatchSet:
    matches: Tuple[Match, ...]
    unmatched_a: Tuple[int, ...]
    unmatched_b: Tuple[int, ...]

    @property
    def pairs(self) -> set:
        return {(m.i, m.j) for m in self.matches}

    def __len__(self) -> int:
        return len(self.matches)

    @classmethod
    def from_matches(cls, matches: Iterable[Tuple[int, int, float]], m: int, n: int) -> "MatchSet":
        matches = tuple(sorted(Match(int(i), int(j), float(c)) for i, j, c in matches))
        used_a = {x.i for x in matches}
        used_b = {x.j for x in matches}
        return cls(
            matches,
            tuple(i for i in range(m) if i not in used_a),
            tuple(j for j in range(n) if j not in used_b),
        )

    def to_dict(self) -> dict:
        return {
            "matches": [{"i": x.i, "j": x.j, "confidence": x.confidence} for x in self.matches],
            "unmatched_a": list(self.unmatched_a),
            "unmatched_b": list(self.unmatched_b),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MatchSet":
        try:
            matches = tuple(Match(int(x["i"]), int(x["j"]), float(x["confidence"])) for x in data["matches"])
            return cls(matches, tuple(data["unmatched_a"]), tuple(data["unmatched_b"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MatchingError(f"malformed match JSON: {exc}") from exc


def _strict_argmax(values: np.ndarray, axis: int) -> np.ndarray:
    """Index of the unique maximum along axis, -1 where the maximum is tied."""
    best = values.argmax(axis=axis)
    ties = (values == values.max(axis=axis, keepdims=True)).sum(axis=axis)
    return np.where(ties == 1, best, -1)


def extract_matches(
    assignment: Union[PartialAssignment, np.ndarray], threshold: float = DEFAULT_THRESHOLD
) -> MatchSet:
    """Mutual strict argmax of the interior, kept when P[i, j] >= threshold."""
    p = assignment.interior if isinstance(assignment, PartialAssignment) else np.asarray(assignment, dtype=np.float64)
    m, n = p.shape
    if m == 0 or n == 0:
        return MatchSet((), tuple(range(m)), tuple(range(n)))
    row_best = _strict_argmax(p, axis=1)
    col_best = _strict_argmax(p, axis=0)
    found = [
        (i, int(j), float(p[i, j]))
        for i, j in enumerate(row_best)
        if j >= 0 and col_best[j] == i and p[i, j] >= threshold and p[i, j] > 0
    ]
    return MatchSet.from_matches(found, m, n)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def hungarian_oracle(scores) -> List[Tuple[int, int]]:
    """
    Score-maximizing injective mapping over min(M, N) pairs, exact by dynamic
    programming over subsets of used columns.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise MatchingError(f"oracle needs a 2-D score matrix, got shape {s.shape}")
    m, n = s.shape
    if m > ORACLE_LIMIT or n > ORACLE_LIMIT:
        raise MatchingError(f"oracle limited to {ORACLE_LIMIT}x{ORACLE_LIMIT}, got {m}x{n}")
    if m == 0 or n == 0:
        return []
    if m > n:
        return sorted((i, j) for j, i in hungarian_oracle(s.T))

    best: Dict[int, Tuple[float, Tuple[int, ...]]] = {0: (0.0, ())}
    for i in range(m):
        extended: Dict[int, Tuple[float, Tuple[int, ...]]] = {}
        for mask, (total, columns) in best.items():
            for j in range(n):
                if mask & (1 << j):
                    continue
                candidate = total + s[i, j]
                key = mask | (1 << j)
                if key not in extended or candidate > extended[key][0]:
                    extended[key] = (candidate, columns + (j,))
        best = extended
    _, columns = max(best.values(), key=lambda entry: entry[0])
    return list(enumerate(columns))


def assignment_score(scores, pairs: Sequence[Tuple[int, int]]) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(sum(s[i, j] for i, j in pairs))
