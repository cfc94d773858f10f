"""Query-accounted attack loops against a score-only victim.

Every victim forward pass goes through a :class:`QueryOracle`, which charges
one query per evaluated point. The scores at the clean input come from the
caller (they were computed while selecting correctly classified inputs) and
are free.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .directions import (
    LOSSES,
    ClassRanking,
    DirectionSource,
    argmax_excluding,
    margin_loss,
    ods_direction,
    rank_classes,
    surrogate_loss_gradient,
    targeted_log_loss,
)
from .errors import (
    BasisExhaustedError,
    BudgetExceededError,
    DegenerateDirectionError,
    InvalidInputError,
)
from .models import Classifier
from .numerics import FloatArray, RandomStream, as_vector, l2_norm, project_to_ball
from .serialization import PathLike

DEFAULT_EPSILON = 2.0
DEFAULT_BUDGET = 10000
MAX_DEGENERATE_DRAWS = 100

# reasons an attack stops without success
BUDGET = "budget"
BASIS_EXHAUSTED = "basis-exhausted"
SURROGATES_EXHAUSTED = "surrogates-exhausted"
DEGENERATE_DIRECTIONS = "degenerate-directions"


def default_nu(dim: int) -> float:
    return math.sqrt(0.001 * dim)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    nu: Optional[float] = None
    budget: int = DEFAULT_BUDGET
    target: Optional[int] = None
    loss: str = "margin"
    clamp: Optional[Tuple[float, float]] = None
    trace: bool = False
    max_degenerate: int = MAX_DEGENERATE_DRAWS

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise InvalidInputError(f"step length must be positive: {self.epsilon!r}")
        if self.nu is not None and not self.nu > 0:
            raise InvalidInputError(f"norm bound must be positive: {self.nu!r}")
        if self.budget < 0:
            raise InvalidInputError(f"budget must be nonnegative: {self.budget!r}")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"Unknown loss: {self.loss!r}")
        if self.loss == "targeted-log" and self.target is None:
            raise InvalidInputError("the targeted-log loss needs a target class")
        if self.clamp is not None and not self.clamp[0] < self.clamp[1]:
            raise InvalidInputError(f"invalid clamp range: {self.clamp!r}")

    @property
    def targeted(self) -> bool:
        return self.target is not None

    def radius(self, dim: int) -> float:
        return default_nu(dim) if self.nu is None else self.nu


class QueryOracle:
    """Score-only access to a victim, with strict query accounting.

    ``point`` and ``scores`` cache the most recently accepted iterate.
    """

    def __init__(self, victim: Classifier, budget: int):
        self.victim = victim
        self.budget = budget
        self.query_count = 0
        self.point: Optional[FloatArray] = None
        self.scores: Optional[FloatArray] = None

    def query(self, x: FloatArray) -> FloatArray:
        if self.query_count >= self.budget:
            raise BudgetExceededError(self.budget)
        self.query_count += 1
        return self.victim.forward_scores(x)

    def accept(self, x: FloatArray, scores: FloatArray) -> None:
        self.point = x
        self.scores = scores


def victim_loss(
    scores: FloatArray, cfg: AttackConfig, original_class: int
) -> float:
    """Loss on victim scores; positive exactly when the scores are adversarial.

    Untargeted margins compare the original class against the best other class
    at the evaluated point.
    """
    if cfg.target is None:
        ranking = ClassRanking(original_class, argmax_excluding(scores, original_class))
        return margin_loss(scores, ranking)
    if cfg.loss == "targeted-log":
        return targeted_log_loss(scores, cfg.target)
    return margin_loss(scores, rank_classes(scores, cfg.target))


def is_adversarial(scores: FloatArray, cfg: AttackConfig, original_class: int) -> bool:
    predicted = int(np.argmax(scores))
    if cfg.target is None:
        return predicted != original_class
    return predicted == cfg.target


@dataclass
class AttackState:
    x_in: FloatArray
    x: FloatArray
    scores: FloatArray
    loss: float
    original_class: int
    nu: float
    trace: Optional[List[Dict[str, Any]]] = None

    @classmethod
    def start(
        cls, x_in: npt.ArrayLike, initial_scores: npt.ArrayLike, cfg: AttackConfig
    ) -> AttackState:
        x_in = as_vector(x_in, "input")
        scores = as_vector(initial_scores, "initial scores")
        if cfg.target is not None and not 0 <= cfg.target < scores.size:
            raise InvalidInputError(f"target class out of range: {cfg.target!r}")
        original_class = int(np.argmax(scores))
        return cls(
            x_in=x_in,
            x=x_in.copy(),
            scores=scores,
            loss=victim_loss(scores, cfg, original_class),
            original_class=original_class,
            nu=cfg.radius(x_in.size),
            trace=[] if cfg.trace else None,
        )

    def adversarial(self, cfg: AttackConfig) -> bool:
        return is_adversarial(self.scores, cfg, self.original_class)


class Evaluation(NamedTuple):
    loss: float
    scores: FloatArray
    point: FloatArray
    clamped: bool


def evaluate_candidate(
    oracle: QueryOracle, state: AttackState, x_candidate: FloatArray, cfg: AttackConfig
) -> Evaluation:
    """Project to the norm ball (then the box, if any) and query the victim once."""
    point = project_to_ball(x_candidate, state.x_in, state.nu)
    clamped = False
    if cfg.clamp is not None:
        boxed = np.clip(point, *cfg.clamp)
        clamped = not np.array_equal(boxed, point)
        if clamped:
            warnings.warn(
                "box clamp applied after the norm-ball projection;"
                " the clamped point may lie inside the ball boundary"
            )
        point = boxed
    scores = oracle.query(point)
    return Evaluation(
        victim_loss(scores, cfg, state.original_class), scores, point, clamped
    )


def step_trial(
    oracle: QueryOracle,
    state: AttackState,
    q: FloatArray,
    cfg: AttackConfig,
    branch: str = "",
    surrogate: Optional[int] = None,
) -> bool:
    """Try steps of ``+epsilon`` then ``-epsilon`` along ``q``.

    The first candidate whose loss strictly exceeds the current loss becomes the
    new iterate.
    """
    for alpha in (cfg.epsilon, -cfg.epsilon):
        evaluation = evaluate_candidate(oracle, state, state.x + alpha * q, cfg)
        accepted = evaluation.loss > state.loss
        if state.trace is not None:
            record: Dict[str, Any] = {
                "step": len(state.trace),
                "branch": branch,
                "surrogate": surrogate,
                "alpha": alpha,
                "accepted": accepted,
                "loss": evaluation.loss,
                "queries": oracle.query_count,
            }
            if evaluation.clamped:
                record["clamped"] = True
            state.trace.append(record)
        if accepted:
            state.x = evaluation.point
            state.scores = evaluation.scores
            state.loss = evaluation.loss
            oracle.accept(evaluation.point, evaluation.scores)
            return True
    return False


@dataclass
class AttackResult:
    success: bool
    total_queries: int
    gradient_queries: int = 0
    coimage_queries: int = 0
    basis_queries: int = 0
    final_norm: float = 0.0
    final_class: int = -1
    reason: Optional[str] = None
    perturbation: Optional[FloatArray] = field(default=None, repr=False)
    trace: Optional[List[Dict[str, Any]]] = field(default=None, repr=False)

    def summary(self) -> Dict[str, Any]:
        summary = asdict(self)
        del summary["perturbation"], summary["trace"]
        return summary


def _finish(
    state: AttackState,
    cfg: AttackConfig,
    blocks: Dict[str, int],
    reason: Optional[str],
) -> AttackResult:
    success = state.adversarial(cfg)
    perturbation = state.x - state.x_in
    return AttackResult(
        success=success,
        total_queries=sum(blocks.values()),
        gradient_queries=blocks.get("gradient", 0),
        coimage_queries=blocks.get("coimage", 0),
        basis_queries=blocks.get("basis", 0),
        final_norm=l2_norm(perturbation),
        final_class=int(np.argmax(state.scores)),
        reason=None if success else reason,
        perturbation=perturbation,
        trace=state.trace,
    )


def _surrogate_ranking(state: AttackState, cfg: AttackConfig) -> ClassRanking:
    return rank_classes(state.scores, cfg.target)


def gfcs_attack(
    oracle: QueryOracle,
    surrogates: Sequence[Classifier],
    x_in: npt.ArrayLike,
    initial_scores: npt.ArrayLike,
    cfg: AttackConfig,
    stream: RandomStream,
    coimage_fallback: bool = True,
) -> AttackResult:
    """Gradient first, coimage second.

    Surrogate loss gradients are tried in random order without replacement at
    each iterate. Once all of them have failed, ODS directions from surrogates
    drawn with replacement are tried until one step is accepted, after which
    the full surrogate set is available again.
    """
    if not surrogates:
        raise InvalidInputError("at least one surrogate is required")
    state = AttackState.start(x_in, initial_scores, cfg)
    blocks = {"gradient": 0, "coimage": 0}
    remaining = list(range(len(surrogates)))
    degenerate_draws = 0
    reason: Optional[str] = None
    try:
        while not state.adversarial(cfg):
            if remaining:
                branch = "gradient"
                index = remaining.pop(int(stream.integers(0, len(remaining))))
                try:
                    q = surrogate_loss_gradient(
                        surrogates[index],
                        state.x,
                        _surrogate_ranking(state, cfg),
                        cfg.loss,
                    )
                except DegenerateDirectionError:
                    continue
            elif coimage_fallback:
                branch = "coimage"
                index = int(stream.integers(0, len(surrogates)))
                try:
                    q = ods_direction(surrogates[index], state.x, stream)
                except DegenerateDirectionError:
                    degenerate_draws += 1
                    if degenerate_draws >= cfg.max_degenerate:
                        reason = DEGENERATE_DIRECTIONS
                        break
                    continue
                degenerate_draws = 0
            else:
                reason = SURROGATES_EXHAUSTED
                break
            before = oracle.query_count
            try:
                accepted = step_trial(oracle, state, q, cfg, branch, index)
            finally:
                blocks[branch] += oracle.query_count - before
            if accepted:
                remaining = list(range(len(surrogates)))
    except BudgetExceededError:
        reason = BUDGET
    return _finish(state, cfg, blocks, reason)


def gf_only_attack(
    oracle: QueryOracle,
    surrogates: Sequence[Classifier],
    x_in: npt.ArrayLike,
    initial_scores: npt.ArrayLike,
    cfg: AttackConfig,
    stream: RandomStream,
) -> AttackResult:
    """GFCS without the coimage fallback: fails once every surrogate gradient fails."""
    return gfcs_attack(
        oracle, surrogates, x_in, initial_scores, cfg, stream, coimage_fallback=False
    )


def simba_attack(
    oracle: QueryOracle,
    source: DirectionSource,
    x_in: npt.ArrayLike,
    initial_scores: npt.ArrayLike,
    cfg: AttackConfig,
) -> AttackResult:
    """SimBA step trials along directions drawn from ``source``.

    With an ODS source this is SimBA-ODS and its queries count as coimage
    queries; fixed bases count as basis queries.
    """
    state = AttackState.start(x_in, initial_scores, cfg)
    branch = "coimage" if source.kind == "ods" else "basis"
    blocks = {branch: 0}
    degenerate_draws = 0
    reason: Optional[str] = None
    try:
        while not state.adversarial(cfg):
            try:
                q = source.next_direction(state.x)
            except BasisExhaustedError:
                reason = BASIS_EXHAUSTED
                break
            except DegenerateDirectionError:
                degenerate_draws += 1
                if degenerate_draws >= cfg.max_degenerate:
                    reason = DEGENERATE_DIRECTIONS
                    break
                continue
            degenerate_draws = 0
            before = oracle.query_count
            try:
                step_trial(
                    oracle,
                    state,
                    q,
                    cfg,
                    branch,
                    getattr(source, "last_surrogate", None),
                )
            finally:
                blocks[branch] += oracle.query_count - before
    except BudgetExceededError:
        reason = BUDGET
    return _finish(state, cfg, blocks, reason)


def pick_target_class(stream: RandomStream, true_label: int, num_classes: int) -> int:
    """Uniform over all classes other than ``true_label``."""
    if num_classes < 2:
        raise InvalidInputError(f"need at least 2 classes: {num_classes!r}")
    draw = int(stream.integers(0, num_classes - 1))
    return draw if draw < true_label else draw + 1


def write_trace(filename: PathLike, trace: Sequence[Dict[str, Any]]) -> None:
    with open(filename, "w") as f:
        for record in trace:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")


__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackState",
    "QueryOracle",
    "default_nu",
    "evaluate_candidate",
    "gf_only_attack",
    "gfcs_attack",
    "pick_target_class",
    "simba_attack",
    "step_trial",
    "write_trace",
]
