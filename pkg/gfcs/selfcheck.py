"""Numeric invariants of the substrate, runnable as ``gfcs selfcheck``."""
from __future__ import annotations

import logging
from typing import Callable, Iterable, List, NamedTuple, Tuple

import numpy as np

from .directions import ods_direction
from .errors import GfcsError
from .layers import PRESETS, parse_architecture
from .models import Classifier, ScoreModel, adapt_domain, load_model
from .numerics import (
    RandomStream,
    bilinear_resize,
    bilinear_resize_adjoint,
    dct2_basis,
    project_to_ball,
    thin_svd,
)
from .serialization import PathLike

logger = logging.getLogger(__name__)

FD_STEP = 1e-4
FD_TOLERANCE = 1e-4
FD_PAIRS = 10
KINK_RETRIES = 20


class CheckResult(NamedTuple):
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""


def _directional_fd(
    model: Classifier, x: np.ndarray, w: np.ndarray, v: np.ndarray, h: float
) -> Tuple[float, float]:
    """Central difference of ``w @ f`` along ``v``, and the one-sided mismatch.

    A large one-sided mismatch means a ReLU kink lies within the step.
    """
    f0 = w @ model.forward_scores(x)
    fp = w @ model.forward_scores(x + h * v)
    fm = w @ model.forward_scores(x - h * v)
    central = (fp - fm) / (2 * h)
    kink = abs((fp - f0) - (f0 - fm)) / h
    return central, kink


def gradient_error(
    model: Classifier, stream: RandomStream, pairs: int = FD_PAIRS, h: float = FD_STEP
) -> float:
    """Largest relative error of ``weighted_input_gradient`` against finite differences.

    Random points whose step straddles a ReLU kink are redrawn.
    """
    worst = 0.0
    for _ in range(pairs):
        for _ in range(KINK_RETRIES):
            x = stream.uniform(0.0, 1.0, model.input_size)
            w = stream.uniform(-1.0, 1.0, model.num_classes)
            v = stream.normal(1.0, model.input_size)
            v /= np.linalg.norm(v)
            analytic = float(model.weighted_input_gradient(x, w) @ v)
            numeric, kink = _directional_fd(model, x, w, v, h)
            if kink <= 1e-3 * FD_TOLERANCE * abs(analytic) + 1e-9:
                break
        scale = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def check_gradients(seed: int = 0) -> List[CheckResult]:
    stream = RandomStream(seed)
    shape = (16, 16, 3)
    results = []
    for index, name in enumerate(sorted(PRESETS)):
        model = ScoreModel.build(parse_architecture(name), shape, 4, seed + index)
        error = gradient_error(model, stream)
        results.append(
            CheckResult(f"gradient[{name}]", error <= FD_TOLERANCE, error, FD_TOLERANCE)
        )
    small = ScoreModel.build(parse_architecture("conv-c"), (12, 12, 3), 4, seed)
    error = gradient_error(adapt_domain(small, shape), stream)
    results.append(
        CheckResult("gradient[resized]", error <= FD_TOLERANCE, error, FD_TOLERANCE)
    )
    return results


def adjoint_error(seed: int = 0, pairs: int = 20) -> float:
    stream = RandomStream(seed)
    worst = 0.0
    for i in range(pairs):
        small, large = (12, 10), (16, 15)
        (h_in, w_in), (h_out, w_out) = (small, large) if i % 2 else (large, small)
        x = stream.normal(1.0, (h_in, w_in, 3))
        y = stream.normal(1.0, (h_out, w_out, 3))
        forward = bilinear_resize(x, h_out, w_out)
        lhs = float(np.sum(forward * y))
        rhs = float(np.sum(x * bilinear_resize_adjoint(y, h_in, w_in)))
        scale = np.linalg.norm(forward) * np.linalg.norm(y)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def dct_gram_error(height: int = 16, width: int = 16, channels: int = 3) -> float:
    basis = dct2_basis(height, width, channels, min(height, width))
    flat = basis.reshape(basis.shape[0], -1)
    return float(np.max(np.abs(flat @ flat.T - np.eye(flat.shape[0]))))


def svd_error(seed: int = 0) -> float:
    m = RandomStream(seed).normal(1.0, (40, 12))
    u, s, v = thin_svd(m)
    reconstruction = np.linalg.norm(u @ np.diag(s) @ v.T - m) / np.linalg.norm(m)
    orthogonality = max(
        np.max(np.abs(u.T @ u - np.eye(u.shape[1]))),
        np.max(np.abs(v.T @ v - np.eye(v.shape[1]))),
    )
    return float(max(reconstruction, orthogonality))


def coimage_rank_ratio(seed: int = 0, directions: int = 30) -> float:
    """Relative singular value just past ``C`` of stacked ODS directions at one point."""
    stream = RandomStream(seed)
    model = ScoreModel.build(parse_architecture("mlp"), (32, 32, 3), 10, seed)
    x = stream.uniform(0.0, 1.0, model.input_size)
    stacked = np.stack(
        [ods_direction(model, x, stream) for _ in range(directions)], axis=1
    )
    _, s, _ = thin_svd(stacked)
    if s.size <= model.num_classes:
        return 0.0
    return float(s[model.num_classes] / s[0])


def projection_error(seed: int = 0, points: int = 10000, dim: int = 20) -> float:
    """Worst of idempotence and ball-feasibility violations of ``project_to_ball``."""
    stream = RandomStream(seed)
    center = stream.normal(1.0, dim)
    nu = 0.5
    worst = 0.0
    for x in stream.normal(2.0, (points, dim)):
        once = project_to_ball(x + center, center, nu)
        twice = project_to_ball(once, center, nu)
        excess = max(0.0, np.linalg.norm(once - center) - nu * (1 + 1e-9))
        worst = max(worst, float(np.max(np.abs(twice - once))), excess)
    return worst


def check_model_file(filename: PathLike) -> None:
    model = load_model(filename)
    scores = model.forward_scores(np.zeros(model.input_size))
    if not np.all(np.isfinite(scores)):
        raise GfcsError(f"non-finite scores from {filename}")


_NUMERIC_CHECKS: List[Tuple[str, Callable[[int], float], float]] = [
    ("resize-adjoint", adjoint_error, 1e-6),
    ("dct-orthonormal", lambda seed: dct_gram_error(), 1e-9),
    ("svd-reconstruction", svd_error, 1e-8),
    ("coimage-rank", coimage_rank_ratio, 1e-6),
    ("projection", projection_error, 1e-12),
]


def run_selfcheck(model_files: Iterable[PathLike] = (), seed: int = 0) -> List[CheckResult]:
    results = check_gradients(seed)
    for name, check, tolerance in _NUMERIC_CHECKS:
        error = check(seed)
        results.append(CheckResult(name, error <= tolerance, error, tolerance))
    for filename in model_files:
        name = f"model-load[{filename}]"
        try:
            check_model_file(filename)
        except (GfcsError, OSError) as e:
            results.append(CheckResult(name, False, float("nan"), 0.0, str(e)))
        else:
            results.append(CheckResult(name, True, 0.0, 0.0))
    for result in results:
        logger.debug(
            "%s: error %.3e (tolerance %.1e)", result.name, result.error, result.tolerance
        )
    return results


__all__ = ["CheckResult", "gradient_error", "run_selfcheck"]
