"""Unit-norm search directions and the losses they are derived from."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, softmax

from .errors import (
    BasisExhaustedError,
    DegenerateDirectionError,
    InvalidInputError,
)
from .numerics import FloatArray, RandomStream, as_vector, dct2_basis, thin_svd

if TYPE_CHECKING:
    from .data import LabeledDataset
    from .models import Classifier

DEGENERATE_NORM = 1e-12

LOSSES = ("margin", "targeted-log")


@dataclass(frozen=True)
class ClassRanking:
    source: int
    target: int

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise InvalidInputError(f"source and target class coincide: {self.source}")


def argmax_excluding(scores: FloatArray, excluded: int) -> int:
    masked = np.array(scores, dtype=np.float64)
    masked[excluded] = -np.inf
    return int(np.argmax(masked))


def rank_classes(scores: npt.ArrayLike, target: Optional[int] = None) -> ClassRanking:
    """Top class and runner-up (untargeted), or best non-target class and ``target``.

    Ties go to the lowest class index.
    """
    scores = as_vector(scores, "scores")
    if scores.size < 2:
        raise InvalidInputError(f"need at least 2 class scores, got {scores.size}")
    if target is None:
        source = int(np.argmax(scores))
        return ClassRanking(source, argmax_excluding(scores, source))
    if not 0 <= target < scores.size:
        raise InvalidInputError(f"target class out of range: {target!r}")
    return ClassRanking(argmax_excluding(scores, target), int(target))


def margin_loss(scores: npt.ArrayLike, ranking: ClassRanking) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    return float(scores[ranking.target] - scores[ranking.source])


def targeted_log_loss(scores: npt.ArrayLike, target: int) -> float:
    """Log of the softmax probability of ``target``, stabilized by max-subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(scores[target] - logsumexp(scores))


def _normalized(grad: FloatArray) -> FloatArray:
    norm = float(np.linalg.norm(grad))
    if not norm >= DEGENERATE_NORM:
        raise DegenerateDirectionError(f"gradient norm too small: {norm!r}", norm)
    return grad / norm


def ods_direction(
    model: Classifier,
    x: npt.ArrayLike,
    stream: RandomStream,
    w: Optional[npt.ArrayLike] = None,
) -> FloatArray:
    """Normalized input gradient of a random weighting ``w ~ U(-1, 1)^C`` of the logits."""
    if w is None:
        w = stream.uniform(-1.0, 1.0, model.num_classes)
    return _normalized(model.weighted_input_gradient(x, w))


def loss_weights(
    model: Classifier, x: npt.ArrayLike, ranking: ClassRanking, loss: str = "margin"
) -> FloatArray:
    """Logit weighting whose input gradient is the gradient of ``loss`` at ``x``."""
    w = np.zeros(model.num_classes)
    if loss == "margin":
        w[ranking.target] += 1.0
        w[ranking.source] -= 1.0
    elif loss == "targeted-log":
        # d log p_t / d logits = e_t - softmax(logits)
        w -= softmax(model.forward_scores(x))
        w[ranking.target] += 1.0
    else:
        raise InvalidInputError(f"Unknown loss: {loss!r}")
    return w


def surrogate_loss_gradient(
    model: Classifier, x: npt.ArrayLike, ranking: ClassRanking, loss: str = "margin"
) -> FloatArray:
    return _normalized(
        model.weighted_input_gradient(x, loss_weights(model, x, ranking, loss))
    )


class DirectionSource:
    kind = ""

    def next_direction(self, x: FloatArray) -> FloatArray:
        raise NotImplementedError


class FixedBasisSource(DirectionSource):
    """Emits the rows of ``directions`` once each, in ``order``."""

    kind = "fixed-basis"

    def __init__(self, directions: FloatArray, order: Optional[npt.ArrayLike] = None):
        self.directions = np.asarray(directions, dtype=np.float64)
        self.order = (
            np.arange(len(self))
            if order is None
            else np.asarray(order, dtype=np.int64)
        )
        self.cursor = 0

    def __len__(self) -> int:
        return self.directions.shape[0]

    @property
    def remaining(self) -> int:
        return len(self.order) - self.cursor

    def _element(self, index: int) -> FloatArray:
        direction = self.directions[index]
        return direction / np.linalg.norm(direction)

    def next_direction(self, x: Optional[FloatArray] = None) -> FloatArray:
        if self.cursor >= len(self.order):
            raise BasisExhaustedError(
                f"all {len(self.order)} basis directions have been used"
            )
        direction = self._element(int(self.order[self.cursor]))
        self.cursor += 1
        return direction


class PixelBasisSource(FixedBasisSource):
    def __init__(self, dim: int, order: npt.ArrayLike):
        self.dim = dim
        super().__init__(np.zeros((0, dim)), order)

    def __len__(self) -> int:
        return self.dim

    def _element(self, index: int) -> FloatArray:
        direction = np.zeros(self.dim)
        direction[index] = 1.0
        return direction


class OdsSource(DirectionSource):
    """Fresh ODS directions from surrogates sampled with replacement."""

    kind = "ods"

    def __init__(self, surrogates: Sequence[Classifier], stream: RandomStream):
        if not surrogates:
            raise InvalidInputError("ODS sampling needs at least one surrogate")
        self.surrogates = list(surrogates)
        self.stream = stream
        self.last_surrogate = -1

    def next_direction(self, x: FloatArray) -> FloatArray:
        self.last_surrogate = int(self.stream.integers(0, len(self.surrogates)))
        return ods_direction(self.surrogates[self.last_surrogate], x, self.stream)


def pixel_basis(dim: int, stream: RandomStream) -> PixelBasisSource:
    if dim < 1:
        raise InvalidInputError(f"dimension must be positive: {dim!r}")
    return PixelBasisSource(dim, stream.permutation(dim))


def dct_basis_source(
    height: int,
    width: int,
    channels: int,
    freq_count: int,
    stream: Optional[RandomStream] = None,
    order: str = "random",
) -> FixedBasisSource:
    basis = dct2_basis(height, width, channels, freq_count)
    basis = basis.reshape(basis.shape[0], -1)
    if order == "random":
        if stream is None:
            raise InvalidInputError("random DCT order needs a random stream")
        return FixedBasisSource(basis, stream.permutation(basis.shape[0]))
    if order == "low-frequency-first":
        return FixedBasisSource(basis)
    raise InvalidInputError(f"Unknown DCT order: {order!r}")


def pca_gradient_basis(
    surrogate: Classifier,
    sample_inputs: npt.ArrayLike,
    k: int,
    stream: RandomStream,
    sample_count: Optional[int] = None,
) -> FixedBasisSource:
    """Principal directions of surrogate class-score gradients over sample inputs.

    Each sample contributes the normalized gradient of a class chosen uniformly
    among those the surrogate does not rank first; the left singular vectors of
    the stacked gradients are emitted by decreasing singular value.
    """
    samples = np.asarray(sample_inputs, dtype=np.float64).reshape(
        -1, surrogate.input_size
    )
    samples = samples[: 2 * k if sample_count is None else sample_count]
    if not 1 <= k <= len(samples):
        raise InvalidInputError(f"k must be in [1, {len(samples)}]: {k!r}")
    columns = []
    for x in samples:
        top = int(np.argmax(surrogate.forward_scores(x)))
        draw = int(stream.integers(0, surrogate.num_classes - 1))
        chosen = draw if draw < top else draw + 1
        w = np.zeros(surrogate.num_classes)
        w[chosen] = 1.0
        columns.append(_normalized(surrogate.weighted_input_gradient(x, w)))
    u, _, _ = thin_svd(np.stack(columns, axis=1))
    return FixedBasisSource(u[:, :k].T)


def image_pca_basis(data: LabeledDataset, k: int) -> FixedBasisSource:
    """Top-``k`` principal components of the (mean-centered) dataset inputs."""
    centered = data.inputs - data.inputs.mean(axis=0)
    count, dim = centered.shape
    if not 1 <= k <= min(count, dim):
        raise InvalidInputError(f"k must be in [1, {min(count, dim)}]: {k!r}")
    if count <= dim:
        u, _, _ = thin_svd(centered.T)
        components = u[:, :k].T
    else:
        _, _, v = thin_svd(centered)
        components = v[:, :k].T
    return FixedBasisSource(components)


__all__ = [
    "ClassRanking",
    "DirectionSource",
    "FixedBasisSource",
    "LOSSES",
    "OdsSource",
    "PixelBasisSource",
    "dct_basis_source",
    "image_pca_basis",
    "margin_loss",
    "ods_direction",
    "pca_gradient_basis",
    "pixel_basis",
    "rank_classes",
    "surrogate_loss_gradient",
    "targeted_log_loss",
]
