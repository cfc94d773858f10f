"""Shared numerical primitives.

Vectors are 1-D ``float64`` arrays. Image-shaped data (grids) are ``(H, W, C)``
arrays whose row-major flattening is the vector view used everywhere else.
"""
from __future__ import annotations

from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy import fft

from .errors import InvalidInputError, NumericalFailureError

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
Shape = Tuple[int, ...]

SVD_MAX_SWEEPS = 100
SVD_TOLERANCE = 1e-12


class RandomStream:
    """Seeded source of randomness backed by the counter-based Philox generator.

    Philox output depends only on the seed and the number of draws, so
    identical seeds yield identical sequences on every platform.
    """

    def __init__(self, seed: int):
        if not 0 <= seed < 2**64:
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer: {seed!r}")
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.Philox(self.seed))

    def uniform(
        self, low: float = 0.0, high: float = 1.0, size: Union[int, Shape, None] = None
    ):
        return self._generator.uniform(low, high, size)

    def normal(self, scale: float = 1.0, size: Union[int, Shape, None] = None):
        return self._generator.normal(0.0, scale, size)

    def integers(
        self, low: int, high: Optional[int] = None, size: Union[int, Shape, None] = None
    ):
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> IntArray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> IntArray:
        return self._generator.choice(n, size=size, replace=replace)

    def child(self, index: int) -> RandomStream:
        return RandomStream(child_seed(self.seed, index))


def child_seed(master: int, index: int) -> int:
    state = np.random.SeedSequence(master, spawn_key=(index,)).generate_state(
        2, np.uint32
    )
    return int(state[0]) | (int(state[1]) << 32)


def as_vector(values: npt.ArrayLike, name: str = "vector") -> FloatArray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return v


def l2_norm(v: npt.ArrayLike) -> float:
    return float(np.linalg.norm(as_vector(v)))


def project_to_ball(x: npt.ArrayLike, center: npt.ArrayLike, nu: float) -> FloatArray:
    x = as_vector(x, "x")
    center = as_vector(center, "center")
    if x.shape != center.shape:
        raise InvalidInputError(
            f"length mismatch: point has {x.size} entries, center has {center.size}"
        )
    if not nu > 0:
        raise InvalidInputError(f"ball radius must be positive: {nu!r}")
    offset = x - center
    distance = np.linalg.norm(offset)
    if distance <= nu:
        return x
    return center + offset * (nu / distance)


def to_grid(v: npt.ArrayLike, shape: Sequence[int]) -> FloatArray:
    shape = tuple(shape)
    v = np.asarray(v, dtype=np.float64)
    if v.size != int(np.prod(shape)):
        raise InvalidInputError(f"cannot view {v.size} values as grid {shape}")
    return v.reshape(shape)


def from_grid(g: npt.ArrayLike) -> FloatArray:
    return np.asarray(g, dtype=np.float64).reshape(-1)


def _interpolation_matrix(n_in: int, n_out: int) -> FloatArray:
    # align_corners=False: output sample i sits at input coordinate
    # (i + 0.5) * n_in / n_out - 0.5, clamped to the edge pixels
    source = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    source = np.clip(source, 0.0, n_in - 1)
    lower = np.floor(source).astype(np.int64)
    upper = np.minimum(lower + 1, n_in - 1)
    weight = source - lower
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lower), 1.0 - weight)
    np.add.at(matrix, (rows, upper), weight)
    return matrix


def _check_grid(g: FloatArray, out_height: int, out_width: int) -> None:
    if g.ndim < 3:
        raise InvalidInputError(f"expected an (H, W, C) grid, got shape {g.shape}")
    if out_height < 1 or out_width < 1:
        raise InvalidInputError(
            f"output size must be positive: {out_height!r}x{out_width!r}"
        )


def bilinear_resize(g: npt.ArrayLike, out_height: int, out_width: int) -> FloatArray:
    g = np.asarray(g, dtype=np.float64)
    _check_grid(g, out_height, out_width)
    rows = _interpolation_matrix(g.shape[-3], out_height)
    cols = _interpolation_matrix(g.shape[-2], out_width)
    return np.einsum("ih,jw,...hwc->...ijc", rows, cols, g)


def bilinear_resize_adjoint(
    g: npt.ArrayLike, out_height: int, out_width: int
) -> FloatArray:
    """Transpose of ``bilinear_resize`` from an ``(out_height, out_width)`` grid.

    ``g`` lives on the resized grid; the result lives on the original one.
    """
    g = np.asarray(g, dtype=np.float64)
    _check_grid(g, out_height, out_width)
    rows = _interpolation_matrix(out_height, g.shape[-3])
    cols = _interpolation_matrix(out_width, g.shape[-2])
    return np.einsum("ih,jw,...ijc->...hwc", rows, cols, g)


def dct_frequencies(freq_count: int) -> List[Tuple[int, int]]:
    pairs = [(u, v) for u in range(freq_count) for v in range(freq_count)]
    return sorted(pairs, key=lambda uv: (uv[0] + uv[1], uv[0]))


def dct2_basis(height: int, width: int, channels: int, freq_count: int) -> FloatArray:
    """Lowest-frequency orthonormal 2-D DCT-II basis grids.

    Returns an array of shape ``(freq_count**2 * channels, H, W, C)`` ordered by
    increasing ``u + v``, ties broken by ``u`` and then by channel.
    """
    if not 1 <= freq_count <= min(height, width):
        raise InvalidInputError(
            f"frequency count must be in [1, {min(height, width)}]: {freq_count!r}"
        )
    elements = []
    for u, v in dct_frequencies(freq_count):
        coefficients = np.zeros((height, width))
        coefficients[u, v] = 1.0
        pattern = fft.idctn(coefficients, type=2, norm="ortho")
        for channel in range(channels):
            element = np.zeros((height, width, channels))
            element[:, :, channel] = pattern
            elements.append(element)
    return np.stack(elements)


def _round_robin(n: int) -> Iterator[Tuple[IntArray, IntArray]]:
    players = list(range(n + (n % 2)))
    m = len(players)
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(p, q) for p, q in pairs if p < n and q < n]
        if pairs:
            yield (
                np.array([p for p, _ in pairs], dtype=np.int64),
                np.array([q for _, q in pairs], dtype=np.int64),
            )
        players = [players[0], players[-1], *players[1:-1]]


def _jacobi_svd(a: FloatArray) -> Tuple[FloatArray, FloatArray]:
    # one-sided (Hestenes) Jacobi: rotate column pairs of `a` until mutually
    # orthogonal; the accumulated rotations form V
    n = a.shape[1]
    a = a.copy()
    v = np.eye(n)
    off = 0.0
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        rotated = False
        # columns this small relative to the largest are numerically zero
        negligible = (64 * np.finfo(np.float64).eps * np.linalg.norm(a, axis=0).max(
            initial=0.0
        )) ** 2
        for p, q in _round_robin(n):
            alpha = np.sum(a[:, p] ** 2, axis=0)
            beta = np.sum(a[:, q] ** 2, axis=0)
            gamma = np.sum(a[:, p] * a[:, q], axis=0)
            scale = np.sqrt(alpha * beta)
            active = (
                (np.minimum(alpha, beta) > negligible)
                & (scale > 0)
                & (np.abs(gamma) > SVD_TOLERANCE * scale)
            )
            if np.any(active):
                off = max(off, float(np.max(np.abs(gamma[active]) / scale[active])))
            else:
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta**2))
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = c * t
            for m in (a, v):
                mp, mq = m[:, p].copy(), m[:, q].copy()
                m[:, p] = c * mp - s * mq
                m[:, q] = s * mp + c * mq
        if not rotated:
            return a, v
    raise NumericalFailureError(
        f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps", residual=off
    )


def _complete_orthonormal(u: FloatArray, keep: npt.NDArray[np.bool_]) -> FloatArray:
    u = u.copy()
    basis = [u[:, j] for j in np.flatnonzero(keep)]
    candidates = iter(np.eye(u.shape[0]))
    for j in np.flatnonzero(~keep):
        for e in candidates:
            w = e - sum((b @ e) * b for b in basis) if basis else e.copy()
            norm = np.linalg.norm(w)
            if norm > 0.5:
                u[:, j] = w / norm
                basis.append(u[:, j])
                break
    return u


def thin_svd(m: npt.ArrayLike) -> Tuple[FloatArray, FloatArray, FloatArray]:
    """Thin SVD ``m = u @ diag(s) @ v.T`` of a ``D x k`` matrix with ``k <= D``.

    Reduced QR brings the problem down to the ``k x k`` triangular factor, which
    is diagonalized by one-sided Jacobi rotations.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {m.shape}")
    rows, cols = m.shape
    if cols > rows:
        raise InvalidInputError(f"thin SVD needs k <= D, got {rows}x{cols}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix contains non-finite values")
    q, r = np.linalg.qr(m, mode="reduced")
    a, v = _jacobi_svd(r)
    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]
    keep = s > s.max(initial=0.0) * 1e-13 if cols else np.zeros(0, dtype=bool)
    keep &= s > 0
    u_small = np.zeros_like(a)
    u_small[:, keep] = a[:, keep] / s[keep]
    u_small = _complete_orthonormal(u_small, keep)
    return q @ u_small, s, v


__all__ = [
    "FloatArray",
    "RandomStream",
    "bilinear_resize",
    "bilinear_resize_adjoint",
    "child_seed",
    "dct2_basis",
    "l2_norm",
    "project_to_ball",
    "thin_svd",
]
