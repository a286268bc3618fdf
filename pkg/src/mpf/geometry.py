"""Affine charts of linear observation constraints.

Two charts are built for an observation ``y = A x + delta**0.5 * eps``:

* the reduced chart ``u*(z) = x* + V z`` of ``{x : A x = y}``, with ``z`` of
  dimension ``d_x - d_y``;
* the extended chart ``u(z~) = (x*, 0) + V_delta z~`` of
  ``{(x, eps) : A x + delta**0.5 eps = y}``, with ``z~`` of dimension ``d_x``.

The extended basis is built so that, column by column, it converges to
``[[V, 0], [0, I]]`` as ``delta -> 0``. The first ``d_x - d_y`` chart
coordinates therefore play the role of the reduced coordinate and the last
``d_y`` ones become the observation noise itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mpf.errors import RankDeficiencyError

RANK_RTOL = 1e-10


def _checked_svd(A, time_index=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d_y, d_x = A.shape
    if not 1 <= d_y < d_x:
        raise ValueError(f"need 1 <= d_y < d_x, got A of shape {A.shape}")
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    if s[-1] <= RANK_RTOL * s[0]:
        raise RankDeficiencyError(
            f"observation matrix is rank deficient (singular values {s})", time_index
        )
    return A, U, s, Vt


def _fix_signs(basis):
    # first entry of each column with |v| > tol made positive
    out = basis.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def min_norm_solution(A, y, time_index=None):
    """Minimum Euclidean norm solution of ``A x = y``."""
    A, U, s, Vt = _checked_svd(A, time_index)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d_y = A.shape[0]
    return Vt[:d_y].T @ ((U.T @ y) / s)


def kernel_basis(A, time_index=None):
    """Orthonormal basis of ``ker(A)`` as a ``d_x x (d_x - d_y)`` matrix.

    The basis comes from the full SVD of ``A``; each column is then flipped
    so that its first nonzero entry is positive, which makes the result
    reproducible.
    """
    A, _, _, Vt = _checked_svd(A, time_index)
    return _fix_signs(Vt[A.shape[0]:].T)


def noise_block(A, delta):
    """The ``d_y`` extra kernel columns of ``[A, delta**0.5 I]``.

    Returns ``(state_rows, noise_rows)`` where the columns of
    ``[state_rows; noise_rows]`` are orthonormal, annihilated by
    ``[A, delta**0.5 I]`` and orthogonal to ``[V; 0]``. The columns are
    ``[-sqrt(delta) A^T (A A^T)^-1; I]`` orthonormalized symmetrically, so
    ``noise_rows -> I`` and ``state_rows -> 0`` as ``delta -> 0``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    gram_inv = np.linalg.inv(A @ A.T)
    gram_inv = 0.5 * (gram_inv + gram_inv.T)
    evals, evecs = np.linalg.eigh(gram_inv)
    inv_sqrt = (evecs / np.sqrt(1.0 + delta * evals)) @ evecs.T
    state_rows = -np.sqrt(delta) * (A.T @ gram_inv) @ inv_sqrt
    return state_rows, inv_sqrt


def extended_kernel_basis(A, delta, time_index=None):
    """Orthonormal basis of ``ker([A, delta**0.5 I])``, shape ``(d_x+d_y) x d_x``.

    Columns ``0 .. d_x-d_y-1`` are ``[V; 0]`` with ``V = kernel_basis(A)``; the
    remaining ``d_y`` columns come from :func:`noise_block`.
    """
    if not delta > 0:
        raise ValueError("extended_kernel_basis needs delta > 0; use kernel_basis for delta = 0")
    V = kernel_basis(A, time_index)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d_y, d_x = A.shape
    state_rows, noise_rows = noise_block(A, delta)
    top = np.hstack([V, state_rows])
    bottom = np.hstack([np.zeros((d_y, d_x - d_y)), noise_rows])
    return np.vstack([top, bottom])


@dataclass(frozen=True)
class AffineChart:
    """Affine parameterization ``u(z) = base_point + basis @ z``.

    ``extended_matrix @ u(z) == y`` for every ``z``. For a reduced chart the
    extended matrix is ``A``; for an extended chart it is
    ``[A, delta**0.5 I]``.
    """

    base_point: np.ndarray
    basis: np.ndarray
    extended_matrix: np.ndarray
    y: np.ndarray
    delta: float
    d_x: int

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def is_extended(self) -> bool:
        return self.ambient_dim > self.d_x

    @property
    def state_basis(self) -> np.ndarray:
        """Rows of the basis acting on the hidden state."""
        return self.basis[: self.d_x]

    @property
    def noise_basis(self) -> np.ndarray:
        """Rows of the basis acting on the observation noise (extended charts)."""
        return self.basis[self.d_x:]

    @property
    def state_base(self) -> np.ndarray:
        return self.base_point[: self.d_x]

    def to_dict(self) -> dict:
        return {
            "base_point": self.base_point.tolist(),
            "basis": self.basis.tolist(),
            "extended_matrix": self.extended_matrix.tolist(),
            "y": self.y.tolist(),
            "delta": self.delta,
            "d_x": self.d_x,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AffineChart":
        return cls(
            base_point=np.asarray(data["base_point"], dtype=float),
            basis=np.asarray(data["basis"], dtype=float),
            extended_matrix=np.asarray(data["extended_matrix"], dtype=float),
            y=np.asarray(data["y"], dtype=float),
            delta=float(data["delta"]),
            d_x=int(data["d_x"]),
        )


def degenerate_chart(A, y, time_index=None) -> AffineChart:
    """Reduced chart of ``{x : A x = y}``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return AffineChart(
        base_point=min_norm_solution(A, y, time_index),
        basis=kernel_basis(A, time_index),
        extended_matrix=A,
        y=y,
        delta=0.0,
        d_x=A.shape[1],
    )


def extended_chart(A, y, delta, time_index=None) -> AffineChart:
    """Extended chart of ``{(x, eps) : A x + delta**0.5 eps = y}``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d_y, d_x = A.shape
    x_star = min_norm_solution(A, y, time_index)
    return AffineChart(
        base_point=np.concatenate([x_star, np.zeros(d_y)]),
        basis=extended_kernel_basis(A, delta, time_index),
        extended_matrix=np.hstack([A, np.sqrt(delta) * np.eye(d_y)]),
        y=y,
        delta=float(delta),
        d_x=d_x,
    )


def make_chart(A, y, delta, time_index=None) -> AffineChart:
    """Extended chart when ``delta > 0``, reduced chart when ``delta == 0``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return degenerate_chart(A, y, time_index)
    return extended_chart(A, y, delta, time_index)


def chart_map(chart: AffineChart, z):
    """Evaluate ``base_point + basis @ z`` for one point or a batch of rows."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != chart.dim:
        raise ValueError(f"chart has dimension {chart.dim}, got z of shape {z.shape}")
    return chart.base_point + z @ chart.basis.T


def chart_state(chart: AffineChart, z):
    """Hidden-state part of :func:`chart_map` (the whole point for reduced charts)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != chart.dim:
        raise ValueError(f"chart has dimension {chart.dim}, got z of shape {z.shape}")
    return chart.state_base + z @ chart.state_basis.T


def chart_coords(chart: AffineChart, u):
    """Inverse of :func:`chart_map` for points on the chart (orthonormal basis)."""
    return (np.asarray(u, dtype=float) - chart.base_point) @ chart.basis


def split_extended(u, d_x):
    """Split rows of a vector or matrix into ``(first d_x, remainder)``."""
    u = np.asarray(u)
    return u[:d_x], u[d_x:]
