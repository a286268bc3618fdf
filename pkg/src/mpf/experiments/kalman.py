"""Kalman filter for the linear Gaussian model (exact reference)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mpf.errors import ConditioningError
from mpf.models import LOG_2PI


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray


def kalman_filter(B, Omega, A, Sigma, delta, ys, x0, P0=None):
    """Filter ``X_n = B X_{n-1} + N(0, Omega)``, ``Y_n = A X_n + delta**0.5 N(0, Sigma)``.

    ``x0`` is known exactly unless ``P0`` is given. For ``delta == 0`` the
    update conditions exactly on ``A x = y`` (Joseph form with a zero noise
    term, innovation covariance inverted by pseudo-inverse). Returns the list
    of filtering states and the log-likelihood of ``ys`` (for ``delta == 0``
    the density of ``A X_n`` at ``y_n``).
    """
    B = np.atleast_2d(B)
    A = np.atleast_2d(A)
    d_x = B.shape[0]
    m = np.asarray(x0, dtype=float)
    P = np.zeros((d_x, d_x)) if P0 is None else np.asarray(P0, dtype=float)
    R = delta * np.atleast_2d(Sigma)
    out, loglik = [], 0.0
    eye = np.eye(d_x)
    for y in np.atleast_2d(ys):
        m = B @ m
        P = B @ P @ B.T + Omega
        S = A @ P @ A.T + R
        S = 0.5 * (S + S.T)
        if delta > 0:
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise ConditioningError("innovation covariance is singular") from exc
            S_inv = np.linalg.inv(S)
            logdet = 2 * np.sum(np.log(np.diag(L)))
        else:
            S_inv = np.linalg.pinv(S)
            logdet = np.linalg.slogdet(S)[1]
        K = P @ A.T @ S_inv
        r = y - A @ m
        loglik += -0.5 * (r @ S_inv @ r + logdet + len(y) * LOG_2PI)
        m = m + K @ r
        IKA = eye - K @ A
        P = IKA @ P @ IKA.T + K @ R @ K.T
        P = 0.5 * (P + P.T)
        out.append(KalmanState(mean=m, covariance=P))
    return out, float(loglik)
