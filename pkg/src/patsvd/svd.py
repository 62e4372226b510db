"""Singular value decomposition of the system matrix and spectral regularization.

Orientation convention used throughout::

    A x = sum_i sigma_i <v_i, x> u_i

with ``v_i`` in coefficient space (columns of ``V``, length ``N^2``) and
``u_i`` in data space (columns of ``U``, length ``Nt * Ns``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class FactorizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``A = U diag(sigma) V^T`` restricted to the numerical rank."""

    sigma: np.ndarray  # (r,)
    U: np.ndarray  # (data, r)
    V: np.ndarray  # (coeff, r)
    rank_cutoff: float = 1e-12
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        r = len(self.sigma)
        if self.U.shape[1] != r or self.V.shape[1] != r:
            raise ValueError("factor shapes are inconsistent with the number of singular values")
        if r > 1 and np.any(np.diff(self.sigma) > 0):
            raise ValueError("singular values must be sorted non-increasingly")

    @property
    def rank(self) -> int:
        return len(self.sigma)

    @property
    def data_dim(self) -> int:
        return self.U.shape[0]

    @property
    def coeff_dim(self) -> int:
        return self.V.shape[0]

    def kept(self, policy: "TruncationPolicy") -> int:
        return policy.kept_count(self.sigma)

    def matrix(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep components with ``sigma_i^2 >= threshold``."""

    threshold: float

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")

    def kept_count(self, sigma) -> int:
        return int(np.count_nonzero(np.asarray(sigma) ** 2 >= self.threshold))

    @classmethod
    def keep(cls, factors: SvdFactors, count: int) -> "TruncationPolicy":
        """Policy that keeps exactly the ``count`` largest singular values."""
        s2 = factors.sigma**2
        if count < 0 or count > len(s2):
            raise ValueError(f"kept count must lie in [0, {len(s2)}], got {count}")
        return cls(float(_cut_thresholds(s2)[count]))


def _cut_thresholds(s2):
    """Threshold ``c_k`` such that exactly ``k`` values satisfy ``s2 >= c_k``, for ``k = 0..r``.

    ``c_0`` lies above ``s2[0]``; ``c_k`` for ``k >= 1`` is the geometric mean of
    neighbours (or ``s2[k-1]`` itself when there is no smaller neighbour or they tie).
    """
    r = len(s2)
    c = np.empty(r + 1)
    c[0] = 2.0 * s2[0] if r else 1.0
    for k in range(1, r + 1):
        lo = s2[k] if k < r else 0.0
        c[k] = np.sqrt(s2[k - 1] * lo) if lo > 0 and lo < s2[k - 1] else s2[k - 1]
    return c


def _entries(A):
    return getattr(A, "entries", A)


def svd_factorize(A, rank_cutoff: float = 1e-12, backend: str = "deterministic",
                  rank: int | None = None, oversample: int = 10, power_iterations: int = 2,
                  seed: int = 0) -> SvdFactors:
    """Thin SVD of ``A`` with directions ``sigma_i <= rank_cutoff * sigma_1`` discarded.

    ``backend="randomized"`` uses a Gaussian sketch of width ``rank + oversample``
    with ``power_iterations`` subspace iterations (``rank`` defaults to the
    smaller matrix dimension).
    """
    M = np.asarray(_entries(A), dtype=float)
    if not 0 <= rank_cutoff < 1:
        raise ValueError(f"rank_cutoff must lie in [0, 1), got {rank_cutoff}")
    if not np.isfinite(M).all():
        raise ValueError("matrix has non-finite entries")
    if backend == "deterministic":
        try:
            U, s, Vt = np.linalg.svd(M, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"LAPACK SVD (gesdd) failed: {exc}") from exc
    elif backend == "randomized":
        U, s, Vt = _randomized_svd(M, rank or min(M.shape), oversample, power_iterations, seed)
    else:
        raise ValueError(f"unknown SVD backend {backend!r}")
    if len(s) == 0 or s[0] == 0:
        r = 0
    else:
        r = int(np.count_nonzero(s > rank_cutoff * s[0]))
    U, s, V = U[:, :r], s[:r], Vt[:r].T
    # fix signs so the largest-magnitude entry of each v_i is positive
    flip = np.sign(V[np.abs(V).argmax(axis=0), np.arange(r)])
    flip[flip == 0] = 1.0
    U = U * flip
    V = V * flip
    meta = {"backend": backend, "shape": list(M.shape)}
    return SvdFactors(np.ascontiguousarray(s), np.ascontiguousarray(U), np.ascontiguousarray(V),
                      rank_cutoff, meta)


def _randomized_svd(M, rank, oversample, power_iterations, seed):
    m, n = M.shape
    width = min(rank + oversample, min(m, n))
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(M @ rng.standard_normal((n, width)))[0]
    try:
        for _ in range(power_iterations):
            Q = np.linalg.qr(M.T @ Q)[0]
            Q = np.linalg.qr(M @ Q)[0]
        Ub, s, Vt = np.linalg.svd(Q.T @ M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"randomized SVD failed in the range-finder stage: {exc}") from exc
    k = min(rank, width)
    return (Q @ Ub)[:, :k], s[:k], Vt[:k]


def _check_data(F: SvdFactors, y):
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != F.data_dim:
        raise ValueError(f"data length {y.shape[-1]} does not match {F.data_dim}")
    return y


def _check_coeff(F: SvdFactors, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != F.coeff_dim:
        raise ValueError(f"coefficient length {x.shape[-1]} does not match {F.coeff_dim}")
    return x


def _spectral_apply(F, y, k):
    # works for a single vector (d,) or a batch (M, d)
    coef = (y @ F.U[:, :k]) / F.sigma[:k]
    return coef @ F.V[:, :k].T


def pseudo_inverse_apply(F: SvdFactors, y) -> np.ndarray:
    """``A^+ y = sum_i <u_i, y> / sigma_i v_i`` over the retained rank."""
    return _spectral_apply(F, _check_data(F, y), F.rank)


def tsvd_apply(F: SvdFactors, policy: TruncationPolicy, y) -> np.ndarray:
    """Truncated SVD reconstruction ``B_alpha y`` (only ``sigma_i^2 >= alpha``)."""
    return _spectral_apply(F, _check_data(F, y), F.kept(policy))


def complement_project(F: SvdFactors, policy: TruncationPolicy, z) -> np.ndarray:
    """Orthogonal projection onto the complement of ``span{v_i : sigma_i^2 >= alpha}``."""
    z = _check_coeff(F, z)
    Vk = F.V[:, :F.kept(policy)]
    return z - (z @ Vk) @ Vk.T


@dataclass
class StabilityReport:
    lhs: float
    rhs: float
    noise_level: float
    holds: bool


def stability_check(F: SvdFactors, policy: TruncationPolicy, x, noise) -> StabilityReport:
    """Evaluate both sides of ``|B y - A^+ A x| <= delta / sqrt(alpha) + |(A^+ - B) A x|``.

    ``y = A x + noise`` and ``delta = |noise|``; the matrix is taken from the factors.
    """
    x = _check_coeff(F, x)
    noise = _check_data(F, noise)
    Ax = F.U @ (F.sigma * (F.V.T @ x))
    delta = float(np.linalg.norm(noise))
    k = F.kept(policy)
    Bax = _spectral_apply(F, Ax, k)
    pinv_ax = _spectral_apply(F, Ax, F.rank)
    lhs = float(np.linalg.norm(_spectral_apply(F, Ax + noise, k) - pinv_ax))
    rhs = delta / np.sqrt(policy.threshold) + float(np.linalg.norm(pinv_ax - Bax))
    return StabilityReport(lhs, rhs, delta, lhs <= rhs * (1 + 1e-9))


@dataclass
class AlphaSelection:
    policy: TruncationPolicy
    kept: int
    scores: np.ndarray  # mean criterion per candidate kept count
    candidates: np.ndarray  # kept counts that were scored


def select_alpha(F: SvdFactors, phantoms, noise_fraction: float, candidates=None,
                 draws: int = 1, seed: int = 0) -> AlphaSelection:
    """Choose the truncation that balances noise amplification against truncation loss.

    For each candidate kept count ``k`` the score is the mean over phantoms and
    noise draws of ``|B(Ax + xi) - B(Ax)| + |x - B A x|``.  Candidates default
    to every cut point ``k = 0..r``; ties go to the smallest threshold (largest
    ``k``).  Noise uses the same model as the data pipeline: i.i.d. Gaussian
    with standard deviation ``noise_fraction * max(A x)``.
    """
    X = np.atleast_2d(_check_coeff(F, phantoms))
    if len(X) == 0:
        raise ValueError("select_alpha needs at least one validation phantom")
    r = F.rank
    ks = np.arange(r + 1) if candidates is None else np.asarray(sorted(set(candidates)), dtype=int)
    if ks.min() < 0 or ks.max() > r:
        raise ValueError(f"candidate kept counts must lie in [0, {r}]")
    rng = np.random.default_rng(seed)
    c = X @ F.V  # <v_i, x>, (M, r)
    Ax = (c * F.sigma) @ F.U.T
    # noise coefficients <u_i, xi> / sigma_i; the part of x outside span V is never recovered
    outside2 = np.maximum((X**2).sum(1) - (c**2).sum(1), 0.0)
    scores = np.zeros(len(ks))
    for _ in range(draws):
        std = noise_fraction * Ax.max(axis=1, keepdims=True)
        xi = rng.standard_normal(Ax.shape) * std
        nc = (xi @ F.U) / F.sigma  # (M, r)
        noise_cum = np.concatenate([np.zeros((len(X), 1)), np.cumsum(nc**2, axis=1)], axis=1)
        tail = np.concatenate([np.cumsum((c**2)[:, ::-1], axis=1)[:, ::-1], np.zeros((len(X), 1))],
                              axis=1)
        total = np.sqrt(noise_cum[:, ks]) + np.sqrt(tail[:, ks] + outside2[:, None])
        scores += total.mean(axis=0)
    scores /= draws
    # prefer more kept components on ties
    best = len(ks) - 1 - int(np.argmin(scores[::-1]))
    kept = int(ks[best])
    return AlphaSelection(TruncationPolicy.keep(F, kept), kept, scores, ks)


def optimal_tsvd(F: SvdFactors, y, x_true):
    """Oracle truncation minimizing ``|B_alpha y - x_true|`` over all ``r + 1`` cut points.

    Returns ``(policy, reconstruction)``; ties go to the largest kept count.
    """
    y = _check_data(F, y)
    x_true = _check_coeff(F, x_true)
    nc = (F.U.T @ y) / F.sigma
    c = F.V.T @ x_true
    outside2 = max(float(x_true @ x_true - c @ c), 0.0)
    # error^2(k) = sum_{i<k} (nc_i - c_i)^2 + sum_{i>=k} c_i^2 + |x_true outside span V|^2
    head = np.concatenate([[0.0], np.cumsum((nc - c) ** 2)])
    tail = np.concatenate([np.cumsum((c**2)[::-1])[::-1], [0.0]])
    err2 = head + tail + outside2
    k = len(err2) - 1 - int(np.argmin(err2[::-1]))
    policy = TruncationPolicy.keep(F, k)
    return policy, nc[:k] @ F.V[:, :k].T
