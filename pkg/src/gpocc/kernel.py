"""Matérn-1/2 kernel and exact GP conditioning on small dense problems.

The kernel is deliberately fixed: with ``k(d) = exp(-d / l)`` the
exponential product rule ``k(a) k(b) = k(a + b)`` holds, which is what
lets a scaled kernel act as a field-of-view shaped prior mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

MAX_JITTER_RETRIES = 3


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


class NumericalFailure(RuntimeError):
    """Factorization failed even after jitter escalation."""

    def __init__(self, message, *, n=None, jitter=None, min_diag=None, cond_estimate=None, location=None):
        super().__init__(message)
        self.n = n
        self.jitter = jitter
        self.min_diag = min_diag
        self.cond_estimate = cond_estimate
        self.location = location

    def with_location(self, location):
        err = NumericalFailure(
            f"{self.args[0]} (query at {tuple(location)})",
            n=self.n,
            jitter=self.jitter,
            min_diag=self.min_diag,
            cond_estimate=self.cond_estimate,
            location=tuple(location),
        )
        return err


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float = 0.3
    jitter: float = 1e-10
    # Unscaled kernel: k(x, x) == 1. Kept as a field only so it is echoed in configs.
    signal_variance: float = 1.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ContractViolation(f"lengthscale must be > 0, got {self.lengthscale}")
        if self.jitter < 0:
            raise ContractViolation(f"jitter must be >= 0, got {self.jitter}")
        if self.signal_variance != 1.0:
            raise ContractViolation("the kernel is unscaled; signal_variance must be 1")


@dataclass(frozen=True)
class Posterior:
    mean: float
    variance: float


def matern_half(distance, params: KernelParams):
    """exp(-distance / l); accepts scalars or arrays of non-negative distances."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ContractViolation("kernel distance must be non-negative")
    out = np.exp(-d / params.lengthscale)
    return float(out) if out.ndim == 0 else out


def pairwise_distances(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return cdist(a, b)


def kernel_matrix(a, b, params: KernelParams):
    return np.exp(-pairwise_distances(a, b) / params.lengthscale)


class SPDFactor:
    """Cholesky factor of an SPD matrix, reusable across right-hand sides."""

    def __init__(self, matrix, jitter=1e-10, max_retries=MAX_JITTER_RETRIES, check_symmetric=True):
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractViolation(f"expected a square matrix, got shape {a.shape}")
        if check_symmetric and a.size and np.max(np.abs(a - a.T)) > 1e-12:
            raise ContractViolation("matrix is not symmetric within 1e-12")
        n = a.shape[0]
        current = jitter
        for _ in range(max_retries + 1):
            shifted = a.copy()
            shifted.flat[:: n + 1] += current
            try:
                self._cf = (np.linalg.cholesky(shifted), True)
                self.jitter = current
                self.n = n
                return
            except np.linalg.LinAlgError:
                current = current * 2.0 if current > 0 else 1e-12
        diag = np.diag(a) if n else np.array([np.nan])
        try:
            cond = float(np.linalg.cond(a))
        except np.linalg.LinAlgError:
            cond = float("inf")
        raise NumericalFailure(
            f"Cholesky failed for {n}x{n} matrix after {max_retries} jitter doublings "
            f"(final jitter {current / 2:.3g}, cond ~ {cond:.3g})",
            n=n,
            jitter=current / 2,
            min_diag=float(np.min(diag)),
            cond_estimate=cond,
        )

    @classmethod
    def from_lower(cls, lower, jitter):
        """Wrap an already computed lower Cholesky factor."""
        self = cls.__new__(cls)
        self._cf = (lower, True)
        self.jitter = jitter
        self.n = lower.shape[0]
        return self

    @property
    def lower(self):
        return self._cf[0]

    def solve(self, rhs):
        return cho_solve(self._cf, np.asarray(rhs, dtype=float), check_finite=False)

    def half_solve(self, rhs):
        """L^{-1} rhs, used for variances: k^T A^{-1} k = |L^{-1} k|^2."""
        return solve_triangular(self._cf[0], np.asarray(rhs, dtype=float), lower=True, check_finite=False)


def solve_spd(matrix, rhs, jitter=1e-10):
    return SPDFactor(matrix, jitter=jitter).solve(rhs)


@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    noise_sigma2: float = 1e-6

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float)) if len(self.inputs) else np.zeros((0, 1))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if len(self.inputs) != len(self.targets):
            raise ContractViolation("inputs and targets differ in length")
        if self.noise_sigma2 < 0:
            raise ContractViolation("noise variance must be >= 0")

    def unique_indices(self, tol=1e-9):
        """Indices of inputs kept when near-duplicates (within ``tol``) are dropped; first one wins."""
        n = len(self.inputs)
        if n < 2:
            return list(range(n))
        d = pairwise_distances(self.inputs, self.inputs)
        np.fill_diagonal(d, np.inf)
        if d.min() > tol:
            return list(range(n))
        keep = []
        for i in range(n):
            if not any(d[i, j] <= tol for j in keep):
                keep.append(i)
        return keep

    def deduplicated(self, tol=1e-9):
        keep = self.unique_indices(tol)
        if len(keep) == len(self.inputs):
            return self
        return TrainingSet(self.inputs[keep], self.targets[keep], self.noise_sigma2)


class ConditionedGP:
    """A factorized training set ready to answer posterior queries in bulk.

    ``prior_at_inputs`` are the prior mean values m(X) so callers can compute
    them in a vectorized way once per training set.
    """

    def __init__(self, train: TrainingSet, prior_at_inputs, params: KernelParams, distances=None):
        self.params = params
        self.inputs = train.inputs
        if distances is None:
            distances = pairwise_distances(train.inputs, train.inputs)
        gram = np.exp(-distances / params.lengthscale)
        gram.flat[:: len(gram) + 1] += train.noise_sigma2
        self.factor = SPDFactor(gram, jitter=params.jitter, check_symmetric=False)
        residual = train.targets - np.asarray(prior_at_inputs, dtype=float).reshape(-1)
        self.alpha = self.factor.solve(residual)

    @classmethod
    def from_factor(cls, inputs, factor: SPDFactor, alpha, params: KernelParams):
        self = cls.__new__(cls)
        self.params = params
        self.inputs = inputs
        self.factor = factor
        self.alpha = alpha
        return self

    def predict(self, queries, prior_at_queries):
        """Posterior mean and variance arrays at ``queries`` (m x D)."""
        ks = kernel_matrix(queries, self.inputs, self.params)
        mean = np.asarray(prior_at_queries, dtype=float) + ks @ self.alpha
        v = self.factor.half_solve(ks.T)
        var = 1.0 - np.einsum("ij,ij->j", v, v)
        return mean, np.clip(var, 0.0, None)


def gp_posterior(query, train: TrainingSet, prior_mean: Callable, params: KernelParams) -> Posterior:
    """Posterior of f(query) under GP(prior_mean, exp(-d/l)) given ``train``."""
    q = np.atleast_1d(np.asarray(query, dtype=float))
    if len(train.targets) == 0:
        return Posterior(float(prior_mean(q)), 1.0)
    train = train.deduplicated()
    prior_x = np.array([prior_mean(x) for x in train.inputs], dtype=float)
    gp = ConditionedGP(train, prior_x, params)
    mean, var = gp.predict(q[None, :], [prior_mean(q)])
    return Posterior(float(mean[0]), float(var[0]))
