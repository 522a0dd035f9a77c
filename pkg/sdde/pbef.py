"""Prediction-based estimating functions.

H_i stacks X_{i:i+1-k} times the prediction error e_i and the centered squared
error e_i^2 - v_k. Everything here works with the (k+1)-vector H_i, the
sensitivity S (p x (k+1)) and the moment matrices M1, M2, Mbar = M1 + M2.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, block_diag, cho_factor, cho_solve

from data.simulator import SimConfig, sample_observations, simulate_path
from sdde.autocov import AutocovGrid, autocov_grid
from sdde.exceptions import (
    DataError,
    InsufficientGridError,
    NonIdentifiableError,
    SingularSystemError,
)
from sdde.likelihood import ObservationSeries, prediction_windows
from sdde.model import DelayModelSpec
from sdde.predictor import PredictorCoefficients

logger = logging.getLogger(__name__)

TRUNCATION_TOL = 1e-10
TRUNCATION_CAP = 200
CONDITION_LIMIT = 1e12

WeightTag = Literal["optimal", "pseudo", "custom"]


@dataclass(frozen=True)
class HTerm:
    i: int
    h: np.ndarray


@dataclass(frozen=True)
class M2Estimate:
    """M2 with its provenance: a truncation horizon J or a simulation size."""

    matrix: np.ndarray
    method: Literal["isserlis", "montecarlo", "zero"]
    J: Optional[int] = None
    tail_bound: float = float("nan")
    se: Optional[np.ndarray] = None
    nsim: Optional[int] = None
    lag_norms: tuple[float, ...] = ()


@dataclass(frozen=True)
class Sandwich:
    U: np.ndarray
    V: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class MomentMatrices:
    S: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    A: np.ndarray
    tag: WeightTag
    U: np.ndarray
    V: np.ndarray
    covariance: np.ndarray
    J: Optional[int] = None
    nsim: Optional[int] = None

    @property
    def Mbar(self) -> np.ndarray:
        return self.M1 + self.M2


@dataclass(frozen=True)
class EfficiencyLoss:
    loss: np.ndarray
    avar_opt: np.ndarray
    avar_pseudo: np.ndarray
    cov_opt: np.ndarray
    cov_pseudo: np.ndarray
    information_gap: np.ndarray


# ==========================================
# H-TERMS
# ==========================================
def h_matrix(data: Union[ObservationSeries, np.ndarray], coeffs: PredictorCoefficients) -> np.ndarray:
    """H_i as rows, i = k..n-1."""
    windows, errors = prediction_windows(data, coeffs)
    return np.hstack([windows * errors[:, None], (errors * errors - coeffs.v)[:, None]])


def h_terms(data: Union[ObservationSeries, np.ndarray], coeffs: PredictorCoefficients) -> list[HTerm]:
    return [HTerm(i=coeffs.k + row, h=h) for row, h in enumerate(h_matrix(data, coeffs))]


def _stack(hterms) -> np.ndarray:
    if isinstance(hterms, np.ndarray):
        return np.atleast_2d(hterms)
    return np.vstack([term.h for term in hterms])


def estimating_function(A: np.ndarray, hterms: Union[np.ndarray, Sequence[HTerm]]) -> np.ndarray:
    """G_n = A sum_i H_i."""
    H = _stack(hterms)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != H.shape[1]:
        raise DataError(f"weight matrix has {A.shape[1]} columns, H-terms have {H.shape[1]} entries")
    return A @ np.sum(H, axis=0)


# ==========================================
# SENSITIVITY AND M1
# ==========================================
def sensitivity(coeffs: PredictorCoefficients, Kmat: np.ndarray, strict: bool = False) -> np.ndarray:
    """S = -(dphi K_k, dv)."""
    if not coeffs.has_gradients:
        raise ValueError("sensitivity needs coefficients with parameter gradients")
    S = -np.hstack([coeffs.dphi @ Kmat, coeffs.dv[:, None]])
    p = S.shape[0]
    if coeffs.k + 1 < p or np.linalg.matrix_rank(S) < p:
        message = f"sensitivity has rank {np.linalg.matrix_rank(S)} < {p} at depth {coeffs.k}"
        if strict:
            raise NonIdentifiableError(message)
        logger.warning(message)
    return S


def m1(coeffs: PredictorCoefficients, Kmat: np.ndarray) -> np.ndarray:
    v = coeffs.v
    return block_diag(v * np.asarray(Kmat, dtype=float), np.array([[2 * v * v]]))


# ==========================================
# M2
# ==========================================
def _window_forms(coeffs: PredictorCoefficients) -> np.ndarray:
    """Rows map (X_{i+1}, X_i, ..., X_{i+1-k}) to (Y_0, ..., Y_{k-1}, e)."""
    k = coeffs.k
    forms = np.zeros((k + 1, k + 1))
    forms[np.arange(k), np.arange(1, k + 1)] = 1.0
    forms[k, 0] = 1.0
    forms[k, 1:] = -coeffs.phi
    return forms


def lag_moment(values: np.ndarray, forms: np.ndarray, j: int) -> np.ndarray:
    """Cov(H_i, H_{i+j}) by Isserlis, from K at lags 0..j+k."""
    k = forms.shape[0] - 1
    p, q = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    positions = values[np.abs(j + p - q)]
    C = forms @ positions @ forms.T
    # entries are U_a V_a with U = (Y, e), V = e
    return C * C[k, k] + np.outer(C[:, k], C[k, :])


def m2_isserlis(
    K: AutocovGrid,
    coeffs: PredictorCoefficients,
    J: Optional[int] = None,
    n: Optional[int] = None,
    tol: float = TRUNCATION_TOL,
    cap: int = TRUNCATION_CAP,
) -> M2Estimate:
    """sum_{j>=1} [E(H_k H_{k+j}^T) + E(H_{k+j} H_k^T)], optionally with finite-n weights."""
    k = coeffs.k
    values = np.asarray(K.values, dtype=float)
    forms = _window_forms(coeffs)
    scale = np.max(np.abs(lag_moment(values, forms, 0)))
    if J is not None:
        K.require(k + J)
        horizon = J
    else:
        horizon = min(cap, K.m - k)
    if n is not None:
        horizon = min(horizon, n - k - 1)

    total = np.zeros((k + 1, k + 1))
    norms, sizes = [], []
    used, settled = 0, J is not None
    for j in range(1, horizon + 1):
        term = lag_moment(values, forms, j)
        weight = 1.0 if n is None else (n - k - j) / (n - k)
        total += weight * (term + term.T)
        size = np.max(np.abs(term))
        sizes.append(size)
        norms.append(float(np.linalg.norm(term, 2)))
        used = j
        if J is None and size < tol * scale:
            settled = True
            break
    if not settled:
        exhausted = n is not None and horizon >= n - k - 1
        if not exhausted and horizon < cap:
            raise InsufficientGridError(
                f"M2 terms still above {tol:.0e} relative after lag {horizon}; extend the grid"
            )
        if not exhausted:
            logger.warning("M2 truncated at the cap J=%d with last term %.3g", horizon, sizes[-1])

    tail = float("nan")
    if len(sizes) >= 2 and 0 < sizes[-1] < sizes[-2]:
        ratio = sizes[-1] / sizes[-2]
        tail = 2 * sizes[-1] * ratio / (1 - ratio)
    elif len(sizes) >= 1 and sizes[-1] == 0:
        tail = 0.0
    return M2Estimate(
        matrix=0.5 * (total + total.T),
        method="isserlis",
        J=used,
        tail_bound=tail,
        lag_norms=tuple(norms),
    )


def m2_from_hterm_batches(batches: Iterable[np.ndarray], M1: np.ndarray) -> M2Estimate:
    """Mbar_n by the empirical second moment of scaled H-sums, one sum per batch."""
    sums = []
    for batch in batches:
        H = _stack(batch)
        sums.append(np.sum(H, axis=0) / np.sqrt(len(H)))
    sums = np.array(sums)
    if len(sums) < 2:
        raise DataError("at least two independent H-term batches are required")
    products = sums[:, :, None] * sums[:, None, :]
    mbar = products.mean(axis=0)
    se = products.std(axis=0, ddof=1) / np.sqrt(len(sums))
    logger.debug("Monte Carlo M2 from %d batches", len(sums))
    return M2Estimate(matrix=mbar - M1, method="montecarlo", se=se, nsim=len(sums))


def _replicate_hterms(model, coeffs, n_obs, step, seed, replicate, warmup):
    config = SimConfig(
        model=model,
        step=step,
        horizon=n_obs * coeffs.delta,
        warmup=warmup,
        seed=seed,
        replicate=(replicate,),
    )
    series = sample_observations(simulate_path(config), coeffs.delta, n_obs)
    return h_matrix(series, coeffs)


def m2_montecarlo(
    model: DelayModelSpec,
    coeffs: PredictorCoefficients,
    k: int,
    nsim: int,
    seed: int,
    n_obs: int = 500,
    step: float = 0.01,
    threads: int = 1,
    warmup: Optional[float] = None,
) -> M2Estimate:
    """Simulate nsim independent series of n_obs observations and estimate Mbar_n - M1."""
    if k != coeffs.k:
        raise ValueError(f"coefficients have depth {coeffs.k}, not {k}")
    if coeffs.delta is None:
        raise ValueError("coefficients must carry their sampling interval")
    Kmat = autocov_grid(model, coeffs.delta, k).toeplitz(k)
    jobs = Parallel(n_jobs=threads, return_as="generator")(
        delayed(_replicate_hterms)(model, coeffs, n_obs, step, seed, r, warmup)
        for r in range(nsim)
    )
    return m2_from_hterm_batches(jobs, m1(coeffs, Kmat))


# ==========================================
# WEIGHTS AND SANDWICH
# ==========================================
def weights(S: np.ndarray, M: np.ndarray) -> np.ndarray:
    """A = -S M^{-1}."""
    try:
        factor = cho_factor(np.asarray(M, dtype=float), lower=True)
    except LinAlgError as e:
        raise SingularSystemError("moment matrix is not positive definite") from e
    return -cho_solve(factor, np.atleast_2d(S).T).T


def sandwich(A: np.ndarray, S: np.ndarray, Mbar: np.ndarray) -> Sandwich:
    """U = S A^T, V = A Mbar A^T and the limit covariance U^{-1} V U^{-T}."""
    A = np.atleast_2d(A)
    U = np.atleast_2d(S) @ A.T
    if not np.all(np.isfinite(U)) or np.linalg.cond(U) > CONDITION_LIMIT:
        raise NonIdentifiableError("U = S A^T is singular; the weights do not identify theta")
    V = A @ Mbar @ A.T
    left = np.linalg.solve(U, V)
    covariance = np.linalg.solve(U, left.T).T
    return Sandwich(U=U, V=V, covariance=0.5 * (covariance + covariance.T))


def efficiency_loss(S: np.ndarray, M1: np.ndarray, M2: np.ndarray) -> EfficiencyLoss:
    """Per-parameter loss 1 - avar*_j / avar~_j of pseudo-ML against the optimal weights."""
    Mbar = M1 + M2
    optimal = sandwich(weights(S, Mbar), S, Mbar).covariance
    pseudo = sandwich(weights(S, M1), S, Mbar).covariance
    avar_opt, avar_pseudo = np.diag(optimal).copy(), np.diag(pseudo).copy()
    gap = np.linalg.inv(optimal) - np.linalg.inv(pseudo)
    return EfficiencyLoss(
        loss=1.0 - avar_opt / avar_pseudo,
        avar_opt=avar_opt,
        avar_pseudo=avar_pseudo,
        cov_opt=optimal,
        cov_pseudo=pseudo,
        information_gap=0.5 * (gap + gap.T),
    )


def information_loss_rearranged(S: np.ndarray, M1: np.ndarray, M2: np.ndarray) -> np.ndarray:
    """[(A M1 A^T)^-1 + (A M2 A^T)^-1]^-1 - A [M1^-1 + M2^-1]^-1 A^T with A the pseudo weights."""
    A = weights(S, M1)
    try:
        inner = np.linalg.inv(np.linalg.inv(M1) + np.linalg.inv(M2))
        W = A @ M1 @ A.T
        B = A @ M2 @ A.T
        outer = np.linalg.inv(np.linalg.inv(W) + np.linalg.inv(B))
    except np.linalg.LinAlgError as e:
        raise SingularSystemError("M2 (or A M2 A^T) is not invertible") from e
    out = outer - A @ inner @ A.T
    return 0.5 * (out + out.T)


def moment_matrices(
    grid: AutocovGrid,
    coeffs: PredictorCoefficients,
    tag: WeightTag = "optimal",
    A: Optional[np.ndarray] = None,
    m2: Optional[M2Estimate] = None,
    n: Optional[int] = None,
) -> MomentMatrices:
    """Assemble S, M1, M2, weights and the sandwich at one parameter point."""
    Kmat = grid.toeplitz(coeffs.k)
    S = sensitivity(coeffs, Kmat)
    M1 = m1(coeffs, Kmat)
    if m2 is None:
        m2 = m2_isserlis(grid, coeffs, n=n)
    Mbar = M1 + m2.matrix
    if tag == "optimal":
        A = weights(S, Mbar)
    elif tag == "pseudo":
        A = weights(S, M1)
    elif A is None:
        raise ValueError("custom weights need an explicit A")
    sw = sandwich(A, S, Mbar)
    return MomentMatrices(
        S=S,
        M1=M1,
        M2=m2.matrix,
        A=np.atleast_2d(A),
        tag=tag,
        U=sw.U,
        V=sw.V,
        covariance=sw.covariance,
        J=m2.J,
        nsim=m2.nsim,
    )
