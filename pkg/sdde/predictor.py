"""Best linear predictors of depth k from an autocovariance grid.

phi_k multiplies the window (X(i delta), ..., X((i+1-k) delta)), newest first,
and v_k is the variance of the prediction error.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, toeplitz

from sdde.autocov import AutocovGrid, autocov_grid
from sdde.exceptions import IllConditionedLadderError, SingularSystemError
from sdde.model import DelayModelSpec, ParameterBinding

logger = logging.getLogger(__name__)

# smallest admissible 1 - phi_ii^2 before the ladder is declared degenerate
LADDER_FLOOR = 1e-12


@dataclass(frozen=True)
class PredictorCoefficients:
    k: int
    phi: np.ndarray
    v: float
    dphi: Optional[np.ndarray] = None  # p x k
    dv: Optional[np.ndarray] = None  # p
    ladder: tuple[tuple[np.ndarray, float], ...] = field(default=(), repr=False)
    delta: Optional[float] = None
    param_names: tuple[str, ...] = ()

    @property
    def has_gradients(self) -> bool:
        return self.dphi is not None

    @property
    def p(self) -> int:
        return 0 if self.dphi is None else self.dphi.shape[0]

    @property
    def partial_autocorrelations(self) -> np.ndarray:
        return np.array([phi[-1] for phi, _ in self.ladder])


def _grid_arrays(K: Union[AutocovGrid, np.ndarray], k: int, with_grads: bool):
    if isinstance(K, AutocovGrid):
        K.require(k)
        values = np.asarray(K.values[: k + 1], dtype=float)
        grads = None if K.grads is None else np.asarray(K.grads[:, : k + 1], dtype=float)
        names, delta = K.param_names, K.delta
    else:
        values = np.asarray(K, dtype=float)
        grads, names, delta = None, (), None
        if len(values) < k + 1:
            raise IllConditionedLadderError(
                f"need autocovariances at lags 0..{k}, got {len(values)}", level=0
            )
        values = values[: k + 1]
    if with_grads and grads is None:
        raise ValueError("the autocovariance grid carries no parameter gradients")
    if values[0] <= 0:
        raise IllConditionedLadderError(f"K(0)={values[0]:.3g} is not a variance", level=0)
    return values, grads, tuple(names), delta


def levinson_ladder(values: np.ndarray, depth: int) -> Iterator[tuple[int, np.ndarray, float]]:
    """Yield (i, phi_i, v_i) for i = 0..depth without retaining earlier levels.

    Level 0 is the empty predictor with v_0 = K(0).
    """
    values = np.asarray(values, dtype=float)
    phi = np.empty(0)
    v = float(values[0])
    yield 0, phi, v
    for i in range(1, depth + 1):
        reflection = (values[i] - phi @ values[i - 1 : 0 : -1]) / v
        shrink = 1.0 - reflection * reflection
        if shrink < LADDER_FLOOR:
            raise IllConditionedLadderError(
                f"Toeplitz system degenerate at level {i} (phi_ii={reflection:.15g})", level=i
            )
        phi = np.append(phi - reflection * phi[::-1], reflection)
        v = v * shrink
        yield i, phi, v


def durbin_levinson(K: Union[AutocovGrid, np.ndarray], k: int) -> PredictorCoefficients:
    if k < 1:
        raise ValueError("prediction depth must be at least 1")
    values, _, names, delta = _grid_arrays(K, k, with_grads=False)
    ladder = tuple((phi, v) for i, phi, v in levinson_ladder(values, k) if i > 0)
    phi, v = ladder[-1]
    return PredictorCoefficients(k=k, phi=phi, v=v, ladder=ladder, delta=delta, param_names=names)


def durbin_levinson_grad(
    K: Union[AutocovGrid, np.ndarray], k: int, grads: Optional[np.ndarray] = None
) -> PredictorCoefficients:
    """Durbin-Levinson together with its derivative along every gradient row."""
    if k < 1:
        raise ValueError("prediction depth must be at least 1")
    values, grid_grads, names, delta = _grid_arrays(K, k, with_grads=grads is None)
    dK = np.atleast_2d(np.asarray(grads if grads is not None else grid_grads, dtype=float))
    dK = dK[:, : k + 1]
    if dK.shape[1] < k + 1:
        raise ValueError(f"gradients must cover lags 0..{k}")

    p = dK.shape[0]
    phi, v = np.empty(0), float(values[0])
    dphi, dv = np.empty((p, 0)), dK[:, 0].copy()
    ladder = []
    for i in range(1, k + 1):
        past = values[i - 1 : 0 : -1]  # K((i-1) delta), ..., K(delta)
        d_past = dK[:, i - 1 : 0 : -1]
        numerator = values[i] - phi @ past
        d_numerator = dK[:, i] - dphi @ past - d_past @ phi
        reflection = numerator / v
        d_reflection = (d_numerator - reflection * dv) / v
        shrink = 1.0 - reflection * reflection
        if shrink < LADDER_FLOOR:
            raise IllConditionedLadderError(
                f"Toeplitz system degenerate at level {i} (phi_ii={reflection:.15g})", level=i
            )
        dphi = np.hstack(
            [
                dphi - d_reflection[:, None] * phi[::-1] - reflection * dphi[:, ::-1],
                d_reflection[:, None],
            ]
        )
        phi = np.append(phi - reflection * phi[::-1], reflection)
        dv = dv * shrink - 2.0 * v * reflection * d_reflection
        v = v * shrink
        ladder.append((phi, v))

    return PredictorCoefficients(
        k=k, phi=phi, v=v, dphi=dphi, dv=dv, ladder=tuple(ladder), delta=delta, param_names=names
    )


def direct_solve(K: Union[AutocovGrid, np.ndarray], k: int) -> tuple[np.ndarray, float]:
    """phi_k and v_k from a Cholesky solve of the k x k Toeplitz system."""
    if isinstance(K, AutocovGrid):
        K.require(k)
        values = np.asarray(K.values[: k + 1], dtype=float)
    else:
        values = np.asarray(K, dtype=float)[: k + 1]
    kappa = values[1 : k + 1]
    try:
        factor = cho_factor(toeplitz(values[:k]), lower=True)
    except LinAlgError as e:
        raise SingularSystemError(f"Toeplitz matrix of size {k} is not positive definite") from e
    phi = cho_solve(factor, kappa)
    return phi, float(values[0] - kappa @ phi)


def coefficients_for(
    model: DelayModelSpec,
    delta: float,
    k: int,
    binding: Optional[ParameterBinding] = None,
    method: str = "auto",
    m: Optional[int] = None,
) -> tuple[AutocovGrid, PredictorCoefficients]:
    """Grid over lags 0..max(m, k) and the depth-k predictor (with gradients if bound)."""
    grid = autocov_grid(model, delta, max(k, m or 0), binding=binding, method=method)
    if binding is None:
        return grid, durbin_levinson(grid, k)
    return grid, durbin_levinson_grad(grid, k)
