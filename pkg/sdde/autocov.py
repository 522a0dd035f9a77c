"""Stationary autocovariance K(t) = E[X(0) X(t)] and its parameter gradient.

Routes:
    * ``TwoDelay``: closed form on [0, r], then the method of steps on each
      interval [nr, (n+1)r] (stored as Chebyshev interpolants).
    * special closed forms for a = 0 (two-delay and exponential kernel), used
      as oracles.
    * any model: the spectral representation
          K(t) = sigma^2 / pi * int_0^inf |i w - h(i w)|^-2 cos(w t) dw,
      where h is the Laplace transform of the drift measure.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Literal, Optional, Union

import numpy as np
from numpy.polynomial import Chebyshev
from scipy.integrate import quad_vec
from scipy.interpolate import CubicSpline
from scipy.linalg import LinAlgError, cholesky, toeplitz
from scipy.special import roots_legendre

from sdde.exceptions import (
    InsufficientGridError,
    ModelSpecError,
    NonStationaryModelError,
    QuadratureBudgetError,
)
from sdde.model import (
    DelayModelSpec,
    ExpKernel,
    MultiDelay,
    ParameterBinding,
    TwoDelay,
    is_stationary,
    lambda_ab,
)

logger = logging.getLogger(__name__)

GL_NODES, GL_WEIGHTS = roots_legendre(40)
DEGENERATE_LAMBDA = 1e-8
SPECTRAL_TOL = 1e-9  # absolute, in units of sigma^2
SPECTRAL_LIMIT = 200_000
MAX_PIECES = 20_000

Method = Literal["closed-form", "numerical"]


@dataclass(frozen=True)
class AutocovGrid:
    """K(j delta) for j = 0..m, optionally with gradients (p x (m+1))."""

    delta: float
    values: np.ndarray
    model: DelayModelSpec
    method: Method
    grads: Optional[np.ndarray] = None
    param_names: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    function: Optional[Callable] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.grads is not None:
            grads = np.array(self.grads, dtype=float)
            grads.setflags(write=False)
            object.__setattr__(self, "grads", grads)

    @property
    def m(self) -> int:
        return len(self.values) - 1

    @property
    def lags(self) -> np.ndarray:
        return self.delta * np.arange(self.m + 1)

    def kappa(self, size: int) -> np.ndarray:
        """(K(delta), ..., K(size delta))."""
        self.require(size)
        return np.asarray(self.values[1 : size + 1])

    def toeplitz(self, size: int) -> np.ndarray:
        """Covariance matrix of `size` consecutive observations."""
        self.require(size - 1)
        return toeplitz(self.values[:size])

    def require(self, lag: int) -> None:
        if lag > self.m:
            raise InsufficientGridError(f"grid covers lags 0..{self.m}, lag {lag} requested")


def toeplitz_matrix(grid: Union[AutocovGrid, np.ndarray], size: int) -> np.ndarray:
    if isinstance(grid, AutocovGrid):
        return grid.toeplitz(size)
    values = np.asarray(grid, dtype=float)
    if size > len(values):
        raise InsufficientGridError(f"{len(values)} autocovariances cannot fill a {size}x{size} matrix")
    return toeplitz(values[:size])


def is_toeplitz_pd(values: Union[AutocovGrid, np.ndarray], size: Optional[int] = None) -> bool:
    if size is None:
        size = values.m + 1 if isinstance(values, AutocovGrid) else len(values)
    try:
        cholesky(toeplitz_matrix(values, size), lower=True)
    except LinAlgError:
        return False
    return True


def _require_stationary(model: DelayModelSpec) -> None:
    verdict = is_stationary(model)
    if not verdict.certified:
        raise NonStationaryModelError(
            f"model is not certified stationary ({verdict.status}, margin {verdict.margin:.3g}): {model!r}",
            verdict,
        )


# ==========================================
# OU HELPERS
# ==========================================
def ou_autocov(a: float, sigma: float, t):
    t = np.abs(np.asarray(t, dtype=float))
    return -(sigma**2) / (2 * a) * np.exp(a * t)


def ou_autocov_grad(a: float, sigma: float, t) -> np.ndarray:
    """d/da of the OU autocovariance."""
    t = np.abs(np.asarray(t, dtype=float))
    base = -(sigma**2) / (2 * a) * np.exp(a * t)
    return sigma**2 / (2 * a * a) * np.exp(a * t) + t * base


# ==========================================
# TWO-DELAY CLOSED FORM
# ==========================================
def _two_delay_head(a: float, b: float, r: float, sigma: float):
    """K(0) and K on [0, r] for the three (a, b) regimes."""
    s2 = sigma * sigma
    lam = lambda_ab(a, b)
    # the b = a limit; near b = -a the hyperbolic branch stays well defined
    if b == a or (lam < DEGENERATE_LAMBDA and abs(b - a) < abs(b + a)):
        k0 = s2 * (b * r - 1) / (4 * b)
        return k0, lambda t: k0 - 0.5 * s2 * np.asarray(t)
    if abs(b) < -a:
        k0 = s2 * (b * math.sinh(lam * r) - lam) / (2 * lam * (a + b * math.cosh(lam * r)))
        return k0, lambda t: k0 * np.cosh(lam * np.asarray(t)) - s2 / (2 * lam) * np.sinh(
            lam * np.asarray(t)
        )
    k0 = s2 * (b * math.sin(lam * r) - lam) / (2 * lam * (a + b * math.cos(lam * r)))
    return k0, lambda t: k0 * np.cos(lam * np.asarray(t)) - s2 / (2 * lam) * np.sin(
        lam * np.asarray(t)
    )


class TwoDelayCovariance:
    """K(t) for a stationary TwoDelay model, extended lazily piece by piece.

    On [nr, (n+1)r]:
        K(t) = b int_{nr}^t e^{a(t-s)} K(s-r) ds + e^{a(t-nr)} K(nr)
    The integrand is smooth on each piece, so a Gauss-Legendre rule is used and
    the result is stored as a Chebyshev interpolant.
    """

    def __init__(self, model: TwoDelay):
        _require_stationary(model)
        self.model = model
        self.k0, head = _two_delay_head(model.a, model.b, model.r, model.sigma)
        self._pieces: list[Callable] = [head]
        self._lock = threading.Lock()
        rate = abs(model.a) + abs(model.b) + lambda_ab(model.a, model.b)
        self._degree = int(min(128, max(32, math.ceil(8 * model.r * rate))))

    def _next_piece(self, n: int):
        a, b, r = self.model.a, self.model.b, self.model.r
        prev = self._pieces[n - 1]
        start = n * r
        k_start = float(prev(np.array(start)))

        def continuation(t):
            t = np.asarray(t, dtype=float)
            half = 0.5 * (t - start)
            s = start + half[:, None] * (GL_NODES[None, :] + 1.0)
            integrand = np.exp(a * (t[:, None] - s)) * prev(s - r)
            return np.exp(a * (t - start)) * k_start + b * half * (integrand @ GL_WEIGHTS)

        return Chebyshev.interpolate(continuation, self._degree, domain=[start, start + r])

    def _ensure(self, n_max: int) -> None:
        if n_max >= MAX_PIECES:
            raise InsufficientGridError(f"lag horizon of {n_max} delay intervals is too long")
        if n_max < len(self._pieces):
            return
        with self._lock:
            while len(self._pieces) <= n_max:
                self._pieces.append(self._next_piece(len(self._pieces)))

    def __call__(self, t):
        t = np.abs(np.asarray(t, dtype=float))
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        index = np.floor(t / self.model.r).astype(int)
        self._ensure(int(index.max(initial=0)))
        out = np.empty_like(t)
        for n in np.unique(index):
            mask = index == n
            out[mask] = self._pieces[n](t[mask])
        return float(out[0]) if scalar else out


@lru_cache(maxsize=512)
def two_delay_covariance(model: TwoDelay) -> TwoDelayCovariance:
    return TwoDelayCovariance(model)


def _as_two_delay(model: DelayModelSpec) -> Optional[TwoDelay]:
    if isinstance(model, TwoDelay):
        return model
    if isinstance(model, MultiDelay):
        return model.as_two_delay()
    return None


def closed_form_two_delay(model: Union[TwoDelay, MultiDelay], t):
    two = _as_two_delay(model)
    if two is None:
        raise ModelSpecError("closed form needs a two-delay model (atoms at 0 and -r)")
    return two_delay_covariance(two)(t)


def closed_form_zero_a(model: TwoDelay, t):
    """Explicit K on [0, 2r] for a = 0, b r in (-pi/2, 0)."""
    if not isinstance(model, TwoDelay) or model.a != 0:
        raise ModelSpecError("closed_form_zero_a needs a TwoDelay model with a = 0")
    _require_stationary(model)
    b, r, s2 = model.b, model.r, model.sigma**2
    t = np.abs(np.asarray(t, dtype=float))
    if np.any(t > 2 * r * (1 + 1e-12)):
        raise ValueError(f"closed_form_zero_a is defined on [0, {2 * r}]")
    scale = -s2 / (2 * b)
    sin_br, cos_br = math.sin(b * r), math.cos(b * r)
    first = scale * ((1 - sin_br) / cos_br * np.cos(b * t) + np.sin(b * t))
    # the [r, 2r] expression with its tangents multiplied out
    second = scale * (
        2
        + (1 - 2 * sin_br) * np.sin(b * t)
        - (1 + sin_br - 2 * sin_br**2) / cos_br * np.cos(b * t)
    )
    out = np.where(t <= r, first, second)
    return float(out) if out.ndim == 0 else out


def closed_form_expkernel_a0(model: ExpKernel, t):
    """K on [0, r] for the uniform delay kernel (a = 0)."""
    if not isinstance(model, ExpKernel) or model.a != 0:
        raise ModelSpecError("closed_form_expkernel_a0 needs an ExpKernel model with a = 0")
    _require_stationary(model)
    b, r, s2 = model.b, model.r, model.sigma**2
    t = np.abs(np.asarray(t, dtype=float))
    if np.any(t > r * (1 + 1e-12)):
        raise ValueError(f"closed_form_expkernel_a0 is defined on [0, {r}]")
    omega = math.sqrt(2 * b)
    out = s2 * np.sin(omega * (r / 2 - t)) / (2 * omega * math.cos(r * math.sqrt(b / 2)))
    out = out + s2 / (2 * b * r)
    return float(out) if out.ndim == 0 else out


# ==========================================
# SPECTRAL ROUTE
# ==========================================
def _lorentz(x, c):
    """int_0^inf cos(w x) / (w^2 + c^2) dw"""
    return math.pi * np.exp(-c * np.abs(x)) / (2 * c)


def _lorentz_sq(x, c):
    """int_0^inf cos(w x) / (w^2 + c^2)^2 dw"""
    ax = np.abs(x)
    return math.pi * np.exp(-c * ax) * (1 + c * ax) / (4 * c**3)


def _lorentz_odd(x, c):
    """int_0^inf w sin(w x) / (w^2 + c^2)^2 dw"""
    return math.pi * x * np.exp(-c * np.abs(x)) / (4 * c)


class SpectralCovariance:
    """K(t) by Fourier inversion of the spectral density.

    The integrand is split into a reference with a closed-form cosine
    transform and a remainder that decays like w^-5 (point-mass measures) or
    w^-4 (kernel measures); the remainder is integrated adaptively up to a
    cut-off chosen so the neglected tail stays below half the tolerance.
    """

    def __init__(self, model: DelayModelSpec, tol: float = SPECTRAL_TOL, limit: int = SPECTRAL_LIMIT):
        _require_stationary(model)
        self.model = model
        self.tol = tol
        self.limit = limit
        weights, delays = model.atoms()
        self._alphas = weights
        self._delays = delays
        self._atomic = len(weights) > 0 and not model.has_density
        mass = model.mass_bound(0.0)
        self.c = max(mass, 1.0)
        tol_int = tol * math.pi
        if self._atomic:
            c5 = 12 * mass**3 + 4 * self.c**2 * mass + 1.0
            cutoff = (c5 / tol_int) ** 0.25
        else:
            slope = model.tail_slope()
            c4 = 4 * mass**2 + self.c**2 + 2 * slope + 1.0
            cutoff = (4 * c4 / (3 * tol_int)) ** (1 / 3)
        self.cutoff = max(40 * (mass + self.c), cutoff)
        if self._atomic:
            d = np.subtract.outer(delays, delays).ravel()
            s = np.add.outer(delays, delays).ravel()
            w = np.multiply.outer(weights, weights).ravel()
            self._pairs = (w, d, s)

    def _reference_transform(self, t: np.ndarray) -> np.ndarray:
        c = self.c
        out = _lorentz(t, c)
        if self._atomic:
            for alpha, r in zip(self._alphas, self._delays):
                out = out - alpha * (_lorentz_odd(r + t, c) + _lorentz_odd(r - t, c))
            w, d, s = self._pairs
            tt = t[:, None]
            out = out + c * c * _lorentz_sq(t, c)
            out = out + (
                0.5 * (_lorentz_sq(d + tt, c) + _lorentz_sq(d - tt, c))
                - (_lorentz_sq(s + tt, c) + _lorentz_sq(s - tt, c))
            ) @ w
        return out

    def _remainder(self, w: float) -> float:
        c2 = self.c * self.c
        h = complex(self.model.characteristic(1j * w))
        density = 1.0 / (h.real**2 + (w - h.imag) ** 2)
        den = w * w + c2
        ref = 1.0 / den
        if self._atomic:
            im_h = -np.dot(self._alphas, np.sin(w * self._delays))
            ref += 2 * w * im_h / den**2
            pw, d, s = self._pairs
            ref += (c2 + np.dot(pw, np.cos(w * d) - 2 * np.cos(w * s))) / den**2
        return density - ref

    def __call__(self, t):
        t = np.abs(np.asarray(t, dtype=float))
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        frequency = 2 * self.model.horizon + float(t.max(initial=0.0)) + 1.0
        n_init = int(min(self.limit // 4, math.ceil(self.cutoff * frequency / 6)))
        points = np.linspace(0.0, self.cutoff, n_init + 1)[1:-1]
        epsabs = self.tol * math.pi / 2
        integral, err, info = quad_vec(
            lambda w: self._remainder(w) * np.cos(w * t),
            0.0,
            self.cutoff,
            epsabs=epsabs,
            epsrel=0.0,
            norm="max",
            limit=self.limit,
            points=points,
            full_output=True,
        )
        if not np.isfinite(err) or err > epsabs:
            raise QuadratureBudgetError(
                f"spectral quadrature error {err:.3g} above {epsabs:.3g} "
                f"with {info.intervals.shape[0]} intervals ({info.message})"
            )
        logger.debug(
            "spectral K: cutoff %.1f, %d evaluations, error %.2g",
            self.cutoff, info.neval, err,
        )
        out = self.model.sigma**2 / math.pi * (self._reference_transform(t) + integral)
        return float(out[0]) if scalar else out


@lru_cache(maxsize=256)
def spectral_covariance(model: DelayModelSpec) -> SpectralCovariance:
    return SpectralCovariance(model)


# ==========================================
# GRIDS
# ==========================================
def resolve_method(model: DelayModelSpec, method: str = "auto") -> Method:
    if method == "auto":
        return "closed-form" if _as_two_delay(model) is not None else "numerical"
    if method == "closed-form" and _as_two_delay(model) is None:
        raise ModelSpecError(f"no closed form for {type(model).__name__}")
    if method not in ("closed-form", "numerical"):
        raise ModelSpecError(f"unknown autocovariance method '{method}'")
    return method


def covariance_function(model: DelayModelSpec, method: str = "auto") -> Callable:
    if resolve_method(model, method) == "closed-form":
        return two_delay_covariance(_as_two_delay(model))
    return spectral_covariance(model)


def _values(model: DelayModelSpec, delta: float, m: int, method: str) -> np.ndarray:
    return np.asarray(covariance_function(model, method)(delta * np.arange(m + 1)), dtype=float)


def numerical_autocov(model: DelayModelSpec, delta: float, m: int) -> AutocovGrid:
    return autocov_grid(model, delta, m, method="numerical")


def autocov_grid(
    model: DelayModelSpec,
    delta: float,
    m: int,
    binding: Optional[ParameterBinding] = None,
    method: str = "auto",
) -> AutocovGrid:
    if delta <= 0 or m < 0:
        raise ValueError("delta must be positive and m non-negative")
    method = resolve_method(model, method)
    values = _values(model, delta, m, method)
    if values[0] <= 0:
        raise NonStationaryModelError(f"non-positive variance K(0)={values[0]:.3g}")
    grads, flags, names = None, (), ()
    if binding is not None:
        grads, flags = _gradient(model, binding, delta, m, method)
        names = tuple(binding.names)
    return AutocovGrid(
        delta=delta,
        values=values,
        model=model,
        method=method,
        grads=grads,
        param_names=names,
        flags=flags,
        function=covariance_function(model, method),
    )


def _inside(binding: ParameterBinding, model: DelayModelSpec, theta: np.ndarray):
    if not binding.within_bounds(theta):
        return None
    try:
        candidate = binding.apply(model, theta)
    except ModelSpecError:
        return None
    return candidate if is_stationary(candidate).certified else None


def _gradient(model, binding, delta, m, method):
    theta = binding.theta(model)
    eps = np.finfo(float).eps if method == "closed-form" else SPECTRAL_TOL
    base = None
    rows, flags = [], []
    for i, name in enumerate(binding.names):
        step = eps ** (1 / 3) * max(abs(theta[i]), 1.0)
        e = np.zeros_like(theta)
        e[i] = step
        plus = _inside(binding, model, theta + e)
        minus = _inside(binding, model, theta - e)
        if plus is not None and minus is not None:
            rows.append((_values(plus, delta, m, method) - _values(minus, delta, m, method)) / (2 * step))
            continue
        if base is None:
            base = _values(model, delta, m, method)
        if plus is not None:
            rows.append((_values(plus, delta, m, method) - base) / step)
        elif minus is not None:
            rows.append((base - _values(minus, delta, m, method)) / step)
        else:
            raise NonStationaryModelError(f"no admissible finite-difference step for '{name}'")
        logger.warning("one-sided difference for '%s' at the stationarity boundary", name)
        flags.append(f"one-sided:{name}")
    grads = np.vstack(rows)
    _cross_check_ou(model, binding, delta, m, grads)
    return grads, tuple(flags)


def _cross_check_ou(model, binding, delta, m, grads) -> None:
    if not (isinstance(model, TwoDelay) and model.b == 0 and "a" in binding.names):
        return
    if "b" in binding.names:
        return
    analytic = ou_autocov_grad(model.a, model.sigma, delta * np.arange(m + 1))
    row = grads[binding.names.index("a")]
    gap = np.max(np.abs(row - analytic)) / max(np.max(np.abs(analytic)), 1e-300)
    if gap > 1e-5:
        logger.warning("OU gradient cross-check off by %.2g (relative)", gap)


def autocov_grad(model: DelayModelSpec, binding: ParameterBinding, delta: float, m: int, method: str = "auto") -> np.ndarray:
    grads, _ = _gradient(model, binding, delta, m, resolve_method(model, method))
    return grads


# ==========================================
# YULE-WALKER RESIDUAL
# ==========================================
_CENTRAL = (np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12)
_FORWARD = (np.arange(5.0), np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12)


def _as_function(K, model: DelayModelSpec) -> tuple[Callable, float]:
    """Evaluator for K and the default differencing step."""
    if isinstance(K, AutocovGrid):
        step = 1e-2 if K.method == "numerical" else 1e-3
        if K.function is not None:
            return K.function, step
        spline = CubicSpline(
            np.concatenate([-K.lags[:0:-1], K.lags]),
            np.concatenate([K.values[:0:-1], K.values]),
        )
        span = K.lags[-1]

        def from_grid(x):
            x = np.abs(np.asarray(x, dtype=float))
            if np.any(x > span * (1 + 1e-12)):
                raise InsufficientGridError(f"grid covers |t| <= {span}, needs {x.max():.4g}")
            return spline(x)

        return from_grid, max(K.delta, 1e-3)
    if callable(K):
        return K, 1e-3
    raise TypeError("K must be an AutocovGrid or a callable")


def _stencils(t: np.ndarray, step: float, kinks: np.ndarray):
    """Offsets and weights per point, one-sided next to a kink."""
    offsets = np.tile(_CENTRAL[0], (len(t), 1))
    weights = np.tile(_CENTRAL[1], (len(t), 1))
    for j, tj in enumerate(t):
        near = kinks[np.abs(kinks - tj) < 2 * step]
        if near.size == 0:
            continue
        if np.all(near <= tj + 1e-14):
            offsets[j], weights[j] = _FORWARD
        else:
            offsets[j], weights[j] = -_FORWARD[0], -_FORWARD[1]
    return offsets * step, weights / step


def _measure_nodes(model: DelayModelSpec, t: np.ndarray):
    """Points t+s and weights so that sum w K(t+s) = int K(t+s) a(ds)."""
    alphas, delays = model.atoms()
    points = [np.subtract.outer(t, delays)] if len(alphas) else []
    weights = [np.tile(alphas, (len(t), 1))] if len(alphas) else []
    if model.has_density:
        span = model.horizon
        kink_lags = model.kinks(float(t.max(initial=0.0)) + span)
        per_t_points, per_t_weights = [], []
        for tj in t:
            cuts = np.concatenate([[-span, 0.0], -tj + kink_lags, -tj - kink_lags])
            cuts = np.unique(cuts[(cuts >= -span) & (cuts <= 0.0)])
            lo, hi = cuts[:-1], cuts[1:]
            half = 0.5 * (hi - lo)
            s = (lo + half)[:, None] + half[:, None] * GL_NODES[None, :]
            w = half[:, None] * GL_WEIGHTS[None, :] * model.density(s)
            per_t_points.append((tj + s).ravel())
            per_t_weights.append(w.ravel())
        width = max(len(p) for p in per_t_points)
        pad_p = np.zeros((len(t), width))
        pad_w = np.zeros((len(t), width))
        for j, (p, w) in enumerate(zip(per_t_points, per_t_weights)):
            pad_p[j, : len(p)] = p
            pad_w[j, : len(w)] = w
        points.append(pad_p)
        weights.append(pad_w)
    return np.hstack(points), np.hstack(weights)


def yw_residual(K, model: DelayModelSpec, t, step: Optional[float] = None):
    """dK/dt(t) - int K(t+s) a(ds); one-sided derivative at kinks (right limit at 0)."""
    func, default_step = _as_function(K, model)
    step = default_step if step is None else step
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    if np.any(t < 0):
        raise ValueError("yw_residual is evaluated at t >= 0")
    kinks = model.kinks(float(t.max(initial=0.0)) + 4 * step)
    offsets, weights = _stencils(t, step, kinks)
    diff_points = t[:, None] + offsets
    meas_points, meas_weights = _measure_nodes(model, t)
    n_diff = diff_points.size
    values = np.asarray(
        func(np.abs(np.concatenate([diff_points.ravel(), meas_points.ravel()]))), dtype=float
    )
    derivative = np.sum(values[:n_diff].reshape(diff_points.shape) * weights, axis=1)
    drift = np.sum(values[n_diff:].reshape(meas_points.shape) * meas_weights, axis=1)
    out = derivative - drift
    return float(out[0]) if scalar else out


def boundary_residual(K, model: DelayModelSpec) -> float:
    """2 int K(s) a(ds) + sigma^2, zero for the stationary autocovariance."""
    func, _ = _as_function(K, model)
    points, weights = _measure_nodes(model, np.array([0.0]))
    values = np.asarray(func(np.abs(points.ravel())), dtype=float)
    return float(2 * np.sum(values * weights.ravel()) + model.sigma**2)
