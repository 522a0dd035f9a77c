import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy.optimize import least_squares, minimize, root

from data.simulator import empirical_autocov
from sdde.autocov import autocov_grid, resolve_method
from sdde.config import EstimatorMethod, SolverSettings
from sdde.exceptions import (
    DataError,
    ModelSpecError,
    NonIdentifiableError,
    NonStationaryModelError,
    NumericalError,
)
from sdde.likelihood import ObservationSeries, exact_loglik, pseudo_loglik, pseudo_score
from sdde.model import (
    DelayModelSpec,
    MultiDelay,
    ParameterBinding,
    TwoDelay,
    get_field,
    identifiability_warning,
    is_stationary,
)
from sdde.pbef import (
    M2Estimate,
    h_matrix,
    m1,
    m2_isserlis,
    m2_montecarlo,
    sandwich,
    sensitivity,
    weights,
)
from sdde.predictor import coefficients_for

logger = logging.getLogger(__name__)

PENALTY = 1e3
CONDITION_LIMIT = 1e12
OU_RHO_RANGE = (0.05, 0.95)
EXACT_SCORE_TOL = 1e-6


@dataclass(frozen=True)
class EstimateResult:
    theta_hat: np.ndarray
    param_names: tuple[str, ...]
    converged: bool
    score_norm: float
    objective: float
    iterations: int
    covariance: np.ndarray  # already divided by n
    stderr: np.ndarray
    method: str
    k: int
    delta: float
    n: int
    model: Optional[DelayModelSpec] = field(default=None, repr=False)
    boundary: bool = False
    truncation: Optional[int] = None
    flags: tuple[str, ...] = ()
    error: Optional[str] = None

    def to_frame(self, seed: Optional[int] = None) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "param": list(self.param_names),
                "estimate": self.theta_hat,
                "stderr": self.stderr,
                "converged": self.converged,
                "iterations": self.iterations,
                "method": self.method,
                "k": self.k,
                "delta": self.delta,
                "n": self.n,
                "seed": seed,
            }
        )


@dataclass
class _Problem:
    """One estimation call: data, template model, binding and depth."""

    data: ObservationSeries
    model: DelayModelSpec
    binding: ParameterBinding
    k: int

    @property
    def terms(self) -> int:
        return self.data.n - self.k


class EstimatorService:
    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()

    # ==========================================
    # Stationarity region
    # ==========================================
    def admissible(self, model, binding, theta) -> Optional[DelayModelSpec]:
        """Model at theta if it lies inside the shrunken stationarity region."""
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)) or not binding.within_bounds(theta):
            return None
        try:
            candidate = binding.apply(model, theta)
        except ModelSpecError:
            return None
        verdict = is_stationary(candidate)
        if not verdict.certified or verdict.margin < self.settings.region_margin:
            return None
        return candidate

    def _project(self, problem: _Problem, theta, anchor) -> np.ndarray:
        """Furthest admissible point on the segment from anchor towards theta."""
        if self.admissible(problem.model, problem.binding, theta) is not None:
            return np.asarray(theta, dtype=float)
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.admissible(problem.model, problem.binding, anchor + mid * (theta - anchor)) is None:
                hi = mid
            else:
                lo = mid
        return anchor + lo * (theta - anchor)

    def _score_tol(self, model) -> float:
        if resolve_method(model) == "closed-form":
            return self.settings.score_tol
        return self.settings.numerical_score_tol

    def _start(self, problem: _Problem, init) -> np.ndarray:
        if init is None:
            pilot = self.moment_pilot(problem.data, problem.model, problem.binding)
            theta = pilot.theta_hat
            if self.admissible(problem.model, problem.binding, theta) is not None:
                return theta
            logger.info("moment pilot outside the region, starting from the template model")
            init = problem.binding.theta(problem.model)
        theta = np.asarray(init, dtype=float)
        if self.admissible(problem.model, problem.binding, theta) is None:
            raise NonStationaryModelError(
                f"starting point {theta} lies outside the stationarity region"
            )
        return theta

    def _boundary(self, problem: _Problem, theta) -> bool:
        fitted = problem.binding.apply(problem.model, theta)
        near_region = is_stationary(fitted).margin < 10 * self.settings.region_margin
        near_box = any(
            min(abs(t - lo), abs(hi - t)) < 1e-8 for t, (lo, hi) in zip(theta, problem.binding.bounds)
        )
        return near_region or near_box

    def _restart_points(self, problem: _Problem, init: np.ndarray):
        rng = np.random.default_rng(self.settings.restart_seed)
        scale = 0.1 * np.maximum(np.abs(init), 0.1)
        for _ in range(self.settings.restarts):
            yield self._project(problem, init + scale * rng.standard_normal(len(init)), init)

    # ==========================================
    # Objectives
    # ==========================================
    def _pseudo_point(self, problem: _Problem, theta):
        fitted = problem.binding.apply(problem.model, theta)
        _, coeffs = coefficients_for(fitted, problem.data.delta, problem.k, problem.binding)
        return pseudo_loglik(problem.data, coeffs), pseudo_score(problem.data, coeffs)

    def _maximize(
        self,
        problem: _Problem,
        init: np.ndarray,
        method: str,
        value_and_score: Callable,
        scale: int,
        tol: Optional[float] = None,
    ):
        s = self.settings
        tol = tol if tol is not None else self._score_tol(problem.model)
        bounds = problem.binding.bounds
        anchor = init

        def fun(theta):
            inside = self._project(problem, theta, anchor)
            try:
                value, score = value_and_score(inside)
            except NumericalError as e:
                logger.debug("objective failed at %s: %s", inside, e)
                gap = theta - anchor
                return 1e6 + PENALTY * gap @ gap, 2 * PENALTY * gap
            gap = theta - inside
            f = -value / scale + PENALTY * gap @ gap
            return f, -score / scale + 2 * PENALTY * gap

        best = None
        restarts = self._restart_points(problem, init)
        iterations = 0
        for attempt in range(1 + s.restarts):
            start = init if attempt == 0 else next(restarts)
            anchor = start
            res = minimize(
                fun,
                start,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": s.max_iter, "ftol": 1e-15, "gtol": tol / 10},
            )
            iterations += int(res.nit)
            theta = self._project(problem, res.x, anchor)
            try:
                value, score = value_and_score(theta)
            except NumericalError as e:
                logger.info("%s restart %d: objective failed at the optimum (%s)", method, attempt + 1, e)
                continue
            if np.linalg.norm(score) / scale >= tol:
                theta, value, score = self._polish(problem, theta, value, score, value_and_score, scale)
            norm = float(np.linalg.norm(score))
            candidate = (theta, value, norm)
            if best is None or value > best[1]:
                best = candidate
            if norm / scale < tol:
                best = candidate
                break
            logger.info(
                "%s restart %d: |score|/n = %.3g above %.1e", method, attempt + 1, norm / scale, tol
            )
        if best is None:
            raise NumericalError(f"{method}: the objective could not be evaluated at any optimum")
        theta, value, norm = best
        return theta, value, norm, norm / scale < tol, iterations

    def _polish(self, problem, theta, value, score, value_and_score, scale):
        def equation(t):
            if self.admissible(problem.model, problem.binding, t) is None:
                return np.full(len(t), 1e6)
            return value_and_score(t)[1] / scale

        try:
            sol = root(equation, theta, method="hybr", options={"xtol": self.settings.step_tol})
        except (NumericalError, np.linalg.LinAlgError):
            return theta, value, score
        if self.admissible(problem.model, problem.binding, sol.x) is None:
            return theta, value, score
        new_value, new_score = value_and_score(sol.x)
        if np.linalg.norm(new_score) < np.linalg.norm(score):
            return sol.x, new_value, new_score
        return theta, value, score

    # ==========================================
    # Moment matrices at a parameter point
    # ==========================================
    def _m2(self, problem: _Problem, fitted, grid, coeffs, route: Optional[str] = None) -> M2Estimate:
        route = route or self.settings.m2_route
        if route == "zero":
            return M2Estimate(matrix=np.zeros((problem.k + 1, problem.k + 1)), method="zero")
        if route == "montecarlo":
            mc = self.settings.monte_carlo
            return m2_montecarlo(
                fitted, coeffs, problem.k, mc.nsim, mc.seed, n_obs=mc.n_obs, step=mc.step
            )
        return m2_isserlis(grid, coeffs, tol=self.settings.m2_tol, cap=self.settings.m2_cap)

    def _moments_at(self, problem: _Problem, theta, route: Optional[str] = None):
        fitted = problem.binding.apply(problem.model, theta)
        grid, coeffs = coefficients_for(
            fitted, problem.data.delta, problem.k, problem.binding, m=problem.k + self.settings.m2_cap
        )
        Kmat = grid.toeplitz(problem.k)
        S = sensitivity(coeffs, Kmat)
        M1 = m1(coeffs, Kmat)
        m2 = self._m2(problem, fitted, grid, coeffs, route)
        return coeffs, S, M1, m2

    def _covariance(self, problem: _Problem, theta, A_of: Callable, route: Optional[str] = None):
        """Sandwich covariance / n with weights A_of(S, M1, Mbar); NaNs if it cannot be formed."""
        try:
            _, S, M1, m2 = self._moments_at(problem, theta, route)
            Mbar = M1 + m2.matrix
            cov = sandwich(A_of(S, M1, Mbar), S, Mbar).covariance / problem.data.n
            return cov, m2.J, ()
        except NumericalError as e:
            logger.warning("no asymptotic covariance at %s: %s", theta, e)
            p = problem.binding.p
            return np.full((p, p), np.nan), None, (f"covariance:{type(e).__name__}",)

    def _result(self, problem, theta, converged, norm, objective, iterations, method, cov, J, flags=()):
        names = tuple(problem.binding.names)
        stderr = np.sqrt(np.clip(np.diag(cov), 0.0, None)) if np.all(np.isfinite(cov)) else np.full(len(names), np.nan)
        if identifiability_warning(problem.model, problem.binding):
            flags = tuple(flags) + ("weakly-identified",)
        return EstimateResult(
            theta_hat=np.asarray(theta, dtype=float),
            param_names=names,
            converged=bool(converged),
            score_norm=float(norm),
            objective=float(objective),
            iterations=int(iterations),
            covariance=cov,
            stderr=stderr,
            method=method,
            k=problem.k,
            delta=problem.data.delta,
            n=problem.data.n,
            model=problem.binding.apply(problem.model, theta),
            boundary=self._boundary(problem, theta),
            truncation=J,
            flags=tuple(flags),
        )

    # ==========================================
    # Estimators
    # ==========================================
    def maximize_pseudo_lik(
        self,
        data: ObservationSeries,
        model: DelayModelSpec,
        binding: ParameterBinding,
        k: int,
        init=None,
    ) -> EstimateResult:
        problem = self._problem(data, model, binding, k)
        start = self._start(problem, init)
        theta, value, norm, converged, iterations = self._maximize(
            problem, start, "pseudo-ML", lambda t: self._pseudo_point(problem, t), problem.terms
        )
        cov, J, flags = self._covariance(problem, theta, lambda S, M1, Mbar: weights(S, M1))
        return self._result(problem, theta, converged, norm, value, iterations, "pseudo-ML", cov, J, flags)

    def maximize_exact_lik(
        self,
        data: ObservationSeries,
        model: DelayModelSpec,
        binding: ParameterBinding,
        init=None,
    ) -> EstimateResult:
        problem = self._problem(data, model, binding, 0)
        start = self._start(problem, init)

        def value_and_score(theta):
            value = exact_loglik(data, model, binding, theta)
            grad = np.empty(len(theta))
            for i in range(len(theta)):
                step = 1e-6 * max(abs(theta[i]), 1.0)
                e = np.zeros(len(theta))
                e[i] = step
                plus = self.admissible(model, binding, theta + e)
                minus = self.admissible(model, binding, theta - e)
                if plus is not None and minus is not None:
                    grad[i] = (exact_loglik(data, plus) - exact_loglik(data, minus)) / (2 * step)
                elif plus is not None:
                    grad[i] = (exact_loglik(data, plus) - value) / step
                else:
                    grad[i] = (value - exact_loglik(data, minus)) / step
            return value, grad

        # finite-difference gradients cap the reachable score accuracy
        tol = max(self._score_tol(model), EXACT_SCORE_TOL)
        theta, value, norm, converged, iterations = self._maximize(
            problem, start, "exact-ML", value_and_score, data.n, tol=tol
        )
        p = binding.p
        return self._result(
            problem, theta, converged, norm, value, iterations, "exact-ML", np.full((p, p), np.nan), None
        )

    def _newton(self, problem: _Problem, equation: Callable, theta0: np.ndarray):
        """Damped Newton on equation(theta) = 0 with a finite-difference Jacobian."""
        s = self.settings
        tol = self._score_tol(problem.model)
        theta = np.asarray(theta0, dtype=float)
        g = equation(theta)
        iterations = 0
        for iterations in range(1, s.max_iter + 1):
            if np.linalg.norm(g) < tol:
                return theta, g, True, iterations - 1
            jac = np.empty((len(g), len(theta)))
            for i in range(len(theta)):
                step = np.finfo(float).eps ** (1 / 3) * max(abs(theta[i]), 1.0)
                e = np.zeros(len(theta))
                e[i] = step
                if self.admissible(problem.model, problem.binding, theta + e) is None:
                    e = -e
                jac[:, i] = (equation(theta + e) - g) / e[i]
            if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > CONDITION_LIMIT:
                raise NonIdentifiableError(
                    f"singular Jacobian of the estimating function at {theta}"
                )
            direction = -np.linalg.solve(jac, g)
            lam, accepted = 1.0, False
            while lam > 1e-10:
                candidate = theta + lam * direction
                if self.admissible(problem.model, problem.binding, candidate) is not None:
                    g_new = equation(candidate)
                    if np.linalg.norm(g_new) < (1 - 1e-4 * lam) * np.linalg.norm(g):
                        accepted = True
                        break
                lam /= 2
            if not accepted:
                break
            moved = np.linalg.norm(candidate - theta)
            theta, g = candidate, g_new
            if moved < s.step_tol * (1 + np.linalg.norm(theta)):
                break
        return theta, g, bool(np.linalg.norm(g) < tol), iterations

    def solve_optimal(
        self,
        data: ObservationSeries,
        model: DelayModelSpec,
        binding: ParameterBinding,
        k: int,
        init=None,
        route: Optional[str] = None,
    ) -> EstimateResult:
        problem = self._problem(data, model, binding, k)
        if init is None:
            pilot = self.maximize_pseudo_lik(data, model, binding, k)
            init = pilot.theta_hat
        start = self._start(problem, init)

        def equation(theta):
            coeffs, S, M1, m2 = self._moments_at(problem, theta, route)
            A = weights(S, M1 + m2.matrix)
            return A @ np.sum(h_matrix(data, coeffs), axis=0) / problem.terms

        theta, g, converged, iterations = self._newton(problem, equation, start)
        cov, J, flags = self._covariance(
            problem, theta, lambda S, M1, Mbar: weights(S, Mbar), route
        )
        objective = pseudo_loglik(data, self._coefficients(problem, theta))
        return self._result(
            problem, theta, converged, np.linalg.norm(g), objective, iterations, "optimal-PBEF", cov, J, flags
        )

    def solve_two_step(
        self,
        data: ObservationSeries,
        model: DelayModelSpec,
        binding: ParameterBinding,
        k: int,
        pilot: EstimateResult,
        A: Optional[np.ndarray] = None,
        route: Optional[str] = None,
    ) -> EstimateResult:
        """Weights frozen at the pilot, then a root of A sum H_i(theta) in theta."""
        problem = self._problem(data, model, binding, k)
        start = self._start(problem, pilot.theta_hat)
        if A is None:
            _, S, M1, m2 = self._moments_at(problem, start, route)
            A = weights(S, M1 + m2.matrix)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if np.linalg.matrix_rank(A) < binding.p:
            raise NonIdentifiableError(f"frozen weight matrix has rank below {binding.p}")

        def equation(theta):
            return A @ np.sum(h_matrix(data, self._coefficients(problem, theta)), axis=0) / problem.terms

        theta, g, converged, iterations = self._newton(problem, equation, start)
        cov, J, flags = self._covariance(problem, theta, lambda S, M1, Mbar: A, route)
        objective = pseudo_loglik(data, self._coefficients(problem, theta))
        return self._result(
            problem, theta, converged, np.linalg.norm(g), objective, iterations, "two-step", cov, J, flags
        )

    def moment_pilot(
        self, data: ObservationSeries, model: DelayModelSpec, binding: ParameterBinding
    ) -> EstimateResult:
        """Least-squares match of K(0), ..., K(m delta) to the empirical autocovariances."""
        problem = self._problem(data, model, binding, 0)
        lags = max(2, binding.p)
        target = empirical_autocov(data, lags).values
        scale = max(abs(target[0]), 1e-300)

        def residual(theta):
            fitted = self.admissible(model, binding, theta)
            if fitted is None:
                return np.full(lags + 1, 1e3)
            try:
                values = autocov_grid(fitted, data.delta, lags).values
            except NumericalError:
                return np.full(lags + 1, 1e3)
            return (values - target) / scale

        start = binding.theta(model)
        lower = np.array([lo for lo, _ in binding.bounds])
        upper = np.array([hi for _, hi in binding.bounds])
        res = least_squares(residual, np.clip(start, lower, upper), bounds=(lower, upper), x_scale="jac")
        p = binding.p
        theta = res.x if self.admissible(model, binding, res.x) is not None else start
        return EstimateResult(
            theta_hat=np.asarray(theta, dtype=float),
            param_names=tuple(binding.names),
            converged=bool(res.success),
            score_norm=float(np.linalg.norm(res.fun)),
            objective=float(res.cost),
            iterations=int(res.nfev),
            covariance=np.full((p, p), np.nan),
            stderr=np.full(p, np.nan),
            method="moment",
            k=0,
            delta=data.delta,
            n=data.n,
            model=binding.apply(model, theta),
        )

    def ou_start(
        self, data: ObservationSeries, model: DelayModelSpec, binding: ParameterBinding
    ) -> Optional[np.ndarray]:
        """Free parameters of the Ornstein-Uhlenbeck fit to the lag-0 and lag-1 autocovariances.

        The lag-zero drift weight takes the whole rate and delayed weights are
        zero. None for families without a lag-zero atom.
        """
        K = empirical_autocov(data, 1).values
        if K[0] <= 0:
            return None
        rho = float(np.clip(K[1] / K[0], *OU_RHO_RANGE))
        rate = -math.log(rho) / data.delta
        fitted = {"sigma": math.sqrt(2 * rate * K[0])}
        if isinstance(model, TwoDelay):
            fitted.update(a=-rate, b=0.0)
        elif isinstance(model, MultiDelay) and model.delays[0] == 0.0:
            for i in range(len(model.delays)):
                fitted[f"alphas.{i}"] = -rate if i == 0 else 0.0
        else:
            return None
        theta = np.array([fitted.get(p.path, get_field(model, p.path)) for p in binding.free_params])
        lower = np.array([lo for lo, _ in binding.bounds])
        upper = np.array([hi for _, hi in binding.bounds])
        return np.clip(theta, lower, upper)

    def estimate(
        self,
        data: ObservationSeries,
        model: DelayModelSpec,
        binding: ParameterBinding,
        k: int,
        method: EstimatorMethod = "pseudo-ML",
        init=None,
    ) -> EstimateResult:
        if method == "pseudo-ML":
            return self.maximize_pseudo_lik(data, model, binding, k, init)
        if method == "optimal-PBEF":
            return self.solve_optimal(data, model, binding, k, init)
        if method == "two-step":
            pilot = self.maximize_pseudo_lik(data, model, binding, k, init)
            return self.solve_two_step(data, model, binding, k, pilot)
        if method == "exact-ML":
            return self.maximize_exact_lik(data, model, binding, init)
        raise ValueError(f"unknown estimator '{method}'")

    # ==========================================
    # Helpers
    # ==========================================
    def _problem(self, data, model, binding, k) -> _Problem:
        if not isinstance(data, ObservationSeries):
            raise DataError("estimation needs an ObservationSeries")
        if data.n <= k:
            raise DataError(f"depth {k} needs more than {k} observations, got {data.n}")
        binding.check(model)
        return _Problem(data=data, model=model, binding=binding, k=k)

    def _coefficients(self, problem: _Problem, theta):
        fitted = problem.binding.apply(problem.model, theta)
        return coefficients_for(fitted, problem.data.delta, problem.k)[1]


estimator_service = EstimatorService()
