"""Affine SDDE model families, parameter bindings and the stationarity region.

A model is the drift measure a(ds) on [-r, 0] plus a diffusion scale sigma:

    dX(t) = (integral of X(t+s) a(ds)) dt + sigma dW(t)

Three families are supported: ``TwoDelay`` (atoms at 0 and -r), ``MultiDelay``
(finitely many atoms) and ``ExpKernel`` (density -b e^{as} on [-r, 0]).
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    TypeAdapter,
    ValidationError,
    field_validator,
    model_validator,
)
from scipy.optimize import brentq
from scipy.special import lambertw

from sdde.exceptions import ModelSpecError

logger = logging.getLogger(__name__)

# Kernel mass cut-off used whenever an infinite horizon needs a finite support
EXP_KERNEL_TAIL = 1e-12


def _phi1(x):
    """(1 - e^{-x}) / x, stable near zero, real or complex."""
    x = np.asarray(x)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0, -np.expm1(-safe) / safe)


class _DelayModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    sigma: float = Field(gt=0)

    # --- delay measure -------------------------------------------------
    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Point masses of the drift measure as (weights, delays)."""
        return np.empty(0), np.empty(0)

    def density(self, s: np.ndarray) -> np.ndarray:
        """Absolutely continuous part of the drift measure at s <= 0."""
        return np.zeros_like(np.asarray(s, dtype=float))

    @property
    def has_density(self) -> bool:
        return False

    @property
    def horizon(self) -> float:
        """Length of the (possibly truncated) support of the drift measure."""
        raise NotImplementedError

    def characteristic(self, lam):
        """Laplace transform of the drift measure, integral of e^{lam s} a(ds)."""
        raise NotImplementedError

    def mass_bound(self, shift: float = 0.0) -> float:
        """Bound on |characteristic(lam)| over the half plane Re(lam) >= shift."""
        raise NotImplementedError

    def tail_slope(self) -> float:
        """Bound on w |characteristic(i w)| for large w (zero for point masses)."""
        return 0.0

    def kinks(self, t_max: float) -> np.ndarray:
        """Lags in [0, t_max] at which K may lose smoothness."""
        raise NotImplementedError


class TwoDelay(_DelayModel):
    """dX = [a X(t) + b X(t-r)] dt + sigma dW."""

    kind: Literal["two_delay"] = "two_delay"
    a: float
    b: float
    r: float = Field(gt=0)

    def atoms(self):
        return np.array([self.a, self.b]), np.array([0.0, self.r])

    @property
    def horizon(self) -> float:
        return self.r

    def characteristic(self, lam):
        lam = np.asarray(lam, dtype=complex)
        return self.a + self.b * np.exp(-lam * self.r)

    def mass_bound(self, shift: float = 0.0) -> float:
        return abs(self.a) + abs(self.b) * math.exp(-shift * self.r)

    def kinks(self, t_max: float) -> np.ndarray:
        return self.r * np.arange(0, math.floor(t_max / self.r) + 1)

    def to_multi(self) -> "MultiDelay":
        return MultiDelay(alphas=(self.a, self.b), delays=(0.0, self.r), sigma=self.sigma)


class MultiDelay(_DelayModel):
    """dX = sum_k alpha_k X(t - r_k) dt + sigma dW with 0 <= r_1 < ... < r_N."""

    kind: Literal["multi_delay"] = "multi_delay"
    alphas: tuple[float, ...]
    delays: tuple[float, ...]

    @model_validator(mode="after")
    def _check_measure(self):
        if len(self.alphas) == 0 or len(self.alphas) != len(self.delays):
            raise ValueError("alphas and delays must be non-empty and of equal length")
        if any(d < 0 for d in self.delays):
            raise ValueError("delays must be >= 0")
        if any(d2 <= d1 for d1, d2 in zip(self.delays, self.delays[1:])):
            raise ValueError("delays must be strictly increasing")
        if all(alpha == 0 for alpha in self.alphas):
            raise ValueError("zero-mass delay measure cannot give a stationary process")
        return self

    def atoms(self):
        return np.array(self.alphas, dtype=float), np.array(self.delays, dtype=float)

    @property
    def horizon(self) -> float:
        return self.delays[-1]

    def characteristic(self, lam):
        lam = np.asarray(lam, dtype=complex)
        weights, delays = self.atoms()
        return np.exp(-np.multiply.outer(lam, delays)) @ weights

    def mass_bound(self, shift: float = 0.0) -> float:
        weights, delays = self.atoms()
        return float(np.sum(np.abs(weights) * np.exp(-shift * delays)))

    def kinks(self, t_max: float) -> np.ndarray:
        positive = [d for d in self.delays if d > 0]
        points = {0.0}
        frontier = [0.0]
        # integer combinations of the delays, bounded in count
        while frontier and len(points) < 2000:
            base = frontier.pop()
            for d in positive:
                nxt = round(base + d, 12)
                if nxt <= t_max and nxt not in points:
                    points.add(nxt)
                    frontier.append(nxt)
        return np.array(sorted(points))

    def as_two_delay(self) -> Optional[TwoDelay]:
        if len(self.alphas) == 2 and self.delays[0] == 0.0:
            return TwoDelay(
                a=self.alphas[0], b=self.alphas[1], r=self.delays[1], sigma=self.sigma
            )
        return None


class ExpKernel(_DelayModel):
    """dX = -b (integral over [-r, 0] of X(t+s) e^{as} ds) dt + sigma dW."""

    kind: Literal["exp_kernel"] = "exp_kernel"
    a: float
    b: float = Field(gt=0)
    r: float = Field(gt=0, allow_inf_nan=True)

    @field_validator("r", mode="before")
    @classmethod
    def _parse_infinite(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "+inf"):
            return math.inf
        return value

    @model_validator(mode="after")
    def _check_horizon(self):
        if math.isnan(self.r):
            raise ValueError("r must not be NaN")
        if math.isinf(self.r) and self.a <= 0:
            raise ValueError("an infinite horizon needs a > 0")
        return self

    @property
    def has_density(self) -> bool:
        return True

    @property
    def horizon(self) -> float:
        if math.isinf(self.r):
            return math.log(1.0 / EXP_KERNEL_TAIL) / self.a
        return self.r

    def density(self, s):
        s = np.asarray(s, dtype=float)
        inside = (s <= 0) & (s >= -self.horizon)
        return np.where(inside, -self.b * np.exp(self.a * s), 0.0)

    def characteristic(self, lam):
        w = np.asarray(lam, dtype=complex) + self.a
        if math.isinf(self.r):
            return -self.b / w
        return -self.b * self.r * _phi1(w * self.r)

    def mass_bound(self, shift: float = 0.0) -> float:
        rate = self.a + shift
        if math.isinf(self.r):
            if rate <= 0:
                return math.inf
            return self.b / rate
        return float(self.b * self.r * _phi1(rate * self.r))

    def tail_slope(self) -> float:
        if math.isinf(self.r):
            return self.b
        return self.b * (1 + math.exp(-self.a * self.r))

    def kinks(self, t_max: float) -> np.ndarray:
        if math.isinf(self.r):
            return np.array([0.0])
        return self.r * np.arange(0, math.floor(t_max / self.r) + 1)


DelayModelSpec = Annotated[Union[TwoDelay, MultiDelay, ExpKernel], Field(discriminator="kind")]
_MODEL_ADAPTER = TypeAdapter(DelayModelSpec)


def parse_model(payload) -> DelayModelSpec:
    """Build a model from a dict (``kind`` selects the family)."""
    try:
        return _MODEL_ADAPTER.validate_python(payload)
    except ValidationError as e:
        raise ModelSpecError(f"invalid model specification: {e}") from e


# ==========================================
# PARAMETER BINDING
# ==========================================
class ParamSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    path: str
    free: bool = True
    lower: float = -math.inf
    upper: float = math.inf

    @model_validator(mode="after")
    def _check_bounds(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.path}: lower bound must be below upper bound")
        return self


class ParameterBinding(BaseModel):
    """Which model fields are estimated; their order defines theta."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    params: tuple[ParamSpec, ...]

    @model_validator(mode="before")
    @classmethod
    def _accept_shorthand(cls, value):
        if isinstance(value, (list, tuple)):
            value = {"params": value}
        if isinstance(value, dict) and "params" in value:
            value = dict(value)
            value["params"] = [
                {"path": p} if isinstance(p, str) else p for p in value["params"]
            ]
        return value

    @model_validator(mode="after")
    def _check_free(self):
        if not self.free_params:
            raise ValueError("at least one parameter must be free")
        paths = [p.path for p in self.params]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate parameter paths")
        return self

    @classmethod
    def of(cls, *paths: str) -> "ParameterBinding":
        return cls(params=tuple(ParamSpec(path=p) for p in paths))

    @property
    def free_params(self) -> tuple[ParamSpec, ...]:
        return tuple(p for p in self.params if p.free)

    @property
    def names(self) -> list[str]:
        return [p.path for p in self.free_params]

    @property
    def p(self) -> int:
        return len(self.free_params)

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return [(p.lower, p.upper) for p in self.free_params]

    def theta(self, model: DelayModelSpec) -> np.ndarray:
        return np.array([get_field(model, p.path) for p in self.free_params], dtype=float)

    def within_bounds(self, theta) -> bool:
        return all(lo <= t <= hi for t, (lo, hi) in zip(theta, self.bounds))

    def apply(self, model: DelayModelSpec, theta) -> DelayModelSpec:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.p,):
            raise ModelSpecError(f"theta must have length {self.p}, got shape {theta.shape}")
        data = model.model_dump()
        for spec, value in zip(self.free_params, theta):
            _set_path(data, spec.path, float(value))
        return parse_model(data)

    def check(self, model: DelayModelSpec) -> None:
        """Raise if a path does not resolve or a free value is out of bounds."""
        for spec in self.params:
            value = get_field(model, spec.path)
            if spec.free and not spec.lower <= value <= spec.upper:
                raise ModelSpecError(
                    f"{spec.path}={value} outside bounds [{spec.lower}, {spec.upper}]"
                )


def get_field(model: DelayModelSpec, path: str) -> float:
    head, _, index = path.partition(".")
    if head == "kind" or head not in type(model).model_fields:
        raise ModelSpecError(f"unknown parameter path '{path}' for {type(model).__name__}")
    value = getattr(model, head)
    if index:
        try:
            value = value[int(index)]
        except (TypeError, ValueError, IndexError) as e:
            raise ModelSpecError(f"cannot resolve parameter path '{path}'") from e
    return float(value)


def _set_path(data: dict, path: str, value: float) -> None:
    head, _, index = path.partition(".")
    if index:
        seq = list(data[head])
        seq[int(index)] = value
        data[head] = tuple(seq)
    else:
        data[head] = value


def identifiability_warning(model: DelayModelSpec, binding: ParameterBinding) -> Optional[str]:
    """Name the sub-models where K only sees one combination of r and b."""
    free = set(binding.names)
    if not {"r", "b"} <= free:
        return None
    if isinstance(model, TwoDelay) and model.a == model.b:
        return "b = a: the autocovariance depends on (r, b) only through r - 1/b"
    if isinstance(model, ExpKernel) and model.a == 0:
        return "a = 0: the autocovariance depends on (r, b) only through r*sqrt(b)"
    return None


# ==========================================
# STATIONARITY
# ==========================================
@dataclass(frozen=True)
class StationarityVerdict:
    """stationary is None when the test cannot decide."""

    stationary: Optional[bool]
    margin: float
    status: Literal["exact", "sufficient-only", "numerical", "indeterminate"]

    @property
    def certified(self) -> bool:
        return self.stationary is True


def lambda_ab(a: float, b: float) -> float:
    return math.sqrt(abs(a * a - b * b))


def xi(u: float) -> float:
    """Root in (0, pi) of xi = u tan(xi).

    No root exists for u >= 1; the continuous boundary value 0 is returned.
    """
    if u == 0:
        return math.pi / 2
    if u >= 1:
        return 0.0
    if 1 - u < 1e-12:
        return math.sqrt(3 * (1 - u))

    def f(z):
        return z * math.cos(z) - u * math.sin(z)

    if u > 0:
        lo = min(1e-3, 0.1 * math.sqrt(1 - u))
        return brentq(f, lo, math.pi / 2, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return brentq(f, math.pi / 2, math.pi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def _two_delay_verdict(model: TwoDelay) -> StationarityVerdict:
    a, b, r = model.a, model.b, model.r
    if a == 0:
        br = b * r
        stationary = -math.pi / 2 < br < 0
        margin = min(br + math.pi / 2, -br) / r
        return StationarityVerdict(stationary, margin, "exact")
    if a * r >= 1:
        return StationarityVerdict(False, min(1 / r - a, 0.0), "exact")
    lower = -a / math.cos(xi(a * r))
    stationary = lower < b < -a
    margin = min(1 / r - a, b - lower, -a - b)
    return StationarityVerdict(stationary, margin, "exact")


def _exp_kernel_verdict(model: ExpKernel) -> StationarityVerdict:
    a, b, r = model.a, model.b, model.r
    if math.isinf(r):
        return StationarityVerdict(True, min(a, b), "exact")
    if a == 0:
        bound = math.pi**2 / (2 * r * r)
        return StationarityVerdict(0 < b < bound, min(b, bound - b), "exact")
    if a > 0:
        bound = max(math.pi**2 / (r * r), (a * math.expm1(a * r)) ** 2)
        load = b * (1 + math.exp(-a * r))
        if load < bound:
            return StationarityVerdict(True, bound - load, "sufficient-only")
        logger.warning(
            "exp-kernel model (a=%g, b=%g, r=%g) lies outside the known sufficient region",
            a, b, r,
        )
        return StationarityVerdict(None, bound - load, "sufficient-only")
    return _numerical_verdict(model)


# --- argument principle ------------------------------------------------
def _winding_number(model: DelayModelSpec, shift: float, density: int = 1) -> Optional[int]:
    """Zeros of lam - characteristic(lam) inside Re(lam) > shift, or None."""
    bound = model.mass_bound(shift)
    if not math.isfinite(bound):
        return None
    half = bound + 1.0
    right = max(shift, 0.0) + half
    rate = model.horizon + 1.0
    for attempt in range(3):
        scale = density * 2**attempt
        edges = []
        for start, stop in (
            (complex(shift, -half), complex(right, -half)),
            (complex(right, -half), complex(right, half)),
            (complex(right, half), complex(shift, half)),
            (complex(shift, half), complex(shift, -half)),
        ):
            length = abs(stop - start)
            count = max(2000, int(math.ceil(length * rate * 50))) * scale
            edges.append(np.linspace(start, stop, count, endpoint=False))
        contour = np.concatenate(edges + [np.array([complex(shift, -half)])])
        values = contour - model.characteristic(contour)
        magnitude = np.abs(values)
        if magnitude.min() < 1e-10 * max(1.0, magnitude.max()):
            return None
        phase = np.unwrap(np.angle(values))
        if np.max(np.abs(np.diff(phase))) > math.pi / 4:
            continue
        winding = (phase[-1] - phase[0]) / (2 * math.pi)
        if abs(winding - round(winding)) > 0.05:
            return None
        return int(round(winding))
    return None


def _count_with_retry(model, shift: float, nudges=(0.0, 1e-7, -1e-7, 1e-5)) -> Optional[int]:
    for nudge in nudges:
        count = _winding_number(model, shift + nudge)
        if count is not None:
            return count
    return None


def spectral_abscissa(model: DelayModelSpec, tol: float = 1e-7) -> Optional[float]:
    """Real part of the rightmost characteristic root (None if undecidable)."""
    if isinstance(model, TwoDelay):
        arg = model.b * model.r * math.exp(-model.a * model.r)
        return float((model.a + lambertw(arg, 0) / model.r).real)
    count0 = _count_with_retry(model, 0.0)
    if count0 is None:
        return None
    if count0 == 0:
        hi, lo = 0.0, -1.0
        while True:
            count = _count_with_retry(model, lo)
            if count is None:
                return None
            if count > 0:
                break
            hi, lo = lo, 2 * lo
            if lo < -1e4:
                return lo
    else:
        lo, hi = 0.0, model.mass_bound(0.0) + 1.0
    while hi - lo > tol * (1 + abs(lo)):
        mid = 0.5 * (lo + hi)
        count = _count_with_retry(model, mid)
        if count is None:
            return None
        if count > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _numerical_verdict(model: DelayModelSpec) -> StationarityVerdict:
    # only nudge left, a root on the imaginary axis must never be missed
    count = _count_with_retry(model, 0.0, nudges=(0.0, -1e-7, -1e-5))
    if count is None:
        logger.warning("characteristic-root test is numerically unstable for %r", model)
        return StationarityVerdict(None, 0.0, "indeterminate")
    stationary = count == 0
    abscissa = spectral_abscissa(model)
    margin = 0.0 if abscissa is None else -abscissa
    if stationary:
        margin = max(margin, float(np.nextafter(0.0, 1.0)))
    else:
        margin = min(margin, 0.0)
    return StationarityVerdict(stationary, margin, "numerical")


@lru_cache(maxsize=4096)
def is_stationary(model: DelayModelSpec) -> StationarityVerdict:
    if isinstance(model, TwoDelay):
        return _two_delay_verdict(model)
    if isinstance(model, ExpKernel):
        return _exp_kernel_verdict(model)
    return _numerical_verdict(model)


def decay_rate(model: DelayModelSpec) -> float:
    """Exponential mixing rate proxy, minus the spectral abscissa."""
    abscissa = spectral_abscissa(model)
    if abscissa is None or abscissa >= 0:
        return 0.0
    return -abscissa
