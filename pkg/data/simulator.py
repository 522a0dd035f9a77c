"""Euler-Maruyama paths of affine SDDEs and their discrete observation.

The Euler recursion of every supported family is a linear filter driven by the
Gaussian increments. Its short-lag part runs through ``scipy.signal.lfilter``
block by block; lags at least one block long only see finished blocks.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.signal import lfilter, lfiltic

from sdde.exceptions import DataError, NonStationaryModelError, SimulationDivergedError
from sdde.likelihood import ObservationSeries
from sdde.model import DelayModelSpec, ExpKernel, decay_rate, is_stationary

logger = logging.getLogger(__name__)

OVERFLOW_GUARD = 1e100
BURN_IN_FACTOR = 50.0


def _is_multiple(span: float, step: float) -> bool:
    ratio = span / step
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


def grid_problem(model: DelayModelSpec, step: float, deltas=()) -> Optional[str]:
    """Why an Euler grid of this step cannot carry the model and sampling intervals, or None."""
    if isinstance(model, ExpKernel) and step > model.horizon:
        return "step must not exceed the kernel horizon"
    _, delays = model.atoms()
    for d in delays:
        if not _is_multiple(d, step):
            return f"step {step} does not divide the delay {d}"
    for delta in deltas:
        if delta < step or not _is_multiple(delta, step):
            return f"delta={delta} is not a multiple of the step {step}"
    return None


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: DelayModelSpec
    step: float = Field(default=0.001, gt=0)
    horizon: float = Field(gt=0)
    warmup: Optional[float] = Field(default=None, ge=0)
    warmup_cap: float = Field(default=2000.0, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    replicate: tuple[int, ...] = ()
    initial: Literal["zero", "supplied"] = "zero"
    initial_segment: Optional[tuple[float, ...]] = None
    allow_nonstationary: bool = False

    @model_validator(mode="after")
    def _check_grid(self):
        problem = grid_problem(self.model, self.step)
        if problem is not None:
            raise ValueError(problem)
        if self.initial == "supplied":
            if self.initial_segment is None:
                raise ValueError("initial='supplied' needs initial_segment")
            if len(self.initial_segment) != self.buffer_length:
                raise ValueError(
                    f"initial_segment must hold {self.buffer_length} values on [-r, 0]"
                )
        return self

    @property
    def buffer_length(self) -> int:
        """Grid points on [-r, 0]."""
        return int(round(self.model.horizon / self.step)) + 1


@dataclass(frozen=True)
class SimulatedPath:
    times: np.ndarray
    values: np.ndarray
    step: float
    warmup: float
    config: SimConfig

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"index": np.arange(len(self.values)), "time": self.times, "value": self.values}
        )


@dataclass(frozen=True)
class AutocovEstimate:
    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lag": self.lags, "value": self.values, "stderr": self.stderr})


# ==========================================
# LINEAR RECURSIONS
# ==========================================
@dataclass(frozen=True)
class _Recursion:
    """sum_l near[l] y_{m-l} + sum far[lag] y_{m-lag} = sum_l noise[l] eps_{m-l}."""

    near: np.ndarray
    far: tuple[tuple[int, float], ...]
    noise: np.ndarray

    @property
    def history(self) -> int:
        lags = [lag for lag, _ in self.far] + [len(self.near) - 1]
        return max(lags)

    @property
    def block(self) -> Optional[int]:
        return min((lag for lag, _ in self.far), default=None)


def _atomic_recursion(model, h: float) -> _Recursion:
    alphas, delays = model.atoms()
    steps = np.rint(delays / h).astype(int)
    local = 1.0 + h * float(np.sum(alphas[steps == 0]))
    far = tuple((1 + int(d), -h * float(w)) for w, d in zip(alphas, steps) if d > 0)
    return _Recursion(near=np.array([1.0, -local]), far=far, noise=np.array([1.0]))


def _kernel_recursion(model: ExpKernel, h: float) -> _Recursion:
    """Trapezoid drift over the buffer, multiplied through by (1 - q z^-1)."""
    D = max(1, int(round(model.horizon / h)))
    q = math.exp(-model.a * h)
    beta = model.b * h * h
    near = np.array([1.0, -(1.0 + q) + beta / 2, q + beta * q / 2])
    far = {D + 1: -beta * q**D / 2, D + 2: -beta * q ** (D + 1) / 2}
    for lag in list(far):
        if lag < len(near):
            near[lag] += far.pop(lag)
    return _Recursion(near=near, far=tuple(sorted(far.items())), noise=np.array([1.0, -q]))


def _recursion(model: DelayModelSpec, h: float) -> _Recursion:
    if isinstance(model, ExpKernel):
        return _kernel_recursion(model, h)
    return _atomic_recursion(model, h)


def _kernel_drift(model: ExpKernel, h: float, past: np.ndarray) -> float:
    """Trapezoid drift at the newest entry of `past` (newest last)."""
    D = len(past) - 1
    w = np.exp(-model.a * h * np.arange(D + 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return -model.b * h * float(w @ past[::-1])


@lru_cache(maxsize=1024)
def _mixing_rate(model: DelayModelSpec) -> float:
    return decay_rate(model)


def burn_in(config: SimConfig) -> float:
    if config.warmup is not None:
        return config.warmup
    rate = _mixing_rate(config.model)
    span = BURN_IN_FACTOR * config.model.horizon
    if rate > 0:
        span = max(span, BURN_IN_FACTOR / rate)
    else:
        span = config.warmup_cap
    return min(span, config.warmup_cap)


# ==========================================
# SIMULATION
# ==========================================
def _generator(config: SimConfig) -> np.random.Generator:
    sequence = np.random.SeedSequence(config.seed, spawn_key=tuple(config.replicate))
    return np.random.Generator(np.random.Philox(sequence))


def simulate_path(config: SimConfig) -> SimulatedPath:
    model, h = config.model, config.step
    verdict = is_stationary(model)
    if not verdict.certified:
        if not config.allow_nonstationary:
            raise NonStationaryModelError(
                f"refusing to simulate a model not certified stationary ({verdict.status})", verdict
            )
        logger.warning("simulating a model outside the certified stationarity region: %r", model)

    warmup = burn_in(config)
    warm_steps = int(math.ceil(warmup / h - 1e-9))
    keep_steps = int(round(config.horizon / h))
    total = warm_steps + keep_steps
    rec = _recursion(model, h)
    H = rec.history

    y = np.zeros(H + total + 1)
    eps = np.zeros(total + 1)
    if config.initial == "supplied":
        segment = np.asarray(config.initial_segment, dtype=float)
        span = min(len(segment), H + 1)
        y[H + 1 - span : H + 1] = segment[-span:]
        y[: H + 1 - span] = segment[0]
        if isinstance(model, ExpKernel):
            # residual that makes the multiplied recursion exact at m = 1
            past = y[H - config.buffer_length : H]
            eps[0] = y[H] - y[H - 1] - h * _kernel_drift(model, h, past)

    eps[1:] = model.sigma * math.sqrt(h) * _generator(config).standard_normal(total)
    drive = lfilter(rec.noise, [1.0], eps)

    order = len(rec.near) - 1
    block = rec.block or total
    m = 1
    while m <= total:
        end = min(m + block, total + 1)
        u = drive[m:end].copy()
        for lag, coef in rec.far:
            u -= coef * y[H + m - lag : H + end - lag]
        zi = lfiltic([1.0], rec.near, y[H + m - order : H + m][::-1])
        out, _ = lfilter([1.0], rec.near, u, zi=zi)
        if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > OVERFLOW_GUARD:
            raise SimulationDivergedError(
                f"path exceeded {OVERFLOW_GUARD:.0e} near t={(m - warm_steps) * h:.6g} "
                f"(burn-in {warmup:.6g}) for {model!r}"
            )
        y[H + m : H + end] = out
        m = end

    values = y[H + warm_steps :]
    times = h * np.arange(keep_steps + 1)
    logger.debug(
        "simulated %d steps (burn-in %d, block %d) for %s", total, warm_steps, block, model.kind
    )
    return SimulatedPath(times=times, values=values, step=h, warmup=warm_steps * h, config=config)


def sample_observations(path: SimulatedPath, delta: float, n: Optional[int] = None) -> ObservationSeries:
    """X(delta), ..., X(n delta) by exact index subsampling."""
    stride = int(round(delta / path.step))
    if stride < 1 or not _is_multiple(delta, path.step):
        raise DataError(f"delta={delta} is not a multiple of the step {path.step}")
    available = (len(path.values) - 1) // stride
    n = available if n is None else n
    if n > available:
        raise DataError(f"path covers {available} observations at delta={delta}, {n} requested")
    x = path.values[stride : stride * n + 1 : stride]
    return ObservationSeries.of(x, delta, seed=path.config.seed, model=path.config.model)


def empirical_autocov(
    data: Union[ObservationSeries, np.ndarray], maxlag: int, batches: int = 20
) -> AutocovEstimate:
    """Sample autocovariances sum x_i x_{i+j} / n (no demeaning) with batch-means errors."""
    if isinstance(data, ObservationSeries):
        x, delta = np.asarray(data.x), data.delta
    else:
        x, delta = np.asarray(data, dtype=float), 1.0
    n = len(x)
    if n <= maxlag:
        raise DataError(f"{n} observations cannot estimate lag {maxlag}")
    values, stderr = np.empty(maxlag + 1), np.empty(maxlag + 1)
    for j in range(maxlag + 1):
        products = x[: n - j] * x[j:]
        values[j] = np.sum(products) / n
        usable = len(products) - len(products) % batches
        if usable < 2 * batches:
            stderr[j] = np.nan
            continue
        means = products[:usable].reshape(batches, -1).mean(axis=1)
        stderr[j] = (n - j) / n * means.std(ddof=1) / math.sqrt(batches)
    return AutocovEstimate(lags=delta * np.arange(maxlag + 1), values=values, stderr=stderr)
