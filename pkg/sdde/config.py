"""JSON configuration documents for the CLI and the study harness."""

import math
from pathlib import Path
from typing import Literal, Optional, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data.simulator import grid_problem
from sdde.exceptions import ModelSpecError
from sdde.model import DelayModelSpec, ParameterBinding, parse_model

EstimatorMethod = Literal["pseudo-ML", "optimal-PBEF", "two-step", "exact-ML"]
M2Route = Literal["isserlis", "montecarlo", "zero"]


class _Document(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class MonteCarloSettings(_Document):
    """Simulation sizes for the Monte Carlo M2 route."""

    nsim: int = Field(default=400, ge=2)
    n_obs: int = Field(default=500, ge=2)
    step: float = Field(default=0.01, gt=0)
    seed: int = Field(default=0, ge=0)


class SolverSettings(_Document):
    score_tol: float = Field(default=1e-8, gt=0)  # on |score| / n
    numerical_score_tol: float = Field(default=1e-5, gt=0)  # when K comes from quadrature
    step_tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=200, ge=1)
    restarts: int = Field(default=5, ge=0)
    region_margin: float = Field(default=1e-6, ge=0)
    restart_seed: int = Field(default=0, ge=0)
    m2_route: M2Route = "isserlis"
    m2_tol: float = Field(default=1e-10, gt=0)
    m2_cap: int = Field(default=200, ge=1)
    monte_carlo: MonteCarloSettings = MonteCarloSettings()


class SimulateConfig(_Document):
    model: DelayModelSpec
    step: float = Field(default=0.001, gt=0)
    horizon: Optional[float] = Field(default=None, gt=0)
    warmup: Optional[float] = Field(default=None, ge=0)
    delta: Optional[float] = Field(default=None, gt=0)
    n: Optional[int] = Field(default=None, ge=2)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_span(self):
        if self.horizon is None and (self.delta is None or self.n is None):
            raise ValueError("give a horizon or both delta and n")
        if (self.delta is None) != (self.n is None):
            raise ValueError("delta and n go together")
        return self

    @property
    def span(self) -> float:
        return self.horizon if self.horizon is not None else self.n * self.delta


class AutocovConfig(_Document):
    model: DelayModelSpec
    delta: float = Field(gt=0)
    m: int = Field(ge=0)
    method: Literal["auto", "closed-form", "numerical"] = "auto"
    params: Optional[ParameterBinding] = None


class EstimateConfig(_Document):
    """model carries the fixed values and the default starting point."""

    model: DelayModelSpec
    params: ParameterBinding
    k: int = Field(ge=1)
    method: EstimatorMethod = "pseudo-ML"
    data: Optional[str] = None
    delta: Optional[float] = Field(default=None, gt=0)
    init: Optional[tuple[float, ...]] = None
    seed: Optional[int] = None
    solver: SolverSettings = SolverSettings()


class StudyCell(_Document):
    delta: float = Field(gt=0)
    n: Optional[int] = Field(default=None, ge=2)


class StudyConfig(_Document):
    model: DelayModelSpec
    params: ParameterBinding
    thetas: Optional[tuple[tuple[float, ...], ...]] = None
    cells: tuple[StudyCell, ...]
    policy: Literal["fixed-product", "fixed-n"] = "fixed-product"
    product: float = Field(default=200.0, gt=0)
    depths: tuple[int, ...] = (1, 3, 5)
    replications: int = Field(default=200, ge=1)
    step: float = Field(default=0.001, gt=0)
    warmup: Optional[float] = Field(default=None, ge=0)
    method: EstimatorMethod = "pseudo-ML"
    seed: int = Field(default=0, ge=0)
    # estimator starting point; None fits an Ornstein-Uhlenbeck start to each replicate
    init: Optional[tuple[float, ...]] = None
    threads: int = 1
    max_fail_fraction: float = Field(default=0.2, ge=0, le=1)
    out: Optional[str] = None
    solver: SolverSettings = SolverSettings()

    @model_validator(mode="after")
    def _check_cells(self):
        if not self.cells:
            raise ValueError("at least one (delta, n) cell is required")
        if any(k < 1 for k in self.depths) or not self.depths:
            raise ValueError("depths must be positive")
        for cell in self.cells:
            if self.policy == "fixed-n" and cell.n is None:
                raise ValueError("policy 'fixed-n' needs n in every cell")
            if self.policy == "fixed-product" and cell.n is not None:
                if not math.isclose(cell.n * cell.delta, self.product, rel_tol=1e-9):
                    raise ValueError(f"cell n*delta = {cell.n * cell.delta} differs from {self.product}")
        for theta in (self.thetas or ()) + ((self.init,) if self.init is not None else ()):
            if len(theta) != self.params.p:
                raise ValueError(f"every theta needs {self.params.p} values")
        if self.init is not None and not self.params.within_bounds(self.init):
            raise ValueError(f"init {self.init} lies outside the parameter bounds")
        deltas = [cell.delta for cell in self.cells]
        for model in self.simulated_models():
            problem = grid_problem(model, self.step, deltas)
            if problem is not None:
                raise ValueError(problem)
        return self

    def simulated_models(self) -> list:
        if self.thetas is None:
            return [self.model]
        return [self.params.apply(self.model, theta) for theta in self.thetas]

    def cell_size(self, cell: StudyCell) -> int:
        if cell.n is not None:
            return cell.n
        return int(round(self.product / cell.delta))


class LossConfig(_Document):
    """Efficiency-loss table over parameter points, sampling intervals and depths."""

    model: DelayModelSpec
    params: ParameterBinding
    points: tuple[dict[str, float], ...] = ({},)
    deltas: tuple[float, ...] = (1.0,)
    depths: tuple[int, ...] = (1,)
    n: Optional[int] = Field(default=None, ge=2)
    monte_carlo: Optional[MonteCarloSettings] = None
    threads: int = 1
    out: Optional[str] = None
    solver: SolverSettings = SolverSettings()

    @model_validator(mode="after")
    def _check_simulation_grid(self):
        if self.monte_carlo is None:
            return self
        for point in self.points:
            model = parse_model({**self.model.model_dump(), **point})
            problem = grid_problem(model, self.monte_carlo.step, self.deltas)
            if problem is not None:
                raise ValueError(problem)
        return self


Document = TypeVar("Document", bound=BaseModel)


def load_config(path, model_cls: type[Document]) -> Document:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return model_cls.model_validate_json(text)
    except ValidationError as e:
        raise ModelSpecError(f"invalid {model_cls.__name__} in {path}: {e}") from e
