import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from data.data import SeriesHelper
from data.simulator import SimConfig, sample_observations, simulate_path
from sdde.config import LossConfig, StudyConfig
from sdde.estimator_service import EstimatorService
from sdde.exceptions import DataError, NonStationaryModelError, SDDEError
from sdde.model import DelayModelSpec, is_stationary, parse_model
from sdde.pbef import efficiency_loss, m1, m2_isserlis, m2_montecarlo, sensitivity
from sdde.predictor import coefficients_for

logger = logging.getLogger(__name__)

RAW_COLUMNS = [
    "theta_index", "cell", "delta", "n", "k", "replicate",
    "param", "estimate", "stderr", "converged", "error",
]
SUMMARY_COLUMNS = ["theta_index", "delta", "n", "k", "param", "mean", "sd", "corr_ab", "fails", "R"]
LOSS_COLUMNS = [
    "a", "b", "r", "sigma2", "delta", "k", "param",
    "loss", "avar_opt", "avar_pseudo", "J_truncation",
]
LOSS_MC_DRAWS = 200


def summarize(raw: pd.DataFrame, param_names: list[str]) -> pd.DataFrame:
    """Per-cell means, spreads and failure counts from per-replication estimates."""
    rows = []
    keys = ["theta_index", "delta", "n", "k"]
    for (theta_index, delta, n, k), group in raw.groupby(keys, sort=True):
        replications = int(group["replicate"].nunique())
        wide = group.pivot(index="replicate", columns="param", values="estimate")
        ok = group.pivot(index="replicate", columns="param", values="converged").astype(bool)
        corr = math.nan
        if len(param_names) >= 2:
            first, second = param_names[:2]
            both = ok[first] & ok[second]
            if both.sum() >= 3:
                corr = float(np.corrcoef(wide.loc[both, first], wide.loc[both, second])[0, 1])
        for name in param_names:
            values = wide.loc[ok[name], name].to_numpy(dtype=float)
            rows.append(
                {
                    "theta_index": int(theta_index),
                    "delta": float(delta),
                    "n": int(n),
                    "k": int(k),
                    "param": name,
                    "mean": float(np.mean(values)) if len(values) else math.nan,
                    "sd": float(np.std(values, ddof=1)) if len(values) >= 2 else math.nan,
                    "corr_ab": corr,
                    "fails": int(replications - len(values)),
                    "R": replications,
                }
            )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


@dataclass
class StudyResult:
    raw: pd.DataFrame
    summary: pd.DataFrame
    param_names: list[str]
    aborted: list[tuple[int, int]] = field(default_factory=list)

    def verify(self) -> bool:
        """Recompute every aggregate from the raw table and compare exactly."""
        again = summarize(self.raw, self.param_names)
        mine = self.summary.reset_index(drop=True)
        if list(again.columns) != list(mine.columns) or len(again) != len(mine):
            raise DataError("study summary does not match its raw estimates")
        for column in SUMMARY_COLUMNS:
            left, right = again[column].to_numpy(), mine[column].to_numpy()
            if left.dtype.kind == "f" or right.dtype.kind == "f":
                same = np.array_equal(left.astype(float), right.astype(float), equal_nan=True)
            else:
                same = np.array_equal(left, right)
            if not same:
                raise DataError(f"study column '{column}' does not match its raw estimates")
        return True

    def to_csv(self, path) -> Path:
        path = Path(path)
        SeriesHelper.write_table(self.raw, raw_path(path))
        return SeriesHelper.write_table(self.summary, path)

    @classmethod
    def load(cls, path) -> "StudyResult":
        summary = SeriesHelper.read_table(path)
        raw = SeriesHelper.read_table(raw_path(Path(path)))
        raw["error"] = raw["error"].astype(object).where(raw["error"].notna(), None)
        names = list(dict.fromkeys(raw["param"]))
        result = cls(raw=raw, summary=summary, param_names=names)
        result.verify()
        return result


def raw_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}_raw{path.suffix or '.csv'}")


def _replicate_rows(config: StudyConfig, theta_index, theta, cell_index, delta, n, rep) -> list[dict]:
    binding = config.params
    truth = binding.apply(config.model, theta)
    sim = SimConfig(
        model=truth,
        step=config.step,
        horizon=n * delta,
        warmup=config.warmup,
        seed=config.seed,
        replicate=(theta_index, cell_index, rep),
    )
    base = {"theta_index": theta_index, "cell": cell_index, "delta": delta, "n": n, "replicate": rep}
    service = EstimatorService(config.solver)
    rows = []
    try:
        series = sample_observations(simulate_path(sim), delta, n)
        template = _estimator_template(config, service, series)
    except SDDEError as e:
        for k in config.depths:
            rows += _failed_rows(base, k, binding.names, f"{type(e).__name__}: {e}")
        return rows
    for k in config.depths:
        try:
            res = service.estimate(series, template, binding, k, config.method)
        except SDDEError as e:
            rows += _failed_rows(base, k, binding.names, f"{type(e).__name__}: {e}")
            continue
        for name, value, se in zip(res.param_names, res.theta_hat, res.stderr):
            rows.append(
                {
                    **base, "k": k, "param": name, "estimate": float(value),
                    "stderr": float(se), "converged": res.converged, "error": None,
                }
            )
    return rows


def _estimator_template(config: StudyConfig, service: EstimatorService, series) -> DelayModelSpec:
    """Fixed fields from the config, free ones at the configured or data-driven start."""
    if config.init is not None:
        return config.params.apply(config.model, config.init)
    start = service.ou_start(series, config.model, config.params)
    if start is None:
        logger.debug("no Ornstein-Uhlenbeck start for %s, using the config model", type(config.model).__name__)
        return config.model
    return config.params.apply(config.model, start)


def _failed_rows(base: dict, k: int, names: list[str], error: str) -> list[dict]:
    return [
        {**base, "k": k, "param": name, "estimate": math.nan, "stderr": math.nan,
         "converged": False, "error": error}
        for name in names
    ]


def _model_columns(model: DelayModelSpec) -> dict:
    out = {}
    for name in ("a", "b", "r"):
        out[name] = float(getattr(model, name)) if name in type(model).model_fields else math.nan
    out["sigma2"] = model.sigma**2
    return out


class StudyService:
    def __init__(self, show_progress: bool = False):
        self.show_progress = show_progress

    def thetas(self, config: StudyConfig) -> list[np.ndarray]:
        if config.thetas is None:
            return [config.params.theta(config.model)]
        return [np.asarray(t, dtype=float) for t in config.thetas]

    def check_region(self, config: StudyConfig) -> None:
        for theta in self.thetas(config):
            model = config.params.apply(config.model, theta)
            verdict = is_stationary(model)
            if not verdict.certified:
                raise NonStationaryModelError(
                    f"study model {model!r} is not certified stationary "
                    f"({verdict.status}, margin {verdict.margin:.3g})",
                    verdict,
                )

    def run_study(self, config: StudyConfig) -> StudyResult:
        self.check_region(config)
        rows, aborted = [], []
        for theta_index, theta in enumerate(self.thetas(config)):
            for cell_index, cell in enumerate(config.cells):
                n = config.cell_size(cell)
                jobs = Parallel(n_jobs=config.threads, return_as="generator")(
                    delayed(_replicate_rows)(config, theta_index, theta, cell_index, cell.delta, n, rep)
                    for rep in range(config.replications)
                )
                limit = config.max_fail_fraction * config.replications * len(config.depths)
                fails = 0
                stream = tqdm(
                    jobs,
                    total=config.replications,
                    desc=f"theta {theta_index} delta={cell.delta:g} n={n}",
                    disable=not self.show_progress,
                )
                for replicate_rows in stream:
                    rows += replicate_rows
                    fails += sum(1 for row in replicate_rows[:: len(config.params.names)] if not row["converged"])
                    if fails > limit:
                        logger.error(
                            "cell (delta=%g, n=%d) aborted: %d failed estimates exceed %.0f%%",
                            cell.delta, n, fails, 100 * config.max_fail_fraction,
                        )
                        aborted.append((theta_index, cell_index))
                        stream.close()
                        jobs.close()
                        break
                logger.info("theta %d, delta=%g, n=%d: %d failed estimates", theta_index, cell.delta, n, fails)
        raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
        result = StudyResult(
            raw=raw,
            summary=summarize(raw, config.params.names),
            param_names=config.params.names,
            aborted=aborted,
        )
        if config.out:
            result.to_csv(config.out)
        return result

    def run_loss(self, config: LossConfig) -> pd.DataFrame:
        cap = config.solver.m2_cap
        rows = []
        for point in config.points:
            model = parse_model({**config.model.model_dump(), **point})
            verdict = is_stationary(model)
            if not verdict.certified:
                raise NonStationaryModelError(
                    f"{model!r} lies outside the stationarity region "
                    f"({verdict.status}, margin {verdict.margin:.3g})",
                    verdict,
                )
            for delta in config.deltas:
                for k in config.depths:
                    rows += self._loss_rows(config, model, delta, k, cap)
        columns = LOSS_COLUMNS + (["loss_mc", "loss_mc_se"] if config.monte_carlo else [])
        table = pd.DataFrame(rows, columns=columns)
        if config.out:
            SeriesHelper.write_table(table, config.out)
        return table

    def _loss_rows(self, config: LossConfig, model, delta: float, k: int, cap: int) -> list[dict]:
        binding = config.params
        grid, coeffs = coefficients_for(model, delta, k, binding, m=k + cap)
        Kmat = grid.toeplitz(k)
        S = sensitivity(coeffs, Kmat)
        M1 = m1(coeffs, Kmat)
        m2 = m2_isserlis(grid, coeffs, n=config.n, tol=config.solver.m2_tol, cap=cap)
        exact = efficiency_loss(S, M1, m2.matrix)
        mc_loss = mc_se = None
        if config.monte_carlo is not None:
            mc = config.monte_carlo
            estimate = m2_montecarlo(
                model, coeffs, k, mc.nsim, mc.seed, n_obs=mc.n_obs, step=mc.step, threads=config.threads
            )
            mc_loss = efficiency_loss(S, M1, estimate.matrix).loss
            mc_se = _loss_spread(S, M1, estimate, mc.seed)
        rows = []
        for j, name in enumerate(binding.names):
            row = {
                **_model_columns(model),
                "delta": delta,
                "k": k,
                "param": name,
                "loss": float(exact.loss[j]),
                "avar_opt": float(exact.avar_opt[j]),
                "avar_pseudo": float(exact.avar_pseudo[j]),
                "J_truncation": m2.J,
            }
            if mc_loss is not None:
                row["loss_mc"] = float(mc_loss[j])
                row["loss_mc_se"] = float(mc_se[j])
            rows.append(row)
        logger.info("loss at delta=%g, k=%d: %s", delta, k, np.array2string(exact.loss, precision=4))
        return rows


def _loss_spread(S, M1, estimate, seed: int) -> np.ndarray:
    """Spread of the loss when M2 is redrawn within its Monte Carlo standard errors."""
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(LOSS_MC_DRAWS):
        noise = rng.standard_normal(estimate.se.shape) * estimate.se
        noise = np.triu(noise) + np.triu(noise, 1).T
        try:
            draws.append(efficiency_loss(S, M1, estimate.matrix + noise).loss)
        except SDDEError:
            continue
    if len(draws) < 2:
        return np.full(S.shape[0], math.nan)
    return np.std(np.array(draws), axis=0, ddof=1)


study_service = StudyService()
