"""Chain diagnostics and posterior summaries.

R-hat is arviz's rank-normalized split statistic and ESS is its bulk
effective sample size. MCSE of the mean comes from arviz as well.
"""

import json
import logging
import math
from typing import Optional, Sequence

import arviz as az
import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, Field

from .sampler import PosteriorChains

logger = logging.getLogger(__name__)

FArray = NDArray[np.float64]

RHAT_FLAG = 1.01
DEFAULT_ALPHA_LEVELS = (0.95, 0.5)
MIN_DRAWS = 4


def _is_degenerate(ary: FArray) -> bool:
    return bool(np.all(ary == ary.flat[0])) or not np.all(np.isfinite(ary))


def _usable(ary: FArray) -> bool:
    return ary.shape[1] >= MIN_DRAWS and not _is_degenerate(ary)


def rhat(ary: FArray) -> float:
    """Rank-normalized split R-hat of a (chains, draws) array; needs 2+ chains."""
    ary = np.asarray(ary, dtype=np.float64)
    if ary.shape[0] < 2 or not _usable(ary):
        return math.nan
    return float(az.rhat(ary, method="rank"))


def ess(ary: FArray) -> float:
    """Bulk effective sample size of a (chains, draws) array."""
    ary = np.asarray(ary, dtype=np.float64)
    if not _usable(ary):
        return math.nan
    return float(az.ess(ary, method="bulk"))


def mcse(ary: FArray) -> float:
    """Monte Carlo standard error of the mean of a (chains, draws) array."""
    ary = np.asarray(ary, dtype=np.float64)
    if not _usable(ary):
        return math.nan
    return float(az.mcse(ary, method="mean"))


class ParamDiagnostics(BaseModel):
    name: str
    rhat: Optional[float] = None
    ess: Optional[float] = None
    degenerate: bool = False

    @property
    def flagged(self) -> bool:
        return self.rhat is not None and self.rhat > RHAT_FLAG


class ChainDiagnostics(BaseModel):
    n_chains: int
    n_draws: int
    divergences: int = 0
    divergence_fraction: float = 0.0
    params: list[ParamDiagnostics] = Field(default_factory=list)
    notices: list[str] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)

    @property
    def max_rhat(self) -> Optional[float]:
        values = [p.rhat for p in self.params if p.rhat is not None]
        return max(values) if values else None

    @property
    def flagged(self) -> list[str]:
        return [p.name for p in self.params if p.flagged]

    def get(self, name: str) -> ParamDiagnostics:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_json(self) -> str:
        payload = self.model_dump()
        # NaN is not valid JSON
        for p in payload["params"]:
            for key in ("rhat", "ess"):
                if p[key] is not None and not math.isfinite(p[key]):
                    p[key] = None
        return json.dumps(payload, indent=2)


def diagnostics(chains: PosteriorChains, names: Optional[Sequence[str]] = None) -> ChainDiagnostics:
    """Split R-hat and bulk ESS per reported quantity, plus divergence counts.

    R-hat needs at least two chains; with one chain it is omitted and a notice
    is recorded. Quantities whose draws are all equal are marked degenerate
    and get no ESS.
    """
    report = ChainDiagnostics(
        n_chains=chains.n_chains,
        n_draws=chains.n_draws,
        divergences=chains.divergences,
        divergence_fraction=chains.divergence_fraction,
        warnings=list(chains.warnings),
    )
    single = chains.n_chains < 2
    if single:
        report.notices.append("R-hat needs at least two chains; only ESS is reported")
    for name in names or chains.names:
        ary = chains.column(name)
        degenerate = _is_degenerate(ary)
        r = None if single or degenerate else rhat(ary)
        e = None if degenerate else ess(ary)
        report.params.append(ParamDiagnostics(name=name, rhat=r, ess=e, degenerate=degenerate))

    degenerate = [p.name for p in report.params if p.degenerate]
    if degenerate:
        report.notices.append(f"{len(degenerate)} quantities have constant draws: {degenerate[:5]}")
    if report.flagged:
        message = f"R-hat above {RHAT_FLAG} for {report.flagged[:10]}"
        report.warnings.append(message)
        logger.warning(message)
    for notice in report.notices:
        logger.info(notice)
    return report


class SummaryRow(BaseModel):
    name: str
    mean: float
    sd: float
    mcse: Optional[float] = None
    intervals: dict[float, tuple[float, float]] = Field(default_factory=dict)
    lower_bounds: dict[float, float] = Field(default_factory=dict)
    rhat: Optional[float] = None
    ess: Optional[float] = None


def credible_lower_bound(draws: FArray, alpha: float) -> float:
    """p_alpha: the value exceeded with posterior probability alpha."""
    return float(np.quantile(np.ravel(draws), 1 - alpha))


def summarize(
    chains: PosteriorChains,
    alpha_levels: Sequence[float] = DEFAULT_ALPHA_LEVELS,
    names: Optional[Sequence[str]] = None,
    report: Optional[ChainDiagnostics] = None,
) -> list[SummaryRow]:
    """Posterior mean, sd, MCSE, central intervals and one-sided bounds.

    For each level a the central interval spans the (1-a)/2 and (1+a)/2
    quantiles and the one-sided bound is the (1-a) quantile.
    """
    names = list(names or chains.names)
    report = report or diagnostics(chains, names)
    rows = []
    for name in names:
        ary = chains.column(name)
        draws = np.ravel(ary)
        diag = report.get(name)
        sd = float(np.std(draws, ddof=1)) if draws.size > 1 else 0.0
        error = None if diag.degenerate else mcse(ary)
        row = SummaryRow(
            name=name,
            mean=float(np.mean(draws)),
            sd=sd,
            mcse=error if error is not None and math.isfinite(error) else None,
            rhat=diag.rhat,
            ess=diag.ess,
        )
        for a in alpha_levels:
            lo, hi = np.quantile(draws, [(1 - a) / 2, (1 + a) / 2])
            row.intervals[a] = (float(lo), float(hi))
            row.lower_bounds[a] = credible_lower_bound(draws, a)
        rows.append(row)
    return rows


def summary_frame(rows: Sequence[SummaryRow]) -> pd.DataFrame:
    """Flatten summary rows into one table, one column per interval end and bound."""
    records = []
    for row in rows:
        rec: dict[str, object] = {
            "name": row.name,
            "mean": row.mean,
            "sd": row.sd,
            "mcse": row.mcse,
            "rhat": row.rhat,
            "ess": row.ess,
        }
        for a, (lo, hi) in row.intervals.items():
            rec[f"ci{a:g}_lo"] = lo
            rec[f"ci{a:g}_hi"] = hi
        for a, bound in row.lower_bounds.items():
            rec[f"p_{a:g}"] = bound
        records.append(rec)
    return pd.DataFrame.from_records(records).set_index("name")
