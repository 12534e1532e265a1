"""Long/short decile portfolio simulation and its metric suite.

Signals take the top and bottom forecast deciles, positions are equal
weighted within each leg (+1 long, -1 short, zero net), rebalanced on a
fixed cadence with no friction costs. Metrics cover annualized total
return, volatility, Sharpe, relative return versus a baseline and the
information ratio, each with a plain one-sample t-test.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

__all__ = [
    "MetricsReport",
    "PortfolioSeries",
    "RebalanceRecord",
    "SignalSet",
    "compute_metrics",
    "decile_signals",
    "simulate",
]


@dataclass(frozen=True)
class SignalSet:
    """Buy/sell entity sets for one time-step; legs are always disjoint."""

    time_id: str
    buys: tuple[str, ...]
    sells: tuple[str, ...]

    def __post_init__(self) -> None:
        if set(self.buys) & set(self.sells):
            raise ValueError("buy and sell legs overlap")


def decile_signals(forecasts: Mapping[str, float], time_id: str) -> SignalSet:
    """Top forecast decile as buys, bottom decile as sells.

    Entities are ranked by (forecast descending, entity id ascending) so
    boundary ties resolve to the lowest ids deterministically; the sell leg
    is drawn from the ascending ranking excluding anything already bought,
    which keeps the legs disjoint even under degenerate all-tied forecasts.
    """
    n = len(forecasts)
    if n < 10:
        raise ValueError(f"need at least 10 forecast entities, got {n}")
    k = n // 10
    desc = sorted(forecasts, key=lambda e: (-forecasts[e], e))
    buys = desc[:k]
    asc = sorted(forecasts, key=lambda e: (forecasts[e], e))
    bought = set(buys)
    sells = [e for e in asc if e not in bought][:k]
    return SignalSet(time_id=time_id, buys=tuple(buys), sells=tuple(sells))


@dataclass(frozen=True)
class RebalanceRecord:
    time_id: str
    longs: tuple[str, ...]
    sells: tuple[str, ...]


@dataclass(frozen=True)
class PortfolioSeries:
    """Per-period long/short portfolio returns between rebalances."""

    times: tuple[str, ...]
    returns: np.ndarray
    rebalances: tuple[RebalanceRecord, ...]

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.returns, dtype=float))
        arr.flags.writeable = False
        object.__setattr__(self, "returns", arr)
        if arr.shape != (len(self.times),):
            raise ValueError("one return per period required")


def _leg_return(
    held: list[str],
    realized: Mapping[str, float],
    time_id: str,
    leg: str,
) -> float:
    """Equal-weighted leg return; entities without a realized return are
    dropped from the position and the leg renormalized over the remainder."""
    missing = [e for e in held if e not in realized]
    for e in missing:
        held.remove(e)
        log.warning("no realized return for %s entity %s at %s; dropped", leg, e, time_id)
    if not held:
        return 0.0
    return float(np.mean([realized[e] for e in held]))


def simulate(
    times: Sequence[str],
    period_returns: Mapping[str, Mapping[str, float]],
    signals: Mapping[str, SignalSet],
    rebalance_every: int = 6,
) -> PortfolioSeries:
    """Run the long/short simulation over ``times`` with zero friction.

    Rebalances happen at ``times[0]`` and every ``rebalance_every`` steps
    after; each period's portfolio return is the equal-weighted long leg
    minus the equal-weighted short leg over ``period_returns`` at that time.
    """
    if rebalance_every < 1:
        raise ValueError("rebalance_every must be >= 1")
    times = [str(t) for t in times]
    if len(times) < 2:
        raise ValueError("need at least two periods to simulate")
    rebalances: list[RebalanceRecord] = []
    out_times: list[str] = []
    out_returns: list[float] = []
    longs: list[str] = []
    shorts: list[str] = []
    for i, t in enumerate(times):
        if i % rebalance_every == 0:
            if t not in signals:
                raise ValueError(f"no signals at rebalance date {t!r}")
            sig = signals[t]
            longs = list(sig.buys)
            shorts = list(sig.sells)
            rebalances.append(RebalanceRecord(time_id=t, longs=tuple(longs), sells=tuple(shorts)))
        if i == 0:
            continue
        realized = period_returns.get(t, {})
        ret = _leg_return(longs, realized, t, "long") - _leg_return(shorts, realized, t, "short")
        out_times.append(t)
        out_returns.append(ret)
    return PortfolioSeries(tuple(out_times), np.array(out_returns), tuple(rebalances))


@dataclass(frozen=True)
class MetricsReport:
    """Figure-of-merit suite for one strategy series versus its baseline.

    ``sharpe`` and ``info_ratio`` are None when their denominators vanish,
    with the reason recorded; coherence ``sharpe * sd == tr`` and
    ``info_ratio * rr_sd == rr`` holds whenever defined.
    """

    tr: float
    sd: float
    sharpe: float | None
    sharpe_t: float | None
    sharpe_p: float | None
    rr: float
    rr_sd: float
    info_ratio: float | None
    ir_t: float | None
    ir_p: float | None
    n_periods: int
    periods_per_year: int
    notes: tuple[str, ...] = ()

    def to_obj(self) -> dict:
        return {
            "tr": self.tr,
            "sd": self.sd,
            "sharpe": self.sharpe,
            "sharpe_t": self.sharpe_t,
            "sharpe_p": self.sharpe_p,
            "rr": self.rr,
            "rr_sd": self.rr_sd,
            "info_ratio": self.info_ratio,
            "ir_t": self.ir_t,
            "ir_p": self.ir_p,
            "n_periods": self.n_periods,
            "periods_per_year": self.periods_per_year,
            "notes": list(self.notes),
        }

    @classmethod
    def from_obj(cls, obj: Mapping) -> "MetricsReport":
        return cls(
            tr=obj["tr"],
            sd=obj["sd"],
            sharpe=obj["sharpe"],
            sharpe_t=obj["sharpe_t"],
            sharpe_p=obj["sharpe_p"],
            rr=obj["rr"],
            rr_sd=obj["rr_sd"],
            info_ratio=obj["info_ratio"],
            ir_t=obj["ir_t"],
            ir_p=obj["ir_p"],
            n_periods=obj["n_periods"],
            periods_per_year=obj["periods_per_year"],
            notes=tuple(obj.get("notes", ())),
        )


def _sample_std(series: np.ndarray) -> float:
    """ddof-1 standard deviation; exactly 0 for a constant series."""
    if np.ptp(series) == 0.0:
        return 0.0
    return float(series.std(ddof=1))


def _t_stat(series: np.ndarray) -> tuple[float | None, float | None]:
    n = series.size
    sd = _sample_std(series)
    if sd == 0.0:
        return None, None
    t = float(series.mean() / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return t, p


def compute_metrics(
    strategy_returns: Sequence[float],
    baseline_returns: Sequence[float],
    periods_per_year: int,
) -> MetricsReport:
    """Annualized metric suite with fixed, documented conventions.

    TR compounds the per-period returns and annualizes geometrically; SD is
    the sample (ddof=1) per-period standard deviation scaled by the square
    root of periods per year; RR is the arithmetic annualized mean of the
    per-period difference series (strategy minus baseline). t-statistics are
    plain one-sample mean-over-standard-error tests with two-sided p-values
    and no autocorrelation correction.
    """
    s = np.asarray(strategy_returns, dtype=float)
    b = np.asarray(baseline_returns, dtype=float)
    if s.size < 2:
        raise ValueError("need at least two periods")
    if s.shape != b.shape:
        raise ValueError("strategy and baseline series must have equal length")
    if periods_per_year < 1:
        raise ValueError("periods_per_year must be >= 1")

    n = s.size
    notes: list[str] = []
    total = float(np.prod(1.0 + s))
    if total <= 0.0:
        # a >100% single-period loss wipes the portfolio out; the geometric
        # annualization is undefined below that floor
        tr = -1.0
        notes.append("tr floored: compounded return wiped out")
    else:
        tr = total ** (periods_per_year / n) - 1.0
    sd = _sample_std(s) * math.sqrt(periods_per_year)
    if sd > 0:
        sharpe = tr / sd
    else:
        sharpe = None
        notes.append("sharpe absent: zero volatility")
    sharpe_t, sharpe_p = _t_stat(s)

    diff = s - b
    rr = float(diff.mean()) * periods_per_year
    rr_sd = _sample_std(diff) * math.sqrt(periods_per_year)
    if rr_sd > 0:
        info_ratio = rr / rr_sd
    else:
        info_ratio = None
        notes.append("info_ratio absent: zero relative volatility")
    ir_t, ir_p = _t_stat(diff)

    return MetricsReport(
        tr=tr,
        sd=sd,
        sharpe=sharpe,
        sharpe_t=sharpe_t,
        sharpe_p=sharpe_p,
        rr=rr,
        rr_sd=rr_sd,
        info_ratio=info_ratio,
        ir_t=ir_t,
        ir_p=ir_p,
        n_periods=n,
        periods_per_year=periods_per_year,
        notes=tuple(notes),
    )
