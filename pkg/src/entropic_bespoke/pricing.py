"""Bespoke portfolio assembly and tranche leg pricing.

A bespoke is a union of "relevant" index buckets.  Conditional on the
market factor the buckets are independent, so per node the bespoke loss
pmf is the convolution of the bucket posterior marginals; mixing with the
posterior factor weights gives the unconditional law.  Strikes are quoted
on the bespoke notional (sum of member bucket notionals).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .calibrate import CalibrationResult
from .errors import (
    ConfigurationError,
    InfeasibleAdjustmentError,
    UndefinedSpreadError,
)
from .loss import LossDist, LossGrid, convolve_pmfs

BucketRef = tuple[int, str]  # (index_id, bucket)


@dataclass(frozen=True)
class BespokeSpec:
    """Member buckets composing the bespoke, the bespoke notional, and
    optional per-horizon expected-loss targets for buckets that stand in
    for off-index names."""

    members: tuple[BucketRef, ...]
    notional: float
    proxy_el_targets: tuple[tuple[BucketRef, tuple[tuple[float, float], ...]], ...] = ()

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("bespoke needs at least one member bucket")
        if self.notional <= 0.0:
            raise ConfigurationError("bespoke notional must be positive")

    def proxy_target(self, member: BucketRef, horizon: float) -> float | None:
        for ref, curve in self.proxy_el_targets:
            if tuple(ref) == tuple(member):
                for t, el in curve:
                    if abs(t - horizon) < 1e-12:
                        return el
        return None


@dataclass(frozen=True)
class TrancheSpec:
    """Attachment/detachment (fractions of bespoke notional), coupon
    schedule with day-count fractions, and contract notional."""

    k_low: float
    k_high: float
    maturity: float
    coupon_times: tuple[float, ...]
    accruals: tuple[float, ...]
    notional: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.k_low < self.k_high <= 1.0:
            raise ConfigurationError(
                f"need 0 <= k_low < k_high <= 1, got ({self.k_low}, {self.k_high})"
            )
        if len(self.coupon_times) != len(self.accruals):
            raise ConfigurationError("coupon_times and accruals differ in length")
        last = 0.0
        for t in self.coupon_times:
            if t <= last:
                raise ConfigurationError("coupon times must increase")
            last = t
        if abs(last - self.maturity) > 1e-9:
            raise ConfigurationError("last coupon must fall on maturity")

    @classmethod
    def with_schedule(
        cls,
        k_low: float,
        k_high: float,
        maturity: float,
        frequency: int = 4,
        notional: float = 1.0,
    ) -> "TrancheSpec":
        """Regular schedule with `frequency` payments per year and simple
        year-fraction accruals."""
        n = max(1, math.ceil(round(maturity * frequency, 9)))
        times = [min(j / frequency, maturity) for j in range(1, n + 1)]
        if times[-1] < maturity:
            times.append(maturity)
        accruals = np.diff([0.0] + times)
        return cls(
            k_low=k_low,
            k_high=k_high,
            maturity=maturity,
            coupon_times=tuple(times),
            accruals=tuple(float(a) for a in accruals),
            notional=notional,
        )


@dataclass(frozen=True)
class DiscountCurve:
    """Pillar discount factors with log-linear interpolation; flat-forward
    extrapolation beyond the last pillar."""

    times: tuple[float, ...]
    factors: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != len(self.factors) or not self.times:
            raise ConfigurationError("need matching non-empty times and factors")
        last_t, last_b = 0.0, 1.0 + 1e-12
        for t, b in zip(self.times, self.factors):
            if t <= last_t:
                raise ConfigurationError("pillar times must be positive increasing")
            if b <= 0.0 or b > last_b + 1e-12:
                raise ConfigurationError("discount factors must be positive "
                                         "and non-increasing from B(0,0)=1")
            last_t, last_b = t, b

    @classmethod
    def flat(cls, rate: float, horizon: float = 50.0) -> "DiscountCurve":
        ts = (horizon,)
        return cls(times=ts, factors=(math.exp(-rate * horizon),))

    def df(self, t: float) -> float:
        if t <= 0.0:
            return 1.0
        ts = np.concatenate([[0.0], self.times])
        logs = np.concatenate([[0.0], np.log(self.factors)])
        if t <= ts[-1]:
            return float(np.exp(np.interp(t, ts, logs)))
        # flat forward beyond the last pillar
        if len(ts) >= 2:
            fwd = (logs[-1] - logs[-2]) / (ts[-1] - ts[-2])
        else:
            fwd = 0.0
        return float(np.exp(logs[-1] + fwd * (t - ts[-1])))


def bespoke_loss_dist(
    calibrations: Mapping[float, CalibrationResult],
    spec: BespokeSpec,
) -> dict[float, LossDist]:
    """Unconditional bespoke loss law per horizon from jointly calibrated
    index measures (shared posterior factor weights)."""
    return {
        t: assemble_bespoke(result, spec, horizon=t)
        for t, result in sorted(calibrations.items())
    }


def assemble_bespoke(
    result: CalibrationResult, spec: BespokeSpec, horizon: float = 0.0
) -> LossDist:
    """Convolve member-bucket posterior marginals per node, then mix."""
    h = result.posterior_weights
    unit = None
    per_node = None
    for member in spec.members:
        index_id, bucket = member
        if index_id not in result.priors:
            raise ConfigurationError(
                f"bespoke member index {index_id} missing from the calibration"
            )
        grid = result.priors[index_id].grid
        if unit is None:
            unit = grid.unit
        elif abs(grid.unit - unit) > 1e-15 * max(grid.unit, unit):
            raise ConfigurationError(
                "member buckets live on different loss units; rebuild the "
                "priors on a shared loss grid"
            )
        marg = result.bucket_marginals(index_id, bucket)
        target = spec.proxy_target(member, horizon)
        if target is not None:
            marg, _ = adjust_bespoke_names(marg, h, unit, target)
        per_node = marg if per_node is None else _convolve_rows(per_node, marg)
    pmf = h @ per_node
    bespoke_grid = LossGrid(unit=unit / spec.notional, max_units=len(pmf) - 1)
    return LossDist(pmf=pmf, grid=bespoke_grid, horizon=horizon)


def _convolve_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for m in range(a.shape[0]):
        out[m] = convolve_pmfs(a[m], b[m])
    return out


def adjust_bespoke_names(
    bucket_pmfs: np.ndarray,
    weights: np.ndarray,
    unit: float,
    target_el: float,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> tuple[np.ndarray, float]:
    """Exponentially tilt per-node bucket pmfs so the factor-mixed expected
    loss hits target_el, leaving the factor weights untouched.

    The tilt P(x|m) propto Q(x|m) * exp(-lam * x) is the minimum-KL
    adjustment; lam solves the 1D convex dual sum_m h_m log Z_m(lam).
    Returns (adjusted pmfs, lam).
    """
    q = np.asarray(bucket_pmfs, dtype=float)
    h = np.asarray(weights, dtype=float)
    levels = unit * np.arange(q.shape[1])
    with np.errstate(divide="ignore"):
        log_q = np.log(q)

    support = q > 0.0
    lo = float(h @ np.where(support, levels[None, :], np.inf).min(axis=1))
    hi = float(h @ np.where(support, levels[None, :], -np.inf).max(axis=1))
    scale = max(abs(hi), abs(lo), unit)

    def mixed_el(lam: float) -> tuple[float, float, np.ndarray]:
        arg = log_q - lam * levels[None, :]
        log_z = logsumexp(arg, axis=1)
        tilted = np.exp(arg - log_z[:, None])
        mean_m = tilted @ levels
        var_m = tilted @ levels**2 - mean_m**2
        return float(h @ mean_m), float(h @ var_m), tilted

    current, _, _ = mixed_el(0.0)
    if abs(current - target_el) <= tol * scale:
        return q.copy(), 0.0
    if not lo + 1e-15 * scale < target_el < hi - 1e-15 * scale:
        raise InfeasibleAdjustmentError(
            f"target EL {target_el} outside attainable range ({lo}, {hi})",
            attainable_range=(lo, hi),
        )

    # E[X] is strictly decreasing in lam; bracket [lam_lo, lam_hi] with
    # g(lam_lo) > 0 > g(lam_hi), g = E - target, then safeguarded Newton
    step = 1.0 / max(unit, 1e-12)
    if current > target_el:
        lam_lo, lam_hi = 0.0, step
        while mixed_el(lam_hi)[0] > target_el:
            lam_hi *= 2.0
            if lam_hi > 1e18:
                raise InfeasibleAdjustmentError(
                    f"target EL {target_el} numerically unreachable",
                    attainable_range=(lo, hi),
                )
    else:
        lam_lo, lam_hi = -step, 0.0
        while mixed_el(lam_lo)[0] < target_el:
            lam_lo *= 2.0
            if lam_lo < -1e18:
                raise InfeasibleAdjustmentError(
                    f"target EL {target_el} numerically unreachable",
                    attainable_range=(lo, hi),
                )

    lam = 0.5 * (lam_lo + lam_hi)
    for _ in range(max_iter):
        value, var, tilted = mixed_el(lam)
        g = value - target_el
        if abs(g) <= tol * scale:
            return tilted, lam
        if g > 0.0:
            lam_lo = lam
        else:
            lam_hi = lam
        if var > 0.0:
            nxt = lam + g / var
        else:
            nxt = 0.5 * (lam_lo + lam_hi)
        if not min(lam_lo, lam_hi) < nxt < max(lam_lo, lam_hi):
            nxt = 0.5 * (lam_lo + lam_hi)
        lam = nxt
    raise InfeasibleAdjustmentError(
        f"tilt search stalled targeting {target_el}", attainable_range=(lo, hi)
    )


def tranche_expected_loss(dist: LossDist, k_low: float, k_high: float) -> float:
    """E[(X - k_low)^+ - (X - k_high)^+] / (k_high - k_low) in [0, 1]."""
    x = dist.levels
    payoff = np.clip(x - k_low, 0.0, k_high - k_low)
    return float(dist.pmf @ payoff) / (k_high - k_low)


def tranche_el_curve(
    loss_dists: Mapping[float, LossDist], tranche: TrancheSpec
) -> tuple[np.ndarray, np.ndarray]:
    """(horizons, normalized tranche ELs), horizons sorted ascending."""
    ts = np.array(sorted(loss_dists))
    if ts.size == 0 or ts[-1] < tranche.maturity - 1e-9:
        raise ConfigurationError("loss distributions do not cover maturity")
    els = np.array(
        [tranche_expected_loss(loss_dists[t], tranche.k_low, tranche.k_high)
         for t in ts]
    )
    return ts, els


def _el_at_times(horizons, els, times) -> np.ndarray:
    """Linear interpolation of the EL term structure, anchored at EL(0)=0."""
    ts = np.concatenate([[0.0], np.asarray(horizons, dtype=float)])
    vs = np.concatenate([[0.0], np.asarray(els, dtype=float)])
    return np.interp(times, ts, vs)


def default_leg(
    horizons: Sequence[float],
    els: Sequence[float],
    tranche: TrancheSpec,
    curve: DiscountCurve,
) -> float:
    """Protection leg: N0 * sum_i 0.5*(B_{i-1}+B_i) * (EL_i - EL_{i-1})."""
    els = np.asarray(els, dtype=float)
    if np.any(np.diff(els) < -1e-12):
        warnings.warn("tranche EL curve is not non-decreasing", stacklevel=2)
    times = np.concatenate([[0.0], tranche.coupon_times])
    el = _el_at_times(horizons, els, times)
    b = np.array([curve.df(t) for t in times])
    return tranche.notional * float(
        np.sum(0.5 * (b[:-1] + b[1:]) * np.diff(el))
    )


def risky_annuity(
    horizons: Sequence[float],
    els: Sequence[float],
    tranche: TrancheSpec,
    curve: DiscountCurve,
) -> float:
    """Premium leg per unit spread and unit notional:
    sum_i Delta_i * B_i * 0.5 * (EN_{i-1} + EN_i) with EN = 1 - EL."""
    times = np.concatenate([[0.0], tranche.coupon_times])
    en = 1.0 - _el_at_times(horizons, els, times)
    b = np.array([curve.df(t) for t in tranche.coupon_times])
    deltas = np.asarray(tranche.accruals, dtype=float)
    return float(np.sum(deltas * b * 0.5 * (en[:-1] + en[1:])))


def premium_leg(
    horizons: Sequence[float],
    els: Sequence[float],
    tranche: TrancheSpec,
    curve: DiscountCurve,
    spread: float,
) -> float:
    return spread * tranche.notional * risky_annuity(horizons, els, tranche, curve)


def par_spread(
    horizons: Sequence[float],
    els: Sequence[float],
    tranche: TrancheSpec,
    curve: DiscountCurve,
) -> float:
    """Running spread equating the two legs; independent of notional."""
    annuity = risky_annuity(horizons, els, tranche, curve)
    if annuity <= 0.0:
        raise UndefinedSpreadError("risky annuity is zero; par spread undefined")
    return default_leg(horizons, els, tranche, curve) / (tranche.notional * annuity)


@dataclass(frozen=True)
class TranchePrice:
    tranche: TrancheSpec
    par_spread: float
    risky_annuity: float
    default_leg: float

    @property
    def par_spread_bp(self) -> float:
        return 1e4 * self.par_spread


def price_tranche(
    loss_dists: Mapping[float, LossDist],
    tranche: TrancheSpec,
    curve: DiscountCurve,
) -> TranchePrice:
    horizons, els = tranche_el_curve(loss_dists, tranche)
    annuity = risky_annuity(horizons, els, tranche, curve)
    dleg = default_leg(horizons, els, tranche, curve)
    if annuity <= 0.0:
        raise UndefinedSpreadError("risky annuity is zero; par spread undefined")
    return TranchePrice(
        tranche=tranche,
        par_spread=dleg / (tranche.notional * annuity),
        risky_annuity=annuity,
        default_leg=dleg / tranche.notional,
    )
