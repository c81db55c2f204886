"""Minimum cross-entropy calibration of the joint (factor, losses) law.

The calibrated measure keeps the prior's factor/conditional structure but
tilts it exponentially:

    P_i(X | m)  propto  Q_i(X | m) * exp(sum_k lam_ik * (F_ik(X) - EL_ik))
    h_m         propto  g_m * Z_1(m, lam) * Z_2(m, lam)

with Z_i(m, lam) the conditional normalizers.  The multipliers solve the
smooth convex dual

    minimize  log Z(lam) + 0.5 * sum_ik lam_ik^2 * sigma_ik^2,

whose gradient component (i,k) is E_P[F_ik] - EL_ik + lam_ik * sigma_ik^2
and whose Hessian is the posterior covariance matrix of the payoffs plus
diag(sigma^2).  sigma_ik = 0 enforces a constraint exactly; large sigma
leaves the prior untouched.  All partition functions are evaluated in log
space with per-node max subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, InfiniteDivergenceError
from .loss import ConditionalLossDist, LossDist, mixture_unconditional
from .prior import COMPLEMENT, RELEVANT, MarketFactorGrid
from .solver import newton_minimize

DEFAULT_SIGMA = 1e-4
TRANCHE = "tranche"
SUBPORTFOLIO_TOTAL = "subportfolio_total"


@dataclass(frozen=True)
class PricingConstraint:
    """One generalized payoff with a target expected loss.

    kind "tranche" pays ((X - k_low)^+ - (X - k_high)^+) on the index total
    loss X; kind "subportfolio_total" pays the loss of one bucket.  All
    amounts are fractions of index notional.  sigma is the softness of the
    constraint (0 = exact).
    """

    index_id: int
    kind: str
    target_el: float
    k_low: float | None = None
    k_high: float | None = None
    bucket: str | None = None
    sigma: float = DEFAULT_SIGMA
    horizon: float | None = None

    def __post_init__(self):
        if self.kind == TRANCHE:
            if self.k_low is None or self.k_high is None:
                raise ConfigurationError("tranche constraint needs k_low and k_high")
            if not 0.0 <= self.k_low < self.k_high <= 1.0:
                raise ConfigurationError(
                    f"need 0 <= k_low < k_high <= 1, got ({self.k_low}, {self.k_high})"
                )
        elif self.kind == SUBPORTFOLIO_TOTAL:
            if self.bucket not in (RELEVANT, COMPLEMENT):
                raise ConfigurationError(
                    "subportfolio_total constraint needs bucket "
                    f"'{RELEVANT}' or '{COMPLEMENT}'"
                )
        else:
            raise ConfigurationError(f"unknown constraint kind '{self.kind}'")
        if self.target_el < 0.0:
            raise ConfigurationError("target_el must be >= 0")
        if self.sigma < 0.0:
            raise ConfigurationError("sigma must be >= 0")

    def label(self) -> str:
        if self.kind == TRANCHE:
            return f"i{self.index_id}:tranche[{self.k_low},{self.k_high}]"
        return f"i{self.index_id}:{self.bucket}_total"


def payoff_eval(constraint: PricingConstraint, x_relevant: float,
                x_complement: float) -> float:
    """Payoff of one constraint at bucket losses (fractions of notional)."""
    if constraint.kind == TRANCHE:
        x = x_relevant + x_complement
        return min(max(x - constraint.k_low, 0.0),
                   constraint.k_high - constraint.k_low)
    return x_relevant if constraint.bucket == RELEVANT else x_complement


def payoff_lattice(constraint: PricingConstraint, prior: ConditionalLossDist
                   ) -> np.ndarray:
    """Payoff evaluated on the full (relevant, complement) lattice."""
    s1, s2 = prior.shape
    xr = prior.grid.levels(s1)[:, None]
    xc = prior.grid.levels(s2)[None, :]
    if constraint.kind == TRANCHE:
        x = xr + xc
        return np.clip(x - constraint.k_low, 0.0,
                       constraint.k_high - constraint.k_low)
    if constraint.bucket == RELEVANT:
        return np.broadcast_to(xr, (s1, s2)).copy()
    return np.broadcast_to(xc, (s1, s2)).copy()


def log_partition_functions(
    prior: ConditionalLossDist,
    constraints: Sequence[PricingConstraint],
    lambdas: np.ndarray,
) -> np.ndarray:
    """log Z_i(m, lam) per factor node, overflow-safe.

    Z_i(m, lam) = sum_X Q_i(X | m) * exp(sum_k lam_k * (F_k(X) - EL_k)).
    """
    tilt = _tilt_exponent(prior, constraints, np.asarray(lambdas, dtype=float))
    with np.errstate(divide="ignore"):
        log_q = np.log(prior.pmfs)
    return logsumexp(log_q + tilt[None, :, :], axis=(1, 2))


def partition_functions(
    prior: ConditionalLossDist,
    constraints: Sequence[PricingConstraint],
    lambdas: np.ndarray,
) -> np.ndarray:
    """Z_i(m, lam) per node; see log_partition_functions for the
    overflow-proof variant this exponentiates."""
    return np.exp(log_partition_functions(prior, constraints, lambdas))


def _tilt_exponent(prior, constraints, lambdas) -> np.ndarray:
    if len(constraints) != len(lambdas):
        raise ConfigurationError(
            f"{len(constraints)} constraints vs {len(lambdas)} multipliers"
        )
    s1, s2 = prior.shape
    tilt = np.zeros((s1, s2))
    for c, lam in zip(constraints, lambdas):
        if lam != 0.0:
            tilt += lam * (payoff_lattice(c, prior) - c.target_el)
    return tilt


def posterior_factor_weights(
    prior_weights: np.ndarray, *log_zs: np.ndarray
) -> tuple[np.ndarray, float]:
    """Posterior node weights h_m propto g_m * prod_i Z_i(m) and the log of
    the joint normalizer Z(lam)."""
    with np.errstate(divide="ignore"):
        log_h = np.log(np.asarray(prior_weights, dtype=float))
    for lz in log_zs:
        log_h = log_h + np.asarray(lz, dtype=float)
    log_norm = float(logsumexp(log_h))
    return np.exp(log_h - log_norm), log_norm


@dataclass
class CalibrationResult:
    """Calibrated measure plus fit diagnostics.

    residuals[k] = model EL - target EL; at a full-calibration optimum it
    equals -lambda_k * sigma_k^2.
    """

    constraints: tuple[PricingConstraint, ...]
    lambdas: np.ndarray
    posterior_weights: np.ndarray
    tilted_conditionals: dict[int, np.ndarray]
    model_els: np.ndarray
    residuals: np.ndarray
    objective_value: float
    iterations: int
    grid: MarketFactorGrid
    priors: dict[int, ConditionalLossDist]
    method: str = "full"

    @property
    def index_ids(self) -> list[int]:
        return sorted(self.priors)

    def tilted_dist(self, index_id: int) -> ConditionalLossDist:
        prior = self.priors[index_id]
        return ConditionalLossDist(
            index_id=index_id, grid=prior.grid,
            pmfs=self.tilted_conditionals[index_id],
        )

    def bucket_marginals(self, index_id: int, bucket: str) -> np.ndarray:
        """Per-node posterior pmfs of one bucket's loss, shape (M, S)."""
        axis = 2 if bucket == RELEVANT else 1
        return self.tilted_conditionals[index_id].sum(axis=axis)

    def index_loss_dist(self, index_id: int, horizon: float = 0.0) -> LossDist:
        """Unconditional posterior distribution of the index total loss."""
        return mixture_unconditional(
            self.tilted_dist(index_id), self.posterior_weights, horizon=horizon
        )

    def kl_to_prior(self) -> float:
        """KL divergence of the calibrated joint law from the prior."""
        h, g = self.posterior_weights, self.grid.flat_weights
        total = _kl_sum(h, g)
        for i, prior in self.priors.items():
            tilted = self.tilted_conditionals[i]
            cond = np.array(
                [_kl_sum(tilted[m], prior.pmfs[m]) for m in range(len(h))]
            )
            total += float(h @ cond)
        return total


def _kl_sum(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0.0
    if np.any(q[mask] <= 0.0):
        raise InfiniteDivergenceError(
            "measure puts mass where the reference has none"
        )
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for pmf arrays of identical shape; 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ConfigurationError("distributions must share a lattice")
    return _kl_sum(p.reshape(-1), q.reshape(-1))


def conditional_mutual_information(result: CalibrationResult,
                                   index_id: int) -> float:
    """I(X_rel; X_comp | factor) under the calibrated measure.

    Zero when every conditional slice factorizes (the prior); positive as
    soon as a nonlinear tranche tilt couples the buckets.
    """
    h = result.posterior_weights
    joint = result.tilted_conditionals[index_id]
    total = 0.0
    for m in range(len(h)):
        if h[m] == 0.0:
            continue
        slab = joint[m]
        prod = np.outer(slab.sum(axis=1), slab.sum(axis=0))
        total += h[m] * _kl_sum(slab, prod)
    return total


class MceCalibrator:
    """Assembled dual problem for one horizon.

    Holds the factor grid, per-index conditional priors and the constraint
    set; exposes the dual objective, gradient and Hessian and the Newton
    driver.  The multiplier vector is ordered like the constraint list.
    """

    def __init__(
        self,
        grid: MarketFactorGrid,
        priors: dict[int, ConditionalLossDist],
        constraints: Sequence[PricingConstraint],
    ):
        if not priors:
            raise ConfigurationError("need at least one index prior")
        if not constraints:
            raise ConfigurationError("need at least one constraint")
        self.grid = grid
        self.priors = dict(priors)
        self.constraints = tuple(constraints)
        self.index_ids = sorted(priors)
        m = grid.n_nodes
        for i, prior in priors.items():
            if prior.n_nodes != m:
                raise ConfigurationError(
                    f"prior for index {i} has {prior.n_nodes} nodes, grid has {m}"
                )
            slice_mass = prior.pmfs.reshape(prior.n_nodes, -1).sum(axis=1)
            if np.max(np.abs(slice_mass - 1.0)) > 1e-8:
                raise ConfigurationError(
                    f"conditional prior slices for index {i} are not normalized"
                )
        self._positions = {
            i: [k for k, c in enumerate(constraints) if c.index_id == i]
            for i in self.index_ids
        }
        placed = sorted(p for pos in self._positions.values() for p in pos)
        if placed != list(range(len(constraints))):
            bad = [c for c in constraints if c.index_id not in priors]
            raise ConfigurationError(
                f"constraints reference unknown index ids: "
                f"{sorted({c.index_id for c in bad})}"
            )
        self.targets = np.array([c.target_el for c in constraints])
        self.sigmas = np.array([c.sigma for c in constraints])
        self._payoffs = {}
        self._payoff_products = {}
        self._log_q = {}
        for i in self.index_ids:
            prior = self.priors[i]
            fs = np.array(
                [payoff_lattice(self.constraints[k], prior)
                 for k in self._positions[i]]
            )
            self._payoffs[i] = fs
            self._payoff_products[i] = fs[:, None] * fs[None, :]
            with np.errstate(divide="ignore"):
                self._log_q[i] = np.log(prior.pmfs)
        self._cache_key = None
        self._cache = None

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    # -- dual pieces ----------------------------------------------------

    def _evaluate(self, lambdas: np.ndarray) -> dict:
        lambdas = np.asarray(lambdas, dtype=float)
        key = lambdas.tobytes()
        if key == self._cache_key:
            return self._cache
        state: dict = {"lambdas": lambdas.copy()}
        log_zs = []
        tilted = {}
        cond_means = {}
        for i in self.index_ids:
            pos = self._positions[i]
            lam_i = lambdas[pos]
            targ_i = self.targets[pos]
            tilt = np.tensordot(lam_i, self._payoffs[i], axes=1) - lam_i @ targ_i
            arg = self._log_q[i] + tilt[None, :, :]
            log_z = logsumexp(arg, axis=(1, 2))
            log_zs.append(log_z)
            t = np.exp(arg - log_z[:, None, None])
            tilted[i] = t
            cond_means[i] = np.einsum("mxy,kxy->mk", t, self._payoffs[i])
        h, log_norm = posterior_factor_weights(self.grid.flat_weights, *log_zs)
        model_els = np.empty(self.n_constraints)
        for i in self.index_ids:
            model_els[self._positions[i]] = h @ cond_means[i]
        value = log_norm + 0.5 * float(self.sigmas**2 @ lambdas**2)
        grad = model_els - self.targets + lambdas * self.sigmas**2
        state.update(
            log_zs=log_zs, tilted=tilted, cond_means=cond_means, h=h,
            log_norm=log_norm, model_els=model_els, value=value, grad=grad,
        )
        self._cache_key, self._cache = key, state
        return state

    def dual_objective_and_gradient(
        self, lambdas: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """log Z(lam) + 0.5 sum lam^2 sigma^2 and its gradient
        E_P[F] - EL + lam * sigma^2."""
        state = self._evaluate(lambdas)
        return state["value"], state["grad"].copy()

    def dual_hessian(self, lambdas: np.ndarray) -> np.ndarray:
        """Posterior covariance of the payoffs plus diag(sigma^2)."""
        state = self._evaluate(lambdas)
        h = state["h"]
        k = self.n_constraints
        hess = np.empty((k, k))
        for i in self.index_ids:
            pos_i = self._positions[i]
            second = np.einsum(
                "mxy,klxy->mkl", state["tilted"][i], self._payoff_products[i]
            )
            block = np.tensordot(h, second, axes=1)
            hess[np.ix_(pos_i, pos_i)] = block
            for j in self.index_ids:
                if j <= i:
                    continue
                pos_j = self._positions[j]
                cross = np.einsum(
                    "m,mk,ml->kl", h, state["cond_means"][i], state["cond_means"][j]
                )
                hess[np.ix_(pos_i, pos_j)] = cross
                hess[np.ix_(pos_j, pos_i)] = cross.T
        mean = state["model_els"]
        hess -= np.outer(mean, mean)
        hess[np.diag_indices(k)] += self.sigmas**2
        return hess

    def posterior(self, lambdas: np.ndarray) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """(factor weights, tilted conditionals) at a multiplier vector."""
        state = self._evaluate(lambdas)
        return state["h"].copy(), {i: t.copy() for i, t in state["tilted"].items()}

    # -- driver ----------------------------------------------------------

    def solve(self, tol: float = 1e-9, max_iter: int = 200) -> CalibrationResult:
        res = newton_minimize(
            self.dual_objective_and_gradient,
            self.dual_hessian,
            np.zeros(self.n_constraints),
            tol=tol,
            max_iter=max_iter,
        )
        state = self._evaluate(res.x)
        return CalibrationResult(
            constraints=self.constraints,
            lambdas=res.x,
            posterior_weights=state["h"].copy(),
            tilted_conditionals={i: t.copy() for i, t in state["tilted"].items()},
            model_els=state["model_els"].copy(),
            residuals=state["model_els"] - self.targets,
            objective_value=res.value,
            iterations=res.iterations,
            grid=self.grid,
            priors=self.priors,
        )


def calibrate(
    grid: MarketFactorGrid,
    priors: dict[int, ConditionalLossDist],
    constraints: Sequence[PricingConstraint],
    tol: float = 1e-9,
    max_iter: int = 200,
) -> CalibrationResult:
    """Full MCE calibration: tilt conditionals and factor weights jointly."""
    return MceCalibrator(grid, priors, constraints).solve(tol=tol, max_iter=max_iter)


class FactorOnlyCalibrator:
    """Restricted calibration that keeps the conditional loss laws at their
    prior form and only reweights the factor nodes:

        h_m propto g_m * exp(-sum_ik lam_ik * (E_Q[F_ik | m] - EL_ik)).

    Reaches the same constraint fit in the exact limit but a strictly
    larger KL distance whenever the conditionals have room to move.
    """

    def __init__(self, grid, priors, constraints):
        base = MceCalibrator(grid, priors, constraints)
        self.grid = grid
        self.priors = base.priors
        self.constraints = base.constraints
        self.index_ids = base.index_ids
        self.targets = base.targets
        self.sigmas = base.sigmas
        self._positions = base._positions
        # prior conditional mean payoffs, (M, K) in constraint order
        m = grid.n_nodes
        self.cond_mean = np.empty((m, base.n_constraints))
        for i in self.index_ids:
            self.cond_mean[:, self._positions[i]] = np.einsum(
                "mxy,kxy->mk", self.priors[i].pmfs, base._payoffs[i]
            )
        self._tilted_priors = {i: self.priors[i].pmfs for i in self.index_ids}

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def _weights(self, lambdas: np.ndarray) -> tuple[np.ndarray, float]:
        excess = self.cond_mean - self.targets[None, :]
        return posterior_factor_weights(
            self.grid.flat_weights, -(excess @ lambdas)
        )

    def dual_objective_and_gradient(self, lambdas):
        lambdas = np.asarray(lambdas, dtype=float)
        h, log_norm = self._weights(lambdas)
        value = log_norm + 0.5 * float(self.sigmas**2 @ lambdas**2)
        model_els = h @ self.cond_mean
        grad = -(model_els - self.targets) + lambdas * self.sigmas**2
        return value, grad

    def dual_hessian(self, lambdas):
        h, _ = self._weights(np.asarray(lambdas, dtype=float))
        mean = h @ self.cond_mean
        centered = self.cond_mean - mean[None, :]
        hess = centered.T @ (centered * h[:, None])
        hess[np.diag_indices(self.n_constraints)] += self.sigmas**2
        return hess

    def solve(self, tol: float = 1e-9, max_iter: int = 200) -> CalibrationResult:
        res = newton_minimize(
            self.dual_objective_and_gradient,
            self.dual_hessian,
            np.zeros(self.n_constraints),
            tol=tol,
            max_iter=max_iter,
        )
        h, _ = self._weights(res.x)
        model_els = h @ self.cond_mean
        return CalibrationResult(
            constraints=self.constraints,
            lambdas=res.x,
            posterior_weights=h,
            tilted_conditionals={i: p.copy() for i, p in self._tilted_priors.items()},
            model_els=model_els,
            residuals=model_els - self.targets,
            objective_value=res.value,
            iterations=res.iterations,
            grid=self.grid,
            priors=self.priors,
            method="factor_only",
        )


def factor_only_calibrate(
    grid: MarketFactorGrid,
    priors: dict[int, ConditionalLossDist],
    constraints: Sequence[PricingConstraint],
    tol: float = 1e-9,
    max_iter: int = 200,
) -> CalibrationResult:
    return FactorOnlyCalibrator(grid, priors, constraints).solve(
        tol=tol, max_iter=max_iter
    )


def prior_expected_losses(
    grid: MarketFactorGrid,
    priors: dict[int, ConditionalLossDist],
    constraints: Sequence[PricingConstraint],
) -> np.ndarray:
    """E_Q[F_ik] under the uncalibrated prior, in constraint order."""
    g = grid.flat_weights
    out = np.empty(len(constraints))
    for k, c in enumerate(constraints):
        prior = priors[c.index_id]
        cond = np.einsum("mxy,xy->m", prior.pmfs, payoff_lattice(c, prior))
        out[k] = g @ cond
    return out
