"""Batch front end.

One JSON config drives a run; flags only pick the config path, override
the mode or thread count, and select the output directory.  Outputs are
deterministic: identical inputs produce byte-identical files regardless of
thread count.  On failure every partially written output is removed and a
single machine-parsable error line goes to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, basecorr, io as fmt, pricing
from .calibrate import TRANCHE, calibrate
from .dynamic import DynamicModel, TimeGrid
from .errors import (
    CalibrationError,
    ConfigurationError,
    EntropicBespokeError,
    InfeasibleAdjustmentError,
    MappingConvergenceError,
    UndefinedSpreadError,
)
from .loss import LossGrid, build_conditional_prior, default_loss_unit, name_loss_units
from .prior import IndexPortfolio, build_market_grid

MODES = ("calibrate-static", "calibrate-dynamic", "price-bespoke", "map-basecorr")

_ERROR_CODES = {
    ConfigurationError: "CONFIG",
    CalibrationError: "CALIBRATION",
    InfeasibleAdjustmentError: "INFEASIBLE",
    MappingConvergenceError: "MAPPING",
    UndefinedSpreadError: "SPREAD",
}


@dataclasses.dataclass
class RunConfig:
    mode: str
    portfolios: Path
    output_dir: Path
    constraints: Path | None = None
    discount_curve: Path | None = None
    tranches: Path | None = None
    base_correlation: Path | None = None
    bespoke: dict = dataclasses.field(default_factory=dict)
    mapping_rule: str = "atm"
    reference_index: int = 1
    grid_size: tuple[int, int] = (10, 10)
    persistence: float = 0.9
    coarsen: int = 1
    loss_unit: float | None = None
    tol: float = 1e-9
    max_iter: int = 200
    threads: int = 1
    verbose: bool = False

    @classmethod
    def from_file(cls, path: str | Path, mode: str | None = None,
                  out: str | None = None, threads: int | None = None,
                  verbose: bool = False) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent

        def resolve(key: str) -> Path | None:
            value = doc.get(key)
            return (base / value) if value else None

        run_mode = mode or doc.get("mode")
        if run_mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {run_mode!r}")
        if not doc.get("portfolios"):
            raise ConfigurationError("config needs a 'portfolios' path")
        solver = doc.get("solver", {})
        grid_size = doc.get("grid_size", [10, 10])
        if threads is None:
            threads = doc.get("threads")
        if threads is None:
            threads = int(os.environ.get("ENTROPIC_BESPOKE_THREADS", "1"))
        cfg = cls(
            mode=run_mode,
            portfolios=base / doc["portfolios"],
            output_dir=Path(out) if out else base / doc.get("output_dir", "out"),
            constraints=resolve("constraints"),
            discount_curve=resolve("discount_curve"),
            tranches=resolve("tranches"),
            base_correlation=resolve("base_correlation"),
            bespoke=doc.get("bespoke", {}),
            mapping_rule=doc.get("mapping_rule", "atm"),
            reference_index=int(doc.get("reference_index", 1)),
            grid_size=(int(grid_size[0]), int(grid_size[1])),
            persistence=float(doc.get("persistence", 0.9)),
            coarsen=int(doc.get("coarsen", 1)),
            loss_unit=(float(doc["loss_unit"])
                       if doc.get("loss_unit") is not None else None),
            tol=float(solver.get("tol", 1e-9)),
            max_iter=int(solver.get("max_iter", 200)),
            threads=int(threads),
            verbose=verbose,
        )
        for key, value in (("constraints", cfg.constraints),
                           ("portfolios", cfg.portfolios),
                           ("discount_curve", cfg.discount_curve),
                           ("tranches", cfg.tranches),
                           ("base_correlation", cfg.base_correlation)):
            if value is not None and not value.exists():
                raise ConfigurationError(f"{key} file not found: {value}")
        return cfg


class _Reporter:
    """Tracks written outputs so a failed run leaves nothing behind."""

    def __init__(self, out_dir: Path, verbose: bool):
        self.out_dir = out_dir
        self.verbose = verbose
        self.written: list[Path] = []

    def csv(self, name: str, header, rows):
        path = self.out_dir / name
        fmt.write_csv(path, header, rows)
        self.written.append(path)
        self.log(f"wrote {path}")

    def json(self, name: str, payload: dict):
        path = self.out_dir / name
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(path)
        self.log(f"wrote {path}")

    def log(self, msg: str):
        if self.verbose:
            print(msg, file=sys.stderr)

    def rollback(self):
        for path in self.written:
            try:
                path.unlink()
            except OSError:
                pass


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _manifest(config: RunConfig, reporter: _Reporter):
    inputs = {}
    for key in ("portfolios", "constraints", "discount_curve", "tranches",
                "base_correlation"):
        path = getattr(config, key)
        if path is not None:
            inputs[key] = {"path": str(path), "sha256": _sha256(path)}
    reporter.json("manifest.json", {
        "package": "entropic-bespoke",
        "version": __version__,
        "mode": config.mode,
        "inputs": inputs,
        "options": {
            "grid_size": list(config.grid_size),
            "persistence": config.persistence,
            "coarsen": config.coarsen,
            "loss_unit": config.loss_unit,
            "tol": config.tol,
            "max_iter": config.max_iter,
            "mapping_rule": config.mapping_rule,
            "reference_index": config.reference_index,
            "threads": config.threads,
        },
        "outputs": sorted(p.name for p in reporter.written),
    })


def _loss_grids(portfolios, unit) -> dict[int, LossGrid]:
    grids = {}
    for i, p in portfolios.items():
        probe = LossGrid(unit=unit, max_units=10**9)
        capacity = sum(name_loss_units(n, probe) for n in p.names)
        grids[i] = LossGrid(unit=unit, max_units=capacity)
    return grids


def _warn_degenerate_constraints(constraints, reporter):
    """A full strike partition plus both bucket totals is linearly
    dependent (tranche payoffs sum to the portfolio loss)."""
    by_key: dict = {}
    for c in constraints:
        by_key.setdefault((c.index_id, c.horizon), []).append(c)
    for (index_id, horizon), group in sorted(by_key.items()):
        tranches = sorted(
            (c.k_low, c.k_high) for c in group if c.kind == TRANCHE
        )
        totals = sum(1 for c in group if c.kind != TRANCHE)
        if totals < 2 or not tranches:
            continue
        covers = tranches[0][0] == 0.0 and tranches[-1][1] == 1.0 and all(
            abs(a[1] - b[0]) < 1e-12 for a, b in zip(tranches, tranches[1:])
        )
        if covers:
            print(
                f"warning: index {index_id} horizon {horizon}: full strike "
                "partition plus both sub-portfolio totals is linearly "
                "dependent; drop the super-senior tranche",
                file=sys.stderr,
            )


def _calibrate_all_horizons(config, params, portfolios, constraints, reporter):
    unit = config.loss_unit or default_loss_unit(*portfolios.values())
    grids = _loss_grids(portfolios, unit)
    grid = build_market_grid(*config.grid_size, params)
    _warn_degenerate_constraints(constraints, reporter)
    horizons = sorted({c.horizon for c in constraints})
    if any(t is None for t in horizons):
        raise ConfigurationError("every constraint needs a horizon")
    results = {}
    for t in horizons:
        priors = {
            i: build_conditional_prior(p, grid, grids[i], t, params,
                                       threads=config.threads)
            for i, p in sorted(portfolios.items())
        }
        subset = [c for c in constraints if c.horizon == t]
        results[t] = calibrate(grid, priors, subset,
                               tol=config.tol, max_iter=config.max_iter)
        reporter.log(f"horizon {t}: {results[t].iterations} Newton steps")
    residual_rows, factor_rows_, measure_rows_ = [], [], []
    for t in horizons:
        residual_rows.extend(fmt.residual_rows(t, results[t]))
        factor_rows_.extend(fmt.factor_rows(t, results[t]))
        measure_rows_.extend(fmt.measure_rows(t, results[t]))
    reporter.csv("calibration_residuals.csv", fmt.RESIDUAL_HEADER, residual_rows)
    reporter.csv("factor_distribution.csv", fmt.FACTOR_HEADER, factor_rows_)
    reporter.csv("posterior_measure.csv", fmt.MEASURE_HEADER, measure_rows_)
    return results, unit


def _bespoke_spec(config, portfolios) -> pricing.BespokeSpec:
    doc = config.bespoke or {
        "members": [[i, "relevant"] for i in sorted(portfolios)]
    }
    members = [(int(i), str(b)) for i, b in doc.get("members", [])]
    if not members:
        raise ConfigurationError("bespoke.members must not be empty")
    notional = 0.0
    for i, bucket in members:
        if i not in portfolios:
            raise ConfigurationError(f"bespoke references unknown index {i}")
        notional += sum(n.notional_weight
                        for n in portfolios[i].bucket_names(bucket))
    return fmt.parse_bespoke_spec({**doc, "members": members}, notional)


def _mode_calibrate_static(config, reporter):
    params, portfolios, _ = fmt.load_portfolios(config.portfolios)
    constraints = fmt.load_constraints(config.constraints)
    _calibrate_all_horizons(config, params, portfolios, constraints, reporter)


def _mode_price_bespoke(config, reporter):
    params, portfolios, _ = fmt.load_portfolios(config.portfolios)
    constraints = fmt.load_constraints(config.constraints)
    curve = fmt.load_discount_curve(config.discount_curve)
    tranches = fmt.load_tranches(config.tranches)
    results, _ = _calibrate_all_horizons(config, params, portfolios,
                                         constraints, reporter)
    spec = _bespoke_spec(config, portfolios)
    dists = pricing.bespoke_loss_dist(results, spec)
    prices = [pricing.price_tranche(dists, tr, curve) for tr in tranches]
    reporter.csv("tranche_prices.csv", fmt.PRICING_HEADER,
                 fmt.pricing_rows(prices))


def _mode_calibrate_dynamic(config, reporter):
    params, portfolios, _ = fmt.load_portfolios(config.portfolios)
    constraints = fmt.load_constraints(config.constraints)
    unit = config.loss_unit or default_loss_unit(*portfolios.values())
    grids = _loss_grids(portfolios, unit)
    grid = build_market_grid(*config.grid_size, params)
    _warn_degenerate_constraints(constraints, reporter)
    horizons = sorted({c.horizon for c in constraints})
    model = DynamicModel(
        grid, params, portfolios, grids, TimeGrid(horizons=tuple(horizons)),
        persistence=config.persistence, coarsen=config.coarsen,
    )
    per_period = [
        [c for c in constraints if c.horizon == t] for t in horizons
    ]
    states, kernels = model.bootstrap_all(per_period, tol=config.tol,
                                          max_iter=config.max_iter)
    residual_rows = []
    for kernel in kernels:
        fake = _KernelView(kernel)
        residual_rows.extend(fmt.residual_rows(kernel.horizon, fake))
    reporter.csv("calibration_residuals.csv", fmt.RESIDUAL_HEADER, residual_rows)
    reporter.csv("dynamic_states.csv", fmt.STATE_HEADER, fmt.state_rows(states))
    kernel_rows = []
    for kernel in kernels:
        for s, row in enumerate(kernel.factor_rows):
            for m in np.nonzero(row > 0.0)[0]:
                kernel_rows.append([
                    str(kernel.period), fmt._fmt(kernel.horizon), str(s),
                    str(int(m)), fmt._fmt(row[m], fmt.FULL),
                ])
    reporter.csv("dynamic_factor_kernels.csv",
                 ["period", "horizon", "prev_row", "m_next", "prob"],
                 kernel_rows)


class _KernelView:
    """Adapts a PeriodKernel to the residual-row writer."""

    def __init__(self, kernel):
        self.constraints = kernel.constraints
        self.model_els = kernel.model_els
        self.lambdas = kernel.lambdas


def _standalone_pool(portfolios, members) -> IndexPortfolio:
    """Bucket union rescaled so the pool notional is 1."""
    names = []
    for i, bucket in members:
        names.extend(portfolios[i].bucket_names(bucket))
    total = sum(n.notional_weight for n in names)
    if total <= 0.0:
        raise ConfigurationError("bespoke pool has no notional")
    rescaled = tuple(
        dataclasses.replace(n, index_id=0, notional_weight=n.notional_weight / total)
        for n in names
    )
    return IndexPortfolio(index_id=0, names=rescaled)


def _pool_expected_loss(pool: IndexPortfolio, horizon: float) -> float:
    return sum(n.lgd * n.default_prob(horizon) for n in pool.names)


def _mode_map_basecorr(config, reporter):
    params, portfolios, _ = fmt.load_portfolios(config.portfolios)
    del params  # the reference pricer is one-factor
    curves = fmt.load_basecorr_curves(config.base_correlation)
    tranches = fmt.load_tranches(config.tranches)
    curve = fmt.load_discount_curve(config.discount_curve) \
        if config.discount_curve else pricing.DiscountCurve.flat(0.0)
    spec_doc = config.bespoke or {
        "members": [[i, "relevant"] for i in sorted(portfolios)]
    }
    members = [(int(i), str(b)) for i, b in spec_doc.get("members", [])]
    bespoke_pool = _standalone_pool(portfolios, members)
    if config.reference_index not in portfolios:
        raise ConfigurationError(
            f"reference index {config.reference_index} not in the portfolio file"
        )
    index_pool = _standalone_pool(
        portfolios, [(config.reference_index, "relevant"),
                     (config.reference_index, "complement")]
    )
    rule = basecorr.MappingRule(config.mapping_rule)
    horizons = sorted(curves)

    def curve_at(t: float) -> basecorr.BaseCorrCurve:
        past = [u for u in horizons if u <= t + 1e-9]
        return curves[past[-1] if past else horizons[0]]

    strikes = sorted({k for tr in tranches for k in (tr.k_low, tr.k_high) if k > 0})
    maturities = sorted({tr.maturity for tr in tranches})
    mapping_rows = []
    mapped: dict[tuple[float, float], tuple[float, float]] = {}
    for t in maturities:
        skew = curve_at(t)
        l_b = _pool_expected_loss(bespoke_pool, t)
        l_i = _pool_expected_loss(index_pool, t)
        index_dist = None
        for k_b in strikes:
            if rule.variant == basecorr.PROBABILITY_MATCHING:
                if index_dist is None:
                    index_dist = basecorr.onefactor_loss_dist(
                        index_pool, skew.beta(k_b), t
                    )
                k_i = basecorr.map_strike(
                    rule, k_b, l_b, l_i, index_loss_dist=index_dist,
                    bespoke_dist_provider=lambda b: basecorr.onefactor_loss_dist(
                        bespoke_pool, b, t
                    ),
                    curve=skew,
                )
            else:
                k_i = basecorr.map_strike(rule, k_b, l_b, l_i)
            beta = skew.beta(k_i)
            mapped[(t, k_b)] = (k_i, beta)
            mapping_rows.append([
                rule.variant, fmt._fmt(k_b), fmt._fmt(t), fmt._fmt(l_b),
                fmt._fmt(l_i), fmt._fmt(k_i), fmt._fmt(beta),
            ])
    reporter.csv("mapped_strikes.csv", fmt.MAPPING_HEADER, mapping_rows)

    # reference prices with the mapped correlations
    price_rows = []
    grid_horizons = sorted({t for t in horizons})
    for tr in tranches:
        els = {}
        for t in sorted({*grid_horizons, tr.maturity}):
            if t > tr.maturity + 1e-9:
                continue
            skew_els = []
            for k, sign in ((tr.k_high, 1.0), (tr.k_low, -1.0)):
                if k <= 0.0:
                    continue
                beta = mapped[(tr.maturity, k)][1]
                skew_els.append(
                    sign * k * basecorr.base_tranche_el(bespoke_pool, k, beta, t)
                )
            els[t] = sum(skew_els) / (tr.k_high - tr.k_low)
        horizons_arr = np.array(sorted(els))
        el_arr = np.array([els[t] for t in sorted(els)])
        annuity = pricing.risky_annuity(horizons_arr, el_arr, tr, curve)
        dleg = pricing.default_leg(horizons_arr, el_arr, tr, curve)
        if annuity <= 0.0:
            raise UndefinedSpreadError("risky annuity is zero")
        price_rows.append(pricing.TranchePrice(
            tranche=tr, par_spread=dleg / annuity, risky_annuity=annuity,
            default_leg=dleg,
        ))
    reporter.csv("basecorr_prices.csv", fmt.PRICING_HEADER,
                 fmt.pricing_rows(price_rows))


_MODE_RUNNERS = {
    "calibrate-static": _mode_calibrate_static,
    "price-bespoke": _mode_price_bespoke,
    "calibrate-dynamic": _mode_calibrate_dynamic,
    "map-basecorr": _mode_map_basecorr,
}

_MODE_REQUIRES = {
    "calibrate-static": ("constraints",),
    "price-bespoke": ("constraints", "discount_curve", "tranches"),
    "calibrate-dynamic": ("constraints",),
    "map-basecorr": ("base_correlation", "tranches"),
}


def run(config: RunConfig) -> int:
    """Execute one mode; returns the process exit status."""
    for key in _MODE_REQUIRES[config.mode]:
        if getattr(config, key) is None:
            raise ConfigurationError(f"mode {config.mode} needs a '{key}' input")
    config.output_dir.mkdir(parents=True, exist_ok=True)
    reporter = _Reporter(config.output_dir, config.verbose)
    try:
        _MODE_RUNNERS[config.mode](config, reporter)
        _manifest(config, reporter)
    except BaseException:
        reporter.rollback()
        raise
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="entropic-bespoke",
        description="Calibrate credit-index loss measures and price bespoke "
                    "CDO tranches",
    )
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--mode", choices=MODES, default=None,
                        help="override the mode in the config")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (fallback: ENTROPIC_BESPOKE_THREADS)")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    try:
        config = RunConfig.from_file(
            args.config, mode=args.mode, out=args.out, threads=args.threads,
            verbose=args.verbose,
        )
        return run(config)
    except EntropicBespokeError as exc:
        code = "ERROR"
        for klass, name in _ERROR_CODES.items():
            if isinstance(exc, klass):
                code = name
                break
        print(f"ERROR {code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR IO: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
