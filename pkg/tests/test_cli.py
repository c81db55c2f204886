import csv
import json

import numpy as np
import pytest

import entropic_bespoke as eb
from entropic_bespoke.cli import RunConfig, main
from entropic_bespoke.io import (
    CONSTRAINT_COLUMNS,
    load_constraints,
    load_portfolios,
)
from entropic_bespoke.loss import (
    LossGrid,
    build_conditional_prior,
    default_loss_unit,
    name_loss_units,
)


def write_portfolios(path, rho=0.4, alpha=0.2, horizons=(1.0, 3.0), n_names=6,
                     loading=0.45):
    names = []
    for idx in (1, 2):
        for j in range(n_names):
            names.append({
                "id": f"N{idx}_{j}",
                "index_id": idx,
                "bucket": "relevant" if j < n_names // 2 else "complement",
                "recovery": 0.4,
                "notional_weight": 1.0 / n_names,
                "one_factor_loading": loading,
                "default_probs": [
                    round(min(0.9, 0.02 * (j + 1) * t), 10) for t in horizons
                ],
            })
    path.write_text(json.dumps({
        "factor_params": {"rho": rho, "alpha": alpha},
        "horizons": list(horizons),
        "names": names,
    }))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def prior_el_constraints(portfolio_path, grid_size=(4, 4), shift=1.0):
    """Constraint rows whose targets are the prior-implied values."""
    params, ports, horizons = load_portfolios(portfolio_path)
    unit = default_loss_unit(*ports.values())
    grid = eb.build_market_grid(*grid_size, params)
    rows = []
    for t in horizons:
        for i, p in sorted(ports.items()):
            cap = sum(name_loss_units(n, LossGrid(unit=unit, max_units=10**9))
                      for n in p.names)
            q = build_conditional_prior(
                p, grid, LossGrid(unit=unit, max_units=cap), t, params
            )
            shells = [
                eb.PricingConstraint(index_id=i, kind="tranche", k_low=0.0,
                                     k_high=0.3, target_el=0.0, sigma=1e-4,
                                     horizon=t),
                eb.PricingConstraint(index_id=i, kind="subportfolio_total",
                                     bucket="relevant", target_el=0.0,
                                     sigma=1e-4, horizon=t),
            ]
            els = eb.prior_expected_losses(grid, {i: q}, shells)
            rows.append([i, "tranche", "0.0", "0.3", t,
                         "%.17g" % (els[0] * shift), "0.0001"])
            rows.append([i, "relevant_total", "", "", t,
                         "%.17g" % (els[1] * shift), "0.0001"])
    return rows


@pytest.fixture
def workdir(tmp_path):
    write_portfolios(tmp_path / "portfolios.json")
    write_csv(tmp_path / "discount.csv", ["time", "discount_factor"],
              [[1.0, 0.98], [3.0, 0.94], [5.0, 0.9]])
    write_csv(tmp_path / "tranches.csv",
              ["k_low", "k_high", "maturity", "frequency", "daycount"],
              [[0.0, 0.1, 3.0, 4, "yearfrac"], [0.1, 0.5, 3.0, 4, "yearfrac"]])
    write_csv(tmp_path / "basecorr.csv", ["strike", "beta", "horizon"],
              [[0.03, 0.3, 3.0], [0.07, 0.4, 3.0], [0.15, 0.5, 3.0]])
    config = {
        "mode": "calibrate-static",
        "portfolios": "portfolios.json",
        "constraints": "constraints.csv",
        "discount_curve": "discount.csv",
        "tranches": "tranches.csv",
        "base_correlation": "basecorr.csv",
        "bespoke": {"members": [[1, "relevant"], [2, "relevant"]]},
        "grid_size": [4, 4],
        "output_dir": "out",
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    return tmp_path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestCalibrateStatic:
    def test_prior_targets_give_zero_residuals_and_lambdas(self, workdir):
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json"))
        assert main(["--config", str(workdir / "config.json")]) == 0
        rows = read_rows(workdir / "out" / "calibration_residuals.csv")
        assert len(rows) == 8
        for row in rows:
            assert abs(float(row["residual"])) < 1e-10
            assert abs(float(row["lambda"])) < 1e-7

    def test_determinism_across_runs_and_threads(self, workdir):
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json", shift=1.1))
        assert main(["--config", str(workdir / "config.json"),
                     "--out", str(workdir / "o1")]) == 0
        assert main(["--config", str(workdir / "config.json"),
                     "--out", str(workdir / "o2")]) == 0
        assert main(["--config", str(workdir / "config.json"),
                     "--out", str(workdir / "o3"), "--threads", "4"]) == 0
        names = ["calibration_residuals.csv", "factor_distribution.csv",
                 "posterior_measure.csv"]
        for name in names:
            ref = (workdir / "o1" / name).read_bytes()
            assert (workdir / "o2" / name).read_bytes() == ref
            assert (workdir / "o3" / name).read_bytes() == ref

    def test_full_partition_warning(self, workdir, capsys):
        rows = prior_el_constraints(workdir / "portfolios.json")
        extra = [
            [1, "tranche", "0.3", "1.0", 1.0, "0.001", "0.0001"],
            [1, "complement_total", "", "", 1.0, "0.05", "0.0001"],
        ]
        # index 1 at horizon 1.0 now has tranches [0, 0.3], [0.3, 1] plus
        # both totals: linearly dependent
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  rows + extra)
        assert main(["--config", str(workdir / "config.json")]) == 0
        assert "linearly dependent" in capsys.readouterr().err


class TestPriceBespoke:
    def test_single_bucket_equals_direct_pricing(self, workdir):
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json", shift=1.1))
        cfg = json.loads((workdir / "config.json").read_text())
        cfg["mode"] = "price-bespoke"
        cfg["bespoke"] = {"members": [[1, "relevant"]]}
        (workdir / "config.json").write_text(json.dumps(cfg))
        assert main(["--config", str(workdir / "config.json")]) == 0
        rows = read_rows(workdir / "out" / "tranche_prices.csv")

        # independent pricing pass through the library
        params, ports, horizons = load_portfolios(workdir / "portfolios.json")
        constraints = load_constraints(workdir / "constraints.csv")
        unit = default_loss_unit(*ports.values())
        grid = eb.build_market_grid(4, 4, params)
        results = {}
        for t in horizons:
            priors = {}
            for i, p in sorted(ports.items()):
                cap = sum(
                    name_loss_units(n, LossGrid(unit=unit, max_units=10**9))
                    for n in p.names
                )
                priors[i] = build_conditional_prior(
                    p, grid, LossGrid(unit=unit, max_units=cap), t, params
                )
            subset = [c for c in constraints if c.horizon == t]
            results[t] = eb.calibrate(grid, priors, subset)
        notional = sum(n.notional_weight
                       for n in ports[1].bucket_names("relevant"))
        spec = eb.BespokeSpec(members=((1, "relevant"),), notional=notional)
        dists = eb.bespoke_loss_dist(results, spec)
        curve = eb.DiscountCurve(times=(1.0, 3.0, 5.0),
                                 factors=(0.98, 0.94, 0.9))
        for row in rows:
            tranche = eb.TrancheSpec.with_schedule(
                float(row["k_low"]), float(row["k_high"]), 3.0, 4
            )
            price = eb.price_tranche(dists, tranche, curve)
            assert float(row["par_spread_bp"]) == pytest.approx(
                price.par_spread_bp, abs=0.051
            )
            assert float(row["risky_annuity"]) == pytest.approx(
                price.risky_annuity, rel=1e-9
            )

    def test_posterior_measure_roundtrip_reprices_identically(self, workdir):
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json", shift=1.1))
        cfg = json.loads((workdir / "config.json").read_text())
        cfg["mode"] = "price-bespoke"
        (workdir / "config.json").write_text(json.dumps(cfg))
        assert main(["--config", str(workdir / "config.json")]) == 0

        params, ports, horizons = load_portfolios(workdir / "portfolios.json")
        unit = default_loss_unit(*ports.values())
        grid = eb.build_market_grid(4, 4, params)

        # rebuild the posterior measure from the dumped sparse entries
        measure = read_rows(workdir / "out" / "posterior_measure.csv")
        factors = read_rows(workdir / "out" / "factor_distribution.csv")
        notional = sum(
            n.notional_weight
            for i in (1, 2) for n in ports[i].bucket_names("relevant")
        )
        prices = {}
        for t in horizons:
            weights = np.array([
                float(r["posterior_weight"]) for r in factors
                if float(r["horizon"]) == t
            ])
            per_node = {}
            for i in (1, 2):
                cap_rel = sum(
                    name_loss_units(n, LossGrid(unit=unit, max_units=10**9))
                    for n in ports[i].bucket_names("relevant")
                )
                marg = np.zeros((grid.n_nodes, cap_rel + 1))
                for r in measure:
                    if float(r["horizon"]) == t and int(r["index_id"]) == i:
                        marg[int(r["m"]), int(r["x_rel"])] += float(r["prob"])
                per_node[i] = marg
            conv = None
            for i in (1, 2):
                conv = per_node[i] if conv is None else np.array([
                    np.convolve(conv[m], per_node[i][m])
                    for m in range(grid.n_nodes)
                ])
            pmf = weights @ conv
            prices[t] = eb.LossDist(
                pmf=pmf,
                grid=LossGrid(unit=unit / notional, max_units=len(pmf) - 1),
                horizon=t,
            )
        curve = eb.DiscountCurve(times=(1.0, 3.0, 5.0),
                                 factors=(0.98, 0.94, 0.9))
        out_rows = read_rows(workdir / "out" / "tranche_prices.csv")
        for row in out_rows:
            tranche = eb.TrancheSpec.with_schedule(
                float(row["k_low"]), float(row["k_high"]), 3.0, 4
            )
            price = eb.price_tranche(prices, tranche, curve)
            assert "%.1f" % price.par_spread_bp == row["par_spread_bp"]
            assert "%.10g" % price.risky_annuity == row["risky_annuity"]
            assert "%.10g" % price.default_leg == row["default_leg"]


class TestMapBasecorr:
    def test_atm_derived_example(self, tmp_path):
        # bespoke pool EL 0.06, index pool EL 0.04, K_b = 0.03 -> K_i = 0.02
        names = []
        for j in range(4):
            names.append({
                "id": f"I{j}", "index_id": 1,
                "bucket": "relevant" if j < 2 else "complement",
                "recovery": 0.4, "notional_weight": 0.25,
                "one_factor_loading": 0.4,
                "default_probs": [1.0 / 15.0],
            })
        for j in range(3):
            names.append({
                "id": f"B{j}", "index_id": 2, "bucket": "relevant",
                "recovery": 0.4, "notional_weight": 1.0 / 3.0,
                "one_factor_loading": 0.4,
                "default_probs": [0.1],
            })
        (tmp_path / "portfolios.json").write_text(json.dumps({
            "factor_params": {"rho": 0.3, "alpha": 0.0},
            "horizons": [3.0],
            "names": names,
        }))
        write_csv(tmp_path / "tranches.csv",
                  ["k_low", "k_high", "maturity", "frequency", "daycount"],
                  [[0.0, 0.03, 3.0, 4, "yearfrac"]])
        write_csv(tmp_path / "basecorr.csv", ["strike", "beta", "horizon"],
                  [[0.03, 0.3, 3.0], [0.15, 0.5, 3.0]])
        (tmp_path / "config.json").write_text(json.dumps({
            "mode": "map-basecorr",
            "portfolios": "portfolios.json",
            "tranches": "tranches.csv",
            "base_correlation": "basecorr.csv",
            "bespoke": {"members": [[2, "relevant"]]},
            "mapping_rule": "atm",
            "reference_index": 1,
            "output_dir": "out",
        }))
        assert main(["--config", str(tmp_path / "config.json")]) == 0
        rows = read_rows(tmp_path / "out" / "mapped_strikes.csv")
        assert len(rows) == 1
        assert float(rows[0]["bespoke_el"]) == pytest.approx(0.06, abs=1e-12)
        assert float(rows[0]["index_el"]) == pytest.approx(0.04, abs=1e-12)
        assert float(rows[0]["k_index"]) == pytest.approx(0.02, abs=1e-12)
        assert (tmp_path / "out" / "basecorr_prices.csv").exists()


class TestFailureHandling:
    def test_missing_input_errors_cleanly(self, workdir, capsys):
        # no constraints.csv on disk
        rc = main(["--config", str(workdir / "config.json")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("ERROR CONFIG:")
        assert not (workdir / "out").exists() or not any(
            (workdir / "out").iterdir()
        )

    def test_partial_outputs_removed_on_failure(self, workdir, capsys):
        # constraints reference an index that does not exist: the residual
        # table for horizon 1.0 would be written before the failure at 3.0
        rows = prior_el_constraints(workdir / "portfolios.json")
        rows.append([9, "tranche", "0.0", "0.3", 3.0, "0.01", "0.0001"])
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS, rows)
        rc = main(["--config", str(workdir / "config.json")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("ERROR CONFIG:")
        assert not any((workdir / "out").iterdir())

    def test_rollback_after_partial_write(self, workdir, capsys):
        # calibration outputs are written before pricing; a tranche beyond
        # the last constrained horizon fails afterwards and must take the
        # already-written files with it
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json"))
        write_csv(workdir / "tranches.csv",
                  ["k_low", "k_high", "maturity", "frequency", "daycount"],
                  [[0.0, 0.1, 30.0, 4, "yearfrac"]])
        cfg = json.loads((workdir / "config.json").read_text())
        cfg["mode"] = "price-bespoke"
        (workdir / "config.json").write_text(json.dumps(cfg))
        rc = main(["--config", str(workdir / "config.json")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("ERROR CONFIG:")
        assert not any((workdir / "out").iterdir())

    def test_invalid_mode(self, workdir, capsys):
        cfg = json.loads((workdir / "config.json").read_text())
        cfg["mode"] = "explode"
        (workdir / "config.json").write_text(json.dumps(cfg))
        rc = main(["--config", str(workdir / "config.json")])
        assert rc == 1
        assert "ERROR CONFIG" in capsys.readouterr().err


class TestConfig:
    def test_threads_fallback_chain(self, workdir, monkeypatch):
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json"))
        path = workdir / "config.json"
        monkeypatch.setenv("ENTROPIC_BESPOKE_THREADS", "3")
        assert RunConfig.from_file(path).threads == 3
        assert RunConfig.from_file(path, threads=2).threads == 2
        cfg = json.loads(path.read_text())
        cfg["threads"] = 5
        path.write_text(json.dumps(cfg))
        assert RunConfig.from_file(path).threads == 5

    def test_relative_paths_resolve_against_config(self, workdir):
        write_csv(workdir / "constraints.csv", CONSTRAINT_COLUMNS,
                  prior_el_constraints(workdir / "portfolios.json"))
        cfg = RunConfig.from_file(workdir / "config.json")
        assert cfg.portfolios == workdir / "portfolios.json"
        assert cfg.output_dir == workdir / "out"
