import numpy as np
import pytest

from fehd.bench import (BenchCase, DgpConfig, parse_cases, run_benchmark,
                        simulate_panel)
from fehd.estimators import fit_ols
from fehd.inference import VcovSpec, compute_vcov


class TestDgp:
    def test_counts(self):
        cfg = DgpConfig(n=1000, seed=1)
        assert cfg.nb_indiv == 100
        assert cfg.nb_firm == 4
        ds = simulate_panel(cfg)
        assert ds.n_rows == 1000
        assert len(np.unique(ds.numeric("indiv_id"))) == 100
        assert len(np.unique(ds.numeric("year"))) == 10

    def test_difficult_pattern(self):
        # rep(1:nb_firm, length.out = n) semantics
        cfg = DgpConfig(n=1000, seed=0)
        ds = simulate_panel(cfg)
        first10 = ds.numeric("firm_id_difficult")[:10]
        assert first10.tolist() == [1, 2, 3, 4, 1, 2, 3, 4, 1, 2]

    def test_seeded_determinism(self):
        a = simulate_panel(DgpConfig(n=2000, seed=42))
        b = simulate_panel(DgpConfig(n=2000, seed=42))
        for name in a.columns:
            assert np.array_equal(a.numeric(name), b.numeric(name))
        c = simulate_panel(DgpConfig(n=2000, seed=43))
        assert not np.array_equal(a.numeric("y"), c.numeric("y"))

    def test_x2_is_x1_squared(self):
        ds = simulate_panel(DgpConfig(n=500, seed=3))
        assert np.allclose(ds.numeric("x2"), ds.numeric("x1") ** 2)

    def test_coefficient_recovery(self):
        ds = simulate_panel(DgpConfig(n=20_000, seed=5))
        fit = fit_ols("y ~ x1 + x2 | indiv_id + firm_id + year", ds)
        se = np.sqrt(np.diag(compute_vcov(fit, VcovSpec("iid")).matrix))
        assert abs(fit.coef[0] - 1.0) < 3 * se[0]
        assert abs(fit.coef[1] - 0.05) < 3 * se[1]

    def test_n_below_minimum_rejected(self):
        with pytest.raises(ValueError, match="nb_year"):
            DgpConfig(n=5)


class TestCases:
    def test_parse(self):
        cases = parse_cases("simple2fe, difficult3fe-poisson")
        assert cases[0] == BenchCase("simple", 2, "ols")
        assert cases[1] == BenchCase("difficult", 3, "poisson")

    def test_parse_bad(self):
        with pytest.raises(ValueError, match="cannot parse"):
            parse_cases("medium2fe")

    def test_formulas(self):
        assert BenchCase("simple", 2, "ols").formula() == \
            "y ~ x1 + x2 | indiv_id + firm_id"
        assert BenchCase("difficult", 3, "poisson").formula() == \
            "ypois ~ x1 + x2 | indiv_id + firm_id_difficult + year"


class TestRunBenchmark:
    def test_smoke_simple(self):
        rows = run_benchmark([2000], [BenchCase("simple", 2, "ols")], reps=1, seed=1)
        assert len(rows) == 1
        assert rows[0]["status"] == "ok"
        assert rows[0]["seconds"] > 0
        assert rows[0]["demean_iterations"] >= 1

    def test_difficult_needs_more_iterations(self):
        simple = run_benchmark([5000], [BenchCase("simple", 2, "ols")], seed=2)
        hard = run_benchmark([5000], [BenchCase("difficult", 2, "ols")], seed=2)
        assert hard[0]["demean_iterations"] > simple[0]["demean_iterations"]

    def test_accelerated_beats_plain_on_difficult(self):
        acc = run_benchmark([5000], [BenchCase("difficult", 2, "ols")], seed=2)
        plain = run_benchmark([5000], [BenchCase("difficult", 2, "ols")], seed=2,
                              accelerate=False)
        assert acc[0]["demean_iterations"] < plain[0]["demean_iterations"]

    def test_sizes_must_be_sorted(self):
        with pytest.raises(ValueError, match="sorted"):
            run_benchmark([100, 50], [BenchCase("simple", 2, "ols")])
