import numpy as np
import pytest

from fehd.data import Dataset, NumericColumn
from fehd.estimators import EstimationError, fit_glm_irls, fit_ols
from fehd.multiest import MultiOptions, run_multi

from oracles import scipubs_like


def make_ds(**cols):
    n = len(next(iter(cols.values())))
    return Dataset(n_rows=n, columns={k: NumericColumn(np.asarray(v, dtype=float))
                                      for k, v in cols.items()})


@pytest.fixture
def panel(rng):
    n = 400
    f1 = (np.arange(n) % 20).astype(float)
    f2 = rng.integers(0, 10, n).astype(float)
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    y1 = x1 + 0.5 * f1 / 10 + f2 / 5 + rng.normal(size=n)
    y2 = -x1 + x2 + f2 / 3 + rng.normal(size=n)
    region = np.repeat([0.0, 1.0], n // 2)
    return make_ds(y1=y1, y2=y2, x1=x1, x2=x2, f1=f1, f2=f2, region=region)


class TestPooling:
    def test_pooled_equals_standalone(self, panel):
        multi = run_multi("c(y1, y2) ~ x1 + x2 | f1 + f2", panel, MultiOptions())
        solo1 = fit_ols("y1 ~ x1 + x2 | f1 + f2", panel)
        solo2 = fit_ols("y2 ~ x1 + x2 | f1 + f2", panel)
        fits = multi.fits()
        assert np.abs(fits[0].coef - solo1.coef).max() <= 1e-12
        assert np.abs(fits[1].coef - solo2.coef).max() <= 1e-12
        assert np.abs(fits[0].residuals - solo1.residuals).max() <= 1e-12

    def test_one_batch_for_shared_structure(self, panel):
        multi = run_multi("c(y1, y2) ~ x1 | f1 + f2", panel, MultiOptions())
        assert len(multi.shared_work_report) == 1
        rep = multi.shared_work_report[0]
        assert rep["models"] == 2 and rep["targets"] == 3  # y1, y2, x1

    def test_different_fe_not_pooled(self, panel):
        multi = run_multi("y1 ~ x1 | sw(f1, f2)", panel, MultiOptions())
        assert len(multi.shared_work_report) == 2
        assert all(r["models"] == 1 for r in multi.shared_work_report)

    def test_glm_never_pooled(self, panel):
        ds = panel.with_columns({"cnt": NumericColumn(
            np.round(np.exp(panel.numeric("y1") / 4)))})
        multi = run_multi("cnt ~ sw(x1, x2) | f1", ds, MultiOptions(family="poisson"))
        assert multi.shared_work_report == []
        solo = fit_glm_irls("cnt ~ x1 | f1", ds, family="poisson")
        assert np.abs(multi.results[0].fit.coef - solo.coef).max() < 1e-12


class TestSplit:
    def test_split_level_order(self):
        ds = scipubs_like()
        multi = run_multi("articles ~ funding | indiv + year", ds,
                          MultiOptions(split="eu_us"))
        labels = [r.sample_label for r in multi.results]
        assert labels == ["EU", "US"]
        assert multi.results[0].fit.dof.n_used == 550
        assert multi.results[1].fit.dof.n_used == 530

    def test_fsplit_adds_full_sample_first(self):
        ds = scipubs_like()
        multi = run_multi("articles ~ funding | indiv + year", ds,
                          MultiOptions(fsplit="eu_us"))
        labels = [r.sample_label for r in multi.results]
        assert labels == ["Full sample", "EU", "US"]
        assert multi.results[0].fit.dof.n_used == 1080

    def test_split_equals_subset_fit(self):
        ds = scipubs_like()
        multi = run_multi("articles ~ funding | indiv + year", ds,
                          MultiOptions(split="eu_us"))
        solo = run_multi("articles ~ funding | indiv + year", ds,
                         MultiOptions(subset="eu_us == EU"))
        assert np.abs(multi.results[0].fit.coef - solo.results[0].fit.coef).max() < 1e-12

    def test_result_count_law(self, panel):
        multi = run_multi("c(y1, y2) ~ sw0(x2) | f1", panel,
                          MultiOptions(fsplit="region"))
        # 2 lhs x 2 rhs steps x 1 fe x (2 levels + full) = 12
        assert len(multi.results) == 12

    def test_ordering_model_major_then_split(self, panel):
        multi = run_multi("c(y1, y2) ~ x1 | f1", panel, MultiOptions(split="region"))
        sig = [(r.provenance.lhs_index, r.sample_label) for r in multi.results]
        assert sig == [(0, "0"), (0, "1"), (1, "0"), (1, "1")]


class TestErrors:
    def test_failed_model_recorded_others_continue(self, panel):
        # second split level has a constant x2 -> all-collinear there
        ds = panel.with_columns({"x2": NumericColumn(
            np.where(panel.numeric("region") == 1.0, 0.0, panel.numeric("x2")))})
        multi = run_multi("y1 ~ x2 | f1", ds, MultiOptions(split="region"))
        assert multi.results[0].ok
        assert not multi.results[1].ok
        assert "collinear" in multi.results[1].error

    def test_all_failing_raises(self, panel):
        with pytest.raises(EstimationError, match="every model failed"):
            run_multi("y1 ~ x1 | f1", panel, MultiOptions(subset="x1 > 99"))

    def test_threads_give_same_results(self, panel):
        a = run_multi("c(y1, y2) ~ sw(x1, x2) | f1", panel, MultiOptions(threads=1))
        b = run_multi("c(y1, y2) ~ sw(x1, x2) | f1", panel, MultiOptions(threads=4))
        for ra, rb in zip(a.results, b.results):
            assert np.array_equal(ra.fit.coef, rb.fit.coef)
