import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthehr.fidelity import kl_categorical, kl_continuous
from synthehr.generators import (
    CopyBackend, GenerationRequest, GenerationStrategy, LinearGaussian, Proposal, ReferenceBackend, RowReject,
    degrade, fit_reference, generate, group_quota, normal_scores, sample,
)
from synthehr.schema import CellViolation, FeatureSpec, TableSchema, concat, parse_row, rows_to_table

from conftest import gaussian_schema, make_table


def gaussian_seed(rng, n=1000, group=False):
    schema = gaussian_schema(3, group=group)
    x = rng.standard_normal((n, 3))
    cols = dict(x1=x[:, 0], x2=x[:, 1], x3=x[:, 2], y=rng.choice(["0", "1"], n))
    if group:
        cols["sex"] = rng.choice(["F", "M"], n)
    return make_table(schema, **cols)


def request(seed, n, variant="conditional", group=None, rng_seed=0):
    return GenerationRequest(seed.schema, n, GenerationStrategy(variant, group), seed, rng_seed)


def test_strategy_aliases_and_group_rule():
    assert GenerationStrategy("group", "sex").variant == "group_based"
    assert GenerationStrategy("schema").short_name == "schema"
    with pytest.raises(ValueError):
        GenerationStrategy("group_based")
    with pytest.raises(ValueError):
        GenerationStrategy("naive", "sex")
    with pytest.raises(ValueError):
        GenerationStrategy("telepathic")


def test_independent_gaussians_give_near_zero_weights(rng):
    model = fit_reference(gaussian_seed(rng), GenerationStrategy("conditional"))
    comp = model.components[None]
    for name in ("x2", "x3"):
        cond = comp.conditionals[name]
        assert isinstance(cond, LinearGaussian)
        assert np.all(np.abs(cond.weights) < 0.1)


def test_frequency_table_matches_sample(rng):
    schema = TableSchema((FeatureSpec("c", "categorical", allowed_values=("A", "B")),
                          FeatureSpec("y", "binary", "label", ("0", "1"))))
    seed = make_table(schema, c=rng.choice(["A", "B"], 1000), y=rng.choice(["0", "1"], 1000))
    freq = fit_reference(seed, GenerationStrategy("naive")).components[None].marginals["c"].as_dict()
    assert freq["A"] == pytest.approx(0.5, abs=0.05) and freq["B"] == pytest.approx(0.5, abs=0.05)


def test_schema_constrained_can_emit_unseen_categories(rng):
    schema = TableSchema((FeatureSpec("c", "categorical", allowed_values=("A", "B", "C")),
                          FeatureSpec("y", "binary", "label", ("0", "1"))))
    seed = make_table(schema, c=["A"] * 40, y=["0", "1"] * 20)
    naive = sample(fit_reference(seed, GenerationStrategy("naive")), request(seed, 2000, "naive"))
    prior = sample(fit_reference(seed, GenerationStrategy("schema")), request(seed, 2000, "schema"))
    assert set(naive.columns["c"]) == {"A"}
    assert {"B", "C"} <= set(prior.columns["c"])


def test_group_quota_exactly_even(rng):
    seed = gaussian_seed(rng, group=True)
    out, log = generate(request(seed, 1000, "group", "sex"), ReferenceBackend())
    vals, counts = np.unique(out.columns["sex"], return_counts=True)
    assert dict(zip(vals, counts)) == {"F": 500, "M": 500}
    assert log.status == "ok"
    assert group_quota(7, ["a", "b", "c"]) == {"a": 3, "b": 2, "c": 2}


def test_single_row_and_determinism(rng):
    seed = gaussian_seed(rng)
    model = fit_reference(seed, GenerationStrategy("conditional"))
    assert sample(model, request(seed, 1)).n_rows == 1
    a = sample(model, request(seed, 300, rng_seed=4))
    b = sample(model, request(seed, 300, rng_seed=4))
    assert a.equals(b)
    assert not a.equals(sample(model, request(seed, 300, rng_seed=5)))


def test_conditional_preserves_strong_linear_dependence(rng):
    schema = gaussian_schema(2)
    x1 = rng.standard_normal(2000)
    seed = make_table(schema, x1=x1, x2=2 * x1 + 0.1 * rng.standard_normal(2000),
                      y=rng.choice(["0", "1"], 2000))
    out = sample(fit_reference(seed, GenerationStrategy("conditional")), request(seed, 5000))
    assert np.corrcoef(out.columns["x1"], out.columns["x2"])[0, 1] > 0.9
    naive = sample(fit_reference(seed, GenerationStrategy("naive")), request(seed, 5000, "naive"))
    assert abs(np.corrcoef(naive.columns["x1"], naive.columns["x2"])[0, 1]) < 0.1


def test_skewed_marginal_survives_the_conditional_chain(rng):
    # lognormal values with a floor; a plain Gaussian conditional would put mass at the floor
    schema = gaussian_schema(2)
    x1 = rng.standard_normal(3000)
    x2 = np.exp(0.8 * x1 + 0.6 * rng.standard_normal(3000))
    seed = make_table(schema, x1=x1, x2=x2, y=rng.choice(["0", "1"], 3000))
    out = sample(fit_reference(seed, GenerationStrategy("conditional")), request(seed, 20000))
    assert kl_continuous(x2, out.columns["x2"]) < 0.05
    assert out.columns["x2"].min() > 0


def test_normal_scores_are_standardized():
    z = normal_scores(np.arange(1000.0))
    assert abs(z.mean()) < 1e-9 and z.std() == pytest.approx(1.0, abs=0.01)


def test_group_model_separates_group_means(rng):
    schema = gaussian_schema(1, group=True)
    sex = rng.choice(["F", "M"], 2000)
    x1 = np.where(sex == "F", -2.0, 2.0) + rng.standard_normal(2000)
    seed = make_table(schema, sex=sex, x1=x1, y=rng.choice(["0", "1"], 2000))
    out, _ = generate(request(seed, 4000, "group", "sex"), ReferenceBackend())
    f = out.columns["x1"][out.columns["sex"] == "F"]
    m = out.columns["x1"][out.columns["sex"] == "M"]
    assert f.mean() == pytest.approx(-2, abs=0.15) and m.mean() == pytest.approx(2, abs=0.15)


def test_single_observed_group_degenerates_with_flag(rng):
    seed = gaussian_seed(rng, 200, group=True)
    seed = make_table(seed.schema, **{**seed.columns, "sex": ["F"] * 200})
    model = fit_reference(seed, GenerationStrategy("group", "sex"))
    assert any("degenerated to conditional" in f for f in model.flags)
    assert sample(model, request(seed, 50, "group", "sex")).n_rows == 50


def test_tiny_seed_falls_back_to_marginals(rng):
    seed = gaussian_seed(rng, 12)
    model = fit_reference(seed, GenerationStrategy("conditional"))
    assert any("marginal-only" in f for f in model.flags)
    assert not model.components[None].conditionals


def test_empty_seed_rejected(rng):
    with pytest.raises(ValueError):
        fit_reference(gaussian_seed(rng).take(np.arange(0)), GenerationStrategy("naive"))


def test_larger_quota_extends_smaller_one(rng):
    seed = gaussian_seed(rng, group=True)
    model = fit_reference(seed, GenerationStrategy("group", "sex"))
    small = sample(model, request(seed, 1000, "group", "sex", rng_seed=3))
    large = sample(model, request(seed, 3000, "group", "sex", rng_seed=3))
    assert set(small.columns["x1"]) <= set(large.columns["x1"])


@given(st.sampled_from(["naive", "schema", "conditional", "group"]), st.integers(1, 400),
       st.integers(0, 10_000))
def test_every_sampled_row_is_schema_valid(variant, n, seed_value):
    rng = np.random.default_rng(seed_value)
    schema = TableSchema((FeatureSpec("sex", "binary", "group", ("F", "M")),
                          FeatureSpec("age", "continuous", range=(18, 90)),
                          FeatureSpec("lab", "continuous", range=(0, 10)),
                          FeatureSpec("ward", "categorical", allowed_values=("a", "b", "c")),
                          FeatureSpec("y", "binary", "label", ("0", "1"))))
    m = 120
    seed = make_table(schema, sex=rng.choice(["F", "M"], m), age=rng.uniform(18, 90, m),
                      lab=np.where(rng.random(m) < 0.1, np.nan, rng.uniform(0, 10, m)),
                      ward=rng.choice(["a", "b"], m), y=rng.choice(["0", "1"], m))
    group = "sex" if variant == "group" else None
    out, log = generate(GenerationRequest(schema, n, GenerationStrategy(variant, group), seed, seed_value),
                        ReferenceBackend())
    assert out.n_rows == n and log.n_rejected == 0
    for row in out.rows():
        raw = {k: ("" if v is None or (isinstance(v, float) and np.isnan(v)) else str(v)) for k, v in row.items()}
        assert parse_row(schema, raw)[1] == []


class FlakyBackend:
    """Every proposal has 10 rows: `bad` of them rejected, the rest valid."""

    name = "flaky"

    def __init__(self, seed, bad=3, rounds_without_rows=0):
        self.seed, self.bad, self.empty = seed, bad, rounds_without_rows
        self.calls = 0

    def propose(self, request, quota, attempt):
        self.calls += 1
        rejects = [RowReject((CellViolation("x1", "out_of_range", "99"),)) for _ in range(self.bad)]
        if self.calls <= self.empty:
            return Proposal(self.seed.take(np.arange(0)), rejects)
        return Proposal(self.seed.take(np.arange(10 - self.bad)), rejects)


def test_shortfall_is_requeried_and_rejects_counted(rng):
    seed = gaussian_seed(rng, 50)
    backend = FlakyBackend(seed)
    out, log = generate(request(seed, 20), backend, max_retries=5)
    assert out.n_rows == 20 and log.status == "ok"
    assert backend.calls == 3 and log.n_rejected == 9
    assert log.rejections_by_feature == {"x1": {"out_of_range": 9}}
    assert log.n_surplus == 1


def test_exhaustion_returns_partial_table(rng):
    seed = gaussian_seed(rng, 50)
    out, log = generate(request(seed, 20), FlakyBackend(seed, rounds_without_rows=10), max_retries=2)
    assert log.status == "exhausted" and out.n_rows == 0
    assert len(log.attempts) == 3 and log.n_rejected == 9


def test_copy_backend_reproduces_seed_rows(rng):
    seed = gaussian_seed(rng, 200, group=True)
    out, _ = generate(request(seed, 200, "group", "sex"), CopyBackend())
    have = {tuple(r.values()) for r in seed.rows()}
    assert all(tuple(r.values()) in have for r in out.rows())


def test_degrade_severity_monotone_in_kl(rng):
    x = rng.standard_normal(5000)
    t = make_table(gaussian_schema(1), x1=x, y=rng.choice(["0", "1"], 5000))
    mild = degrade(t, {"x1": 0.5}, 0).columns["x1"]
    hard = degrade(t, {"x1": 2.0}, 0).columns["x1"]
    assert kl_continuous(x, hard) > kl_continuous(x, mild) > 0.05


def test_degrade_full_mixing_of_categorical(rng):
    schema = TableSchema((FeatureSpec("c", "categorical", allowed_values=("A", "B")),
                          FeatureSpec("y", "binary", "label", ("0", "1"))))
    t = make_table(schema, c=np.where(rng.random(10_000) < 0.9, "A", "B"), y=["0"] * 10_000)
    c = degrade(t, {"c": 1.0}, 1).columns["c"]
    assert np.mean(c == "A") == pytest.approx(0.5, abs=0.05)


@given(st.dictionaries(st.sampled_from(["x1", "x2", "y"]), st.floats(0, 3), max_size=3), st.integers(0, 99))
def test_degrade_keeps_tables_valid_and_zero_is_identity(sev, seed_value):
    rng = np.random.default_rng(seed_value)
    schema = TableSchema((FeatureSpec("x1", "continuous", range=(-3, 3)), FeatureSpec("x2", "continuous"),
                          FeatureSpec("y", "binary", "label", ("0", "1"))))
    x1 = np.clip(rng.standard_normal(100), -3, 3)
    x1[:5] = np.nan
    t = make_table(schema, x1=x1, x2=rng.standard_normal(100), y=rng.choice(["0", "1"], 100))
    out = degrade(t, sev, seed_value)
    assert np.array_equal(out.missing_mask, t.missing_mask)
    for name in ("x1", "x2", "y"):
        if sev.get(name, 0.0) == 0.0:
            assert np.array_equal(out.columns[name], t.columns[name], equal_nan=schema[name].is_continuous)
    assert degrade(t, {}, 0).equals(t)


def test_degrade_rejects_unknown_and_negative(rng):
    t = gaussian_seed(rng, 10)
    with pytest.raises(KeyError):
        degrade(t, {"nope": 1.0}, 0)
    with pytest.raises(ValueError):
        degrade(t, {"x1": -1.0}, 0)
