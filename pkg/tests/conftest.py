import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from synthehr.schema import DataTable, FeatureSpec, TableSchema

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gaussian_schema(n_features=3, group=False):
    feats = [FeatureSpec(f"x{i}", "continuous") for i in range(1, n_features + 1)]
    if group:
        feats.insert(0, FeatureSpec("sex", "binary", "group", ("F", "M")))
    feats.append(FeatureSpec("y", "binary", "label", ("0", "1")))
    return TableSchema(tuple(feats), "test")


def make_table(schema, **cols):
    return DataTable.from_columns(schema, cols)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_table(rng):
    """x1 drives the label strongly, x2 weakly, x3 is noise."""
    n = 1500
    x = rng.standard_normal((n, 3))
    p = 1 / (1 + np.exp(-(2.5 * x[:, 0] + 0.8 * x[:, 1] - 1.0)))
    y = np.where(rng.random(n) < p, "1", "0")
    return make_table(gaussian_schema(3), x1=x[:, 0], x2=x[:, 1], x3=x[:, 2], y=y)


@pytest.fixture(scope="session")
def cohort():
    from synthehr.simulate import simulate_cohort
    return simulate_cohort(3000, seed=5)
