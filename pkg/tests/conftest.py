import pandas as pd
import pytest

from saecount.forest import ForestParams
from saecount.rng import make_rng, stratified_srswor
from saecount.simlab import Scenario, generate_population


@pytest.fixture
def small_params():
    return ForestParams(num_trees=30, min_node_size=5)


@pytest.fixture
def toy_scenario():
    return Scenario.builtin("normal-poisson").with_overrides(n_domains=10, domain_size=80)


@pytest.fixture
def poisson_population(toy_scenario):
    return generate_population(toy_scenario, make_rng(11))


@pytest.fixture
def poisson_sample(poisson_population):
    plan = {d: 20 for d in poisson_population.domain_ids}
    return stratified_srswor(make_rng(12), poisson_population, plan)


@pytest.fixture
def survey_files(tmp_path, poisson_population, poisson_sample):
    """Survey and census CSVs of the toy population"""
    survey = tmp_path / "survey.csv"
    census = tmp_path / "census.csv"
    pd.DataFrame(
        {"dom": poisson_sample.domains, "y": poisson_sample.y,
         "x1": poisson_sample.X[:, 0], "x2": poisson_sample.X[:, 1]}
    ).to_csv(survey, index=False)
    pd.DataFrame(
        {"dom": poisson_population.domains, "x1": poisson_population.X[:, 0],
         "x2": poisson_population.X[:, 1], "y": poisson_population.y}
    ).to_csv(census, index=False)
    return survey, census
