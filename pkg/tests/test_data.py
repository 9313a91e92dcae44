import numpy as np
import pytest

from saecount.data import CsvSchema, Population, Sample, domain_index, load_csv, write_csv
from saecount.errors import DimensionError, InputError, ParseError, SchemaError, ValidationError

SCHEMA = CsvSchema(domain="dom", covariates=("x1", "x2"), outcome="y")


def _write(path, text):
    path.write_text(text)
    return path


def test_load_sample(tmp_path):
    path = _write(tmp_path / "s.csv", "dom,y,x1,x2\n1,0,0.5,1.0\n1,2,1.5,-1.0\n2,5,2.5,0.0\n")
    sample = load_csv(path, SCHEMA)
    assert isinstance(sample, Sample)
    assert sample.n == 3 and sample.p == 2
    assert sample.y.tolist() == [0, 2, 5]
    assert sample.domains.tolist() == [1, 1, 2]
    assert sample.covariates == ("x1", "x2")


def test_outcome_omitted_gives_population(tmp_path):
    path = _write(tmp_path / "s.csv", "dom,y,x1,x2\n1,0,0.5,1.0\n1,2,1.5,-1.0\n2,5,2.5,0.0\n")
    population = load_csv(path, SCHEMA.without_outcome())
    assert isinstance(population, Population)
    assert not population.has_outcome
    assert population.N == 3


def test_fractional_outcome_names_row(tmp_path):
    path = _write(tmp_path / "s.csv", "dom,y,x1,x2\n1,0,0.5,1.0\n1,2.5,1.5,-1.0\n")
    with pytest.raises(ParseError) as err:
        load_csv(path, SCHEMA)
    assert err.value.row == 2
    assert err.value.column == "y"
    assert "row 2" in str(err.value)


def test_negative_outcome_rejected(tmp_path):
    path = _write(tmp_path / "s.csv", "dom,y,x1,x2\n1,-1,0.5,1.0\n")
    with pytest.raises(ParseError):
        load_csv(path, SCHEMA)


def test_missing_column(tmp_path):
    path = _write(tmp_path / "s.csv", "dom,y,x1\n1,0,0.5\n")
    with pytest.raises(SchemaError, match="x2"):
        load_csv(path, SCHEMA)


def test_non_numeric_covariate(tmp_path):
    path = _write(tmp_path / "s.csv", "dom,y,x1,x2\n1,0,abc,1.0\n")
    with pytest.raises(ParseError) as err:
        load_csv(path, SCHEMA)
    assert err.value.column == "x1"


@pytest.mark.parametrize("text", ["", "dom,y,x1,x2\n"])
def test_empty_file(tmp_path, text):
    path = _write(tmp_path / "s.csv", text)
    with pytest.raises(InputError):
        load_csv(path, SCHEMA)


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_csv(tmp_path / "nope.csv", SCHEMA)


def test_error_exit_codes():
    assert SchemaError("x").exit_code == 2
    assert ParseError("x").exit_code == 2
    assert InputError("x").exit_code == 4
    assert isinstance(ParseError("x"), ValueError)


@pytest.mark.parametrize(
    "domains, expected",
    [
        ([1, 1, 2], {1: [0, 1], 2: [2]}),
        ([3, 1, 3], {3: [0, 2], 1: [1]}),
        ([], {}),
    ],
)
def test_domain_index(domains, expected):
    data = Population(domains=np.array(domains, dtype=np.int64), X=np.zeros((len(domains), 1)))
    index = domain_index(data)
    assert {k: v.tolist() for k, v in index.items()} == expected
    assert list(index) == list(expected)


def test_domain_index_partitions_positions():
    rng = np.random.default_rng(3)
    domains = rng.integers(1, 7, size=40)
    index = domain_index(Population(domains=domains, X=np.zeros((40, 1))))
    positions = np.sort(np.concatenate(list(index.values())))
    assert positions.tolist() == list(range(40))


def test_write_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    sample = Sample(
        domains=np.array([1, 2, 2, 3]),
        X=rng.normal(size=(4, 2)),
        y=np.array([0, 3, 1, 7]),
        covariates=("x1", "x2"),
    )
    path = write_csv(sample, tmp_path / "out.csv", SCHEMA)
    again = load_csv(path, SCHEMA)
    np.testing.assert_array_equal(again.X, sample.X)
    np.testing.assert_array_equal(again.y, sample.y)
    np.testing.assert_array_equal(again.domains, sample.domains)


def test_containers_are_read_only():
    sample = Sample(domains=np.array([1, 2]), X=np.zeros((2, 1)), y=np.array([1, 2]))
    with pytest.raises(ValueError):
        sample.y[0] = 5


def test_sample_requires_outcome():
    with pytest.raises(ValidationError):
        Sample(domains=np.array([1]), X=np.zeros((1, 1)))


def test_covariate_shape_checked():
    with pytest.raises(DimensionError):
        Population(domains=np.array([1, 2]), X=np.zeros((3, 1)))


def test_check_against_census():
    census = Population(domains=np.array([1, 1, 2]), X=np.zeros((3, 1)))
    sample = Sample(domains=np.array([2, 2]), X=np.zeros((2, 1)), y=np.array([0, 1]))
    with pytest.raises(ValidationError, match="exceeds"):
        sample.check_against(census)


def test_population_domain_means():
    census = Population(domains=np.array([1, 1, 2]), X=np.zeros((3, 1)), y=np.array([1, 3, 4]))
    assert census.domain_means() == {1: 2.0, 2: 4.0}


def test_generated_files_load_back_exactly(survey_files, poisson_sample, poisson_population):
    survey, census = survey_files
    sample = load_csv(survey, SCHEMA)
    np.testing.assert_array_equal(sample.X, poisson_sample.X)
    assert sample.y.tolist() == poisson_sample.y.tolist()
    population = load_csv(census, SCHEMA.without_outcome())
    np.testing.assert_array_equal(population.X, poisson_population.X)
    assert population.domain_sizes() == poisson_population.domain_sizes()
