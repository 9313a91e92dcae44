import numpy as np

from saecount.data import Population, Sample
from saecount.forest import LEAF, Forest, ForestParams, Tree


def make_sample(domains, y, X=None, covariates=()):
    domains = np.asarray(domains)
    X = np.zeros((len(domains), 1)) if X is None else np.asarray(X, dtype=float)
    return Sample(domains=domains, X=X, y=np.asarray(y), covariates=covariates)


def make_population(domains, X=None, y=None, covariates=()):
    domains = np.asarray(domains)
    X = np.zeros((len(domains), 1)) if X is None else np.asarray(X, dtype=float)
    return Population(domains=domains, X=X, y=y, covariates=covariates)


def constant_forest(value, p=2):
    """Single-leaf forest predicting `value` everywhere"""
    tree = Tree([LEAF], [0.0], [LEAF], [LEAF], [value], [0.0])
    return Forest([tree], np.zeros((1, 1), dtype=np.int32), np.zeros((1, p)), ForestParams(num_trees=1))
