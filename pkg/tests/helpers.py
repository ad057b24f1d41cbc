import numpy as np

from backtrack_audit.backtracking import noninformative, sample_joint
from backtrack_audit.scm_core import forward


def example1_table(model, people, n_star, seed=0, mutable=("U_X",)):
    """Counterfactual table for Example 1 individuals given as (U_A, U_X) pairs."""
    u = {
        "U_A": np.array([p[0] for p in people], dtype=float),
        "U_X": np.array([p[1] for p in people], dtype=float),
        "U_Yhat": np.zeros(len(people)),
    }
    factual = {"id": np.arange(len(people)), **u, **forward(model, u)}
    return sample_joint(model, noninformative(model, mutable), factual, n_star, seed)


def population_people(n, seed):
    rng = np.random.default_rng(seed)
    return list(zip((rng.random(n) < 0.5).astype(float), rng.standard_normal(n)))
