import numpy as np

from app.services.measures import AtomicMeasure


def three_atoms() -> AtomicMeasure:
    return AtomicMeasure(atoms=[(-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)])


def random_convex_pair(rng: np.random.Generator, n_atoms: int = 3):
    """随机原子测度 mu 与其均值保持的展开 nu，满足 mu <=_cx nu"""
    locs = np.sort(rng.uniform(-1.0, 1.0, n_atoms))
    masses = rng.dirichlet(np.ones(n_atoms))
    mu = AtomicMeasure.from_arrays(locs, masses)
    left = rng.uniform(0.05, 1.5, n_atoms)
    right = rng.uniform(0.05, 1.5, n_atoms)
    nu_locs = np.concatenate([locs - left, locs + right])
    nu_masses = np.concatenate([masses * right / (left + right), masses * left / (left + right)])
    nu = AtomicMeasure.from_arrays(nu_locs, nu_masses)
    return mu, nu
