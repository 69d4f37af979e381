import numpy as np
import pytest

from covreg.data import from_arrays


def make_dataset(n=40, p=3, q=4, t_obs=30, seed=0, beta=None, gamma_idx=0):
    """Common-eigenvector data where component ``gamma_idx`` follows ``exp(x'beta)``."""
    rng = np.random.default_rng(seed)
    xs = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))])
    if beta is None:
        beta = np.zeros(q)
        beta[0] = 0.5
        if q > 1:
            beta[1] = 0.8
    basis, _ = np.linalg.qr(rng.standard_normal((p, p)))
    ys = []
    for x in xs:
        lam = np.exp(rng.normal(0, 0.3, p))
        lam[gamma_idx] = np.exp(x @ beta)
        ys.append((rng.standard_normal((t_obs, p)) * np.sqrt(lam)) @ basis.T)
    return from_arrays(ys, xs), basis, beta


@pytest.fixture
def small_data():
    return make_dataset()
