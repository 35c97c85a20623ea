import numpy as np
import pytest

from ringcal.decision import ActionGrid
from ringcal.ssm import DriverParams, NoiseParams
from ringcal.utility import AnticipationConfig, UtilityParams


@pytest.fixture
def grid():
    return ActionGrid()


@pytest.fixture
def anticipation():
    return AnticipationConfig()


@pytest.fixture
def params():
    return UtilityParams()


@pytest.fixture
def driver():
    return DriverParams(utility=UtilityParams(), noise=NoiseParams())


def joint_gaussian_loglik(z, controls, m0, p0, phi, omega, sigma_nu, condition_first=True):
    """Joint multivariate-normal log density of observations, by explicit algebra.

    z[k] is the observation at filter step k+1 (steps 1..n); controls[k] the
    3-vector control entering that step's prediction.  The filter's skipped
    first innovation corresponds to conditioning on the first observation:
    log p(z_2..z_n | z_1) = log N(z_1..z_n) - log N(z_1).
    """
    from scipy.stats import multivariate_normal, norm

    n = len(z)
    means = []
    m = np.asarray(m0, dtype=float)
    for k in range(n):
        m = phi @ m + controls[k]
        means.append(m.copy())
    # V[k] = Cov(xi at step k+1); cross terms via powers of phi
    vs = []
    v = np.asarray(p0, dtype=float)
    for k in range(n):
        v = phi @ v @ phi.T + omega
        vs.append(v.copy())
    cov = np.empty((n, n))
    for s in range(n):
        for t in range(s, n):
            block = vs[s]
            for _ in range(t - s):
                block = block @ phi.T
            cov[s, t] = cov[t, s] = block[0, 0]
    cov[np.diag_indices(n)] += sigma_nu**2
    mu = np.array([m[0] for m in means])
    full = multivariate_normal(mean=mu, cov=cov, allow_singular=False).logpdf(z)
    if not condition_first:
        return full
    first = norm(loc=mu[0], scale=np.sqrt(cov[0, 0])).logpdf(z[0])
    return full - first
