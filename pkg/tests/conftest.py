"""Shared fixtures: synthetic Gaussian classification tasks with known parameters."""

import numpy as np
import pytest


class GaussianTask:
    """Three (or more) Gaussian classes with known means and covariances.

    Keeps the true parameters around so tests can evaluate the exact
    quadratic-discriminant (Bayes) rule independently of the package.
    """

    def __init__(self, means, covs, n_support, n_query, seed):
        self.means = [np.asarray(m, dtype=np.float64) for m in means]
        self.covs = [np.asarray(c, dtype=np.float64) for c in covs]
        rng = np.random.default_rng(seed)
        self.support_pool = {
            k: list(rng.multivariate_normal(self.means[k], self.covs[k], size=n_support))
            for k in range(len(means))
        }
        self.queries = []
        for k in range(len(means)):
            for x in rng.multivariate_normal(self.means[k], self.covs[k], size=n_query):
                self.queries.append((x, k))

    def bayes_predictions(self):
        """Exact equal-prior Gaussian Bayes rule using the true parameters."""
        xs = np.stack([x for x, _ in self.queries])
        scores = []
        for mean, cov in zip(self.means, self.covs):
            diff = xs - mean
            inv = np.linalg.inv(cov)
            maha = np.einsum("ij,jk,ik->i", diff, inv, diff)
            _, logdet = np.linalg.slogdet(cov)
            scores.append(maha + logdet)
        return np.argmin(np.stack(scores, axis=1), axis=1)

    def bayes_accuracy(self):
        truth = np.array([k for _, k in self.queries])
        return float(np.mean(self.bayes_predictions() == truth))


def swapped_anisotropy_task(
    d=16, n_support=200, n_query=1000, spread=8.0, seed=20240, long_var=16.0, short_var=1.0 / 16.0
):
    """One class elongated along axis 0, two compact classes flanking it.

    All covariances share the same determinant, so the no-log-det
    Mahalanobis rule coincides with the Bayes rule; eigenvalues along
    axis 0 differ by long_var / short_var (256x by default).
    """
    base = np.ones(d)
    cov_a = np.diag(np.r_[long_var, short_var, base[2:]])
    cov_b = np.diag(np.r_[short_var, long_var, base[2:]])
    mean_a = np.zeros(d)
    mean_b = np.r_[spread, np.zeros(d - 1)]
    mean_c = np.r_[-spread, np.zeros(d - 1)]
    return GaussianTask(
        [mean_a, mean_b, mean_c], [cov_a, cov_b, cov_b], n_support, n_query, seed
    )


@pytest.fixture(scope="session")
def anisotropic_task():
    return swapped_anisotropy_task(n_query=1000)
