"""Gaussian mixture distribution over representation space and its priors.

The mixture has diagonal covariances, learned as negative log-variances,
and mixture coefficients mapped to weights by softmax.  Its parameters carry
three priors: a softball (mollified uniform on an m-ball) on the means, a
symmetric Dirichlet on the weights and a Gaussian on the negative
log-variances.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from dgd import autodiff as ad
from dgd import backend
from dgd.autodiff import DiffArray
from dgd.errors import DimensionError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SoftballPrior:
    """Mollified uniform distribution on the m-ball of radius ``scale``."""

    dim: int
    scale: float = 1.0
    sharpness: float = 1.0

    @property
    def log_norm(self):
        """Log of the inverse m-ball volume, used as the normaliser."""
        m = self.dim
        return gammaln(1.0 + 0.5 * m) - m * (math.log(self.scale) + 0.5 * math.log(math.pi))

    def sample(self, count, rng):
        return softball_sample(self, count, rng)

    def log_prob(self, mu):
        return softball_log_prob(self, mu)


def softball_sample(prior, count, rng):
    """Uniform draws from the ball: direction from a normal, radius ~ U^(1/m)."""
    m = prior.dim
    u = rng.standard_normal((count, m))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    radius = rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / m)
    return prior.scale * radius * u / norms


def softball_log_density(prior, mu):
    """Log-density of each row of ``mu`` [K, m], shape [K]; differentiable."""
    if not isinstance(mu, DiffArray):
        mu = DiffArray(np.atleast_2d(mu))
    if mu.ndim != 2 or mu.shape[1] != prior.dim:
        raise DimensionError(f"softball prior has dim {prior.dim}, got {mu.shape}")
    radius = ad.norm(mu, axis=1)
    arg = ad.scale(ad.add(ad.scale(radius, 1.0 / prior.scale), -1.0), prior.sharpness)
    return ad.sub(prior.log_norm, ad.softplus(arg))


def softball_log_prob(prior, mu):
    """Summed log-density of the rows of ``mu`` [K, m]; differentiable."""
    return ad.sum(softball_log_density(prior, mu))


def default_sigma(scale, n_components):
    """Default component standard deviation, 0.2 * scale / K."""
    return 0.2 * scale / n_components


class GaussianMixture:
    """Trainable diagonal-covariance Gaussian mixture.

    Parameters live in three leaves: ``means`` [K, m], ``neg_log_var`` [K, m]
    and ``coefficients`` [K] (pre-softmax).  ``sigma`` sets both the initial
    component standard deviation and the mean of the log-variance prior.
    """

    def __init__(self, n_components, dim, rng=None, *, scale=1.0, sharpness=1.0,
                 dirichlet_alpha=1.0, sigma=None, logvar_prior_sd=1.0, means=None):
        if n_components < 1 or dim < 1:
            raise ValueError("need n_components >= 1 and dim >= 1")
        self.n_components = int(n_components)
        self.dim = int(dim)
        self.mean_prior = SoftballPrior(self.dim, scale, sharpness)
        self.dirichlet_alpha = float(dirichlet_alpha)
        self.sigma = float(sigma) if sigma is not None else default_sigma(scale, n_components)
        self.logvar_prior_mean = -2.0 * math.log(self.sigma)
        self.logvar_prior_sd = float(logvar_prior_sd)

        if means is None:
            if rng is None:
                rng = np.random.default_rng()
            means = softball_sample(self.mean_prior, self.n_components, rng)
        means = np.asarray(means, dtype=np.float64)
        if means.shape != (self.n_components, self.dim):
            raise DimensionError(f"means must be {(self.n_components, self.dim)}, got {means.shape}")
        self.means = DiffArray(means, requires_grad=True, name="gmm.means")
        self.neg_log_var = DiffArray(
            np.full((self.n_components, self.dim), self.logvar_prior_mean),
            requires_grad=True, name="gmm.neg_log_var")
        self.coefficients = DiffArray(np.ones(self.n_components), requires_grad=True,
                                      name="gmm.coefficients")

    @property
    def K(self):
        return self.n_components

    def parameters(self):
        return [self.means, self.neg_log_var, self.coefficients]

    def weights(self):
        c = self.coefficients.values
        e = np.exp(c - c.max())
        return e / e.sum()

    def variances(self):
        return np.exp(-self.neg_log_var.values)

    def log_prob(self, z):
        return gmm_log_prob(self, z)

    def prior_log_prob(self):
        return gmm_prior_log_prob(self)

    def sample(self, n, rng, component=None):
        return gmm_sample(self, n, rng, component)

    def posteriors(self, z):
        return component_posteriors(self, z)

    def config(self):
        return {
            "n_components": self.n_components,
            "dim": self.dim,
            "scale": self.mean_prior.scale,
            "sharpness": self.mean_prior.sharpness,
            "dirichlet_alpha": self.dirichlet_alpha,
            "sigma": self.sigma,
            "logvar_prior_sd": self.logvar_prior_sd,
        }


def _joint_terms(gmm, z):
    """log w_k + log N(z_b | component k), shape [B, K]."""
    z = ad.as_diff(z)
    if z.ndim != 2 or z.shape[1] != gmm.dim:
        raise DimensionError(f"z must have {gmm.dim} columns, got shape {z.shape}")
    dens = ad.gauss_logdens(z, gmm.means, gmm.neg_log_var)
    return ad.add(dens, ad.log_softmax(gmm.coefficients))


def gmm_log_prob(gmm, z):
    """Mixture log-density of each row of ``z``, shape [B]."""
    return ad.logsumexp(_joint_terms(gmm, z), axis=1)


def supervised_log_prob(gmm, z, assigned):
    """log w_k + log N(z | k) for each row's assigned component only."""
    assigned = np.asarray(assigned)
    if assigned.ndim != 1 or np.any(assigned < 0) or np.any(assigned >= gmm.n_components):
        raise IndexError(f"component ids must lie in [0, {gmm.n_components})")
    z = ad.as_diff(z)
    if z.ndim != 2 or z.shape[0] != assigned.shape[0]:
        raise DimensionError(f"z shape {z.shape} does not match {assigned.shape[0]} ids")
    terms = _joint_terms(gmm, z)
    return ad.take(terms, (np.arange(z.shape[0]), assigned.astype(np.intp)))


def dirichlet_log_prob(gmm):
    K, alpha = gmm.n_components, gmm.dirichlet_alpha
    norm = gammaln(K * alpha) - K * gammaln(alpha)
    log_w = ad.log_softmax(gmm.coefficients)
    return ad.add(ad.scale(ad.sum(log_w), alpha - 1.0), norm)


def logvar_log_prob(gmm):
    sd = gmm.logvar_prior_sd
    dev = ad.scale(ad.sub(gmm.neg_log_var, gmm.logvar_prior_mean), 1.0 / sd)
    n = gmm.neg_log_var.size
    const = -n * (0.5 * LOG_2PI + math.log(sd))
    return ad.add(ad.scale(ad.sum(ad.mul(dev, dev)), -0.5), const)


def gmm_prior_log_prob(gmm):
    """Softball + Dirichlet + log-variance prior, one scalar."""
    total = ad.add(softball_log_prob(gmm.mean_prior, gmm.means), dirichlet_log_prob(gmm))
    return ad.add(total, logvar_log_prob(gmm))


def component_log_joint(gmm, z):
    """Plain-array log w_k + log N(z | k), shape [B, K]."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != gmm.dim:
        raise DimensionError(f"z must have {gmm.dim} columns, got shape {z.shape}")
    c = gmm.coefficients.values
    log_w = c - c.max()
    log_w = log_w - np.log(np.exp(log_w).sum())
    return backend.gauss_logdens(z, gmm.means.values, gmm.neg_log_var.values) + log_w


def component_posteriors(gmm, z):
    """Responsibilities p(k | z), rows sum to one."""
    lj = component_log_joint(gmm, z)
    lj = lj - lj.max(axis=1, keepdims=True)
    p = np.exp(lj)
    return p / p.sum(axis=1, keepdims=True)


def hard_assign(gmm, z):
    """Index of the most probable component; ties go to the lowest index."""
    return np.argmax(component_log_joint(gmm, z), axis=1)


def gmm_sample(gmm, n, rng, component=None, return_components=False):
    """Draw ``n`` latent points, from one component or from the mixture."""
    K = gmm.n_components
    if component is not None:
        if not 0 <= int(component) < K:
            raise IndexError(f"component {component} out of range [0, {K})")
        comps = np.full(n, int(component))
    else:
        comps = rng.choice(K, size=n, p=gmm.weights())
    sd = np.sqrt(gmm.variances())
    eps = rng.standard_normal((n, gmm.dim))
    z = gmm.means.values[comps] + eps * sd[comps]
    return (z, comps) if return_components else z
