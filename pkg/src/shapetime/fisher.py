"""Score, closed-form Fisher information in ``t`` and Monte-Carlo oracles.

For ``d ~ N(mu(t), Sigma(t))`` with ``r = d - mu``::

    U = mu_t' S^-1 r + 1/2 r' S^-1 S_t S^-1 r - 1/2 tr(S^-1 S_t)
    I = mu_t' S^-1 mu_t  +  1/2 tr((S^-1 S_t)^2)
        (I_mu)              (I_sigma)

The time derivatives come from reverse sweeps through the network
(:func:`shapetime.network.field_time_derivatives`).  Only ``I_mu`` enters the
temporal uncertainty ``sigma_tau^2 = 1 / I_mu``.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import network as nw
from .errors import UnidentifiableError, InsufficientDataError
from .gaussian_field import log_density, _solve_lower, _solve_upper_t

I_MU_FLOOR = 1e-8


@dataclass
class FisherReport:
    p: np.ndarray
    t: float
    mu_t: np.ndarray
    sigma_t: np.ndarray
    I_mu: float
    I_sigma: float
    I_full: float
    sigma2_tau: float
    mc_I: float = None
    mc_score_mean: float = None
    mc_se: float = None


@dataclass
class FieldDerivatives:
    """Batched ``mu, L, Sigma`` and their ``t``-derivatives at ``(p, t)``."""

    mu: np.ndarray
    L: np.ndarray
    mu_t: np.ndarray
    L_t: np.ndarray

    @property
    def sigma(self):
        return nw.covariance(self.L)

    @property
    def sigma_t(self):
        return nw.covariance_derivative(self.L, self.L_t)

    def precision_times(self, v):
        """``Sigma^-1 v`` for a batch of vectors via two triangular solves."""
        return _solve_upper_t(self.L, _solve_lower(self.L, v))

    def precision_times_matrix(self, M):
        cols = [self.precision_times(M[:, :, j]) for j in range(M.shape[-1])]
        return np.stack(cols, axis=-1)


def derivatives(params, p, t):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    return FieldDerivatives(*nw.field_time_derivatives(params, p, t))


def _score_parts(der, r):
    """``(U_linear, U_quadratic)`` for residuals ``r`` of shape ``(N, S, D)``."""
    b = der.precision_times(der.mu_t)                       # (N, D)
    C = der.precision_times_matrix(der.sigma_t)             # S^-1 S_t
    A = der.precision_times_matrix(np.swapaxes(C, -1, -2))  # S^-1 (S^-1 S_t)^T = S^-1 S_t S^-1
    B = 0.5 * np.trace(C, axis1=-2, axis2=-1)
    u_lin = np.einsum("nd,nsd->ns", b, r)
    u_quad = 0.5 * np.einsum("nsi,nij,nsj->ns", r, A, r) - B[:, None]
    return u_lin, u_quad


def score(params, p, t, d):
    """Analytic score ``d/dt log p(d | p, t)``.

    Accepts a single point or a batch of ``(p, t, d)`` triples.
    """
    single = np.ndim(p) == 1
    der = derivatives(params, p, t)
    r = (np.atleast_2d(d) - der.mu)[:, None, :]
    u_lin, u_quad = _score_parts(der, r)
    u = (u_lin + u_quad)[:, 0]
    return float(u[0]) if single else u


def score_fd(params, p, t, d, h=1e-4):
    """Central-difference score from :func:`log_density` (test oracle only)."""
    t = np.asarray(t, dtype=float)
    return (log_density(params, p, t + h, d) - log_density(params, p, t - h, d)) / (2 * h)


def fisher_terms(params, p, t):
    """Batched ``(I_mu, I_sigma, derivatives)`` at template points ``p`` and time(s) ``t``."""
    der = derivatives(params, p, t)
    z = _solve_lower(der.L, der.mu_t)
    I_mu = np.einsum("nd,nd->n", z, z)
    C = der.precision_times_matrix(der.sigma_t)
    I_sigma = 0.5 * np.einsum("nij,nji->n", C, C)
    return I_mu, I_sigma, der


def fisher_full(params, p, t):
    """Closed-form Fisher information at one ``(p, t)`` as a :class:`FisherReport`."""
    I_mu, I_sigma, der = fisher_terms(params, np.atleast_2d(p), t)
    im, isg = float(I_mu[0]), float(I_sigma[0])
    return FisherReport(
        p=np.asarray(p, dtype=float).reshape(-1), t=float(t),
        mu_t=der.mu_t[0], sigma_t=der.sigma_t[0],
        I_mu=im, I_sigma=isg, I_full=im + isg,
        sigma2_tau=(1.0 / im) if im >= I_MU_FLOOR else math.inf)


@dataclass
class MCFisher:
    """Monte-Carlo moments of the score at one ``(p, t)``; ``*_se`` are standard errors."""

    mc_I: float
    mc_I_se: float
    score_mean: float
    score_mean_se: float
    cross_cov: float
    cross_cov_se: float
    linear_var: float
    linear_var_se: float
    n_samples: int


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def mc_fisher(params, p, t, n_samples=10**6, seed=0, route="fd", chunk=200_000):
    """Sample ``d ~ N(mu, Sigma)`` and average the score and its square.

    ``route='fd'`` scores each draw by central differences of the exact log
    density, so ``mc_I`` is independent of both the analytic score and the
    closed form; ``route='analytic'`` uses :func:`score`.  The linear and
    quadratic score parts used for the cross-term checks are always analytic.
    """
    if n_samples < 10**4:
        raise ValueError("mc_fisher needs at least 1e4 samples")
    rng = np.random.default_rng(seed)
    p = np.asarray(p, dtype=float).reshape(1, -1)
    der = derivatives(params, p, t)
    D = p.shape[1]
    h = 1e-4
    if route == "fd":
        mu_p, L_p = nw.forward_field(params, p, t + h)
        mu_m, L_m = nw.forward_field(params, p, t - h)
    u_all, lin_all, quad_all = [], [], []
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        eps = rng.standard_normal((m, D))
        r = eps @ der.L[0].T
        lin, quad = _score_parts(der, r[None])
        lin, quad = lin[0], quad[0]
        if route == "fd":
            d = der.mu[0] + r
            u = (_gauss_logpdf(d, mu_p[0], L_p[0]) - _gauss_logpdf(d, mu_m[0], L_m[0])) / (2 * h)
        else:
            u = lin + quad
        u_all.append(u)
        lin_all.append(lin)
        quad_all.append(quad)
        done += m
    u = np.concatenate(u_all)
    lin = np.concatenate(lin_all)
    quad = np.concatenate(quad_all)
    mc_I, mc_I_se = _mean_se(u * u)
    s_mean, s_se = _mean_se(u)
    c_mean, c_se = _mean_se(lin * quad)
    l_mean, l_se = _mean_se(lin * lin)
    return MCFisher(mc_I, mc_I_se, s_mean, s_se, c_mean, c_se, l_mean, l_se, n_samples)


def _gauss_logpdf(d, mu, L):
    D = len(mu)
    z = np.linalg.solve(L, (d - mu).T)  # L is tiny and lower-triangular
    return (-0.5 * (z * z).sum(0) - np.log(np.diag(L)).sum() - 0.5 * D * math.log(2 * math.pi))


def temporal_uncertainty(params, p, t):
    """``sigma_tau^2 = 1 / I_mu``.

    A single point raises :class:`UnidentifiableError` when ``I_mu`` is below
    the floor; a batch returns ``inf`` at such points.
    """
    single = np.ndim(p) == 1
    I_mu, _, _ = fisher_terms(params, np.atleast_2d(p), t)
    if single:
        if I_mu[0] < I_MU_FLOOR:
            raise UnidentifiableError(f"I_mu={I_mu[0]:.3g} below floor {I_MU_FLOOR:g}")
        return float(1.0 / I_mu[0])
    out = np.full(len(I_mu), np.inf)
    ok = I_mu >= I_MU_FLOOR
    out[ok] = 1.0 / I_mu[ok]
    return out


def isserlis_check(Sigma, A, n_samples=10**6, seed=0):
    """Analytic ``Var(r'Ar) = 2 tr((A Sigma)^2)`` against a Monte-Carlo estimate.

    Returns ``(analytic, mc, se)``.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    A = np.asarray(A, dtype=float)
    analytic = 2.0 * np.trace(A @ Sigma @ A @ Sigma)
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(Sigma)
    r = rng.standard_normal((n_samples, len(Sigma))) @ L.T
    q = np.einsum("ni,ij,nj->n", r, A, r)
    dev2 = (q - q.mean()) ** 2
    mc = float(dev2.sum() / (n_samples - 1))
    se = float(dev2.std(ddof=1) / math.sqrt(n_samples))
    return float(analytic), mc, se


@dataclass
class CRLBResult:
    t_center: float
    empirical_var: float
    bound: float
    ratio: float
    n_samples: int


def crlb_check(dataset, params, points=None, min_samples=30):
    """Empirical ``Var(tau_gt - t)`` of one time bin against the mean of ``1/I_mu``.

    ``dataset`` is a slice of shapes from a narrow range of ``t``.  The bound
    is ``1/I_mu`` averaged over the selected template ``points`` (default:
    every vertex present) and over each shape's own ``t``, matching the
    empirical variance, which mixes the spreads of all times in the bin.
    One tau value per shape is used.
    """
    keep = ~np.isnan(dataset.tau_gt)
    if points is not None:
        keep &= np.isin(dataset.vertex, points)
    ds = dataset.subset(keep)
    groups = [idx for _, idx in ds.shapes()]
    if len(groups) < min_samples:
        raise InsufficientDataError(f"only {len(groups)} shapes in bin (< {min_samples})")
    resid = np.array([np.mean(ds.tau_gt[idx] - ds.t[idx]) for idx in groups])
    emp = float(np.var(resid, ddof=1))
    idx = np.concatenate(groups)
    I_mu, _, _ = fisher_terms(params, ds.p[idx], ds.t[idx])
    ok = I_mu >= I_MU_FLOOR
    if not ok.any():
        raise UnidentifiableError("no identifiable point in bin")
    bound = float(np.mean(1.0 / I_mu[ok]))
    return CRLBResult(float(np.mean(ds.t)), emp, bound, emp / bound, len(groups))
