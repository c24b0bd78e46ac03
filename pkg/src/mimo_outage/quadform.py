"""
Tail and CDF of Hermitian quadratic forms in complex Gaussian vectors.

For ``X ~ CN(mu, Sigma)`` the upper tail ``Pr{X^H X >= tau}`` is evaluated by
the residue series at the poles ``-1/lambda_i`` of the CDF's Laplace-domain
integrand, one inner sum per distinct covariance eigenvalue.  General forms
``X^H Qbar X`` with ``Qbar`` positive definite are reduced to the identity
form first.

Also provided: a Laguerre series-fitting baseline (accurate in the lower
tail, poor in the upper tail) and a seeded Monte Carlo estimator used as an
oracle.

Conventions
-----------
``CN(mu, S)`` has covariance ``E[(X-mu)(X-mu)^H] = S``; each real and
imaginary part carries half the variance.
"""
import csv
import math
import operator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Union

import mpmath
import numpy as np
from scipy import special

from .errors import (ClusterCollisionError, DimensionMismatchError,
                     NotHermitianError, NotPositiveDefiniteError,
                     NumericalBreakdownError, SeriesOverflowError)

__all__ = [
    'HermitianSpectrum', 'QuadFormParams', 'LaguerreParams', 'SeriesControl',
    'TailResult', 'MCEstimate', 'hermitian_sqrt', 'eigendecompose_hermitian',
    'standardize', 'reduce_general_form', 'log_g_derivatives',
    'g_derivatives', 'derivatives_from_log', 'upper_tail', 'cdf',
    'truncation_bound_identity', 'laguerre_cdf', 'mc_tail', 'dump_terms',
]

CLUSTER_TOL = 1e-8
HERMITIAN_TOL = 1e-10
_RESCALE_AT = 1e200


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class HermitianSpectrum:
    """Eigen-structure of a Hermitian positive definite matrix, grouped into
    clusters of (numerically) equal eigenvalues.

    Clusters are ordered by descending eigenvalue.
    """
    eigenvalues: np.ndarray          # distinct lambda_i, descending
    multiplicities: np.ndarray       # kappa_i
    blocks: tuple                    # Psi_i, each (n, kappa_i)

    @property
    def dimension(self) -> int:
        return int(self.multiplicities.sum())

    @property
    def n_clusters(self) -> int:
        return len(self.eigenvalues)

    def vectors(self) -> np.ndarray:
        """Reassembled eigenvector matrix Psi (n x n)."""
        return np.hstack(self.blocks)

    def full_eigenvalues(self) -> np.ndarray:
        return np.repeat(self.eigenvalues, self.multiplicities)

    def reconstruct(self) -> np.ndarray:
        psi = self.vectors()
        return (psi * self.full_eigenvalues()) @ psi.conj().T


@dataclass(frozen=True)
class QuadFormParams:
    """Standardized form ``sum_i lambda_i * |w_i + chi_i|^2`` with
    ``w ~ CN(0, I)``.

    ``chi`` holds one complex array per cluster; ``eta_sq`` is the per-cluster
    non-centrality ``sum_j |chi_i^(j)|^2``, the only part of ``chi`` the
    distribution depends on.
    """
    spectrum: HermitianSpectrum
    chi: tuple
    eta_sq: np.ndarray

    @property
    def lambdas(self) -> np.ndarray:
        return self.spectrum.eigenvalues

    @property
    def kappas(self) -> np.ndarray:
        return self.spectrum.multiplicities

    @property
    def dimension(self) -> int:
        return self.spectrum.dimension

    @classmethod
    def from_clusters(cls, lambdas, kappas, eta_sq):
        """Build parameters directly from cluster values (no eigenvectors).

        The per-cluster ``chi`` is placed on the first coordinate of the
        cluster, which is enough since only ``eta_sq`` enters the law.
        """
        lambdas = np.asarray(lambdas, dtype=float)
        kappas = np.asarray(kappas, dtype=int)
        eta_sq = np.asarray(eta_sq, dtype=float)
        order = np.argsort(-lambdas, kind='stable')
        lambdas, kappas, eta_sq = lambdas[order], kappas[order], eta_sq[order]
        n = int(kappas.sum())
        eye = np.eye(n, dtype=complex)
        blocks, chi, start = [], [], 0
        for lam, kap, e2 in zip(lambdas, kappas, eta_sq):
            blocks.append(eye[:, start:start + kap])
            c = np.zeros(kap, dtype=complex)
            c[0] = math.sqrt(e2)
            chi.append(c)
            start += kap
        spec = HermitianSpectrum(lambdas, kappas, tuple(blocks))
        return cls(spec, tuple(chi), eta_sq)


@dataclass(frozen=True)
class LaguerreParams:
    """Control of the Laguerre series-fitting baseline.

    ``beta`` is the usual positive control parameter; the gamma weight of the
    basis has shape ``n`` (complex dimension) and scale ``2 * beta``.
    """
    beta: float = 1.0
    basis_degree_limit: int = 20

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class SeriesControl:
    """Truncation control for the residue series.

    ``max_terms`` is the last series index N kept (terms n = kappa_i - 1 .. N).
    In adaptive mode N grows up to ``max_terms`` until the estimated
    truncation error drops below ``target_abs_error``.  ``precision`` selects
    double arithmetic, extended (mpmath) arithmetic, or ``'auto'`` escalation
    when cancellation makes double precision insufficient.  ``max_digits``
    caps the working precision; terms needing more than that (nearly
    coincident eigenvalues next to a strongly non-central cluster) give a
    flagged NaN result instead of an unbounded computation.
    """
    max_terms: int = 60
    target_abs_error: float = 1e-8
    mode: str = 'fixed'
    precision: str = 'auto'
    max_digits: int = 1000

    def __post_init__(self):
        if self.mode not in ('fixed', 'adaptive'):
            raise ValueError("mode must be 'fixed' or 'adaptive'")
        if self.precision not in ('auto', 'double', 'extended'):
            raise ValueError("precision must be 'auto', 'double' or 'extended'")
        if not self.target_abs_error > 0:
            raise ValueError("target_abs_error must be positive")

    @classmethod
    def adaptive(cls, target_abs_error=1e-8, max_terms=20000, max_digits=1000):
        return cls(max_terms=max_terms, target_abs_error=target_abs_error,
                   mode='adaptive', max_digits=max_digits)


@dataclass
class TailResult:
    probability: float
    error_estimate: float
    terms_used: int
    budget_exceeded: bool = False
    clamp: float = 0.0
    raw: float = float('nan')

    def __float__(self):
        return float(self.probability)


@dataclass
class MCEstimate:
    estimate: Union[float, np.ndarray]
    std_error: Union[float, np.ndarray]
    samples: int


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------
def _check_hermitian(a, name='matrix'):
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got {a.shape}")
    scale = max(np.linalg.norm(a), 1.0)
    if np.linalg.norm(a - a.conj().T) > HERMITIAN_TOL * scale:
        raise NotHermitianError(f"{name} is not Hermitian")
    return 0.5 * (a + a.conj().T)


def hermitian_sqrt(a, neg_tol=1e-12, require_pd=False):
    """Principal square root of a Hermitian PSD matrix.

    Eigenvalues in ``[-neg_tol, 0]`` are clamped to zero; anything more
    negative raises.  With ``require_pd`` every eigenvalue must be positive.
    """
    a = _check_hermitian(a)
    w, v = np.linalg.eigh(a)
    scale = max(abs(w).max(initial=0.0), 1.0)
    if require_pd and w.min(initial=np.inf) <= 0:
        raise NotPositiveDefiniteError("matrix is not positive definite")
    if w.min(initial=0.0) < -neg_tol * scale:
        raise NotPositiveDefiniteError("matrix has a negative eigenvalue")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def eigendecompose_hermitian(sigma, cluster_tol=CLUSTER_TOL):
    """Clustered eigendecomposition of a Hermitian positive definite matrix.

    Eigenvalues are sorted in descending order and consecutive ones whose
    relative distance to the cluster head is at most ``cluster_tol`` share a
    cluster.  The cluster value is the mean of its members.

    Raises
    ------
    NotHermitianError, NotPositiveDefiniteError
    """
    sigma = _check_hermitian(sigma, 'covariance')
    w, v = np.linalg.eigh(sigma)
    if w[0] <= 0:
        raise NotPositiveDefiniteError(
            f"smallest eigenvalue {w[0]:.3e} is not positive")
    order = np.argsort(-w, kind='stable')
    w, v = w[order], v[:, order]

    groups = [[0]]
    for idx in range(1, len(w)):
        head = w[groups[-1][0]]
        if (head - w[idx]) <= cluster_tol * head:
            groups[-1].append(idx)
        else:
            groups.append([idx])
    values = np.array([w[g].mean() for g in groups])
    mults = np.array([len(g) for g in groups], dtype=int)
    blocks = tuple(v[:, g] for g in groups)
    return HermitianSpectrum(values, mults, blocks)


def standardize(mu, sigma, cluster_tol=CLUSTER_TOL):
    """Standardized parameters of ``X^H X`` for ``X ~ CN(mu, sigma)``.

    ``chi = Lambda^{-1/2} Psi^H mu`` split by eigenvalue cluster.
    """
    mu = np.asarray(mu, dtype=complex).ravel()
    sigma = np.asarray(sigma, dtype=complex)
    if sigma.ndim != 2 or sigma.shape != (mu.size, mu.size):
        raise DimensionMismatchError(
            f"mean of length {mu.size} vs covariance {sigma.shape}")
    spec = eigendecompose_hermitian(sigma, cluster_tol)
    chi = tuple(blk.conj().T @ mu / math.sqrt(lam)
                for lam, blk in zip(spec.eigenvalues, spec.blocks))
    eta_sq = np.array([float(np.vdot(c, c).real) for c in chi])
    return QuadFormParams(spec, chi, eta_sq)


def reduce_general_form(mu, sigma, qbar, cluster_tol=CLUSTER_TOL):
    """Parameters of ``X^H Qbar X`` via ``Y = Qbar^{1/2} X``.

    ``Qbar`` must be Hermitian positive definite.
    """
    root = hermitian_sqrt(qbar, require_pd=True)
    mu = np.asarray(mu, dtype=complex).ravel()
    sigma = np.asarray(sigma, dtype=complex)
    if root.shape[0] != mu.size:
        raise DimensionMismatchError("Qbar and mean have different sizes")
    return standardize(root @ mu, root @ sigma @ root, cluster_tol)


# --------------------------------------------------------------------------
# Derivatives of g_i at s = 0
# --------------------------------------------------------------------------
def _cluster_lists(params):
    if isinstance(params, QuadFormParams):
        return ([float(x) for x in params.lambdas],
                [int(x) for x in params.kappas],
                [float(x) for x in params.eta_sq])
    lams, kaps, etas = params
    return list(lams), [int(k) for k in kaps], list(etas)


def log_g_derivatives(params, i, tau, n_max):
    """Derivatives ``[log g_i]^(n)(0)`` for ``n = 1..n_max``.

    ``params`` is a :class:`QuadFormParams` or a tuple
    ``(lambdas, kappas, eta_sq)``; with the tuple form any exact number type
    (e.g. ``fractions.Fraction``) is carried through unchanged.
    """
    lams, kaps, etas = _cluster_lists(params)
    if not 0 <= i < len(lams):
        raise IndexError(f"cluster index {i} out of range")
    lam_i = lams[i]
    ratios = []
    for p, lam_p in enumerate(lams):
        if p == i:
            continue
        one_minus = 1 - lam_p / lam_i
        if one_minus == 0:
            raise ClusterCollisionError(
                f"clusters {i} and {p} share eigenvalue {lam_i}")
        ratios.append((lam_p, kaps[p], etas[p], one_minus))

    out = []
    for n in range(1, n_max + 1):
        sgn = 1 if n % 2 == 1 else -1      # (-1)^(n-1)
        fn1 = math.factorial(n - 1)
        val = tau if n == 1 else 0
        # -(n-1)! (-1)^(n-1) / (-1/lam_i)^n  ==  (n-1)! lam_i^n
        val = val + fn1 * lam_i ** n
        for lam_p, kap_p, eta_p, om in ratios:
            val = val - n * fn1 * sgn * lam_p ** n / om ** (n + 1) * eta_p
            val = val - fn1 * sgn * kap_p * lam_p ** n / om ** n
        out.append(val)
    return out


def derivatives_from_log(g0, log_derivs):
    """Derivatives of ``g = exp(log g)`` from ``g(0)`` and the derivatives of
    ``log g`` via ``g^(n) = sum_l C(n-1, l) g^(l) [log g]^(n-l)``.

    Works with any number type; the cost is O(N^2).
    """
    g = [g0]
    for n in range(1, len(log_derivs) + 1):
        acc = 0
        for l in range(n):
            acc = acc + math.comb(n - 1, l) * g[l] * log_derivs[n - l - 1]
        g.append(acc)
    return g


def _g_at_zero(lams, kaps, etas, i):
    lam_i = lams[i]
    val = -lam_i
    expo = 0
    for p, lam_p in enumerate(lams):
        if p == i:
            continue
        om = 1 - lam_p / lam_i
        if om == 0:
            raise ClusterCollisionError(
                f"clusters {i} and {p} share eigenvalue {lam_i}")
        val = val / om ** kaps[p]
        # -(s - 1/lam_i) lam_p / (1 + (s - 1/lam_i) lam_p) at s = 0
        expo = expo + (lam_p / lam_i) / om * etas[p]
    return val, expo


def g_derivatives(params, i, tau, N):
    """``g_i^(n)(0)`` for ``n = 0..N`` by the log-derivative recursion.

    With float input the values overflow quickly (they grow like ``n!``);
    overflow raises :class:`SeriesOverflowError` rather than saturating.
    Exact number types in the tuple form of ``params`` stay exact.
    """
    lams, kaps, etas = _cluster_lists(params)
    val, expo = _g_at_zero(lams, kaps, etas, i)
    exact = not isinstance(val, float)
    if exact and expo == 0:
        g0 = val
    else:
        g0 = float(val) * math.exp(float(expo))
    try:
        logs = log_g_derivatives((lams, kaps, etas), i, tau, N)
        out = derivatives_from_log(g0, logs)
    except OverflowError as exc:
        raise SeriesOverflowError(
            f"g derivatives overflow before order {N}") from exc
    if not exact and not all(math.isfinite(float(x)) for x in out):
        raise SeriesOverflowError(f"g derivatives overflow before order {N}")
    return out


# --------------------------------------------------------------------------
# Residue series
# --------------------------------------------------------------------------
def _scaled_log_taylor(lams, kaps, etas, i, tau, n_max, r):
    """Taylor coefficients of ``log g_i(r u)`` in ``u`` for orders 1..n_max."""
    lam_i = lams[i]
    n = np.arange(1, n_max + 1, dtype=float)
    coef = (lam_i * r) ** n / n
    if n_max >= 1:
        coef[0] += tau * r
    for p, lam_p in enumerate(lams):
        if p == i:
            continue
        q = lam_p * lam_i / (lam_i - lam_p)
        qr = q * r
        sgn = np.where(n % 2 == 1, 1.0, -1.0)
        coef -= sgn * (etas[p] * q / lam_p * qr ** n + kaps[p] * qr ** n / n)
    return coef


def _cluster_log_terms(lams, kaps, etas, i, tau, n_max):
    """Signed log-magnitudes of the residue-series terms of cluster ``i``.

    Returns ``(n_index, log_abs, sign)`` for ``n = kappa_i - 1 .. n_max`` such
    that cluster ``i`` contributes ``-sum sign * exp(log_abs)`` to the tail.
    """
    lam_i, kap_i, eta_i = lams[i], kaps[i], etas[i]
    others = [p for p in range(len(lams)) if p != i]
    for p in others:
        if lams[p] == lam_i:
            raise ClusterCollisionError(
                f"clusters {i} and {p} share eigenvalue {lam_i}")
    # radius of convergence of g_i around 0, used to keep coefficients O(1)
    r = 1.0 / lam_i
    for p in others:
        r = min(r, abs(1.0 / lam_i - 1.0 / lams[p]))

    ell = _scaled_log_taylor(lams, kaps, etas, i, tau, n_max, r)
    w = np.arange(1, n_max + 1) * ell

    # g_i(0) = -lam_i exp(sum eta_p q_p / lam_i) / prod (1 - lam_p/lam_i)^kap_p
    log_c0 = math.log(lam_i)
    sign0 = -1.0
    for p in others:
        om = 1.0 - lams[p] / lam_i
        q = lams[p] * lam_i / (lam_i - lams[p])
        log_c0 += etas[p] * q / lam_i - kaps[p] * math.log(abs(om))
        if om < 0 and kaps[p] % 2 == 1:
            sign0 = -sign0

    c = np.zeros(n_max + 1)
    c[0] = 1.0
    log_scale = 0.0
    for m in range(1, n_max + 1):
        val = np.dot(w[m - 1::-1], c[:m]) / m
        if not math.isfinite(val):
            raise SeriesOverflowError(
                f"residue coefficients overflow at order {m}")
        c[m] = val
        if abs(val) > _RESCALE_AT:
            c[:m + 1] /= _RESCALE_AT
            log_scale += math.log(_RESCALE_AT)

    n_idx = np.arange(kap_i - 1, n_max + 1)
    if n_idx.size == 0:
        return n_idx, np.zeros(0), np.zeros(0)
    cn = c[kap_i - 1:]
    m_idx = n_idx - kap_i + 1
    with np.errstate(divide='ignore'):
        log_abs = (np.log(np.abs(cn)) + log_scale + log_c0
                   - n_idx * math.log(r)
                   - special.gammaln(m_idx + 1)
                   - tau / lam_i - eta_i - kap_i * math.log(lam_i))
        if eta_i > 0:
            log_abs = log_abs + m_idx * (math.log(eta_i) - math.log(lam_i))
        else:
            log_abs = np.where(m_idx == 0, log_abs, -np.inf)
    sign = sign0 * np.sign(cn)
    return n_idx, log_abs, sign


def _single_cluster_terms(lam, kap, eta_sq, tau, n_max):
    """Terms of the one-cluster series as a Poisson mixture of Gamma tails.

    With one eigenvalue, ``-g^(n)(0)/n! = lam^(n+1) sum_{j<=n} (tau/lam)^j/j!``
    so the term with ``m = n - kappa + 1`` equals
    ``Pois(m; eta_sq) * Q(m + kappa, tau / lam)``.
    """
    m = np.arange(0, max(n_max - kap + 2, 0))
    if m.size == 0:
        return m + kap - 1, m.astype(float)
    if eta_sq > 0:
        pois = np.exp(m * math.log(eta_sq) - eta_sq - special.gammaln(m + 1))
    else:
        pois = (m == 0).astype(float)
    vals = pois * special.gammaincc(m + kap, tau / lam)
    return m + kap - 1, vals


def _poisson_tail(mean, count):
    """``Pr{Poisson(mean) >= count}``."""
    if count <= 0:
        return 1.0
    if mean == 0:
        return 0.0
    return float(special.gammainc(count, mean))


def truncation_bound_identity(eta_sq, kappa, N):
    """Bound ``(eta^2)^(N-kappa+2) / (N-kappa+2)!`` on the worst-case
    truncation error of the one-cluster series kept through index ``N``.

    Rigorous for a single eigenvalue cluster; only a heuristic otherwise.
    """
    m = N - kappa + 2
    if m < 0:
        raise ValueError("N must be at least kappa - 2")
    if eta_sq == 0:
        return 1.0 if m == 0 else 0.0
    return math.exp(m * math.log(eta_sq) - math.lgamma(m + 1))


def _cluster_terms_mp(lams, kaps, etas, i, tau, n_max):
    """Extended-precision version of the cluster-``i`` terms (signed
    contributions to the tail), evaluated at the current ``mpmath`` precision.
    """
    mpf = mpmath.mpf
    lams = [mpf(x) for x in lams]
    etas = [mpf(x) for x in etas]
    tau = mpf(tau)
    lam_i, kap_i, eta_i = lams[i], kaps[i], etas[i]
    others = [p for p in range(len(lams)) if p != i]
    r = 1 / lam_i
    for p in others:
        r = min(r, abs(1 / lam_i - 1 / lams[p]))
    qs = {p: lams[p] * lam_i / (lam_i - lams[p]) for p in others}

    w = [mpf(0)] * (n_max + 1)
    for n in range(1, n_max + 1):
        val = (lam_i * r) ** n / n + (tau * r if n == 1 else 0)
        sgn = 1 if n % 2 == 1 else -1
        for p in others:
            qr_n = (qs[p] * r) ** n
            val -= sgn * (etas[p] * qs[p] / lams[p] * qr_n + kaps[p] * qr_n / n)
        w[n] = n * val

    c0 = -lam_i
    expo = mpf(0)
    for p in others:
        c0 /= (1 - lams[p] / lam_i) ** kaps[p]
        expo += etas[p] * qs[p] / lam_i
    c0 *= mpmath.exp(expo)

    pref = c0 * mpmath.exp(-tau / lam_i - eta_i) / lam_i ** kap_i
    ratio = eta_i / lam_i
    factors = []
    for n in range(kap_i - 1, n_max + 1):
        m = n - kap_i + 1
        if eta_i == 0:
            weight = mpf(1) if m == 0 else mpf(0)
        else:
            weight = ratio ** m / mpmath.factorial(m)
        factors.append(-pref / r ** n * weight)
    largest = max((abs(f) for f in factors), default=mpf(1))
    headroom = max(0, int(mpmath.ceil(mpmath.log(largest + 1, 2))))
    bits = mpmath.mp.prec + headroom + n_max.bit_length() + 16
    c = _exp_series_fixed(w, n_max, bits)
    out = [f * c[n] for f, n in zip(factors, range(kap_i - 1, n_max + 1))]
    return np.arange(kap_i - 1, n_max + 1), out


def _exp_series_fixed(w, n_max, bits):
    """Taylor coefficients ``c`` of ``exp(sum_n w[n] x^n / n)``.

    The convolution ``m c[m] = sum_j w[j] c[m-j]`` runs on integers carrying
    ``bits`` fractional bits, which is far cheaper than arbitrary-precision
    floats and keeps a uniform absolute accuracy of about ``2**-bits``.
    """
    scale = 1 << bits
    W = [0] + [int(mpmath.nint(x * scale)) for x in w[1:]]
    C = [scale] + [0] * n_max
    for m in range(1, n_max + 1):
        acc = sum(map(operator.mul, W[1:m + 1], reversed(C[:m])))
        C[m] = acc // (m * scale)
    return [mpmath.mpf(x) / scale for x in C]


def _series_log_terms(params, tau, n_max, force_general=False):
    """Per-cluster ``(cluster, n_idx, log_abs, sign)`` of the tail terms in
    double precision (tail = sum of sign * exp(log_abs))."""
    lams, kaps, etas = _cluster_lists(params)
    if len(lams) == 1 and not force_general:
        n_idx, vals = _single_cluster_terms(lams[0], kaps[0], etas[0], tau,
                                            n_max)
        with np.errstate(divide='ignore'):
            return [(0, n_idx, np.log(vals), np.ones_like(vals))]
    out = []
    for i in range(len(lams)):
        n_idx, log_abs, sign = _cluster_log_terms(lams, kaps, etas, i, tau,
                                                  n_max)
        out.append((i, n_idx, log_abs, -sign))
    return out


class _PrecisionCapExceeded(Exception):
    pass


def _unresolved(terms):
    return TailResult(math.nan, math.inf, int(terms), True, 0.0, math.nan)


def _mp_tail(lams, kaps, etas, tau, cut, peak, target, max_digits=None):
    """Sum the series through index ``cut`` in extended precision.

    ``peak`` is the natural log of the largest term magnitude when known;
    otherwise a low-precision pass measures it first.  Returns the tail and
    the magnitude of the last term kept.
    """
    if peak is None:
        with mpmath.workdps(30):
            vals = []
            for i in range(len(lams)):
                vals.extend(_cluster_terms_mp(lams, kaps, etas, i, tau, cut)[1])
            peak = float(mpmath.log(max(abs(v) for v in vals) + mpmath.mpf(
                '1e-300')))
    digits = (peak + math.log(4 * (cut + 1) * len(lams))) / math.log(10)
    dps = 20 + max(0, int(math.ceil(digits))) + \
        int(math.ceil(-math.log10(target)))
    if max_digits is not None and dps > max_digits:
        raise _PrecisionCapExceeded(dps)
    with mpmath.workdps(dps):
        kept, last = [], mpmath.mpf(0)
        for i in range(len(lams)):
            _, vals = _cluster_terms_mp(lams, kaps, etas, i, tau, cut)
            kept.extend(vals)
            last += abs(vals[-1]) if vals else 0
        return float(mpmath.fsum(kept)), float(last)


def _choose_cut(terms, n_max, start, ctl, single_bound, mass):
    """Last series index kept in adaptive mode, using the magnitudes of all
    terms computed up to ``n_max``.  Returns ``(cut, remainder, converged)``.

    Small trailing terms are only trusted once the window reaches past the
    bulk of the non-centrality, since terms ahead of that peak are tiny too.
    """
    mags = np.zeros(n_max + 1)
    for _, n_idx, mag in terms:
        mags[n_idx] += mag
    target = ctl.target_abs_error
    suffix = np.concatenate([np.cumsum(mags[::-1])[::-1][1:], [0.0]])
    settled = (single_bound is None and mags[-1] <= 0.1 * target
               and n_max >= start + mass + 4 * math.sqrt(mass))
    for n in range(start, n_max + 1):
        if single_bound is not None and single_bound(n) <= target:
            return n, min(suffix[n], single_bound(n)), True
        if settled and suffix[n] <= target:
            return n, suffix[n], True
    if single_bound is not None:
        return n_max, single_bound(n_max), False
    return n_max, max(mags[-1], suffix[start]), False


def upper_tail(params, tau, ctl=None, force_general=False):
    """``Pr{Y >= tau}`` for the standardized quadratic form ``Y``.

    Parameters
    ----------
    params : QuadFormParams
    tau : float
        Threshold; ``tau <= 0`` gives exactly 1.
    ctl : SeriesControl, optional
        Defaults to ``N = 60`` fixed.
    force_general : bool
        Use the general multi-cluster recursion even when a single cluster
        admits the Poisson-mixture form.

    Returns
    -------
    TailResult
        Probability clamped to [0, 1] together with the clamp magnitude, an
        error estimate (truncation plus rounding), the number of terms used
        and a flag set when adaptive mode ran out of budget.  When the sum
        would need more than ``ctl.max_digits`` digits the probability is NaN
        with an infinite error estimate and the flag set.

    Notes
    -----
    Terms of different clusters can cancel heavily when a cluster with a
    small eigenvalue carries a large mean.  With ``ctl.precision == 'auto'``
    the sum is recomputed in extended precision whenever the double-precision
    rounding estimate exceeds ``ctl.target_abs_error``.
    """
    ctl = ctl or SeriesControl()
    tau = float(tau)
    if tau <= 0:
        return TailResult(1.0, 0.0, 0, raw=1.0)
    if math.isinf(tau):
        return TailResult(0.0, 0.0, 0, raw=0.0)
    lams, kaps, etas = _cluster_lists(params)
    single = len(lams) == 1 and not force_general
    start = max(kaps) - 1
    bound = None
    if len(lams) == 1:
        # every term is a Poisson weight times a probability, so the Poisson
        # tail beyond the cut bounds the remainder
        bound = lambda n: _poisson_tail(etas[0], n - kaps[0] + 2)

    if ctl.mode == 'adaptive':
        # first guess from the total non-centrality, doubled on failure
        mass = float(sum(etas))
        n_max = int(start + mass + 12 * math.sqrt(mass) + 40)
        n_max = max(start, min(ctl.max_terms, n_max))
    else:
        n_max = max(ctl.max_terms, start)
    while True:
        try:
            logs = _series_log_terms(params, tau, n_max, force_general)
        except SeriesOverflowError:
            if ctl.precision == 'double':
                raise
            try:
                raw, remainder = _mp_tail(lams, kaps, etas, tau, n_max, None,
                                          ctl.target_abs_error, ctl.max_digits)
            except _PrecisionCapExceeded:
                return _unresolved(n_max)
            prob = min(max(raw, 0.0), 1.0)
            return TailResult(prob, remainder, int(n_max),
                              ctl.mode == 'adaptive'
                              and remainder > ctl.target_abs_error,
                              abs(raw - prob), raw)
        if ctl.mode == 'fixed':
            break
        peak = max((float(np.max(la, initial=-np.inf)) for _, _, la, _ in logs),
                   default=-np.inf)
        if (ctl.precision != 'double' and 20 + (peak / math.log(10)
                                                - math.log10(ctl.target_abs_error))
                > ctl.max_digits):
            # more terms only add larger cancelling pieces
            return _unresolved(n_max)
        mag_terms = [(i, n_idx, np.exp(np.minimum(la, 700.0)))
                     for i, n_idx, la, _ in logs]
        cut, remainder, converged = _choose_cut(mag_terms, n_max, start, ctl,
                                                bound, mass)
        if converged or n_max >= ctl.max_terms:
            break
        n_max = min(2 * n_max, ctl.max_terms)
    peak = max((float(np.max(la, initial=-np.inf)) for _, _, la, _ in logs),
               default=-np.inf)
    if ctl.mode == 'fixed':
        cut, converged = n_max, True
        remainder = float(sum(math.exp(min(la[-1], 700.0))
                              for _, _, la, _ in logs if la.size))
        if bound is not None:
            remainder = bound(n_max)
    use_mp = ctl.precision == 'extended'
    if not use_mp and not single:
        count = sum(la.size for _, _, la, _ in logs)
        rounding_log10 = ((peak + math.log(max(count, 1))) / math.log(10)
                          + math.log10(8 * np.finfo(float).eps))
        if peak > 700 and ctl.precision == 'double':
            raise SeriesOverflowError("series terms exceed double range")
        use_mp = peak > 700 or (ctl.precision == 'auto' and rounding_log10 >
                                math.log10(ctl.target_abs_error))

    if use_mp:
        try:
            raw, _ = _mp_tail(lams, kaps, etas, tau, cut, peak,
                              ctl.target_abs_error, ctl.max_digits)
        except _PrecisionCapExceeded:
            return _unresolved(cut)
        rounding = 0.0
    else:
        kept = []
        for _, n_idx, la, sg in logs:
            sel = n_idx <= cut
            kept.extend((sg[sel] * np.exp(la[sel])).tolist())
        raw = math.fsum(kept)
        abs_sum = math.fsum(abs(x) for x in kept)
        rounding = 8 * np.finfo(float).eps * abs_sum * max(1, len(kept)) ** 0.5
    prob = min(max(raw, 0.0), 1.0)
    return TailResult(prob, float(remainder) + rounding, int(cut),
                      not converged, abs(raw - prob), raw)


def cdf(params, y, ctl=None, force_general=False):
    """``Pr{Y <= y}``; the complement of :func:`upper_tail`.

    ``y <= 0`` gives 0.
    """
    res = upper_tail(params, y, ctl, force_general)
    return TailResult(1.0 - res.probability, res.error_estimate,
                      res.terms_used, res.budget_exceeded, res.clamp,
                      1.0 - res.raw)


def dump_terms(params, tau, ctl, path):
    """Write the per-term series magnitudes to CSV (cluster, n, term)."""
    ctl = ctl or SeriesControl()
    terms = _series_log_terms(params, float(tau), ctl.max_terms)
    with open(path, 'w', newline='') as fh:
        wr = csv.writer(fh)
        wr.writerow(['cluster', 'n', 'term'])
        for i, n_idx, log_abs, sign in terms:
            for n, v in zip(n_idx, sign * np.exp(log_abs)):
                wr.writerow([i, int(n), repr(float(v))])


# --------------------------------------------------------------------------
# Laguerre series-fitting baseline
# --------------------------------------------------------------------------
def _laguerre_coefficients(params, theta, n_terms):
    lams = np.asarray(params.lambdas, dtype=float)
    kaps = np.asarray(params.kappas, dtype=float)
    etas = np.asarray(params.eta_sq, dtype=float)
    a = 1.0 - lams / theta
    if np.any(np.abs(a) >= 1.0):
        raise NumericalBreakdownError(
            f"Laguerre expansion diverges: need 2*beta > max(lambda)/2, "
            f"got scale {theta} for lambda_max {lams.max()}")
    k = np.arange(1, n_terms + 1)
    ell = np.array([np.sum(kaps * a ** kk / kk - etas * (lams / theta) *
                           a ** (kk - 1)) for kk in k])
    w = k * ell
    c = np.zeros(n_terms + 1)
    c[0] = 1.0
    for m in range(1, n_terms + 1):
        c[m] = np.dot(w[m - 1::-1], c[:m]) / m
    if not np.all(np.isfinite(c)):
        raise NumericalBreakdownError("Laguerre coefficients are not finite")
    return c


def laguerre_cdf(params, y, lag=None, N=None):
    """Series-fitting CDF estimate in a Laguerre basis with gamma weight.

    The density is expanded as ``sum_k c_k h_k`` whose Laplace transform
    matches that of the quadratic form; the CDF follows by integrating each
    basis function in closed form.  Accurate at the lower tail first; no
    convergence guarantee in the upper tail.

    Parameters
    ----------
    params : QuadFormParams or tuple (mu, Sigma, Qbar)
    y : float or array
    lag : LaguerreParams
    N : int, optional
        Highest basis index; defaults to ``lag.basis_degree_limit``.
    """
    lag = lag or LaguerreParams()
    if isinstance(params, tuple):
        params = reduce_general_form(*params)
    N = lag.basis_degree_limit if N is None else N
    theta = 2.0 * lag.beta
    a = float(params.dimension)
    c = _laguerre_coefficients(params, theta, N)
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.clip(y_arr, 0.0, None) / theta
    out = c[0] * special.gammainc(a, x)
    pos = x > 0
    if N >= 1 and np.any(pos):
        xp = x[pos]
        log_base = a * np.log(xp) - xp
        acc = np.zeros_like(xp)
        for k in range(1, N + 1):
            if c[k] == 0:
                continue
            lk = special.eval_genlaguerre(k - 1, a, xp)
            scale = np.exp(log_base + special.gammaln(k) - special.gammaln(k + a))
            acc += c[k] * scale * lk
        out[pos] += acc
    if not np.all(np.isfinite(out)):
        raise NumericalBreakdownError("Laguerre CDF evaluation overflowed")
    return out if np.ndim(y) else float(out[0])


# --------------------------------------------------------------------------
# Monte Carlo oracle
# --------------------------------------------------------------------------
_MC_CHUNK = 1 << 16


def _mc_chunk(seed, index, size, mu, root, qbar, taus):
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    n = mu.size
    w = (rng.standard_normal((size, n)) +
         1j * rng.standard_normal((size, n))) * math.sqrt(0.5)
    x = mu + w @ root.T
    if qbar is None:
        y = np.einsum('ij,ij->i', x.conj(), x).real
    else:
        y = np.einsum('ij,jk,ik->i', x.conj(), qbar, x).real
    return (y[:, None] >= taus[None, :]).sum(axis=0)


def mc_tail(mu, sigma, qbar=None, tau=0.0, samples=10**6, seed=0, workers=1):
    """Monte Carlo estimate of ``Pr{X^H Qbar X >= tau}``, ``X ~ CN(mu, sigma)``.

    Samples are drawn in fixed-size chunks, each seeded from
    ``(seed, chunk_index)``, so the estimate does not depend on ``workers``.
    ``tau`` may be an array; all thresholds share the same draws.
    """
    if samples < 1000:
        raise ValueError("at least 1000 samples are required")
    mu = np.asarray(mu, dtype=complex).ravel()
    root = hermitian_sqrt(sigma)
    if qbar is not None:
        qbar = np.asarray(qbar, dtype=complex)
    taus = np.atleast_1d(np.asarray(tau, dtype=float))
    sizes = [_MC_CHUNK] * (samples // _MC_CHUNK)
    if samples % _MC_CHUNK:
        sizes.append(samples % _MC_CHUNK)
    args = [(seed, j, s, mu, root, qbar, taus) for j, s in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            counts = list(pool.map(lambda a: _mc_chunk(*a), args))
    else:
        counts = [_mc_chunk(*a) for a in args]
    hits = np.sum(counts, axis=0)
    p = hits / samples
    se = np.sqrt(p * (1 - p) / samples)
    if np.ndim(tau) == 0:
        return MCEstimate(float(p[0]), float(se[0]), samples)
    return MCEstimate(p, se, samples)
