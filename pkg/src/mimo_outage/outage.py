"""Per-stream outage probabilities, Chernoff bounds and epsilon-outage rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import channel as ch
from .errors import (DesiredLinkNotKnownError, NoFiniteRateError, NotAlignedError,
                     SOutOfRangeError)
from .quadform import MCEstimate, SeriesControl, standardize, upper_tail

ALIGNMENT_TOL = 1e-6
METHODS = ("theorem1", "corollary1", "corollary2", "corollary3", "corollary4",
           "chernoff", "monte-carlo", "deterministic")


@dataclass(frozen=True)
class OutageQuery:
    k: int
    m: int
    rate: float
    known_links: tuple = ()
    series: SeriesControl = field(default_factory=SeriesControl.adaptive)

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be nonnegative")
        known = tuple(sorted(set(self.known_links)))
        if known and self.k not in known:
            raise DesiredLinkNotKnownError(f"user {self.k} not in known links")
        object.__setattr__(self, "known_links", known)

    def at_rate(self, rate):
        return OutageQuery(self.k, self.m, rate, self.known_links, self.series)


@dataclass(frozen=True)
class OutageReport:
    probability: float
    tau: float
    terms_used: int
    method: str
    error_estimate: float = 0.0
    budget_exceeded: bool = False


def perfect_csi_rate(beams, H_hat, cfg, k, m):
    """Rate ``log2(1 + SINR)`` obtained when the estimate is the true channel."""
    return math.log2(1 + ch.sinr(beams, H_hat, H_hat, cfg, k, m))


def _random_part(beams, H_hat, cfg, q):
    """Mean, covariance and threshold of the random interference form.

    Blocks of links that are known or carry no error are deterministic, so
    their power moves into the threshold.
    """
    mu = ch.stream_mean_vector(beams, H_hat, q.k, q.m)
    sigma = ch.stream_covariance(beams, cfg, q.k, q.m)
    tau = ch.threshold_tau(beams, H_hat, cfg, q.k, q.m, q.rate, q.known_links)
    fixed = set(q.known_links)
    for i in range(cfg.K):
        if i in fixed:
            continue
        block = slice(i * cfg.d, (i + 1) * cfg.d)
        if not np.any(np.abs(sigma[block, block]) > 0):
            fixed.add(i)
            tau -= float(np.sum(np.abs(mu[block]) ** 2))
    mu, sigma = ch.restrict_to_unknown(mu, sigma, cfg, sorted(fixed))
    return mu, sigma, tau


def _is_aligned(beams, H_hat, k, m, tol):
    u = beams.U[k][:, m].conj()
    K = beams.V.shape[0]
    return all(np.max(np.abs(u @ H_hat[k, i] @ beams.V[i])) <= tol
               for i in range(K) if i != k)


def _pick_method(cfg, q, params, mu, general):
    if general:
        return "theorem1"
    if q.known_links:
        aligned = np.max(np.abs(mu), initial=0.0) <= ALIGNMENT_TOL
        return "corollary2" if aligned else "corollary1"
    if cfg.d == 1 and params.spectrum.n_clusters == 1 and params.dimension == cfg.K:
        return "corollary4"
    if cfg.d == 1 and np.all(params.kappas == 1):
        return "corollary3"
    return "theorem1"


def outage_probability(beams, H_hat, cfg, q, general=False):
    """Probability that stream ``q.m`` of user ``q.k`` cannot support ``q.rate``.

    Special structures (known links, aligned beams, single stream, identity
    correlations) select a reduced evaluation path; ``general=True`` forces
    the full multi-cluster recursion.
    """
    if q.rate == 0:
        return OutageReport(0.0, math.inf, 0, "deterministic")
    mu, sigma, tau = _random_part(beams, H_hat, cfg, q)
    if mu.size == 0:
        # no random interference left: outage is a step in the rate
        return OutageReport(1.0 if tau <= 0 else 0.0, tau, 0, "deterministic")
    params = standardize(mu, sigma)
    method = _pick_method(cfg, q, params, mu, general)
    if tau <= 0:
        return OutageReport(1.0, tau, 0, method)
    ctl = q.series
    if method == "corollary2":
        # zero mean: the series stops after the leading kappa_i terms
        ctl = SeriesControl(max_terms=int(params.kappas.max()) - 1,
                            target_abs_error=ctl.target_abs_error,
                            precision=ctl.precision)
    res = upper_tail(params, tau, ctl, force_general=general)
    return OutageReport(res.probability, tau, res.terms_used, method,
                        res.error_estimate, res.budget_exceeded)


def outage_ia(beams, H_hat, cfg, q, alignment_tol=ALIGNMENT_TOL):
    """Finite-sum outage for interference-aligned beams with the desired link known."""
    if q.k not in q.known_links:
        raise DesiredLinkNotKnownError("aligned evaluation needs the desired link known")
    if not _is_aligned(beams, H_hat, q.k, q.m, alignment_tol):
        raise NotAlignedError(f"stream ({q.k}, {q.m}) is not interference-aligned")
    if q.rate == 0:
        return OutageReport(0.0, math.inf, 0, "corollary2")
    mu, sigma, tau = _random_part(beams, H_hat, cfg, q)
    if tau <= 0 or mu.size == 0:
        return OutageReport(1.0 if tau <= 0 else 0.0, tau, 0, "corollary2")
    params = standardize(np.zeros_like(mu), sigma)
    ctl = SeriesControl(max_terms=int(params.kappas.max()) - 1)
    res = upper_tail(params, tau, ctl, force_general=True)
    return OutageReport(res.probability, tau, res.terms_used, "corollary2",
                        res.error_estimate, res.budget_exceeded)


def _independent_terms(beams, H_hat, cfg, k, m):
    mu = ch.stream_mean_vector(beams, H_hat, k, m)
    sigma = ch.stream_covariance(beams, cfg, k, m)
    off = sigma - np.diag(np.diag(sigma))
    scale = max(np.max(np.abs(np.diag(sigma))), 1e-300)
    if np.max(np.abs(off), initial=0.0) > 1e-12 * scale:
        raise ValueError("Chernoff bound needs independent entries "
                         "(single stream, or correlation-orthogonal transmit columns)")
    return mu, np.diag(sigma).real


def default_chernoff_s(cfg):
    return 1.0 / (cfg.error_var * np.trace(cfg.sigma_t).real * np.trace(cfg.sigma_r).real)


def _chernoff_log(s, tau, mu_sq, var):
    return -(tau * s + np.sum(np.log1p(-var * s)) + np.sum(mu_sq * s / (var * s - 1)))


def chernoff_bound(beams, H_hat, cfg, k, rate, s=None, m=0, optimize_s=False):
    """Chernoff upper bound on the outage probability (not clamped to 1).

    ``s`` defaults to ``1/(sigma_h^2 tr(S_t) tr(S_r))``.  With
    ``optimize_s=True`` a bounded scalar search over the admissible interval
    returns the tightest bound instead.
    """
    mu, var = _independent_terms(beams, H_hat, cfg, k, m)
    tau = ch.threshold_tau(beams, H_hat, cfg, k, m, rate)
    if math.isinf(tau):
        return 0.0
    mu_sq = np.abs(mu) ** 2
    s_max = 1.0 / var.max()
    if optimize_s:
        res = minimize_scalar(_chernoff_log, bounds=(0.0, s_max * (1 - 1e-12)),
                              args=(tau, mu_sq, var), method="bounded",
                              options={"xatol": 1e-10 * s_max})
        return float(math.exp(res.fun))
    s = default_chernoff_s(cfg) if s is None else float(s)
    if not 0 < s < s_max:
        raise SOutOfRangeError(f"s={s} outside (0, {s_max})")
    return float(math.exp(_chernoff_log(s, tau, mu_sq, var)))


def rate_bar(beams, H_hat, cfg, k, m=0):
    """Rate below which the outage decays exponentially in the K factor."""
    u = beams.U[k][:, m]
    rx = (u.conj() @ cfg.sigma_r @ u).real
    trs = np.trace(cfg.sigma_t).real * np.trace(cfg.sigma_r).real
    mu = ch.stream_mean_vector(beams, H_hat, k, m)
    denom = cfg.noise_var
    for i in range(cfg.K):
        v = beams.V[i][:, m]
        ratio = rx * (v.conj() @ cfg.sigma_t @ v).real / trs
        denom += abs(mu[i * cfg.d + m]) ** 2 / (1 - ratio)
    return math.log2(1 + ch.desired_gain(beams, H_hat, k, m) / denom)


def epsilon_outage_rate(beams, H_hat, cfg, k, m, eps, known_links=(), series=None,
                        prob_tol=1e-6, rate_tol=1e-9, floor=0.0):
    """Largest rate whose outage probability does not exceed ``eps``.

    Bisection on the rate.  ``floor`` is a known feasible rate used as the
    lower end of the bracket when it still satisfies the constraint.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    q = OutageQuery(k, m, 0.0, tuple(known_links), series or SeriesControl.adaptive())

    def prob(r):
        p = outage_probability(beams, H_hat, cfg, q.at_rate(r)).probability
        return 1.0 if math.isnan(p) else p  # unresolved counts as infeasible

    lo = 0.0
    if floor > 0 and prob(floor) <= eps:
        lo = floor
    hi = max(1.0, 2 * lo)
    while prob(hi) <= eps:
        lo, hi = hi, 2 * hi
        if hi > 1e3:
            return lo
    if lo == 0.0 and prob(rate_tol) > eps:
        raise NoFiniteRateError(f"outage exceeds {eps} at every positive rate")
    while hi - lo > rate_tol:
        mid = 0.5 * (lo + hi)
        p = prob(mid)
        if p <= eps:
            lo = mid
            if eps - p <= prob_tol:
                break
        else:
            hi = mid
    return lo


def mc_outage(beams, H_hat, cfg, q, trials=10**5, seed=0, chunk=20000):
    """Monte Carlo outage frequency from simulated error draws."""
    if trials < 1000:
        raise ValueError("trials must be at least 1000")
    if q.rate == 0:
        return MCEstimate(0.0, 0.0, trials)
    links = [(q.k, i) for i in range(cfg.K) if i not in set(q.known_links)]
    hits = 0
    for c, start in enumerate(range(0, trials, chunk)):
        n = min(chunk, trials - start)
        E = ch.sample_errors(cfg, seed, n, links, batch=c)
        rates = np.log2(1 + ch.sinr_batch(beams, E, H_hat, cfg, q.k, q.m))
        hits += int(np.count_nonzero(rates <= q.rate))
    p = hits / trials
    return MCEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / trials), trials)
