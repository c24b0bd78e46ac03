"""K-user MIMO interference channel with Kronecker-structured CSI error.

Builds the per-stream Gaussian quadratic-form ingredients (mean vector,
block-diagonal covariance, outage threshold) used by :mod:`mimo_outage.outage`.

Array conventions: channel sets are complex arrays of shape
``(K, K, n_rx, n_tx)`` where ``[k, i]`` is the link from transmitter ``i`` to
receiver ``k``.  Beam sets hold ``V`` of shape ``(K, n_tx, d)`` and ``U`` of
shape ``(K, n_rx, d)``.  All indices are zero-based.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DesiredLinkNotKnownError, DimensionMismatchError, RhoOutOfRangeError
from .quadform import _check_hermitian, hermitian_sqrt

UNIT_NORM_TOL = 1e-10


def exponential_correlation(n, rho):
    """Correlation matrix with entries ``rho**|i-j|`` (unit diagonal)."""
    if not 0.0 <= rho <= 1.0:
        raise RhoOutOfRangeError(f"rho={rho} outside [0, 1]")
    idx = np.arange(n)
    return np.power(float(rho), np.abs(idx[:, None] - idx[None, :])).astype(float)


@dataclass(frozen=True)
class NetworkConfig:
    K: int
    n_tx: int
    n_rx: int
    d: int
    noise_var: float
    error_var: float
    sigma_t: np.ndarray = None
    sigma_r: np.ndarray = None
    error_var_links: np.ndarray = None  # optional K x K per-link override

    def __post_init__(self):
        if self.K < 1 or self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("K, n_tx and n_rx must be positive")
        if not 1 <= self.d <= min(self.n_tx, self.n_rx):
            raise ValueError("need 1 <= d <= min(n_tx, n_rx)")
        if self.noise_var < 0 or self.error_var < 0:
            raise ValueError("variances must be nonnegative")
        st = np.eye(self.n_tx) if self.sigma_t is None else np.asarray(self.sigma_t)
        sr = np.eye(self.n_rx) if self.sigma_r is None else np.asarray(self.sigma_r)
        if st.shape != (self.n_tx, self.n_tx) or sr.shape != (self.n_rx, self.n_rx):
            raise DimensionMismatchError("correlation matrix shape mismatch")
        st = _check_hermitian(st, "sigma_t")
        sr = _check_hermitian(sr, "sigma_r")
        hermitian_sqrt(st)
        hermitian_sqrt(sr)
        object.__setattr__(self, "sigma_t", st)
        object.__setattr__(self, "sigma_r", sr)
        if self.error_var_links is not None:
            ev = np.asarray(self.error_var_links, dtype=float)
            if ev.shape != (self.K, self.K) or np.any(ev < 0):
                raise ValueError("error_var_links must be a nonnegative K x K array")
            object.__setattr__(self, "error_var_links", ev)

    @classmethod
    def from_db(cls, K, n_tx, n_rx, d, k_factor_db, snr_db, rho_t=0.0,
                rho_r=None):
        """Build a config from K factor and SNR in dB.

        Assumes estimates normalised to ``||H_ki||_F^2 = n_tx*n_rx`` and
        unit-diagonal correlations, so the error variance is ``1/K_ch`` and the
        noise variance is ``n_tx*n_rx/Gamma``.  ``k_factor_db=inf`` gives a
        perfect-CSI config.
        """
        rho_r = rho_t if rho_r is None else rho_r
        err = 0.0 if np.isinf(k_factor_db) else 10 ** (-k_factor_db / 10)
        noise = n_tx * n_rx * 10 ** (-snr_db / 10)
        return cls(K, n_tx, n_rx, d, noise, err,
                   exponential_correlation(n_tx, rho_t),
                   exponential_correlation(n_rx, rho_r))

    def link_error_var(self, k, i):
        if self.error_var_links is None:
            return self.error_var
        return float(self.error_var_links[k, i])

    def replace(self, **changes):
        fields = dict(K=self.K, n_tx=self.n_tx, n_rx=self.n_rx, d=self.d,
                      noise_var=self.noise_var, error_var=self.error_var,
                      sigma_t=self.sigma_t, sigma_r=self.sigma_r,
                      error_var_links=self.error_var_links)
        fields.update(changes)
        return NetworkConfig(**fields)


@dataclass(frozen=True)
class ChannelEstimateSet:
    H_hat: np.ndarray

    @property
    def K(self):
        return self.H_hat.shape[0]

    def k_factor(self, cfg, k, i):
        """Known-to-unknown power ratio of link (k, i)."""
        denom = cfg.link_error_var(k, i) * np.trace(cfg.sigma_t).real * np.trace(cfg.sigma_r).real
        power = np.linalg.norm(self.H_hat[k, i]) ** 2
        return np.inf if denom == 0 else power / denom

    def snr(self, cfg, k):
        return np.linalg.norm(self.H_hat[k, k]) ** 2 / cfg.noise_var


@dataclass(frozen=True)
class ErrorRealization:
    E: np.ndarray


@dataclass
class BeamSet:
    V: np.ndarray
    U: np.ndarray = field(default=None)

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=complex)
        if self.U is not None:
            self.U = np.asarray(self.U, dtype=complex)

    def copy(self):
        return BeamSet(self.V.copy(), None if self.U is None else self.U.copy())

    def is_unit_norm(self, tol=UNIT_NORM_TOL):
        cols = [np.linalg.norm(self.V, axis=1)]
        if self.U is not None:
            cols.append(np.linalg.norm(self.U, axis=1))
        return all(np.all(np.abs(c - 1) <= tol) for c in cols)


def _rng(seed, tag, *idx):
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed), zlib.crc32(tag.encode()), *map(int, idx)]))


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def generate_estimates(cfg, seed):
    """Draw i.i.d. CN(0,1) link matrices, each rescaled to ``||H||_F^2 = n_tx*n_rx``."""
    H = np.empty((cfg.K, cfg.K, cfg.n_rx, cfg.n_tx), dtype=complex)
    target = np.sqrt(cfg.n_tx * cfg.n_rx)
    for k in range(cfg.K):
        for i in range(cfg.K):
            g = _complex_normal(_rng(seed, "estimate", k, i), (cfg.n_rx, cfg.n_tx))
            H[k, i] = g * (target / np.linalg.norm(g))
    return ChannelEstimateSet(H)


def _error_draw(cfg, rng, k, i, root_t, root_r, count=None):
    shape = (cfg.n_rx, cfg.n_tx) if count is None else (count, cfg.n_rx, cfg.n_tx)
    w = _complex_normal(rng, shape) * np.sqrt(cfg.link_error_var(k, i))
    return root_r @ w @ root_t


def sample_error(cfg, seed):
    """One realisation of ``E_ki = Sigma_r^{1/2} H_w Sigma_t^{1/2}`` for every link."""
    root_t, root_r = hermitian_sqrt(cfg.sigma_t), hermitian_sqrt(cfg.sigma_r)
    E = np.empty((cfg.K, cfg.K, cfg.n_rx, cfg.n_tx), dtype=complex)
    for k in range(cfg.K):
        for i in range(cfg.K):
            E[k, i] = _error_draw(cfg, _rng(seed, "error", k, i), k, i, root_t, root_r)
    return ErrorRealization(E)


def sample_errors(cfg, seed, count, links=None, batch=0):
    """Batched error draws: array ``(count, K, K, n_rx, n_tx)``.

    ``links`` restricts sampling to an iterable of (k, i) pairs; other links are
    left at zero.  ``batch`` selects an independent stream for chunked sampling.
    """
    root_t, root_r = hermitian_sqrt(cfg.sigma_t), hermitian_sqrt(cfg.sigma_r)
    E = np.zeros((count, cfg.K, cfg.K, cfg.n_rx, cfg.n_tx), dtype=complex)
    pairs = links if links is not None else [(k, i) for k in range(cfg.K) for i in range(cfg.K)]
    for k, i in pairs:
        E[:, k, i] = _error_draw(cfg, _rng(seed, "error-batch", batch, k, i), k, i,
                                 root_t, root_r, count)
    return E


def _check_stream(cfg, k, m):
    if not (0 <= k < cfg.K and 0 <= m < cfg.d):
        raise IndexError(f"stream ({k}, {m}) out of range")


def sinr(beams, H_true, H_hat, cfg, k, m):
    """Post-filter SINR of stream ``m`` at user ``k`` for a true channel draw.

    The desired term uses the estimate only; its estimation error counts as
    interference, together with all other streams through the true channel.
    """
    _check_stream(cfg, k, m)
    u = beams.U[k][:, m]
    v = beams.V[k][:, m]
    uh = u.conj()
    signal = abs(uh @ H_hat[k, k] @ v) ** 2
    denom = abs(uh @ (H_true[k, k] - H_hat[k, k]) @ v) ** 2 + cfg.noise_var
    for i in range(cfg.K):
        gains = np.abs(uh @ H_true[k, i] @ beams.V[i]) ** 2
        if i == k:
            gains = np.delete(gains, m)
        denom += gains.sum()
    return signal / denom


def sinr_batch(beams, E, H_hat, cfg, k, m):
    """Vectorised :func:`sinr` over a leading axis of error draws ``E``."""
    u = beams.U[k][:, m].conj()
    v = beams.V[k][:, m]
    signal = abs(u @ H_hat[k, k] @ v) ** 2
    denom = np.abs(np.einsum("r,srt,t->s", u, E[:, k, k], v)) ** 2 + cfg.noise_var
    for i in range(cfg.K):
        proj = np.einsum("r,srt,tj->sj", u, H_hat[k, i][None] + E[:, k, i], beams.V[i])
        gains = np.abs(proj) ** 2
        if i == k:
            gains = np.delete(gains, m, axis=1)
        denom = denom + gains.sum(axis=1)
    return signal / denom


def stream_mean_vector(beams, H_hat, k, m):
    K, d = beams.V.shape[0], beams.V.shape[2]
    u = beams.U[k][:, m].conj()
    mu = np.concatenate([u @ H_hat[k, i] @ beams.V[i] for i in range(K)])
    mu[k * d + m] = 0.0
    return mu


def stream_covariance(beams, cfg, k, m):
    """Block-diagonal covariance of the stream's interference vector.

    Block ``i`` has entries ``s_h^2 (u^H S_r u) (v_i^q^H S_t v_i^p)`` at (p, q).
    """
    u = beams.U[k][:, m]
    rx_gain = (u.conj() @ cfg.sigma_r @ u).real
    blocks = []
    for i in range(cfg.K):
        V = beams.V[i]
        gram = (V.conj().T @ cfg.sigma_t @ V).T  # (p, q) -> v_q^H S_t v_p
        blocks.append(cfg.link_error_var(k, i) * rx_gain * gram)
    out = np.zeros((cfg.K * cfg.d, cfg.K * cfg.d), dtype=complex)
    for i, b in enumerate(blocks):
        out[i * cfg.d:(i + 1) * cfg.d, i * cfg.d:(i + 1) * cfg.d] = b
    return out


def desired_gain(beams, H_hat, k, m):
    return abs(beams.U[k][:, m].conj() @ H_hat[k, k] @ beams.V[k][:, m]) ** 2


def threshold_tau(beams, H_hat, cfg, k, m, rate, known_links=()):
    """Outage threshold on the quadratic form for target ``rate``.

    With known links the perfectly-known interference powers are moved from the
    random form into the threshold.  ``rate = 0`` gives ``+inf``.
    """
    _check_stream(cfg, k, m)
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    known = set(known_links)
    if known and k not in known:
        raise DesiredLinkNotKnownError(f"user {k} missing from known links {sorted(known)}")
    if rate == 0:
        return np.inf
    tau = desired_gain(beams, H_hat, k, m) / np.expm1(rate * np.log(2)) - cfg.noise_var
    if known:
        mu = stream_mean_vector(beams, H_hat, k, m)
        for i in sorted(known):
            tau -= float(np.sum(np.abs(mu[i * cfg.d:(i + 1) * cfg.d]) ** 2))
    return tau


def restrict_to_unknown(mu, sigma, cfg, known_links):
    """Drop the blocks of links in ``known_links`` from (mean, covariance)."""
    keep = [i * cfg.d + j for i in range(cfg.K) if i not in set(known_links)
            for j in range(cfg.d)]
    return mu[keep], sigma[np.ix_(keep, keep)]


def interference_leakage(beams, H_hat):
    K = beams.V.shape[0]
    return float(sum(np.linalg.norm(beams.U[k].conj().T @ H_hat[k, i] @ beams.V[i]) ** 2
                     for k in range(K) for i in range(K) if i != k))
