"""Beam design: interference-alignment and max-SINR baselines, and the
alternating sum epsilon-outage-rate maximiser.

The maximiser alternates three steps until the sum rate settles:

1. per-stream epsilon-outage rates by bisection,
2. cyclic transmit-column updates minimising the worst stream outage at
   those rates,
3. per-stream receive-filter updates minimising that stream's own outage.

Each step can only lower the outages at the current rates, so the rates
found in the next pass never decrease.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import channel as ch
from .errors import SingularCovarianceError
from .outage import OutageQuery, epsilon_outage_rate, outage_probability
from .quadform import SeriesControl

TIE_TOL = 1e-12


def _H(H_hat):
    return H_hat.H_hat if isinstance(H_hat, ch.ChannelEstimateSet) else np.asarray(H_hat)


def canonical_phase(v):
    """Rotate ``v`` so its first non-negligible entry is real and nonnegative."""
    v = np.asarray(v, dtype=complex)
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size == 0:
        return v
    ph = v[nz[0]] / abs(v[nz[0]])
    out = v * np.conj(ph)
    out[nz[0]] = abs(out[nz[0]])
    return out


def _unit_columns(A):
    return A / np.linalg.norm(A, axis=-2, keepdims=True)


def _minor_eigvecs(Q, d):
    _, vecs = np.linalg.eigh(Q)
    return vecs[:, :d]


def _seeded_rng(seed, tag, *idx):
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed), zlib.crc32(tag.encode()), *map(int, idx)]))


def _random_unit(rng, n, d):
    A = rng.standard_normal((n, d)) + 1j * rng.standard_normal((n, d))
    return _unit_columns(A)


@dataclass
class BaselineInfo:
    iterations: int
    converged: bool
    leakage: float


def iia_design(H_hat, cfg, iters=5000, seed=0, tol=1e-16, return_info=False):
    """Iterative interference alignment by alternating leakage minimisation.

    Receive filters are the minor eigenvectors of each receiver's interference
    covariance; transmit filters come from the same rule on the reciprocal
    network.  Stops once the total leakage drops below ``tol`` or stalls, and
    returns the beams with the lowest leakage seen.
    """
    H = _H(H_hat)
    K, d = cfg.K, cfg.d
    rng = _seeded_rng(seed, "iia-init")
    V = np.stack([_random_unit(rng, cfg.n_tx, d) for _ in range(K)])
    U = np.zeros((K, cfg.n_rx, d), dtype=complex)
    best, best_leak, prev, converged, it = None, np.inf, np.inf, False, 0
    for it in range(1, iters + 1):
        for k in range(K):
            Q = sum((H[k, i] @ V[i] @ V[i].conj().T @ H[k, i].conj().T
                     for i in range(K) if i != k), np.zeros((cfg.n_rx, cfg.n_rx)))
            U[k] = _minor_eigvecs(Q, d)
        for i in range(K):
            Q = sum((H[k, i].conj().T @ U[k] @ U[k].conj().T @ H[k, i]
                     for k in range(K) if k != i), np.zeros((cfg.n_tx, cfg.n_tx)))
            V[i] = _minor_eigvecs(Q, d)
        beams = ch.BeamSet(V.copy(), U.copy())
        leak = ch.interference_leakage(beams, H)
        if leak < best_leak:
            best, best_leak = beams, leak
        stalled = np.isfinite(prev) and abs(prev - leak) <= 1e-9 * prev
        if leak <= tol or stalled:
            converged = True
            break
        prev = leak
    # receive filters matched to the final transmitters
    for k in range(K):
        Q = sum((H[k, i] @ best.V[i] @ best.V[i].conj().T @ H[k, i].conj().T
                 for i in range(K) if i != k), np.zeros((cfg.n_rx, cfg.n_rx)))
        best.U[k] = _minor_eigvecs(Q, d)
    best = _gauge(best)
    info = BaselineInfo(it, converged, ch.interference_leakage(best, H))
    return (best, info) if return_info else best


def _gauge(beams):
    V = np.array([[canonical_phase(c) for c in Vk.T] for Vk in beams.V]).transpose(0, 2, 1)
    U = np.array([[canonical_phase(c) for c in Uk.T] for Uk in beams.U]).transpose(0, 2, 1)
    return ch.BeamSet(V, U)


def _interference_plus_noise(H, V, k, m, noise, n):
    B = noise * np.eye(n, dtype=complex)
    for i in range(H.shape[0]):
        for j in range(V.shape[2]):
            if (i, j) != (k, m):
                h = H[k, i] @ V[i][:, j]
                B += np.outer(h, h.conj())
    return B


def max_sinr_design(H_hat, cfg, iters=200, seed=0, tol=1e-10, return_info=False):
    """Max-SINR baseline treating the estimate as the true channel."""
    H = _H(H_hat)
    K, d = cfg.K, cfg.d
    rng = _seeded_rng(seed, "maxsinr-init")
    V = np.stack([_random_unit(rng, cfg.n_tx, d) for _ in range(K)])
    U = np.zeros((K, cfg.n_rx, d), dtype=complex)
    Hr = np.conj(np.transpose(H, (1, 0, 3, 2)))  # reciprocal network
    it, converged = 0, False

    def solve(B, h):
        try:
            if np.linalg.cond(B) > 1e14:
                raise np.linalg.LinAlgError
            w = np.linalg.solve(B, h)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError("interference-plus-noise covariance is singular")
        return w / np.linalg.norm(w)

    for it in range(1, iters + 1):
        for k in range(K):
            for m in range(d):
                B = _interference_plus_noise(H, V, k, m, cfg.noise_var, cfg.n_rx)
                U[k][:, m] = solve(B, H[k, k] @ V[k][:, m])
        V_old = V.copy()
        for i in range(K):
            for j in range(d):
                B = _interference_plus_noise(Hr, U, i, j, cfg.noise_var, cfg.n_tx)
                V[i][:, j] = solve(B, Hr[i, i] @ U[i][:, j])
        if np.max(np.abs(np.abs(V) - np.abs(V_old))) < tol:
            converged = True
            break
    for k in range(K):
        for m in range(d):
            B = _interference_plus_noise(H, V, k, m, cfg.noise_var, cfg.n_rx)
            U[k][:, m] = solve(B, H[k, k] @ V[k][:, m])
    beams = _gauge(ch.BeamSet(V, U))
    info = BaselineInfo(it, converged, ch.interference_leakage(beams, H))
    return (beams, info) if return_info else beams


@dataclass
class DesignOptions:
    epsilon: float = 0.1
    max_outer_iters: int = 30
    max_inner_iters: int = 10
    beam_tol: float = 1e-4
    rate_tol: float = 1e-4
    solver: str = "coordinate-polish"
    restarts: int = 0
    seed: int = 0
    step_tol: float = 1e-4
    init: str = "best"
    series: SeriesControl = field(
        default_factory=lambda: SeriesControl.adaptive(1e-9))

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beam_tol <= 0 or self.rate_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.solver not in ("coordinate-polish", "random-restart-local"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.init not in ("iia", "max-sinr", "best"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class DesignResult:
    beams: ch.BeamSet
    rates: np.ndarray
    sum_rate_trajectory: list
    converged: bool
    outer_iterations: int = 0

    @property
    def sum_rate(self):
        return float(self.rates.sum())


def _to_real(v):
    return np.concatenate([v.real, v.imag])


def _to_complex(x):
    n = x.size // 2
    v = x[:n] + 1j * x[n:]
    nrm = np.linalg.norm(v)
    return canonical_phase(v / nrm) if nrm > 0 else v


def _coordinate_polish(f, x0, f0, step, step_tol, max_evals=4000):
    x, fx, evals = x0.copy(), f0, 0
    while step >= step_tol and evals < max_evals:
        moved = False
        for c in range(x.size):
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[c] += sgn * step
                if not np.any(y):
                    continue
                y /= np.linalg.norm(y)
                fy = f(y)
                evals += 1
                if fy < fx - TIE_TOL:
                    x, fx, moved = y, fy, True
                    break
        if not moved:
            step *= 0.5
    return x, fx


def _sphere_search(f, incumbent, opts, rng):
    """Minimise ``f`` over unit complex vectors, never worse than ``incumbent``."""
    x_inc = _to_real(canonical_phase(incumbent))
    f_inc = f(x_inc)
    starts = [x_inc]
    for _ in range(opts.restarts):
        z = rng.standard_normal(x_inc.size)
        starts.append(z / np.linalg.norm(z))
    best_x, best_f = x_inc, f_inc
    for x0 in starts:
        f0 = f_inc if x0 is x_inc else f(x0)
        if opts.solver == "coordinate-polish":
            x, fx = _coordinate_polish(f, x0, f0, 0.25, opts.step_tol)
        else:
            res = minimize(lambda y: f(y / max(np.linalg.norm(y), 1e-300)), x0,
                           method="Nelder-Mead",
                           options={"xatol": opts.step_tol, "fatol": 1e-12,
                                    "maxfev": 4000})
            x, fx = res.x / np.linalg.norm(res.x), res.fun
        if fx < best_f - TIE_TOL:
            best_x, best_f = x, fx
    return _to_complex(best_x), best_f


def _outage(beams, H, cfg, k, m, rate, series):
    q = OutageQuery(k, m, float(rate), (), series)
    p = outage_probability(beams, H, cfg, q).probability
    return 1.0 if math.isnan(p) else p


def worst_outage(beams, H_hat, cfg, rates, series=None):
    """Largest per-stream outage at the given rates, with its (k, m).

    Ties within 1e-12 go to the lexicographically first stream.
    """
    H = _H(H_hat)
    series = series or SeriesControl.adaptive(1e-9)
    best, arg = -1.0, (0, 0)
    for k in range(cfg.K):
        for m in range(cfg.d):
            p = _outage(beams, H, cfg, k, m, rates[k, m], series)
            if p > best + TIE_TOL:
                best, arg = p, (k, m)
    return best, arg


def minimax_transmit_update(beams, H_hat, cfg, rates, i, j, opts=None, rng=None):
    """New transmit column ``v_i^(j)`` minimising the worst stream outage."""
    opts = opts or DesignOptions()
    H = _H(H_hat)
    rng = rng or _seeded_rng(opts.seed, "tx", i, j)
    trial = beams.copy()

    def objective(x):
        trial.V[i][:, j] = _to_complex(x)
        return worst_outage(trial, H, cfg, rates, opts.series)[0]

    v, _ = _sphere_search(objective, beams.V[i][:, j], opts, rng)
    return v


def min_outage_receive_update(beams, H_hat, cfg, rates, k, m, opts=None, rng=None):
    """New receive filter ``u_k^(m)`` minimising that stream's own outage."""
    opts = opts or DesignOptions()
    H = _H(H_hat)
    rng = rng or _seeded_rng(opts.seed, "rx", k, m)
    trial = beams.copy()

    def objective(x):
        trial.U[k][:, m] = _to_complex(x)
        return _outage(trial, H, cfg, k, m, rates[k, m], opts.series)

    u, _ = _sphere_search(objective, beams.U[k][:, m], opts, rng)
    return u


def stream_rates(beams, H_hat, cfg, epsilon, floor=None, series=None):
    """Per-stream epsilon-outage rates as a ``(K, d)`` array."""
    H = _H(H_hat)
    series = series or SeriesControl.adaptive(1e-9)
    out = np.zeros((cfg.K, cfg.d))
    for k in range(cfg.K):
        for m in range(cfg.d):
            lo = 0.0 if floor is None else float(floor[k, m])
            out[k, m] = epsilon_outage_rate(beams, H, cfg, k, m, epsilon,
                                            series=series, floor=lo)
    return out


def _initial_beams(H, cfg, opts):
    if opts.init == "iia":
        return iia_design(H, cfg, seed=opts.seed)
    if opts.init == "max-sinr":
        return max_sinr_design(H, cfg, seed=opts.seed)
    cands = [iia_design(H, cfg, seed=opts.seed), max_sinr_design(H, cfg, seed=opts.seed)]
    sums = [stream_rates(b, H, cfg, opts.epsilon, series=opts.series).sum() for b in cands]
    return cands[int(np.argmax(sums))]


def design_outage_rate(H_hat, cfg, opts=None, initial=None):
    """Maximise the sum epsilon-outage rate by alternating rate, transmit and
    receive updates.  ``initial`` overrides the starting beams."""
    opts = opts or DesignOptions()
    if cfg.error_var <= 0 and cfg.error_var_links is None:
        raise ValueError("design needs a positive CSI error variance")
    H = _H(H_hat)
    beams = _gauge(initial.copy()) if initial is not None else _initial_beams(H, cfg, opts)
    rates = stream_rates(beams, H, cfg, opts.epsilon, series=opts.series)
    trajectory = [float(rates.sum())]
    converged, outer = False, 0
    for outer in range(1, opts.max_outer_iters + 1):
        for inner in range(opts.max_inner_iters):
            change = 0.0
            for i in range(cfg.K):
                for j in range(cfg.d):
                    rng = _seeded_rng(opts.seed, "tx", outer, inner, i, j)
                    v = minimax_transmit_update(beams, H, cfg, rates, i, j, opts, rng)
                    change = max(change, float(np.max(np.abs(v - beams.V[i][:, j]))))
                    beams.V[i][:, j] = v
            if change < opts.beam_tol:
                break
        for k in range(cfg.K):
            for m in range(cfg.d):
                rng = _seeded_rng(opts.seed, "rx", outer, k, m)
                beams.U[k][:, m] = min_outage_receive_update(beams, H, cfg, rates,
                                                             k, m, opts, rng)
        rates = stream_rates(beams, H, cfg, opts.epsilon, floor=rates, series=opts.series)
        trajectory.append(float(rates.sum()))
        if abs(trajectory[-1] - trajectory[-2]) < opts.rate_tol:
            converged = True
            break
    return DesignResult(beams, rates, trajectory, converged, outer)


def baseline_sum_rate(beams, H_hat, cfg, epsilon, series=None):
    return float(stream_rates(beams, H_hat, cfg, epsilon, series=series).sum())
