"""Tail probabilities of a complex Gaussian quadratic form.

Walks through the residue series on a correlated, non-central 4-variable
form: standardisation, the series at a few thresholds, agreement with Monte
Carlo, and how the truncation point trades accuracy between the two tails.
"""
import numpy as np

from mimo_outage import quadform as qf

mu = np.full(4, 0.5, dtype=complex)
sigma = 0.3 * np.eye(4)
weight = np.array([[1, .5, 0, 0], [.5, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=complex)

# X^H Q X with X ~ CN(mu, sigma) becomes a weighted sum of independent
# non-central terms; repeated weights collapse into clusters
params = qf.reduce_general_form(mu, sigma, weight)
print("cluster weights     ", params.lambdas)
print("multiplicities      ", params.kappas)
print("non-centralities    ", np.round(params.eta_sq, 4))

taus = np.array([1.0, 3.0, 6.0, 9.0])
mc = qf.mc_tail(mu, sigma, weight, taus, samples=10**6, seed=1)
print("\n  tau    series      Monte Carlo (SE)")
for tau, est, se in zip(taus, mc.estimate, mc.std_error):
    res = qf.upper_tail(params, tau, qf.SeriesControl.adaptive())
    print(f"{tau:5.1f}  {res.probability:.6f}   {est:.6f} ({se:.1e})   N={res.terms_used}")

# with few terms the series is already accurate far out in the upper tail
# while the lower tail is still far off
print("\nN   error at tau=1    error at tau=9")
ref = {t: qf.upper_tail(params, t, qf.SeriesControl.adaptive(1e-12)).probability
       for t in (1.0, 9.0)}
for n in (5, 10, 15, 20, 30):
    ctl = qf.SeriesControl(max_terms=n)
    errs = [abs(qf.upper_tail(params, t, ctl).raw - ref[t]) for t in (1.0, 9.0)]
    print(f"{n:<3d} {errs[0]:.3e}         {errs[1]:.3e}")
