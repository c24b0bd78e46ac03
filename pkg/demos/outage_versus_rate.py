"""Outage of one interference-aligned stream as the target rate grows.

A 3-user 2x2 network with imperfect channel knowledge: IIA beams are
designed on the estimate, then the outage probability of user 0 is swept over
rate for several K factors and checked against simulated error draws.
"""

from mimo_outage import beamdesign as bd
from mimo_outage import channel as ch
from mimo_outage import outage as oc

for k_db in (10.0, 20.0, 30.0):
    cfg = ch.NetworkConfig.from_db(K=3, n_tx=2, n_rx=2, d=1, k_factor_db=k_db, snr_db=15.0)
    H = ch.generate_estimates(cfg, seed=0).H_hat
    beams = bd.iia_design(H, cfg, seed=0)
    limit = oc.perfect_csi_rate(beams, H, cfg, 0, 0)
    print(f"\nK factor {k_db:g} dB, rate with perfect CSI {limit:.3f} bits")
    print("  rate   analytic     MC (1e5)     path")
    for frac in (0.4, 0.6, 0.8, 0.9, 1.0):
        q = oc.OutageQuery(0, 0, frac * limit)
        rep = oc.outage_probability(beams, H, cfg, q)
        mc = oc.mc_outage(beams, H, cfg, q, trials=10**5, seed=3)
        print(f"  {q.rate:.3f}  {rep.probability:.4e}  {mc.estimate:.4e}   {rep.method}")

# knowing the desired link removes its error from the interference form;
# with aligned beams the series then ends after finitely many terms
q = oc.OutageQuery(0, 0, 0.9 * limit, known_links=(0,))
print("\ndesired link known:", oc.outage_ia(beams, H, cfg, q))
print("epsilon-outage rate at 10%:",
      round(oc.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1), 4), "bits")
