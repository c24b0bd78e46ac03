"""Beam design for the largest sum rate at a per-stream outage budget.

Compares the two baselines, whose rates are set afterwards to meet the
outage budget, with the alternating minimax design that shapes the beams
around the CSI error statistics.
"""
from mimo_outage import beamdesign as bd
from mimo_outage import channel as ch
from mimo_outage import outage as oc

eps = 0.1
cfg = ch.NetworkConfig.from_db(3, 2, 2, 1, k_factor_db=20.0, snr_db=30.0)
H = ch.generate_estimates(cfg, seed=4).H_hat

iia = bd.baseline_sum_rate(bd.iia_design(H, cfg, seed=4), H, cfg, eps)
msinr = bd.baseline_sum_rate(bd.max_sinr_design(H, cfg, seed=4), H, cfg, eps)
res = bd.design_outage_rate(H, cfg, bd.DesignOptions(epsilon=eps, seed=4))

print(f"sum {eps:.0%}-outage rate  IIA {iia:.3f}  max-SINR {msinr:.3f}  "
      f"proposed {res.sum_rate:.3f} bits/channel use")
print("trajectory:", " ".join(f"{v:.3f}" for v in res.sum_rate_trajectory))
for k in range(cfg.K):
    q = oc.OutageQuery(k, 0, float(res.rates[k, 0]))
    p = oc.outage_probability(res.beams, H, cfg, q).probability
    mc = oc.mc_outage(res.beams, H, cfg, q, trials=10**5, seed=k)
    print(f"user {k}: rate {q.rate:.3f}  outage {p:.4f}  simulated {mc.estimate:.4f}")
