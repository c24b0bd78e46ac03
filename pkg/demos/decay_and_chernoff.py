"""How fast outage vanishes as channel knowledge improves.

Below the threshold rate the log-outage falls linearly in the K factor and
the Chernoff bound tracks its slope; above the perfect-CSI rate nothing
improves.
"""
import numpy as np

from mimo_outage import beamdesign as bd
from mimo_outage import channel as ch
from mimo_outage import outage as oc

base = ch.NetworkConfig.from_db(3, 2, 2, 1, 20.0, 15.0)
H = ch.generate_estimates(base, 3).H_hat
beams = bd.iia_design(H, base, seed=3)
r_bar = oc.rate_bar(beams, H, base, 0)
r_limit = oc.perfect_csi_rate(beams, H, base, 0, 0)
print(f"decay threshold {r_bar:.3f} bits, perfect-CSI rate {r_limit:.3f} bits\n")

print("K (dB)  log P(0.8 Rbar)  log Chernoff  log Chernoff(opt s)  P(1.1 Rlim)")
for k_db in (15, 20, 25, 30, 35):
    cfg = base.replace(error_var=10 ** (-k_db / 10))
    rate = 0.8 * r_bar
    p = oc.outage_probability(beams, H, cfg, oc.OutageQuery(0, 0, rate)).probability
    c = oc.chernoff_bound(beams, H, cfg, 0, rate)
    c_opt = oc.chernoff_bound(beams, H, cfg, 0, rate, optimize_s=True)
    above = oc.outage_probability(beams, H, cfg, oc.OutageQuery(0, 0, 1.1 * r_limit))
    print(f"{k_db:5d}   {np.log(p):14.2f}  {np.log(c):12.2f}  {np.log(c_opt):19.2f}"
          f"  {above.probability:.4f}")
