import math

import numpy as np
import pytest

from mimo_outage import channel as ch
from mimo_outage import outage as out
from mimo_outage.beamdesign import iia_design
from mimo_outage.errors import (DesiredLinkNotKnownError, NoFiniteRateError, NotAlignedError,
                                SOutOfRangeError)
from mimo_outage.quadform import SeriesControl


def setup(K=3, nt=2, nr=2, d=1, kdb=15.0, snr=20.0, rho=0.0, seed=0, aligned=True):
    cfg = ch.NetworkConfig.from_db(K, nt, nr, d, kdb, snr, rho_t=rho)
    H = ch.generate_estimates(cfg, seed).H_hat
    if aligned:
        beams = iia_design(H, cfg, seed=seed)
    else:
        rng = np.random.default_rng(seed + 100)

        def unit(shape):
            x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            return x / np.linalg.norm(x, axis=1, keepdims=True)
        beams = ch.BeamSet(unit((K, nt, d)), unit((K, nr, d)))
    return cfg, H, beams


def both_paths(beams, H, cfg, q):
    fast = out.outage_probability(beams, H, cfg, q)
    full = out.outage_probability(beams, H, cfg, q, general=True)
    return fast, full


class TestDispatch:
    def test_single_stream_identity_correlation(self):
        cfg, H, beams = setup(aligned=False)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        for frac in (0.2, 0.5, 0.9):
            fast, full = both_paths(beams, H, cfg, out.OutageQuery(0, 0, frac * rl))
            assert fast.method == "corollary4"
            assert full.method == "theorem1"
            assert fast.probability == pytest.approx(full.probability, abs=1e-9)

    def test_single_stream_distinct_eigenvalues(self):
        cfg, H, beams = setup(rho=0.5, aligned=False, seed=1)
        rl = out.perfect_csi_rate(beams, H, cfg, 1, 0)
        for frac in (0.3, 0.7):
            fast, full = both_paths(beams, H, cfg, out.OutageQuery(1, 0, frac * rl))
            assert fast.method == "corollary3"
            assert fast.probability == pytest.approx(full.probability, abs=1e-9)

    def test_known_links_with_mean(self):
        cfg, H, beams = setup(aligned=False, seed=2, rho=0.5)
        rl = out.perfect_csi_rate(beams, H, cfg, 2, 0)
        q = out.OutageQuery(2, 0, 0.5 * rl, known_links=(2, 0))
        fast, full = both_paths(beams, H, cfg, q)
        assert fast.method == "corollary1"
        assert fast.probability == pytest.approx(full.probability, abs=1e-9)

    def test_known_links_aligned_zero_mean(self):
        cfg, H, beams = setup(nt=4, nr=4, d=2, seed=3, rho=0.5)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 1)
        for frac in (0.4, 0.8):
            q = out.OutageQuery(0, 1, frac * rl, known_links=(0,))
            fast, full = both_paths(beams, H, cfg, q)
            assert fast.method == "corollary2"
            assert fast.probability == pytest.approx(full.probability, abs=1e-9)

    def test_multi_stream_general(self):
        cfg, H, beams = setup(nt=4, nr=4, d=2, seed=4)
        q = out.OutageQuery(1, 1, 0.5 * out.perfect_csi_rate(beams, H, cfg, 1, 1))
        rep = out.outage_probability(beams, H, cfg, q)
        assert rep.method == "theorem1"
        assert not rep.budget_exceeded

    def test_large_noncentrality_resolves(self):
        # intra-user stream leakage at 30 dB gives eta^2 near 3000
        cfg, H, beams = setup(nt=4, nr=4, d=2, seed=0, kdb=30.0, snr=15.0)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        q = out.OutageQuery(0, 0, 0.958 * rl)
        rep = out.outage_probability(beams, H, cfg, q)
        assert not rep.budget_exceeded
        assert rep.terms_used > 2000
        mc = out.mc_outage(beams, H, cfg, q, trials=10**5, seed=11)
        assert abs(rep.probability - mc.estimate) <= 3 * mc.std_error

    def test_unresolvable_spectrum_is_flagged(self):
        # two eigenvalues 3e-4 apart next to a strongly non-central cluster
        cfg, H, beams = setup(nt=4, nr=4, d=2, seed=9, kdb=10.0, rho=0.3)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        rep = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, 0.5 * rl))
        assert rep.budget_exceeded
        assert math.isnan(rep.probability)
        assert rep.error_estimate == math.inf
        # the rate search treats unresolved points as infeasible
        assert out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1) < 0.5 * rl


class TestLimits:
    def test_zero_rate(self):
        cfg, H, beams = setup()
        rep = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, 0.0))
        assert rep.probability == 0.0

    def test_perfect_csi_step(self):
        cfg, H, beams = setup(kdb=math.inf, aligned=False)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        below = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, rl * (1 - 1e-9)))
        above = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, rl * (1 + 1e-9)))
        assert below.probability == 0.0
        assert above.probability == 1.0

    def test_above_limit_is_certain_outage(self):
        cfg, H, beams = setup()
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        rep = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, 1.01 * rl))
        assert rep.probability == 1.0
        assert rep.tau < 0

    def test_monotone_in_rate(self):
        cfg, H, beams = setup(nt=4, nr=4, d=2, seed=5)
        rl = out.perfect_csi_rate(beams, H, cfg, 2, 0)
        probs = [out.outage_probability(beams, H, cfg, out.OutageQuery(2, 0, r)).probability
                 for r in np.linspace(0.05, rl, 15)]
        assert all(b >= a - 1e-9 for a, b in zip(probs, probs[1:]))

    def test_knowing_desired_link_helps(self):
        cfg, H, beams = setup(aligned=False, seed=6)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        for frac in (0.3, 0.6, 0.9):
            a = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, frac * rl))
            b = out.outage_probability(beams, H, cfg,
                                       out.OutageQuery(0, 0, frac * rl, known_links=(0,)))
            assert b.probability <= a.probability + 1e-12

    def test_query_validation(self):
        with pytest.raises(DesiredLinkNotKnownError):
            out.OutageQuery(0, 0, 1.0, known_links=(1,))
        with pytest.raises(ValueError):
            out.OutageQuery(0, 0, -1.0)
        assert out.OutageQuery(1, 0, 1.0, known_links=(2, 1, 2)).known_links == (1, 2)


class TestAligned:
    def test_matches_general_evaluation(self):
        cfg, H, beams = setup(seed=7)
        rl = out.perfect_csi_rate(beams, H, cfg, 1, 0)
        q = out.OutageQuery(1, 0, 0.6 * rl, known_links=(1,))
        a = out.outage_ia(beams, H, cfg, q)
        b = out.outage_probability(beams, H, cfg, q, general=True)
        assert a.probability == pytest.approx(b.probability, abs=1e-9)

    def test_matches_monte_carlo(self):
        cfg, H, beams = setup(nt=4, nr=4, d=2, seed=8, kdb=10.0)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        for frac in (0.5, 0.8, 0.9):
            q = out.OutageQuery(0, 0, frac * rl, known_links=(0,))
            p = out.outage_ia(beams, H, cfg, q).probability
            mc = out.mc_outage(beams, H, cfg, q, trials=10**5, seed=1)
            assert abs(p - mc.estimate) <= 3 * mc.std_error + 1e-12

    def test_rejects_unaligned(self):
        cfg, H, beams = setup(aligned=False)
        with pytest.raises(NotAlignedError):
            out.outage_ia(beams, H, cfg, out.OutageQuery(0, 0, 1.0, known_links=(0,)))

    def test_requires_desired_known(self):
        cfg, H, beams = setup()
        with pytest.raises(DesiredLinkNotKnownError):
            out.outage_ia(beams, H, cfg, out.OutageQuery(0, 0, 1.0))


class TestMonteCarloAgreement:
    @pytest.mark.parametrize("d,n,rho,kdb,fracs", [
        (1, 2, 0.3, 10.0, (0.5, 0.8, 0.9)),
        (2, 4, 0.0, 15.0, (0.5, 0.8, 0.9)),
    ])
    def test_series_within_three_sigma(self, d, n, rho, kdb, fracs):
        cfg, H, beams = setup(nt=n, nr=n, d=d, seed=9, kdb=kdb, rho=rho)
        rl = out.perfect_csi_rate(beams, H, cfg, 1, 0)
        for frac in fracs:
            q = out.OutageQuery(1, 0, frac * rl)
            p = out.outage_probability(beams, H, cfg, q).probability
            mc = out.mc_outage(beams, H, cfg, q, trials=10**5, seed=2)
            assert abs(p - mc.estimate) <= 3 * mc.std_error + 1e-12

    def test_mc_deterministic(self):
        cfg, H, beams = setup()
        q = out.OutageQuery(0, 0, 1.0)
        a = out.mc_outage(beams, H, cfg, q, trials=5000, seed=3)
        b = out.mc_outage(beams, H, cfg, q, trials=5000, seed=3)
        assert a.estimate == b.estimate

    def test_mc_trial_floor(self):
        cfg, H, beams = setup()
        with pytest.raises(ValueError):
            out.mc_outage(beams, H, cfg, out.OutageQuery(0, 0, 1.0), trials=10)


class TestChernoff:
    def test_upper_bounds_exact(self):
        cfg, H, beams = setup(seed=10, rho=0.5, aligned=False)
        rl = out.perfect_csi_rate(beams, H, cfg, 0, 0)
        for frac in np.linspace(0.05, 0.95, 10):
            exact = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, frac * rl))
            for opt in (False, True):
                bound = out.chernoff_bound(beams, H, cfg, 0, frac * rl, optimize_s=opt)
                assert bound >= exact.probability - 1e-12

    def test_optimised_is_tighter(self):
        cfg, H, beams = setup(seed=11)
        r = 0.5 * out.perfect_csi_rate(beams, H, cfg, 0, 0)
        assert out.chernoff_bound(beams, H, cfg, 0, r, optimize_s=True) <= \
            out.chernoff_bound(beams, H, cfg, 0, r) + 1e-15

    def test_s_out_of_range(self):
        cfg, H, beams = setup()
        with pytest.raises(SOutOfRangeError):
            out.chernoff_bound(beams, H, cfg, 0, 1.0, s=1e9)

    def test_zero_rate(self):
        cfg, H, beams = setup()
        assert out.chernoff_bound(beams, H, cfg, 0, 0.0) == 0.0

    def test_correlated_multi_stream_rejected(self):
        cfg, H, beams = setup(nt=4, nr=4, d=2, rho=0.5, aligned=False)
        with pytest.raises(ValueError):
            out.chernoff_bound(beams, H, cfg, 0, 1.0)


class TestRateBar:
    def test_aligned_identity_case_is_perfect_csi_rate(self):
        cfg, H, beams = setup(seed=12)
        for k in range(3):
            assert out.rate_bar(beams, H, cfg, k) == pytest.approx(
                out.perfect_csi_rate(beams, H, cfg, k, 0), rel=1e-6)

    def test_below_perfect_csi_rate(self):
        cfg, H, beams = setup(seed=13, aligned=False)
        for k in range(3):
            assert out.rate_bar(beams, H, cfg, k) <= out.perfect_csi_rate(beams, H, cfg, k, 0)


class TestEpsilonRate:
    def test_fixed_point(self):
        cfg, H, beams = setup(seed=14, kdb=15.0)
        for eps in (0.05, 0.1, 0.2):
            r = out.epsilon_outage_rate(beams, H, cfg, 0, 0, eps)
            p = out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, r)).probability
            above = out.outage_probability(beams, H, cfg,
                                           out.OutageQuery(0, 0, r + 1e-6)).probability
            assert p <= eps
            assert above > eps - 1e-6

    def test_monotone_in_epsilon(self):
        cfg, H, beams = setup(seed=15, nt=4, nr=4, d=2)
        rates = [out.epsilon_outage_rate(beams, H, cfg, 1, 0, e) for e in (0.01, 0.05, 0.1, 0.3)]
        assert all(b >= a for a, b in zip(rates, rates[1:]))

    def test_floor_is_respected(self):
        cfg, H, beams = setup(seed=16)
        r = out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1)
        assert out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1, floor=0.9 * r) >= 0.9 * r

    def test_invalid_epsilon(self):
        cfg, H, beams = setup()
        with pytest.raises(ValueError):
            out.epsilon_outage_rate(beams, H, cfg, 0, 0, 1.5)

    def test_no_finite_rate(self):
        cfg, H, beams = setup(kdb=math.inf)
        # receive filter orthogonal to the desired signal: no rate is supportable
        h = H[0, 0] @ beams.V[0][:, 0]
        beams.U[0][:, 0] = np.array([-h[1].conj(), h[0].conj()]) / np.linalg.norm(h)
        with pytest.raises(NoFiniteRateError):
            out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1)

    def test_perfect_csi_gives_limit_rate(self):
        cfg, H, beams = setup(kdb=math.inf, seed=17)
        r = out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1)
        assert r == pytest.approx(out.perfect_csi_rate(beams, H, cfg, 0, 0), abs=1e-6)

    def test_explicit_series_control(self):
        cfg, H, beams = setup(seed=18)
        a = out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1)
        b = out.epsilon_outage_rate(beams, H, cfg, 0, 0, 0.1,
                                    series=SeriesControl.adaptive(1e-10))
        assert a == pytest.approx(b, abs=1e-5)
