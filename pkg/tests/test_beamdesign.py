import numpy as np
import pytest

from mimo_outage import beamdesign as bd
from mimo_outage import channel as ch
from mimo_outage import outage as out
from mimo_outage.errors import SingularCovarianceError


def network(K=3, n=2, d=1, kdb=20.0, snr=30.0, seed=0):
    cfg = ch.NetworkConfig.from_db(K, n, n, d, kdb, snr)
    return cfg, ch.generate_estimates(cfg, seed).H_hat


def is_canonical(v):
    first = v[np.flatnonzero(np.abs(v) > 1e-12)[0]]
    return abs(first.imag) <= 1e-12 and first.real >= 0


def single_user_objective(H, cfg, u, rate):
    def f(v):
        beams = ch.BeamSet(v.reshape(1, 2, 1), u.reshape(1, 2, 1))
        return out.outage_probability(beams, H, cfg, out.OutageQuery(0, 0, rate)).probability
    return f


def sphere_grid(n_a, n_phi):
    for a in np.linspace(0, np.pi / 2, n_a):
        for phi in np.linspace(0, 2 * np.pi, n_phi, endpoint=False):
            yield np.array([np.cos(a), np.exp(1j * phi) * np.sin(a)])


def grid_minimum(f):
    best = min(((f(v), v) for v in sphere_grid(41, 80)), key=lambda t: t[0])
    return best[0]


class TestCanonicalPhase:
    def test_first_entry_real_nonnegative(self):
        v = np.array([1j, 1.0]) / np.sqrt(2)
        w = bd.canonical_phase(v)
        assert is_canonical(w)
        assert abs(abs(np.vdot(w, v)) - 1) < 1e-12

    def test_skips_leading_zero(self):
        w = bd.canonical_phase(np.array([0.0, -1.0 + 0j]))
        np.testing.assert_allclose(w, [0.0, 1.0])


class TestIIA:
    @pytest.mark.parametrize("seed", range(5))
    def test_leakage_vanishes(self, seed):
        cfg, H = network(seed=seed)
        beams, info = bd.iia_design(H, cfg, seed=seed, return_info=True)
        assert info.converged
        assert ch.interference_leakage(beams, H) <= 1e-8
        assert beams.is_unit_norm()

    def test_aligned_output_passes_alignment_check(self):
        cfg, H = network(seed=3)
        beams = bd.iia_design(H, cfg, seed=3)
        q = out.OutageQuery(1, 0, 1.0, known_links=(1,))
        assert out.outage_ia(beams, H, cfg, q).method == "corollary2"

    def test_single_user_has_no_leakage(self):
        cfg, H = network(K=1)
        beams, info = bd.iia_design(H, cfg, return_info=True)
        assert info.leakage == 0.0
        assert info.iterations == 1

    def test_deterministic(self):
        cfg, H = network(seed=1)
        a, b = bd.iia_design(H, cfg, seed=4), bd.iia_design(H, cfg, seed=4)
        np.testing.assert_array_equal(a.V, b.V)
        np.testing.assert_array_equal(a.U, b.U)

    def test_canonical_phase_on_output(self):
        cfg, H = network(n=4, d=2, seed=2)
        beams = bd.iia_design(H, cfg, seed=2)
        for k in range(3):
            for m in range(2):
                assert is_canonical(beams.V[k][:, m])
                assert is_canonical(beams.U[k][:, m])


class TestMaxSinr:
    def test_single_user_dominant_singular_pair(self):
        cfg, H = network(K=1, n=3, seed=5)
        beams = bd.max_sinr_design(H, cfg)
        U, s, Vh = np.linalg.svd(H[0, 0])
        assert abs(np.vdot(U[:, 0], beams.U[0][:, 0])) == pytest.approx(1.0, abs=1e-8)
        assert abs(np.vdot(Vh[0].conj(), beams.V[0][:, 0])) == pytest.approx(1.0, abs=1e-8)
        assert ch.sinr(beams, H, H, cfg, 0, 0) == pytest.approx(s[0] ** 2 / cfg.noise_var,
                                                                 rel=1e-8)

    def test_noise_limit_is_matched_filter(self):
        cfg, H = network(snr=-80.0, seed=6)
        beams = bd.max_sinr_design(H, cfg, iters=50)
        for k in range(3):
            mf = H[k, k] @ beams.V[k][:, 0]
            assert abs(np.vdot(mf / np.linalg.norm(mf), beams.U[k][:, 0])) == pytest.approx(
                1.0, abs=1e-6)

    def test_singular_covariance(self):
        cfg = ch.NetworkConfig(1, 2, 2, 1, 0.0, 0.01)
        H = ch.generate_estimates(cfg, 0).H_hat
        with pytest.raises(SingularCovarianceError):
            bd.max_sinr_design(H, cfg)

    def test_unit_norm(self):
        cfg, H = network(n=4, d=2, seed=7)
        assert bd.max_sinr_design(H, cfg).is_unit_norm()


class TestUpdates:
    def setup_method(self):
        self.cfg, self.H = network(K=1, kdb=15.0, snr=20.0, seed=8)
        U, s, Vh = np.linalg.svd(self.H[0, 0])
        self.u1, self.v1 = U[:, 0], Vh[0].conj()
        self.rate = 0.7 * np.log2(1 + s[0] ** 2 / self.cfg.noise_var)

    def start(self, v):
        return ch.BeamSet(v.reshape(1, 2, 1), self.u1.reshape(1, 2, 1))

    def test_transmit_reaches_dominant_direction(self):
        v0 = bd.canonical_phase(np.array([1.0, 1j]) / np.sqrt(2))
        rates = np.array([[self.rate]])
        v = bd.minimax_transmit_update(self.start(v0), self.H, self.cfg, rates, 0, 0)
        f = single_user_objective(self.H, self.cfg, self.u1, self.rate)
        assert abs(np.vdot(self.v1, v)) >= 1 - 1e-4
        assert f(v) <= grid_minimum(f) + 1e-4
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-10)
        assert is_canonical(v)

    def test_receive_reaches_dominant_direction(self):
        beams = ch.BeamSet(self.v1.reshape(1, 2, 1),
                           bd.canonical_phase(np.array([1.0, -1.0 + 0j]) / np.sqrt(2)).reshape(1, 2, 1))
        rates = np.array([[self.rate]])
        u = bd.min_outage_receive_update(beams, self.H, self.cfg, rates, 0, 0)
        v1 = self.v1

        def f(x):
            b = ch.BeamSet(v1.reshape(1, 2, 1), x.reshape(1, 2, 1))
            return out.outage_probability(b, self.H, self.cfg,
                                          out.OutageQuery(0, 0, self.rate)).probability
        assert abs(np.vdot(self.u1, u)) >= 1 - 1e-4
        assert f(u) <= grid_minimum(f) + 1e-4
        assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-10)
        assert is_canonical(u)

    @pytest.mark.parametrize("solver,restarts", [("coordinate-polish", 0),
                                                 ("coordinate-polish", 2),
                                                 ("random-restart-local", 1)])
    def test_never_worse_than_incumbent(self, solver, restarts):
        cfg, H = network(kdb=15.0, seed=9)
        beams = bd.iia_design(H, cfg, seed=9)
        rates = bd.stream_rates(beams, H, cfg, 0.1) * 1.05
        opts = bd.DesignOptions(solver=solver, restarts=restarts)
        before = bd.worst_outage(beams, H, cfg, rates)[0]
        v = bd.minimax_transmit_update(beams, H, cfg, rates, 1, 0, opts)
        trial = beams.copy()
        trial.V[1][:, 0] = v
        assert bd.worst_outage(trial, H, cfg, rates)[0] <= before + 1e-12
        assert is_canonical(v)

    def test_receive_never_worse(self):
        cfg, H = network(kdb=15.0, seed=10)
        beams = bd.max_sinr_design(H, cfg, seed=10)
        rates = bd.stream_rates(beams, H, cfg, 0.1)
        q = out.OutageQuery(2, 0, rates[2, 0])
        before = out.outage_probability(beams, H, cfg, q).probability
        trial = beams.copy()
        trial.U[2][:, 0] = bd.min_outage_receive_update(beams, H, cfg, rates, 2, 0)
        assert out.outage_probability(trial, H, cfg, q).probability <= before + 1e-12


class TestWorstOutage:
    def test_lexicographic_tie_break(self):
        cfg, H = network(seed=11)
        beams = bd.iia_design(H, cfg, seed=11)
        assert bd.worst_outage(beams, H, cfg, np.zeros((3, 1)))[1] == (0, 0)

    def test_picks_the_largest(self):
        cfg, H = network(kdb=15.0, seed=12)
        beams = bd.iia_design(H, cfg, seed=12)
        rates = np.array([[0.1], [0.1], [3.0]])
        p, arg = bd.worst_outage(beams, H, cfg, rates)
        assert arg == (2, 0)
        assert p == pytest.approx(out.outage_probability(
            beams, H, cfg, out.OutageQuery(2, 0, 3.0)).probability)


class TestDesign:
    def test_options_validation(self):
        with pytest.raises(ValueError):
            bd.DesignOptions(epsilon=0.0)
        with pytest.raises(ValueError):
            bd.DesignOptions(solver="annealing")
        with pytest.raises(ValueError):
            bd.DesignOptions(beam_tol=0.0)

    def test_needs_csi_error(self):
        cfg, H = network(kdb=np.inf)
        with pytest.raises(ValueError):
            bd.design_outage_rate(H, cfg)

    def test_monotone_feasible_and_better_than_baselines(self):
        cfg, H = network(seed=13)
        opts = bd.DesignOptions(epsilon=0.1)
        res = bd.design_outage_rate(H, cfg, opts)
        traj = res.sum_rate_trajectory
        assert all(b >= a - 1e-9 for a, b in zip(traj, traj[1:]))
        assert res.beams.is_unit_norm()
        for k in range(3):
            p = out.outage_probability(res.beams, H, cfg,
                                       out.OutageQuery(k, 0, res.rates[k, 0])).probability
            assert p <= 0.1 + 1e-4
        iia = bd.baseline_sum_rate(bd.iia_design(H, cfg), H, cfg, 0.1)
        msinr = bd.baseline_sum_rate(bd.max_sinr_design(H, cfg), H, cfg, 0.1)
        assert res.sum_rate >= max(iia, msinr) - 1e-9

    def test_explicit_initial_beams(self):
        cfg, H = network(seed=14)
        init = bd.iia_design(H, cfg, seed=14)
        opts = bd.DesignOptions(max_outer_iters=1)
        res = bd.design_outage_rate(H, cfg, opts, initial=init)
        assert res.outer_iterations == 1
        assert res.sum_rate_trajectory[0] == pytest.approx(
            bd.baseline_sum_rate(init, H, cfg, 0.1), abs=1e-12)
        assert res.sum_rate_trajectory[1] >= res.sum_rate_trajectory[0] - 1e-9
