import math

import numpy as np
import pytest

from conftest import mild_coeffs
from mvfhn.errors import ConfigError
from mvfhn.fields import SpatialGrid, l2_sq_array
from mvfhn.integrator import SchemeConfig, make_initial_ensemble, simulate
from mvfhn.model import canonical_instance
from mvfhn.splitting import (EstimateReport, append_estimates_csv,
                             detect_transient, energy_monitor,
                             fourth_moment_monitor, h1_monitor,
                             simulate_v1, simulate_v2, simulate_with_split,
                             tail_monitor, tail_profile)

GRID = SpatialGrid(1, 8.0, 64)


def decay_delta(total_sq, K=16):
    kinv2 = np.arange(1, K + 1, dtype=float)**-2
    return math.sqrt(total_sq / float(np.sum(kinv2**2))) * kinv2


class TestV1:
    def test_zero_initial_stays_zero(self):
        out = simulate_v1(np.zeros((4,) + GRID.shape), 2.0,
                          decay_delta(0.5), T=0.5, dt=1e-3, master_seed=1,
                          grid=GRID)
        assert np.all(out["final"] == 0.0)
        assert np.all(out["mean_v1_l2sq"] == 0.0)

    def test_exact_second_moment_law(self):
        # Ito oracle: d E||v1||^2 / dt = -(2 gamma - sum delta^2) E||v1||^2,
        # solved in closed form; MC within 3 standard errors
        gamma, total = 2.0, 0.5
        M = 2048
        bump = np.exp(-GRID.x**2 / 2.0)
        xi2 = np.tile(bump, (M, 1))
        out = simulate_v1(xi2, gamma, decay_delta(total), T=1.0, dt=1e-3,
                          master_seed=2, grid=GRID)
        norms = l2_sq_array(out["final"], GRID)
        mc = float(np.mean(norms))
        se = float(np.std(norms, ddof=1)) / math.sqrt(M)
        expect = float(bump**2 @ GRID.weights) \
            * math.exp(-(2 * gamma - total) * 1.0)
        assert abs(mc - expect) <= 3.0 * se

    def test_log_mean_is_affine_with_known_slope(self):
        gamma, total = 2.0, 0.5
        M = 2048
        bump = np.exp(-GRID.x**2 / 2.0)
        out = simulate_v1(np.tile(bump, (M, 1)), gamma, decay_delta(total),
                          T=1.0, dt=1e-3, master_seed=3, grid=GRID,
                          checkpoint_stride=50)
        slope = np.polyfit(out["times"], np.log(out["mean_v1_l2sq"]), 1)[0]
        # -(2 gamma - sum delta^2) = -3.5; 0.25 is ~3 MC standard errors
        # of the endpoint log-difference at this ensemble size
        assert abs(slope + (2 * gamma - total)) < 0.25

    def test_noise_free_deterministic_decay(self):
        gamma, dt = 2.0, 1e-3
        M = 8
        bump = np.exp(-GRID.x**2 / 2.0)
        out = simulate_v1(np.tile(bump, (M, 1)), gamma,
                          np.zeros(4), T=0.1, dt=dt, master_seed=4,
                          grid=GRID)
        expect = bump / (1.0 + dt * gamma)**100
        # identical across members, matching the scalar recurrence
        for j in range(M):
            assert np.array_equal(out["final"][j], out["final"][0])
        assert np.max(np.abs(out["final"][0] - expect)) < 1e-14
        # and within O(dt) of the continuum decay e^{-2 gamma t}
        mean_sq = float(np.mean(l2_sq_array(out["final"], GRID)))
        cont = float(bump**2 @ GRID.weights) * math.exp(-2 * gamma * 0.1)
        assert abs(mean_sq - cont) / cont < 1e-3

    def test_mean_decay_condition_enforced(self):
        with pytest.raises(ConfigError):
            simulate_v1(np.zeros((2,) + GRID.shape), 0.1,
                        decay_delta(0.5), T=0.1, dt=1e-3, master_seed=5,
                        grid=GRID)


class TestV2AndSuperposition:
    def test_zero_sources_zero_v2(self):
        c = mild_coeffs(noise=0.0, forcing=0.0, delta_total_sq=0.1)
        u_paths = np.zeros((101, 4) + GRID.shape)
        out = simulate_v2(u_paths, c, T=0.1, dt=1e-3, master_seed=6,
                          grid=GRID)
        assert np.all(out["final"] == 0.0)

    def test_v1_plus_v2_reconstructs_v(self):
        # the v-equation is affine in v: with shared increments and the
        # same scheme the split parts sum to the coupled v exactly
        c = canonical_instance(0.1, 8, 1.0)
        cfg = SchemeConfig(dt=1e-3, ensemble_size=8, checkpoint_stride=20,
                           track_w2=False, record_paths=True)
        init = make_initial_ensemble("gaussian_bump", GRID, 8, 7,
                                     dt=cfg.dt)
        res = simulate(init, c, cfg, 0.2, master_seed=7)
        v1 = simulate_v1(init.V, c.gamma, c.delta, T=0.2, dt=cfg.dt,
                         master_seed=7, grid=GRID)
        v2 = simulate_v2(res.u_paths, c, T=0.2, dt=cfg.dt, master_seed=7,
                         grid=GRID)
        recon = v1["final"] + v2["final"]
        num = float(np.mean(l2_sq_array(res.final.V - recon, GRID)))
        den = float(np.mean(l2_sq_array(res.final.V, GRID)))
        assert math.sqrt(num / den) < 1e-8

    def test_split_runner_residual(self):
        c = canonical_instance(0.1, 8, 1.0)
        cfg = SchemeConfig(dt=1e-3, ensemble_size=8, checkpoint_stride=25,
                           track_w2=False)
        init = make_initial_ensemble("gaussian_bump", GRID, 8, 8, dt=cfg.dt)
        out = simulate_with_split(init, c, cfg, 0.3, master_seed=8)
        assert out.consistency_residual < 1e-8

    def test_v2_h1_series_levels_off(self):
        c = canonical_instance(0.1, 8, 1.0)
        cfg = SchemeConfig(dt=2e-3, ensemble_size=16, checkpoint_stride=10,
                           track_w2=False)
        init = make_initial_ensemble("gaussian_bump", GRID, 16, 9, dt=cfg.dt)
        out = simulate_with_split(init, c, cfg, 2.0, master_seed=9)
        series = out.mean_grad_v2_sq
        quarter = len(series) // 4
        tail_t = out.times[-quarter:]
        tail_v = series[-quarter:]
        level = float(np.mean(tail_v))
        slope = abs(float(np.polyfit(tail_t, tail_v, 1)[0]))
        assert slope < 1e-3 * max(level, 1e-30) * 50  # per unit time, lax
        assert np.all(np.isfinite(out.mean_v2_h1sq))


def canonical_series(seed=11, t_end=3.0, M=64, scale=1.0, dt=2e-3,
                     initial="gaussian_bump", coeffs=None,
                     grid=GRID):
    c = coeffs if coeffs is not None else canonical_instance(0.1, 8, 1.0)
    cfg = SchemeConfig(dt=dt, ensemble_size=M, checkpoint_stride=10,
                       track_w2=False,
                       allow_unchecked=not c.checked)
    init = make_initial_ensemble(initial, grid, M, seed, scale=scale,
                                 dt=cfg.dt)
    return simulate(init, c, cfg, t_end, master_seed=seed).series


class TestMonitors:
    def test_pure_dissipation_passes_with_tiny_level(self):
        c = mild_coeffs(lam=2.0, gamma=3.0, alpha=0.5, beta=0.5,
                        noise=0.0, forcing=0.0, delta_total_sq=0.0)
        series = canonical_series(seed=12, t_end=6.0, M=8, coeffs=c)
        rep = energy_monitor(series, eta=0.1)
        assert rep.passed
        assert rep.fitted_level < 1e-4
        # energy decays monotonically
        e = series.column("energy")
        assert np.all(np.diff(e) <= 1e-15)

    def test_canonical_energy_scale_invariant_level(self):
        s1 = canonical_series(seed=13, scale=1.0)
        s4 = canonical_series(seed=13, scale=4.0)
        r1 = energy_monitor(s1, eta=0.1)
        r4 = energy_monitor(s4, eta=0.1)
        assert r1.passed and r4.passed
        assert abs(r1.fitted_level - r4.fitted_level) \
            <= 0.15 * max(r1.fitted_level, r4.fitted_level)

    def test_margin_violating_instance_fails(self):
        c = mild_coeffs(lam=0.05, gamma=1.05, alpha=0.5, beta=0.5,
                        noise=0.0, forcing=0.0, delta_total_sq=0.0)
        c.G1 = lambda t, x, u, m2: 5.0 * np.exp(-np.asarray(x)**2)
        series = canonical_series(seed=14, t_end=3.0, M=8, coeffs=c)
        rep = energy_monitor(series, eta=0.1)
        assert not rep.passed
        assert rep.details.get("overall_slope", 0.0) > 0.0

    def test_energy_monitor_records_h1_integral(self):
        from mvfhn.model import forcing_integrals
        c = canonical_instance(0.1, 8, 1.0)
        series = canonical_series(seed=15, coeffs=c)
        i2 = forcing_integrals(c, tau=3.0, eta=0.1)["I2"]
        rep = energy_monitor(series, eta=0.1, i2=i2)
        assert rep.passed
        assert math.isfinite(rep.details["h1_integral_per_forcing"])

    def test_fourth_moment_scale_invariant(self):
        s1 = canonical_series(seed=16, scale=1.0)
        s4 = canonical_series(seed=16, scale=4.0)
        r1 = fourth_moment_monitor(s1)
        r4 = fourth_moment_monitor(s4)
        assert r1.passed and r4.passed
        assert abs(r1.fitted_level - r4.fitted_level) \
            <= 0.20 * max(r1.fitted_level, r4.fitted_level)

    def test_fourth_moment_zero_forcing_decays(self):
        c = mild_coeffs(lam=2.0, gamma=3.0, alpha=0.5, beta=0.5,
                        noise=0.0, forcing=0.0, delta_total_sq=0.0)
        series = canonical_series(seed=17, t_end=6.0, M=8, coeffs=c)
        rep = fourth_moment_monitor(series)
        assert rep.passed
        # decayed to a negligible fraction of the initial moment
        assert rep.fitted_level < 1e-4 * series.column("m4")[0]

    def test_fourth_moment_outlier_member_absorbed(self):
        # one member scaled x100 still lands on the common level
        c = canonical_instance(0.1, 8, 1.0)
        cfg = SchemeConfig(dt=2e-3, ensemble_size=16, checkpoint_stride=10,
                           track_w2=False)
        init = make_initial_ensemble("gaussian_bump", GRID, 16, 18,
                                     dt=cfg.dt)
        init.U[0] *= 100.0
        init.V[0] *= 100.0
        heavy = simulate(init, c, cfg, 3.0, master_seed=18).series
        r_heavy = fourth_moment_monitor(heavy)
        base = canonical_series(seed=18, M=16)
        r_base = fourth_moment_monitor(base)
        assert r_heavy.passed
        assert abs(r_heavy.fitted_level - r_base.fitted_level) \
            <= 0.20 * max(r_heavy.fitted_level, r_base.fitted_level)

    def test_tail_monitor_canonical_gate(self):
        series = canonical_series(seed=19)
        rep = tail_monitor(series, gate=1e-4)
        assert rep.passed
        assert rep.details["post_transient_tail"] < 1e-4

    def test_tail_at_zero_radius_fails_against_tight_gate(self):
        c = canonical_instance(0.1, 8, 1.0)
        cfg = SchemeConfig(dt=2e-3, ensemble_size=16, checkpoint_stride=10,
                           track_w2=False, tail_radius=0.0)
        init = make_initial_ensemble("gaussian_bump", GRID, 16, 20,
                                     dt=cfg.dt)
        series = simulate(init, c, cfg, 3.0, master_seed=20).series
        # tail at radius zero is the full energy, far above the gate
        rep = tail_monitor(series, gate=1e-4)
        assert not rep.passed

    def test_tail_profile_non_increasing(self):
        c = canonical_instance(0.1, 8, 1.0)
        cfg = SchemeConfig(dt=2e-3, ensemble_size=16, checkpoint_stride=10,
                           track_w2=False)
        init = make_initial_ensemble("gaussian_bump", GRID, 16, 21,
                                     dt=cfg.dt)
        final = simulate(init, c, cfg, 1.0, master_seed=21).final
        radii = np.linspace(0.0, 6.0, 9)
        prof = tail_profile(final, radii)
        assert np.all(np.diff(prof) <= 1e-18)
        assert prof[radii >= 4.0].max() < 1e-4

    def test_h1_monitor_zero_dynamics(self):
        c = mild_coeffs(noise=0.0, forcing=0.0, delta_total_sq=0.0)
        cfg = SchemeConfig(dt=1e-2, ensemble_size=4, checkpoint_stride=2,
                           track_w2=False, allow_unchecked=True)
        shape = (4,) + GRID.shape
        from mvfhn.integrator import EnsembleState
        init = EnsembleState(GRID, np.zeros(shape), np.zeros(shape), 0.0, 0)
        series = simulate(init, c, cfg, 1.0, master_seed=22).series
        rep = h1_monitor(series)
        assert rep.passed
        assert rep.fitted_level <= 1e-12

    def test_h1_monitor_stable_under_longer_run(self):
        r_short = h1_monitor(canonical_series(seed=23, t_end=3.0))
        r_long = h1_monitor(canonical_series(seed=23, t_end=6.0))
        assert r_short.passed and r_long.passed
        assert abs(r_short.fitted_level - r_long.fitted_level) \
            <= 0.10 * max(r_short.fitted_level, r_long.fitted_level)

    def test_h1_monitor_smooths_rough_data(self):
        r_smooth = h1_monitor(canonical_series(seed=24))
        r_rough = h1_monitor(canonical_series(seed=24,
                                              initial="white_noise"))
        assert r_rough.passed
        assert abs(r_rough.fitted_level - r_smooth.fitted_level) \
            <= 0.20 * max(r_rough.fitted_level, r_smooth.fitted_level)

    def test_report_csv_appends(self, tmp_path):
        series = canonical_series(seed=25, t_end=2.0, M=8)
        rep = tail_monitor(series, gate=1e-4)
        path = tmp_path / "estimates.csv"
        append_estimates_csv(path, [rep])
        append_estimates_csv(path, [rep])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "name,fitted_level,fitted_rate,gate,pass"
        assert len(lines) == 3

    def test_detect_transient_on_step_series(self):
        values = np.concatenate([np.linspace(10, 1, 30), np.ones(40)])
        idx = detect_transient(np.arange(70, dtype=float), values)
        assert idx is not None
        assert 20 <= idx <= 35
        rising = np.linspace(0.0, 50.0, 70)
        assert detect_transient(np.arange(70, dtype=float), rising) is None
