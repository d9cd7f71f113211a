import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import jv, yv

from boussinesq_annulus.diagnostics import write_csv
from boussinesq_annulus.eigensolver import full_spectrum_check
from boussinesq_annulus.equilibrium import PhysicsParams, linear_profile, make_equilibrium, make_potential
from boussinesq_annulus.errors import ArgError, CFLViolation, SeedError, VariantError
from boussinesq_annulus.spectral import divergence, make_grid, norm, vorticity
from boussinesq_annulus.timestepper import (
    SeedSpec,
    SimConfig,
    init,
    load_state,
    random_fields,
    run,
    save_state,
    state_from_fields,
    step_linear,
    stokes_fields,
    step_nonlinear,
)


def config(Nr=16, Nt=16, kind="log_radial", profile=None, nu=0.1, dt=1e-3, T=0.0, **kw):
    grid = make_grid(1, 2, Nr, Nt)
    eq = make_equilibrium(make_potential(kind, {}, grid), profile or linear_profile(1.0, 0.0))
    params = kw.pop("params", PhysicsParams(nu=nu))
    return SimConfig(params, eq, dt=dt, T_end=T, **kw)


def amplitude(state):
    return max(np.abs(state.omega.values).max(), np.abs(state.rho.values).max(), np.abs(state.u0).max())


class TestInit:
    def test_zero_amplitude(self):
        st = init(config(seed=SeedSpec("random", 0.0)))
        assert amplitude(st) == 0.0

    @pytest.mark.parametrize("kind", ["random", "stokes"])
    def test_amplitude_and_walls(self, kind):
        st = init(config(seed=SeedSpec(kind, 2e-3, seed=4, rho_scale=1.0)))
        assert norm(st.u, "L2") == pytest.approx(2e-3, rel=1e-12)
        assert norm(st.rho, "L2") == pytest.approx(2e-3, rel=1e-12)
        # random seeds are rough in r, so the discrete divergence is only small, not exact
        assert norm(divergence(st.u), "L2") <= (1e-6 if kind == "random" else 1e-8) * norm(st.u, "H1")
        assert np.abs(st.u.u_r.values[[0, -1]]).max() == 0

    def test_seed_changes_field(self):
        a = init(config(seed=SeedSpec("random", 1e-3, seed=1)))
        b = init(config(seed=SeedSpec("random", 1e-3, seed=2)))
        assert not np.allclose(a.omega.values, b.omega.values)

    def test_eigenmode_normalization(self):
        cfg = config(24, 32, profile="exp(z)")
        res = full_spectrum_check(cfg.equilibrium, cfg.params, range(9))
        st = init(replace(cfg, seed=SeedSpec("eigenmode", 1e-6), stability=res))
        assert norm(st.u, "L2") == pytest.approx(1e-6, rel=1e-9)
        np.testing.assert_allclose(st.rho.values, 1e-6 * res.eigenmode[2].values, atol=1e-20)

    def test_eigenmode_without_result(self):
        with pytest.raises(SeedError):
            init(config(seed=SeedSpec("eigenmode", 1e-6)))

    def test_unknown_seed(self):
        with pytest.raises(SeedError):
            init(config(seed=SeedSpec("gaussian", 1e-6)))

    def test_file_round_trip(self, tmp_path):
        cfg = config(seed=SeedSpec("random", 1e-3, seed=3, rho_scale=0.5))
        st = run(replace(cfg, T_end=5e-3))[0]
        save_state(tmp_path / "s", st)
        back = init(replace(cfg, seed=SeedSpec("file", 1.0, path=str(tmp_path / "s"))))
        assert np.array_equal(back.omega.values, st.omega.values)
        assert np.array_equal(back.rho.values, st.rho.values)
        assert np.array_equal(back.u0, st.u0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SeedError):
            load_state(config(), tmp_path / "nothing")


class TestConfig:
    def test_bad_dt(self):
        with pytest.raises(ArgError):
            config(dt=0.0)

    def test_bad_scheme(self):
        with pytest.raises(ArgError):
            config(scheme="RK4")

    def test_nonlinear_rejects_nonharmonic(self):
        cfg = config(kind="radial_linear", seed=SeedSpec("zero"))
        with pytest.raises(VariantError):
            init(cfg)

    def test_polar_variant_needs_constant_h(self):
        cfg = config(kind="radial_linear", profile="-z**2", mode="linear_polar", bc_set="both_stress_free")
        with pytest.raises(VariantError):
            cfg.stepper

    def test_theta_dependent_slip_rejected(self):
        with pytest.raises(ArgError):
            config(params=PhysicsParams(nu=0.1, alpha=lambda t: 0.1 * np.cos(t)))

    def test_cfl_abort(self):
        cfg = config(dt=5.0, seed=SeedSpec("random", 1.0))
        with pytest.raises(CFLViolation) as exc:
            run(replace(cfg, T_end=50.0))
        assert len(exc.value.series) >= 1


class TestStepping:
    @pytest.mark.parametrize("scheme", ["CNAB2", "IMEXBDF2"])
    def test_equilibrium_is_fixed_point(self, scheme):
        cfg = config(8, 8, scheme=scheme, seed=SeedSpec("zero"))
        st = init(cfg)
        for _ in range(10_000):
            st = step_nonlinear(st, cfg)
        assert amplitude(st) == 0.0

    def test_zero_linear(self):
        cfg = config(seed=SeedSpec("zero"), mode="linear_general")
        st = init(cfg)
        for _ in range(10):
            st = step_linear(st, cfg)
        assert amplitude(st) == 0.0

    def test_diffusion_decay_rate(self):
        # constant density: no buoyancy; linear mode: no advection; stress-free walls: Dirichlet vorticity
        nu, m = 0.5, 3
        cfg = config(24, 16, nu=nu, dt=1e-4, profile="1 + 0*z", mode="linear_general",
                     bc_set="both_stress_free", seed=SeedSpec("zero"))
        g = cfg.grid
        # Dirichlet eigenvalue of the Bessel operator on [1, 2]
        cross = lambda k: jv(m, k) * yv(m, 2 * k) - jv(m, 2 * k) * yv(m, k)
        ks = np.linspace(0.5, 10, 2000)
        vals = cross(ks)
        i = int(np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0])
        k = brentq(cross, ks[i], ks[i + 1], xtol=1e-14)
        prof = jv(m, k * g.r_nodes) * yv(m, k) - jv(m, k) * yv(m, k * g.r_nodes)
        # streamfunction with that vorticity, then let the stepper carry it
        from boussinesq_annulus.elliptic import poisson_mode

        psi_hat = np.zeros((g.Nr, g.nmodes), dtype=complex)
        psi_hat[:, m] = poisson_mode(g, m, prof)
        st = state_from_fields(cfg, psi_hat, np.zeros(g.Nr), np.zeros(g.shape))
        w0 = np.abs(st.omega.coeffs[:, m]).max()
        for _ in range(1000):
            st = step_linear(st, cfg)
        rate = -math.log(np.abs(st.omega.coeffs[:, m]).max() / w0) / st.t
        assert rate == pytest.approx(nu * k * k, rel=1e-4)

    def test_boundary_conditions_hold_after_steps(self):
        params = PhysicsParams(nu=0.1, alpha=0.3)
        cfg = config(24, 32, params=params, kind="uniform_vertical", profile="z", dt=1e-3,
                     seed=SeedSpec("stokes", 1e-2, seed=1, rho_scale=1.0))
        st = init(cfg)
        for _ in range(20):
            st = step_nonlinear(st, cfg)
        w = st.omega.values
        scale = np.abs(w).max()
        assert np.abs(w[0] - params.phi(1.0) * st.u.u_theta.values[0]).max() <= 1e-12 * scale
        assert np.abs(w[-1]).max() <= 1e-12 * scale
        assert np.abs(st.u.u_r.values[[0, -1]]).max() == 0
        # the evolved vorticity agrees with the curl of the recovered velocity
        assert np.abs(vorticity(st.u).values - w).max() <= 1e-4 * scale
        assert norm(divergence(st.u), "L2") <= 1e-8 * norm(st.u, "H1")

    def test_weighted_functional_nonincreasing(self):
        cfg = config(16, 16, kind="radial_linear", profile="-z", nu=1.0, dt=1e-3, mode="linear_polar",
                     bc_set="both_stress_free", seed=SeedSpec("random", 1e-2, seed=2, rho_scale=1.0))
        st = init(cfg)
        vals = []
        for _ in range(200):
            vals.append(norm(st.u, "L2") ** 2 + norm(st.rho, "L2") ** 2)
            st = step_linear(st, cfg, "polar_f_gr")
        assert np.all(np.diff(vals) <= 1e-14 * vals[0])

    def test_free_walls_conserve_radial_velocity_integral(self):
        # zero wall vorticity: int u_theta dr is invariant, angular momentum is not
        cfg = config(16, 16, kind="radial_linear", profile="-z", nu=1.0, dt=1e-2, mode="linear_polar",
                     bc_set="both_stress_free", seed=SeedSpec("zero"))
        g = cfg.grid
        u0 = 1e-2 * (random_fields(g, 2, "both_stress_free")[1] + 0.5 / g.r_nodes)
        st = state_from_fields(cfg, np.zeros((g.Nr, g.nmodes), dtype=complex), u0, np.zeros(g.shape))
        circ0 = np.sum(g.w_r * st.u0)
        mom0 = np.sum(g.w_r * g.r_nodes**2 * st.u0)
        for _ in range(300):
            st = step_linear(st, cfg, "polar_f_gr")
        # 1/r is not a polynomial, so the quadrature carries a small error
        assert np.sum(g.w_r * st.u0) == pytest.approx(circ0, rel=1e-7)
        assert abs(np.sum(g.w_r * g.r_nodes**2 * st.u0) - mom0) > 1e-3
        # what is left is the steady potential vortex
        np.testing.assert_allclose(st.u0 * g.r_nodes, circ0 / np.sum(g.w_r / g.r_nodes), rtol=1e-6)

    @pytest.mark.parametrize("kind", ["random", "stokes"])
    def test_free_wall_seeds_have_no_steady_vortex(self, kind):
        g = make_grid(1, 2, 16, 16)
        if kind == "random":
            _, u0, _ = random_fields(g, 1, "both_stress_free")
        else:
            _, u0, _ = stokes_fields(g, PhysicsParams(nu=1.0), 1, "both_stress_free")
        assert abs(np.sum(g.w_r * u0)) <= 1e-14 * np.abs(u0).max()

    def test_linear_matches_nonlinear_to_second_order(self):
        def diff(amp):
            base = config(16, 16, kind="uniform_vertical", profile="z", dt=1e-2,
                          seed=SeedSpec("random", amp, seed=5, rho_scale=1.0))
            a, b = init(base), init(replace(base, mode="linear_general"))
            lin = replace(base, mode="linear_general")
            for _ in range(100):
                a, b = step_nonlinear(a, base), step_linear(b, lin)
            return norm(a.u - b.u, "L2") / norm(b.u, "L2")

        d1, d2 = diff(1e-3), diff(5e-4)
        assert d1 < 1e-2
        assert d1 / d2 == pytest.approx(2.0, rel=0.1)  # relative difference is O(amplitude)

    def test_second_order_in_time(self):
        def final(dt):
            cfg = config(16, 16, kind="uniform_vertical", profile="z", nu=0.1, dt=dt, T=0.2,
                         seed=SeedSpec("stokes", 0.1, seed=1, rho_scale=1.0), cadence=10_000)
            st, _ = run(cfg)
            return st

        ref = final(0.005 / 8)
        errs = [norm(final(dt).u - ref.u, "L2") for dt in (0.01, 0.005)]
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


class TestRun:
    def test_t_end_zero(self):
        st, series = run(config(seed=SeedSpec("random", 1e-3)))
        assert len(series) == 1 and st.step == 0

    def test_cadence(self):
        _, series = run(config(T=0.01, dt=1e-3, cadence=3, seed=SeedSpec("random", 1e-3)))
        np.testing.assert_allclose(series.column("t"), [0, 3e-3, 6e-3, 9e-3, 1e-2], atol=1e-15)

    def test_deterministic(self):
        cfg = config(kind="uniform_vertical", profile="z", T=0.05, seed=SeedSpec("random", 1e-2, seed=3))
        a = write_csv(run(cfg)[1])
        b = write_csv(run(replace(cfg))[1])
        assert a == b

    def test_workers_do_not_change_results(self):
        cfg = config(16, 32, kind="uniform_vertical", profile="z", T=0.05, seed=SeedSpec("random", 1e-2, seed=3))
        a = write_csv(run(cfg)[1])
        b = write_csv(run(replace(cfg, workers=4))[1])
        assert a == b

    def test_hooks_and_snapshots(self):
        seen, snaps = [], []
        cfg = config(T=0.01, dt=1e-3, snapshot_every=5, seed=SeedSpec("random", 1e-3))
        run(cfg, hooks=[lambda st, row: seen.append(row["t"])], on_snapshot=lambda st: snaps.append(st.step))
        assert len(seen) == 11 and snaps == [5, 10]
