import math

import numpy as np
import pytest

from sdetci import (
    CallableModel,
    GradientTooLarge,
    GridFunction,
    Homeomorphism,
    NotContractive,
    SpaceGrid,
    build_phi,
    check_gradient_estimate,
    dini_benchmark_config,
    estimate_P0,
    model_from_config,
    ou_singular_config,
    pathwise_consistency,
    solve_u_elliptic,
    solve_u_parabolic,
    solve_u_parabolic_auto,
    transformed_model,
    verify_tilde_conditions,
)
from sdetci.errors import FitFailure, OutOfDomain
from sdetci.models import DiniModelSpec, ModulusSpec
from sdetci.zvonkin import (
    apply_parabolic_map,
    elliptic_lambda_sweep,
    identity_transform,
)


def _unit_sigma(t, x):
    return np.broadcast_to(np.eye(1), (len(x), 1, 1)).copy()


def _synthetic_dini(a=0.05, lam=2.0):
    """Model whose exact transform field is u(x) = a sin x at level lam.

    The irregular drift part is reverse-engineered so that u solves the
    stationary transform equation with B(x) = -x and unit diffusion.
    """
    B = lambda t, x: -x

    def b(t, x):
        return (lam * a * np.sin(x) + 0.5 * a * np.sin(x)
                + x * a * np.cos(x)) / (1.0 + a * np.cos(x))

    return DiniModelSpec(
        d=1, T=1.0, B=B, b=b, sigma=_unit_sigma,
        modulus=ModulusSpec("lipschitz", L=3.0), b_sup=3.0,
        bounds={"grad_B": 1.0, "sigma": 1.0, "grad_sigma": 0.0,
                "grad2_sigma": 0.0, "inv_a": 1.0},
    )


def _sin_phi(a=0.05, m=4097, R=10.0, lam=2.0):
    sg = SpaceGrid(R, m, 1)
    u = GridFunction(sg, (a * np.sin(sg.axes[0]))[:, None])
    return Homeomorphism(u=u, grad_bound=u.grad_bound(), lam=lam, threshold=0.5)


class TestGridFunction:
    def test_interpolation_exact_on_nodes(self):
        sg = SpaceGrid(2.0, 33, 1)
        u = GridFunction(sg, np.tanh(sg.axes[0])[:, None])
        np.testing.assert_allclose(
            u(sg.points())[:, 0], np.tanh(sg.axes[0]), atol=1e-14
        )

    def test_gradient_accuracy(self):
        sg = SpaceGrid(3.0, 601, 1)
        u = GridFunction(sg, np.sin(sg.axes[0])[:, None])
        assert u.grad_bound() == pytest.approx(1.0, abs=1e-4)

    def test_out_of_domain(self):
        sg = SpaceGrid(1.0, 11, 1)
        u = GridFunction(sg, np.zeros((11, 1)))
        with pytest.raises(OutOfDomain):
            u(np.array([[5.0]]))

    def test_save_load_round_trip(self, tmp_path):
        sg = SpaceGrid(2.0, 17, 1)
        times = np.linspace(0, 1, 5)
        vals = np.random.default_rng(0).normal(size=(5, 17, 1))
        u = GridFunction(sg, vals, times)
        f = tmp_path / "u.npz"
        u.save(f)
        back = GridFunction.load(f)
        np.testing.assert_array_equal(back.values, vals)
        np.testing.assert_array_equal(back.times, times)
        assert back.grid == sg

    def test_2d_grid(self):
        sg = SpaceGrid(1.0, 21, 2)
        pts = sg.points()
        vals = np.stack([pts[:, 0] * pts[:, 1], pts[:, 0]], axis=1)
        u = GridFunction(sg, vals.reshape(21, 21, 2))
        q = np.array([[0.3, -0.4]])
        out = u(q)
        assert out[0, 0] == pytest.approx(-0.12, abs=1e-3)
        assert out[0, 1] == pytest.approx(0.3, abs=1e-12)


class TestHomeomorphism:
    def test_inverse_accuracy(self):
        phi = _sin_phi()
        y = np.array([[0.7], [-2.1], [3.3]])
        x = phi.phi_inv(y, tol=1e-12)
        np.testing.assert_allclose(phi.phi(x), y, atol=1e-10)

    def test_inverse_contracts_geometrically(self):
        phi = _sin_phi(a=0.3)
        hist = []
        phi.phi_inv(np.array([[1.0]]), tol=1e-12, history=hist)
        assert max(hist[1:]) < 0.5  # ratio bounded by the gradient bound

    def test_build_phi_threshold(self):
        phi = _sin_phi(a=0.05)
        assert build_phi(phi.u, threshold=0.5).grad_bound < 0.1
        steep = _sin_phi(a=0.9)
        with pytest.raises(GradientTooLarge):
            build_phi(steep.u, threshold=0.5)

    def test_lipschitz_ratios_sandwich(self):
        phi = _sin_phi(a=0.2)
        r = phi.lipschitz_ratios(n_pairs=500, seed=1)
        g = phi.grad_bound
        assert r.min() >= 1 - g - 1e-8 and r.max() <= 1 + g + 1e-8

    def test_jacobian_identity_for_zero_u(self):
        sg = SpaceGrid(2.0, 21, 1)
        u = GridFunction(sg, np.zeros((21, 1)))
        phi = Homeomorphism(u, 0.0, 0.0, 1.0)
        jac = phi.jacobian(np.array([[0.5]]))
        np.testing.assert_array_equal(jac[0], np.eye(1))


class TestParabolicSolver:
    def test_benchmark_contracts(self):
        model = model_from_config(dini_benchmark_config(sup=1.0))
        sg = SpaceGrid(8.0, 129, 1)
        u, hist = solve_u_parabolic(model, 8.0, sg, n_time=32, tol=1e-8)
        ratios = [r for _, r in hist if r is not None]
        assert max(ratios) < 1.0
        assert u.sup_norm() <= 1.5 / 8.0

    def test_residual_small(self):
        model = model_from_config(dini_benchmark_config(sup=1.0))
        sg = SpaceGrid(8.0, 129, 1)
        u, _ = solve_u_parabolic(model, 8.0, sg, n_time=32, tol=1e-9)
        assert apply_parabolic_map(model, 8.0, u) <= 2e-9

    def test_large_drift_small_lambda_not_contractive(self):
        model = model_from_config(dini_benchmark_config(sup=10.0))
        sg = SpaceGrid(8.0, 65, 1)
        with pytest.raises(NotContractive):
            solve_u_parabolic(model, 1e-3, sg, n_time=16, tol=1e-12)

    def test_auto_lambda_accepts(self):
        model = model_from_config(dini_benchmark_config(sup=1.0))
        sg = SpaceGrid(8.0, 65, 1)
        phi, hist, trace = solve_u_parabolic_auto(model, sg, n_time=16, tol=1e-7)
        assert trace[-1][1] == "accepted"
        assert phi.grad_bound < 0.5

    def test_zero_drift_gives_zero_u(self):
        cfg = dini_benchmark_config(sup=1.0)
        cfg["b"] = {"family": "zero"}
        model = model_from_config(cfg)
        sg = SpaceGrid(4.0, 33, 1)
        u, _ = solve_u_parabolic(model, 8.0, sg, n_time=8, tol=1e-12)
        assert u.sup_norm() == 0.0


class TestEllipticSolver:
    def _model(self):
        cfg = ou_singular_config(kappa=1.0)
        cfg["b1"] = {"family": "radial_singularity", "c": 0.3, "gamma": 0.4}
        return model_from_config(cfg)

    def test_matches_dense_solve(self):
        from scipy import sparse as sp

        from sdetci.zvonkin import _diffusion_values, _operator_matrix

        model = self._model()
        sg = SpaceGrid(10.0, 201, 1)
        u = solve_u_elliptic(model, 4.0, sg, tol=1e-12)
        pts = sg.points()
        A = _operator_matrix(
            sg, _diffusion_values(model.sigma, pts), None, neumann=False
        ).toarray()
        op = A - 4.0 * np.eye(len(pts))
        b1 = model.b1(pts)
        uu = np.zeros(len(pts))
        for _ in range(100):
            du = np.gradient(uu, sg.dx)
            new = np.linalg.solve(op, b1[:, 0] - b1[:, 0] * du)
            if np.abs(new - uu).max() < 1e-12:
                uu = new
                break
            uu = new
        assert np.abs(uu - u.values[:, 0]).max() < 1e-9

    def test_lambda_sweep_decays(self):
        model = self._model()
        sg = SpaceGrid(10.0, 401, 1)
        res = elliptic_lambda_sweep(model, [2.0, 4.0, 8.0, 16.0], sg)
        assert res["monotone_decay"]
        # d=1, p=4 decay exponent is (d/p - 1)/2 = -0.375 (up to grid effects)
        assert res["slope"] <= -0.3

    def test_zero_singular_part_gives_zero_u(self):
        model = model_from_config(ou_singular_config())
        sg = SpaceGrid(6.0, 101, 1)
        u = solve_u_elliptic(model, 4.0, sg)
        assert u.sup_norm() == 0.0


class TestSemigroupMonteCarlo:
    def _bm(self):
        return CallableModel(
            1, lambda t, x: np.zeros_like(x),
            lambda t, x: np.broadcast_to(np.eye(1), (len(x), 1, 1)),
        )

    def test_estimate_P0_gaussian_cdf(self):
        # P_{0,t} 1_{x > 0} at x0 = 0.25, t = 0.25: N((0.25 - 0) / 0.5)
        bm = self._bm()
        f = lambda x: (x[:, 0] > 0).astype(float)
        val, se = estimate_P0(bm, f, 0.0, 0.25, [0.25], n=40000, seed=3)
        from scipy.stats import norm

        assert val == pytest.approx(norm.cdf(0.5), abs=4 * se + 1e-3)

    def test_gradient_estimate_heat_kernel(self):
        bm = self._bm()
        f = lambda x: np.sign(x[:, 0])
        res = check_gradient_estimate(
            bm, f, [0.0], gaps=[0.1, 0.2, 0.4], n=40000, seed=11
        )
        for gap, grad in zip(res["gaps"], res["gradients"]):
            exact = 2.0 / math.sqrt(2 * math.pi * gap)
            assert grad == pytest.approx(exact, rel=0.08)
        assert res["exponent"] == pytest.approx(-0.5, abs=0.15)


class TestTransformedModel:
    def test_identity_transform_reproduces_drift(self):
        model = model_from_config(ou_singular_config(kappa=1.0))
        sg = SpaceGrid(6.0, 101, 1)
        tm = identity_transform(model, sg)
        x = np.array([[0.5], [-1.0]])
        np.testing.assert_allclose(tm.drift(0.0, x), -x, atol=1e-12)
        np.testing.assert_allclose(
            tm.sigma(0.0, x), np.broadcast_to(np.eye(1), (2, 1, 1)), atol=1e-12
        )

    def test_tilde_constants_identity_ou(self):
        model = model_from_config(ou_singular_config(kappa=1.0))
        sg = SpaceGrid(6.0, 101, 1)
        tm = identity_transform(model, sg)
        fit = verify_tilde_conditions(tm, seed=2)
        assert fit["tag"] == "dissipative"
        assert fit["kappa1"] == pytest.approx(1.0, rel=1e-6)
        assert fit["kappa2"] == pytest.approx(0.0, abs=1e-9)
        assert fit["kappa3"] == pytest.approx(1.0, rel=0.2)

    def test_tilde_fit_failure_for_expanding_drift(self):
        cfg = ou_singular_config(kappa=1.0)
        cfg["b2"] = {"family": "linear", "matrix": [[1.0]]}  # repulsive
        model = model_from_config(cfg)
        sg = SpaceGrid(6.0, 101, 1)
        tm = identity_transform(model, sg)
        with pytest.raises(FitFailure):
            verify_tilde_conditions(tm, seed=2)

    def test_linear_growth_fit(self):
        cfg = ou_singular_config(kappa=1.0)
        cfg["tag"] = "linear_growth"
        cfg["kappa4"] = 1.0
        model = model_from_config(cfg)
        sg = SpaceGrid(6.0, 101, 1)
        fit = verify_tilde_conditions(identity_transform(model, sg), seed=2)
        assert fit["kappa4"] <= 1.0 + 1e-9

    def test_sigma_sup_measured(self):
        model = model_from_config(ou_singular_config())
        sg = SpaceGrid(6.0, 101, 1)
        tm = identity_transform(model, sg)
        assert tm.sigma_sup() == pytest.approx(1.0, abs=1e-12)


class TestPathwiseConsistency:
    def test_error_decays_with_mesh(self):
        model = _synthetic_dini()
        phi = _sin_phi()
        res = pathwise_consistency(
            model, phi, 2.0, [0.3], [64, 128, 256], seed=3, n_paths=128
        )
        errs = [e for _, e in res["rows"]]
        assert errs[0] > errs[-1]
        assert errs[-1] < 5e-3

    def test_zero_u_is_exact(self):
        B = lambda t, x: -x
        model = DiniModelSpec(
            d=1, T=1.0, B=B, b=lambda t, x: np.zeros_like(x),
            sigma=_unit_sigma, modulus=ModulusSpec("lipschitz", L=0.0),
            b_sup=0.0,
            bounds={"grad_B": 1.0, "sigma": 1.0, "grad_sigma": 0.0,
                    "grad2_sigma": 0.0, "inv_a": 1.0},
        )
        sg = SpaceGrid(10.0, 101, 1)
        u0 = GridFunction(sg, np.zeros((101, 1)))
        phi0 = Homeomorphism(u0, 0.0, 0.0, 0.5)
        res = pathwise_consistency(
            model, phi0, 0.0, [0.3], [32, 64], seed=3, n_paths=32
        )
        assert all(e == 0.0 for _, e in res["rows"])
