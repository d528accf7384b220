import math

import numpy as np
import pytest

from sdetci import (
    BlowupError,
    CallableModel,
    TimeGrid,
    brownian_increments,
    coupled_sup_distances,
    model_from_config,
    ou_singular_config,
    pair_sup_distances,
    simulate_em,
    simulate_ensemble,
    simulate_tamed,
    with_drift_shift,
)
from sdetci.simulate import (
    ensemble_from_csv,
    ensemble_to_csv,
    simulate_coupled,
    simulate_pair_independent,
    time_integrals,
)


def _ou(kappa=1.0):
    return model_from_config(ou_singular_config(kappa=kappa))


def _cubic():
    cfg = ou_singular_config()
    cfg["b2"] = {"family": "cubic_drag", "coef": 1.0}
    cfg["kappa1"] = 1.0
    cfg["r"] = 2.0
    return model_from_config(cfg)


class TestRngDiscipline:
    def test_same_path_id_reproducible(self):
        g = TimeGrid(1.0, 64)
        a = brownian_increments(7, g, 2, path_id=5)
        b = brownian_increments(7, g, 2, path_id=5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_path_ids_differ(self):
        g = TimeGrid(1.0, 64)
        a = brownian_increments(7, g, 1, path_id=0)
        b = brownian_increments(7, g, 1, path_id=1)
        assert np.abs(a - b).max() > 0

    def test_variance_scaling(self):
        g = TimeGrid(2.0, 8)
        draws = np.stack(
            [brownian_increments(0, g, 1, pid) for pid in range(4000)]
        )
        assert draws.var() == pytest.approx(g.h, rel=0.05)

    def test_chunk_partition_invariance(self):
        model = _ou()
        g = TimeGrid(1.0, 32)
        a = simulate_ensemble(model, [0.5], g, 3, 100, chunk=7)
        b = simulate_ensemble(model, [0.5], g, 3, 100, chunk=100)
        np.testing.assert_array_equal(a.states, b.states)

    def test_numpy_int_path_ids(self):
        g = TimeGrid(1.0, 8)
        a = brownian_increments(1, g, 1, path_id=np.int64(3))
        b = brownian_increments(1, g, 1, path_id=3)
        np.testing.assert_array_equal(a, b)


class TestSchemes:
    def test_ou_terminal_moments(self):
        kappa, T = 1.0, 1.0
        model = _ou(kappa)
        g = TimeGrid(T, 512)
        ens = simulate_ensemble(model, [1.0], g, 11, 20000)
        xT = ens.states[:, -1, 0]
        mean_exact = math.exp(-kappa * T)
        var_exact = (1 - math.exp(-2 * kappa * T)) / (2 * kappa)
        assert xT.mean() == pytest.approx(mean_exact, abs=4 * xT.std() / 140)
        assert xT.var() == pytest.approx(var_exact, rel=0.05)

    def test_em_blowup_detected(self):
        g = TimeGrid(1.0, 100)
        with pytest.raises(BlowupError):
            simulate_em(_cubic(), [20.0], g, 0)

    def test_tamed_survives_superlinear_drift(self):
        g = TimeGrid(1.0, 100)
        path = simulate_tamed(_cubic(), [20.0], g, 0)
        assert np.isfinite(path.states).all()
        assert abs(path.states[-1, 0]) < 5.0  # drag pulls it in

    def test_coupled_paths_share_noise(self):
        model = _ou()
        g = TimeGrid(1.0, 128)
        a, b = simulate_coupled(model, [0.0], [2.0], g, 9)
        gap = np.abs(a.states - b.states).max(axis=1)
        # synchronous coupling of a contracting drift: gap shrinks
        assert gap[-1] < gap[0]

    def test_independent_pair_uses_disjoint_streams(self):
        model = _ou()
        g = TimeGrid(1.0, 32)
        a, b = simulate_pair_independent(model, [0.0], g, 9, pair_id=3)
        assert a.seed_id == 6 and b.seed_id == 7
        assert np.abs(a.states - b.states).max() > 0


class TestReducers:
    def test_time_integrals_match_direct(self):
        model = _ou()
        g = TimeGrid(1.0, 64)
        vals = time_integrals(model, [1.0], g, 21, 50, power=2.0)
        ens = simulate_ensemble(model, [1.0], g, 21, 50)
        direct = np.trapezoid(
            np.linalg.norm(ens.states, axis=2) ** 2, g.nodes, axis=1
        )
        np.testing.assert_allclose(vals, direct, rtol=1e-12)

    def test_pair_sup_distance_positive(self):
        model = _ou()
        g = TimeGrid(1.0, 64)
        d = pair_sup_distances(model, [0.0], g, 2, 200)
        assert (d > 0).all()

    def test_coupled_sup_identical_models_zero(self):
        model = _ou()
        g = TimeGrid(1.0, 64)
        d = coupled_sup_distances(model, model, [0.3], [0.3], g, 2, 50)
        np.testing.assert_array_equal(d, 0.0)

    def test_drift_shift_twin(self):
        model = _ou()
        shifted = with_drift_shift(model, lambda t, x: 0.5 * np.ones_like(x))
        g = TimeGrid(1.0, 64)
        d = coupled_sup_distances(model, shifted, [0.0], [0.0], g, 2, 100)
        assert (d > 0).all() and d.max() < 1.0

    def test_streaming_matches_chunked(self):
        model = _ou()
        g = TimeGrid(1.0, 32)
        a = coupled_sup_distances(
            model, with_drift_shift(model, lambda t, x: np.ones_like(x)),
            [0.0], [0.0], g, 5, 60, chunk=13,
        )
        b = coupled_sup_distances(
            model, with_drift_shift(model, lambda t, x: np.ones_like(x)),
            [0.0], [0.0], g, 5, 60, chunk=60,
        )
        np.testing.assert_array_equal(a, b)


class TestSerialization:
    def test_csv_round_trip(self, tmp_path):
        model = _ou()
        g = TimeGrid(0.5, 16)
        ens = simulate_ensemble(model, [0.2], g, 4, 5)
        path = tmp_path / "ens.csv"
        ensemble_to_csv(ens, path)
        back = ensemble_from_csv(path)
        np.testing.assert_array_equal(back.states, ens.states)
        assert back.grid == ens.grid
        assert back.model_fingerprint == ens.model_fingerprint

    def test_callable_model_adapter(self):
        bm = CallableModel(
            1,
            lambda t, x: np.zeros_like(x),
            lambda t, x: np.broadcast_to(np.eye(1), (len(x), 1, 1)),
        )
        g = TimeGrid(1.0, 16)
        path = simulate_em(bm, [0.0], g, 0)
        assert path.states.shape == (17, 1)
