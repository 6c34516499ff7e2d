import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import scalar_margin_geometric
from pciset import sdp
from pciset.gpssm import UncertaintyBounds, theta
from pciset.invariance import PolytopeConstraints, verify_controller
from pciset.simulator import LinearTruth, RolloutConfig, monte_carlo
from pciset.synthesis import (
    CellResult,
    SynthesisConfig,
    SynthesisInfeasible,
    bisect_probability,
    build_design_sdp,
    certificate_holds,
    certificate_margins,
    default_eta_grid,
    expected_iterations,
    feasibility_is_monotone_check,
    geometric_margin_holds,
    margin_constraint_holds,
    select_cell,
    synthesize,
)

DT = 0.1
A_DI = np.array([[1.0, DT], [0.0, 1.0]])
B_DI = np.array([[0.5 * DT**2], [DT]])
SMALL = UncertaintyBounds(1e-6, [1e-6, 1e-6], [1e-6, 1e-6])
ZERO = UncertaintyBounds(0.0, [0.0, 0.0], [0.0, 0.0])
BOX_DI = PolytopeConstraints.box([-5, -5], [5, 5], [-10], [10])
FAST = SynthesisConfig(eta_grid=np.linspace(0.5, 0.95, 6))


def scalar_bounds(Theta):
    """Bounds whose disturbance shape is exactly ``Theta`` for every p (n = 1)."""
    return UncertaintyBounds(Theta / 2, [0.0], [0.0])


GENEROUS_1D = PolytopeConstraints.box([-100], [100], [-100], [100])


class TestConfig:
    def test_defaults(self):
        c = SynthesisConfig()
        assert c.delta == 1e-3 and c.p_init == 0.5
        np.testing.assert_allclose(c.eta_grid, np.linspace(0.05, 0.95, 20))

    @pytest.mark.parametrize("kw", [{"delta": 0}, {"delta": 1}, {"eta_grid": []}, {"eta_grid": [0.0, 0.5]},
                                    {"eta_grid": [1.0]}, {"p_init": 1.0}, {"jobs": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthesisConfig(**kw)

    def test_echo_is_plain(self):
        d = SynthesisConfig().to_dict()
        assert isinstance(d["eta_grid"], list) and len(d["eta_grid"]) == 20


class TestDesignSdp:
    def test_scalar_margin_example(self):
        prob = build_design_sdp([[0.9]], [[1.0]], scalar_bounds(0.01), GENEROUS_1D, 0.3, 0.25)
        out = sdp.maximize_logdet(prob, "W")
        assert out.feasible
        # sqrt(Theta) <= (1 - sqrt(eta)) sqrt(W)  =>  W >= 0.01 / 0.25
        W = out.point["W"].item()
        assert W >= 0.04 * (1 - 1e-7)

    def test_scalar_margin_lower_bound_is_tight(self):
        # with the box pinning W below 0.04 the cell must be infeasible
        cons = PolytopeConstraints.box([-0.19], [0.19], [-100], [100])
        prob = build_design_sdp([[0.9]], [[1.0]], scalar_bounds(0.01), cons, 0.3, 0.25)
        assert sdp.solve(prob).status is sdp.Status.INFEASIBLE

    @pytest.mark.parametrize("eta", [0.05, 0.5, 0.95])
    def test_uncontrollable_expansion(self, eta):
        prob = build_design_sdp([[1.5]], [[0.0]], scalar_bounds(1e-4), GENEROUS_1D, 0.0, eta)
        assert not sdp.solve(prob).feasible

    @pytest.mark.parametrize("eta", [0.0, 1.0])
    def test_degenerate_eta(self, eta):
        with pytest.raises(ValueError, match="eta"):
            build_design_sdp([[0.9]], [[1.0]], scalar_bounds(0.01), GENEROUS_1D, 0.3, eta)

    def test_singular_theta(self):
        bounds = UncertaintyBounds(0.0, [1.0, 0.0], [1.0, 0.0])
        with pytest.raises(ValueError):
            build_design_sdp(A_DI, B_DI, bounds, BOX_DI, 0.5, 0.5)

    def test_zero_theta_drops_margin(self):
        prob = build_design_sdp(A_DI, B_DI, ZERO, BOX_DI, 0.5, 0.5)
        assert "disturbance_margin" not in [l.name for l in prob.lmis]

    def test_quadrotor_sized_problem(self):
        cons = PolytopeConstraints.box([-5, -7, -5, -7], [5, 7, 5, 7], [-5, -5], [5, 5])
        bounds = UncertaintyBounds(1e-3, np.full(4, 1e-5), np.full(4, 1e-4))
        prob = build_design_sdp(np.eye(4), np.ones((4, 2)), bounds, cons, 0.5, 0.9)
        assert prob.variables["W"].shape == (4, 4) and prob.variables["M"].shape == (2, 4)
        assert prob.count() == (1 + 1 + 4, 8)

    def test_contraction_block_matches_lyapunov_form(self, rng):
        W = np.diag([2.0, 3.0])
        M = rng.standard_normal((1, 2))
        prob = build_design_sdp(A_DI, B_DI, SMALL, BOX_DI, 0.5, 0.8)
        got = prob.lmis[0].evaluate({"W": W, "M": M})
        X = A_DI @ W + B_DI @ M
        np.testing.assert_allclose(got, np.block([[W, X], [X.T, 0.8 * W]]), atol=1e-15)
        assert np.array_equal(got, got.T)


class TestMarginEquivalence:
    @given(st.floats(0.01, 0.99), st.floats(1e-6, 1e3), st.floats(1e-6, 1e4))
    def test_implemented_iff_geometric(self, eta, Theta, W):
        gap = scalar_margin_geometric(eta, Theta, W)
        if abs(gap) > 1e-10 * math.sqrt(W):
            assert margin_constraint_holds(eta, Theta, W) == (gap <= 0)
        assert geometric_margin_holds(eta, Theta, W) == (gap <= 0)

    def test_literal_reading_disagrees(self):
        # H^T H = Theta would demand Theta W >= gap instead; it accepts this unsafe point
        eta, Theta, W = 0.25, 4.0, 1.0
        assert Theta * W >= (1 - math.sqrt(eta)) ** -2
        assert not geometric_margin_holds(eta, Theta, W)
        assert not margin_constraint_holds(eta, Theta, W)


class TestBisection:
    def test_stub_threshold(self):
        res = bisect_probability(lambda p: p <= 0.7, delta=1e-3)
        assert 0.7 - 1e-3 <= res.p_low <= 0.7
        assert res.p_up - res.p_low <= 1e-3
        assert res.iterations == expected_iterations(1e-3) == 10

    @given(st.floats(0.0, 1.0), st.sampled_from([1e-2, 1e-3, 1e-4]))
    def test_contract(self, threshold, delta):
        res = bisect_probability(lambda p: p <= threshold, delta=delta)
        assert res.p_up - res.p_low <= delta
        assert res.iterations == expected_iterations(delta)
        assert res.p_low <= threshold + 1e-15
        assert res.p_up >= threshold or res.p_up == 1.0

    def test_history_is_midpoint_sequence(self):
        res = bisect_probability(lambda p: True, delta=0.1)
        assert [p for p, _ in res.history] == [0.5, 0.75, 0.875, 0.9375]

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            bisect_probability(lambda p: True, delta=0.0)


class TestSelectCell:
    def cell(self, eta, logdet, status="Feasible"):
        return CellResult(0.5, eta, status, 1.0, logdet, np.eye(1), np.zeros((1, 1)), 0.0)

    def test_max_volume(self):
        cells = [self.cell(0.2, 1.0), self.cell(0.5, 2.0), self.cell(0.8, 1.5)]
        assert select_cell(cells).eta == 0.5

    def test_tie_goes_to_smallest_eta(self):
        cells = [self.cell(0.8, 2.0), self.cell(0.3, 2.0 - 1e-7), self.cell(0.5, 2.0)]
        assert select_cell(cells).eta == 0.3

    def test_infeasible_cells_ignored(self):
        cells = [self.cell(0.2, 9.0, "Inaccurate"), self.cell(0.4, 1.0)]
        assert select_cell(cells).eta == 0.4
        assert select_cell([self.cell(0.2, 9.0, "Infeasible")]) is None


@pytest.fixture(scope="module")
def result():
    return synthesize(A_DI, B_DI, SMALL, BOX_DI, FAST)


class TestSynthesize:
    def test_bisection_contract(self, result):
        assert result.p_up - result.p_low <= FAST.delta
        assert result.iterations == expected_iterations(FAST.delta)
        assert result.p_star >= 0.9

    def test_certificate(self, result):
        m = certificate_margins(result, A_DI, B_DI, SMALL, BOX_DI)
        assert certificate_holds(m), m
        assert m["gain_error"] <= 1e-8

    def test_volume_dominance(self, result):
        at_star = [e for e in result.feasibility_log if e["p"] == result.p_star and e["status"] == "Feasible"]
        best = max(e["logdet"] for e in at_star)
        assert result.logdet >= best - 1e-5 * max(1.0, abs(best))

    def test_passes_verification(self, result):
        fixed = verify_controller(SMALL, A_DI, B_DI, result.L, result.p_star, constraints=BOX_DI, P=result.P)
        free = verify_controller(SMALL, A_DI, B_DI, result.L, result.p_star, constraints=BOX_DI)
        assert fixed.certified or free.certified, (fixed.message, free.message)

    def test_monte_carlo(self, result):
        truth = LinearTruth(A_DI, B_DI, SMALL.noise)
        report = monte_carlo(truth, result.P, result.L, BOX_DI, RolloutConfig(horizon=50, n_rollouts=2000, seed=1))
        assert report.min_k_containment.value >= result.p_star
        assert report.all_time_safety.value >= 0.99

    def test_zero_disturbance_reaches_ceiling(self):
        res = synthesize(A_DI, B_DI, ZERO, BOX_DI, SynthesisConfig(eta_grid=[0.5, 0.9]))
        assert res.p_star >= 1 - 1e-3

    def test_infeasible_everywhere(self):
        huge = UncertaintyBounds(10.0, [10.0, 10.0], [10.0, 10.0])
        with pytest.raises(SynthesisInfeasible, match="p=0") as info:
            synthesize(A_DI, B_DI, huge, BOX_DI, SynthesisConfig(eta_grid=[0.5, 0.9]))
        assert len(info.value.cells) == 2

    def test_parallel_matches_serial(self):
        cfg = dict(eta_grid=[0.6, 0.9], delta=0.05)
        a = synthesize(A_DI, B_DI, SMALL, BOX_DI, SynthesisConfig(**cfg))
        b = synthesize(A_DI, B_DI, SMALL, BOX_DI, SynthesisConfig(jobs=2, **cfg))
        assert a.p_star == b.p_star and a.eta_star == b.eta_star
        np.testing.assert_array_equal(a.P, b.P)


class TestMonotone:
    P_SAMPLES = np.linspace(0.0, 0.99, 10)

    def test_noise_free(self):
        assert feasibility_is_monotone_check(A_DI, B_DI, ZERO, BOX_DI, 0.7, self.P_SAMPLES)

    def test_huge_noise(self):
        huge = UncertaintyBounds(10.0, [10.0, 10.0], [10.0, 10.0])
        assert feasibility_is_monotone_check(A_DI, B_DI, huge, BOX_DI, 0.7, self.P_SAMPLES)
        assert not sdp.solve(build_design_sdp(A_DI, B_DI, huge, BOX_DI, 0.0, 0.7)).feasible

    def test_theta_drives_monotonicity(self):
        d = theta(SMALL, 0.9) - theta(SMALL, 0.1)
        assert np.linalg.eigvalsh(d).min() >= 0

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            feasibility_is_monotone_check(A_DI, B_DI, SMALL, BOX_DI, 0.7, [0.5, 0.1])


def test_default_eta_grid():
    g = default_eta_grid()
    assert g[0] == 0.05 and g[-1] == 0.95 and len(g) == 20
