import itertools
import math
import os

import numpy as np
import pytest

from conftest import random_fields, random_law
from mvfhn import rng
from mvfhn.errors import CapacityError, StructuralError
from mvfhn.fields import FieldPair, GridField, SpatialGrid
from mvfhn.measures import (EXACT_ATOM_CAP, EmpiricalLaw, TestFunctionFamily,
                            bounded_lipschitz_distance, distance_line,
                            load_law, moment_ball_contains, save_law,
                            second_moment, wasserstein2_entropic,
                            wasserstein2_exact, wasserstein2_oracle)


def dirac(grid, u, v):
    return EmpiricalLaw(grid=grid, u_stack=u[None], v_stack=v[None])


class TestEmpiricalLaw:
    def test_weights_normalized_and_zero_atoms_dropped(self, grid_small):
        u = random_fields(grid_small, 3, 1)
        v = random_fields(grid_small, 3, 2)
        law = EmpiricalLaw(grid=grid_small, u_stack=u, v_stack=v,
                           weights=[2.0, 0.0, 6.0])
        assert law.n_atoms == 2
        assert abs(law.weights.sum() - 1.0) < 1e-12
        assert law.weights[1] == 0.75

    def test_mismatched_grid_rejected(self, grid_small, grid_mid):
        a = GridField(grid_small, np.zeros(grid_small.shape))
        b = GridField(grid_mid, np.zeros(grid_mid.shape))
        with pytest.raises(StructuralError):
            FieldPair(a, b)

    def test_needs_an_atom(self, grid_small):
        with pytest.raises(StructuralError):
            EmpiricalLaw(atoms=[])


class TestSecondMoment:
    def test_zero_atom(self, grid_small):
        z = np.zeros((1,) + grid_small.shape)
        law = EmpiricalLaw(grid=grid_small, u_stack=z, v_stack=z)
        assert second_moment(law, 2) == 0.0

    def test_constant_one_field(self):
        # u = 1 on [-L, L], v = 0: integral of ||k||^2 d(mu) = 2L
        g = SpatialGrid(1, 8.0, 256)
        law = dirac(g, np.ones(g.shape), np.zeros(g.shape))
        assert second_moment(law, 2) == pytest.approx(16.0, rel=1e-12)

    def test_two_atom_hand_sum(self, grid_small):
        # oracle: hand-summed weighted average of the two pair norms
        u = random_fields(grid_small, 2, 3)
        v = random_fields(grid_small, 2, 4)
        law = EmpiricalLaw(grid=grid_small, u_stack=u, v_stack=v)
        wq = grid_small.weights
        a = float((u[0]**2 + v[0]**2) @ wq)
        b = float((u[1]**2 + v[1]**2) @ wq)
        assert second_moment(law, 2) == pytest.approx((a + b) / 2.0,
                                                      rel=1e-14)

    def test_unsupported_order(self, grid_small):
        law = random_law(grid_small, 2, 5)
        with pytest.raises(StructuralError):
            second_moment(law, 3)


class TestWasserstein2Exact:
    def test_identity(self, grid_small):
        law = random_law(grid_small, 4, 6)
        assert wasserstein2_exact(law, law) == pytest.approx(0.0, abs=1e-8)

    def test_two_diracs(self, grid_small):
        u = random_fields(grid_small, 2, 7)
        v = random_fields(grid_small, 2, 8)
        a = dirac(grid_small, u[0], v[0])
        b = dirac(grid_small, u[1], v[1])
        wq = grid_small.weights
        dist = math.sqrt(float(((u[0] - u[1])**2 + (v[0] - v[1])**2) @ wq))
        assert wasserstein2_exact(a, b) == pytest.approx(dist, rel=1e-12)

    def test_matches_enumeration_oracle_3_atoms(self, grid_small):
        a = random_law(grid_small, 3, 9)
        b = random_law(grid_small, 3, 10)
        assert abs(wasserstein2_exact(a, b)
                   - wasserstein2_oracle(a, b)) < 1e-10

    def test_exhaustive_equivalence_up_to_5_atoms(self, grid_small):
        for trial in range(25):
            n = 1 + trial % 5
            a = random_law(grid_small, n, 100 + trial)
            b = random_law(grid_small, n, 200 + trial)
            assert abs(wasserstein2_exact(a, b)
                       - wasserstein2_oracle(a, b)) < 1e-10

    def test_weighted_dirac_closed_form(self, grid_small):
        # W2^2(delta_k, mu) = sum_j w_j ||k - k_j||^2
        d = random_law(grid_small, 1, 11)
        b = random_law(grid_small, 3, 12, weights=[0.5, 0.3, 0.2])
        from mvfhn.measures import cost_matrix_sq
        cost = cost_matrix_sq(d, b)[0]
        assert wasserstein2_exact(d, b) == pytest.approx(
            math.sqrt(float(b.weights @ cost)), rel=1e-9)

    def test_cap_raises_capacity_error(self, grid_small):
        big = random_law(grid_small, EXACT_ATOM_CAP + 1, 13)
        with pytest.raises(CapacityError):
            wasserstein2_exact(big, big)

    def test_metric_axioms(self, grid_small):
        # nonnegativity, symmetry, identity, triangle inequality over
        # random triples
        worst_asym = 0.0
        worst_triangle = -np.inf
        for trial in range(1000):
            n = 2 + trial % 3
            a = random_law(grid_small, n, 3 * trial)
            b = random_law(grid_small, n, 3 * trial + 1)
            c = random_law(grid_small, n, 3 * trial + 2)
            dab = wasserstein2_exact(a, b)
            dba = wasserstein2_exact(b, a)
            dac = wasserstein2_exact(a, c)
            dcb = wasserstein2_exact(c, b)
            assert dab >= 0.0
            worst_asym = max(worst_asym, abs(dab - dba))
            worst_triangle = max(worst_triangle, dab - (dac + dcb))
        assert worst_asym <= 1e-10
        assert worst_triangle <= 1e-9

    def test_identity_of_indiscernibles(self, grid_small):
        a = random_law(grid_small, 3, 500)
        b = random_law(grid_small, 3, 501)
        assert wasserstein2_exact(a, b) > 1e-3
        same = EmpiricalLaw(grid=grid_small, u_stack=a.u[::-1].copy(),
                            v_stack=a.v[::-1].copy())
        assert wasserstein2_exact(a, same) == pytest.approx(0.0, abs=1e-10)

    def test_scaling_pushforward(self, grid_small):
        a = random_law(grid_small, 4, 600)
        b = random_law(grid_small, 4, 601)
        base = wasserstein2_exact(a, b)
        for s in (0.0, 1.0, -2.0, 0.5):
            scaled = wasserstein2_exact(a.scale(s), b.scale(s))
            assert scaled == pytest.approx(abs(s) * base, abs=1e-10,
                                           rel=1e-9)


class TestWasserstein2Entropic:
    def test_identity_small_bias(self, grid_small):
        law = random_law(grid_small, 4, 20)
        value, converged = wasserstein2_entropic(law, law, 1e-3)
        assert converged
        assert value <= 1e-6

    def test_point_masses(self, grid_small):
        u = random_fields(grid_small, 2, 21)
        v = random_fields(grid_small, 2, 22)
        a = dirac(grid_small, u[0], v[0])
        b = dirac(grid_small, u[1], v[1])
        value, converged = wasserstein2_entropic(a, b, 1e-3)
        assert converged
        assert value == pytest.approx(wasserstein2_exact(a, b), abs=1e-6)

    def test_four_atoms_within_two_percent(self, grid_small):
        a = random_law(grid_small, 4, 23)
        b = random_law(grid_small, 4, 24)
        value, converged = wasserstein2_entropic(a, b, 1e-3)
        exact = wasserstein2_exact(a, b)
        assert converged
        assert abs(value - exact) / exact < 0.02

    def test_monotone_toward_exact_as_reg_halves(self, grid_small):
        a = random_law(grid_small, 8, 25)
        b = random_law(grid_small, 8, 26)
        exact = wasserstein2_exact(a, b)
        reg = 1e-1
        errs = []
        while reg >= 1e-4:
            value, _ = wasserstein2_entropic(a, b, reg)
            errs.append(abs(value - exact))
            reg /= 2.0
        # monotone within a small floor slack once errors hit rounding
        for lo, hi in zip(errs[1:], errs[:-1]):
            assert lo <= hi * 1.05 + 1e-7

    def test_nonconvergence_flag(self, grid_small):
        a = random_law(grid_small, 6, 27)
        b = random_law(grid_small, 6, 28)
        value, converged = wasserstein2_entropic(a, b, 1e-3, max_iters=3)
        assert not converged
        assert np.isfinite(value)

    def test_rejects_bad_regularization(self, grid_small):
        a = random_law(grid_small, 2, 29)
        with pytest.raises(StructuralError):
            wasserstein2_entropic(a, a, 0.0)


class TestBoundedLipschitz:
    def test_identity(self, grid_small):
        fam = TestFunctionFamily(grid_small, 32, seed=1)
        a = random_law(grid_small, 3, 30)
        assert bounded_lipschitz_distance(a, a, fam) == 0.0

    def test_family_invariants_on_random_pairs(self, grid_small):
        fam = TestFunctionFamily(grid_small, 64, seed=2)
        assert fam.verify(seed=3, trials=64) <= 1e-12

    def test_dominated_by_w2(self, grid_small):
        fam = TestFunctionFamily(grid_small, 64, seed=4)
        for trial in range(50):
            a = random_law(grid_small, 3, 700 + trial)
            b = random_law(grid_small, 3, 800 + trial)
            dbl = bounded_lipschitz_distance(a, b, fam)
            assert dbl <= wasserstein2_exact(a, b) + 1e-12

    def test_constant_member_gives_zero(self, grid_small):
        fam = TestFunctionFamily.constant(grid_small)
        a = random_law(grid_small, 3, 31)
        b = random_law(grid_small, 3, 32)
        assert bounded_lipschitz_distance(a, b, fam) == 0.0

    def test_monotone_in_family_growth(self, grid_small):
        a = random_law(grid_small, 3, 33)
        b = random_law(grid_small, 3, 34)
        small = TestFunctionFamily(grid_small, 16, seed=5)
        grown = small.extended(48, seed=6)
        d_small = bounded_lipschitz_distance(a, b, small)
        d_grown = bounded_lipschitz_distance(a, b, grown)
        assert d_grown >= d_small

    def test_empty_family_rejected(self, grid_small):
        a = random_law(grid_small, 2, 35)
        fam = TestFunctionFamily(grid_small, 4, seed=7)
        fam.members = []
        with pytest.raises(StructuralError):
            bounded_lipschitz_distance(a, a, fam)


class TestMomentBall:
    def test_zero_law_in_any_ball(self, grid_small):
        z = np.zeros((1,) + grid_small.shape)
        law = EmpiricalLaw(grid=grid_small, u_stack=z, v_stack=z)
        assert moment_ball_contains(law, 1e-9, 4)

    def test_known_fourth_root_norm(self, grid_small):
        # scale a unit-pair-norm atom so the fourth-root moment is 2.0
        u = random_fields(grid_small, 1, 36)
        v = random_fields(grid_small, 1, 37)
        law = EmpiricalLaw(grid=grid_small, u_stack=u, v_stack=v)
        norm = second_moment(law, 2)**0.5
        law = law.scale(2.0 / norm)
        assert second_moment(law, 4)**0.25 == pytest.approx(2.0, rel=1e-12)
        assert not moment_ball_contains(law, 1.9, 4)
        assert moment_ball_contains(law, 2.1, 4)

    def test_boundary_is_closed(self, grid_small):
        u = random_fields(grid_small, 1, 38)
        v = random_fields(grid_small, 1, 39)
        law = EmpiricalLaw(grid=grid_small, u_stack=u, v_stack=v)
        r = second_moment(law, 4)**0.25
        assert moment_ball_contains(law, r, 4)


class TestSerialization:
    def test_round_trip_byte_identical(self, grid_small, tmp_path):
        law = random_law(grid_small, 3, 40, weights=[0.5, 0.25, 0.25])
        d1 = tmp_path / "law1"
        d2 = tmp_path / "law2"
        save_law(law, d1)
        again = load_law(d1)
        save_law(again, d2)
        for name in ("atoms.csv", "weights.csv", "grid.csv"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
        assert np.array_equal(again.u, law.u)
        assert np.array_equal(again.weights, law.weights)

    def test_distance_line_format(self):
        line = distance_line("w2_exact", 1.25, "ok")
        assert line == "w2_exact,1.25,ok\n"

    def test_missing_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_law(tmp_path / "nope")
