"""Empirical probability measures over discrete field pairs.

An :class:`EmpiricalLaw` is a weighted finite collection of (u, v) states
on a shared grid.  The module provides the transport distance (exact via
assignment / a small transportation LP, approximate via debiased
log-domain Sinkhorn), a computable lower bound on the bounded-Lipschitz
metric through a finite test-function family, moment functionals, and
moment-ball membership.  The ground cost is always the grid-weighted
discrete product-space L^2 norm, so grid refinement converges to the
continuum distance.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from . import rng
from .errors import CapacityError, StructuralError
from .fields import FieldPair, GridField, SpatialGrid, l2_sq_array

#: above this atom count the exact solver refuses and points at Sinkhorn
EXACT_ATOM_CAP = 64

_FLOAT_FMT = "{:.17g}"


class EmpiricalLaw:
    """Weighted atoms on a shared grid; the discrete stand-in for a
    fourth-moment-bounded probability measure on the pair space.

    Weights are renormalized on construction and zero-weight atoms are
    dropped.  Atom data is stored stacked as (M, *grid.shape) arrays.
    """

    def __init__(self, atoms=None, weights=None, *, grid=None,
                 u_stack=None, v_stack=None):
        if atoms is not None:
            if len(atoms) < 1:
                raise StructuralError("a law needs at least one atom")
            grid = atoms[0].grid
            for a in atoms:
                if a.grid != grid:
                    raise StructuralError("all atoms must share one grid")
            u_stack = np.stack([a.u.values for a in atoms])
            v_stack = np.stack([a.v.values for a in atoms])
        else:
            if grid is None or u_stack is None or v_stack is None:
                raise StructuralError(
                    "need atoms or (grid, u_stack, v_stack)")
            u_stack = np.asarray(u_stack, dtype=float)
            v_stack = np.asarray(v_stack, dtype=float)
            if u_stack.shape != v_stack.shape or \
                    u_stack.shape[1:] != grid.shape or len(u_stack) < 1:
                raise StructuralError("bad atom stack shapes")
        m = len(u_stack)
        if weights is None:
            weights = np.full(m, 1.0 / m)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (m,) or np.any(weights < 0):
            raise StructuralError("weights must be nonnegative, one per atom")
        total = weights.sum()
        if total <= 0:
            raise StructuralError("weights must not all vanish")
        weights = weights / total
        keep = weights > 0.0
        if not np.all(keep):
            u_stack, v_stack = u_stack[keep], v_stack[keep]
            weights = weights[keep] / weights[keep].sum()
        if not (np.all(np.isfinite(u_stack)) and np.all(np.isfinite(v_stack))):
            raise StructuralError("law atoms must be finite")
        self.grid = grid
        self.u = u_stack
        self.v = v_stack
        self.weights = weights

    # -- basic views ---------------------------------------------------------
    @property
    def n_atoms(self):
        return len(self.weights)

    @property
    def grid_id(self):
        return self.grid.grid_id

    @property
    def is_uniform(self):
        return bool(np.allclose(self.weights, 1.0 / self.n_atoms,
                                rtol=0, atol=1e-12))

    def atom(self, j) -> FieldPair:
        return FieldPair(GridField(self.grid, self.u[j].copy()),
                         GridField(self.grid, self.v[j].copy()))

    def atoms(self):
        return [self.atom(j) for j in range(self.n_atoms)]

    def pair_norms_sq(self):
        """||k_j||^2 for each atom, in the product quadrature norm."""
        return l2_sq_array(self.u, self.grid) + l2_sq_array(self.v, self.grid)

    def scale(self, s):
        """Pushforward under scalar multiplication of the atoms."""
        return EmpiricalLaw(grid=self.grid, u_stack=s * self.u,
                            v_stack=s * self.v, weights=self.weights.copy())

    def subsample(self, indices):
        idx = np.asarray(indices, dtype=int)
        return EmpiricalLaw(grid=self.grid, u_stack=self.u[idx],
                            v_stack=self.v[idx])


def second_moment(law: EmpiricalLaw, p: int) -> float:
    """sum_j w_j ||k_j||^p in the grid-weighted product norm."""
    if p not in (1, 2, 4):
        raise StructuralError("supported moment orders: p in {1, 2, 4}")
    norms_sq = law.pair_norms_sq()
    return float(law.weights @ norms_sq**(p / 2.0))


def moment_ball_contains(law: EmpiricalLaw, r, p=4) -> bool:
    """Closed moment-ball membership: (integral ||x||^p)^{1/p} <= r."""
    if p not in (2, 4):
        raise StructuralError("moment balls support p in {2, 4}")
    if r <= 0:
        raise StructuralError("ball radius must be positive")
    return second_moment(law, p)**(1.0 / p) <= r


# ---------------------------------------------------------------------------
# Ground cost
# ---------------------------------------------------------------------------

def _check_same_grid(lawA, lawB):
    if lawA.grid != lawB.grid:
        raise StructuralError("laws live on different grids")


def cost_matrix_sq(lawA: EmpiricalLaw, lawB: EmpiricalLaw, threads=1):
    """Pairwise squared product-norm distances between atom sets.

    Assembled from the Gram expansion ||a-b||^2 = ||a||^2 + ||b||^2
    - 2<a,b>; entries are computed independently so row-chunked parallel
    assembly is bit-identical to the serial order.
    """
    _check_same_grid(lawA, lawB)
    g = lawA.grid
    wq = g.weights.ravel()
    ua = lawA.u.reshape(lawA.n_atoms, -1) * wq
    va = lawA.v.reshape(lawA.n_atoms, -1) * wq
    ub = lawB.u.reshape(lawB.n_atoms, -1)
    vb = lawB.v.reshape(lawB.n_atoms, -1)
    na = lawA.pair_norms_sq()
    nb = lawB.pair_norms_sq()

    out = np.empty((lawA.n_atoms, lawB.n_atoms))

    def fill(rows):
        cross = ua[rows] @ ub.T + va[rows] @ vb.T
        out[rows] = na[rows, None] + nb[None, :] - 2.0 * cross

    if threads > 1 and lawA.n_atoms >= 2 * threads:
        chunks = np.array_split(np.arange(lawA.n_atoms), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    else:
        fill(slice(None))
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# Exact transport
# ---------------------------------------------------------------------------

def wasserstein2_exact(lawA: EmpiricalLaw, lawB: EmpiricalLaw,
                       threads=1) -> float:
    """Optimal-coupling quadratic transport distance.

    Equal-size uniform supports reduce to an assignment problem; the
    small general case is solved as a dense transportation LP.  Refuses
    supports above EXACT_ATOM_CAP atoms.
    """
    _check_same_grid(lawA, lawB)
    if lawA.n_atoms > EXACT_ATOM_CAP or lawB.n_atoms > EXACT_ATOM_CAP:
        raise CapacityError(
            f"exact solver caps at {EXACT_ATOM_CAP} atoms per law; "
            "use wasserstein2_entropic for larger supports")
    cost = cost_matrix_sq(lawA, lawB, threads=threads)
    if (lawA.n_atoms == lawB.n_atoms and lawA.is_uniform and lawB.is_uniform):
        rows, cols = linear_sum_assignment(cost)
        return math.sqrt(max(cost[rows, cols].mean(), 0.0))
    return math.sqrt(max(_transport_lp(cost, lawA.weights, lawB.weights), 0.0))


def _transport_lp(cost, wa, wb):
    """Dense transportation problem by LP; returns the optimal cost."""
    na, nb = cost.shape
    a_eq = []
    for i in range(na):
        row = np.zeros(na * nb)
        row[i * nb:(i + 1) * nb] = 1.0
        a_eq.append(row)
    for j in range(nb):
        col = np.zeros(na * nb)
        col[j::nb] = 1.0
        a_eq.append(col)
    # drop one redundant constraint to keep the system full-rank
    a_eq = np.asarray(a_eq[:-1])
    b_eq = np.concatenate([wa, wb])[:-1]
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs")
    if not res.success:
        raise StructuralError(f"transportation LP failed: {res.message}")
    return float(res.fun)


def wasserstein2_oracle(lawA: EmpiricalLaw, lawB: EmpiricalLaw) -> float:
    """Brute-force assignment oracle: minimum over all n! pairings of
    equal-weight, equal-size supports.  Independent of the solver path;
    n <= 8 only."""
    _check_same_grid(lawA, lawB)
    n = lawA.n_atoms
    if n != lawB.n_atoms or not (lawA.is_uniform and lawB.is_uniform):
        raise StructuralError("oracle needs equal-size uniform supports")
    if n > 8:
        raise CapacityError("oracle is factorial; n <= 8")
    from itertools import permutations
    cost = cost_matrix_sq(lawA, lawB)
    best = math.inf
    for perm in permutations(range(n)):
        best = min(best, sum(cost[i, perm[i]] for i in range(n)))
    return math.sqrt(best / n)


# ---------------------------------------------------------------------------
# Entropic transport
# ---------------------------------------------------------------------------

def _log_sinkhorn_plan(cost, wa, wb, reg, max_iters, tol):
    """Log-domain Sinkhorn with epsilon scaling.

    Anneals the regularization down from the cost scale to ``reg``
    (warm-starting the potentials), then polishes at the target level.
    Returns (plan, marginal violation, iterations used)."""
    from scipy.special import logsumexp

    la = np.log(wa)
    lb = np.log(wb)
    scale = max(float(cost.max()), reg)
    levels = [scale]
    while levels[-1] > reg * 1.0001:
        levels.append(max(levels[-1] / 4.0, reg))
    phi = np.zeros_like(wa)
    psi = np.zeros_like(wb)
    used = 0

    def marginal_violation(eps):
        logP = (phi[:, None] + psi[None, :] - cost / eps
                + la[:, None] + lb[None, :])
        # clamp so an unconverged plan still yields a finite value
        plan = np.exp(np.minimum(logP, 700.0))
        return plan, max(np.abs(plan.sum(axis=1) - wa).max(),
                         np.abs(plan.sum(axis=0) - wb).max())

    plan, violation = None, np.inf
    for lvl, eps in enumerate(levels):
        c = cost / eps
        budget = max_iters - used if lvl == len(levels) - 1 \
            else min(200, max(max_iters - used, 0))
        for _ in range(budget):
            used += 1
            phi = -logsumexp(psi[None, :] - c + lb[None, :], axis=1)
            psi = -logsumexp(phi[:, None] - c + la[:, None], axis=0)
            if used % 10 == 0:
                plan, violation = marginal_violation(eps)
                if violation < tol:
                    break
        if lvl < len(levels) - 1:
            # keep the unscaled potentials eps*phi fixed across the jump
            nxt = levels[lvl + 1]
            phi = phi * (eps / nxt)
            psi = psi * (eps / nxt)
    plan, violation = marginal_violation(levels[-1])
    return plan, violation, used


def wasserstein2_entropic(lawA: EmpiricalLaw, lawB: EmpiricalLaw,
                          regularization=1e-3, max_iters=20000,
                          tol=1e-9, threads=1):
    """Debiased entropic transport distance.

    Runs log-domain Sinkhorn on the squared-cost problem and debiases
    with the two self-transport terms (sharp plan costs, no entropy
    term), then returns the square root.  The approximation tightens as
    the regularization decreases.

    Returns (value, converged): ``converged`` reports whether the final
    marginal violation fell below 1e-8; on non-convergence the value is
    still returned.
    """
    _check_same_grid(lawA, lawB)
    if regularization <= 0:
        raise StructuralError("regularization must be positive")
    c_ab = cost_matrix_sq(lawA, lawB, threads=threads)
    c_aa = cost_matrix_sq(lawA, lawA, threads=threads)
    c_bb = cost_matrix_sq(lawB, lawB, threads=threads)
    wa, wb = lawA.weights, lawB.weights

    worst = 0.0
    costs = []
    for cm, w1, w2 in ((c_ab, wa, wb), (c_aa, wa, wa), (c_bb, wb, wb)):
        plan, violation, _ = _log_sinkhorn_plan(cm, w1, w2, regularization,
                                                max_iters, tol)
        worst = max(worst, violation)
        costs.append(float((plan * cm).sum()))
    debiased = costs[0] - 0.5 * costs[1] - 0.5 * costs[2]
    value = math.sqrt(max(debiased, 0.0))
    return value, worst < 1e-8


# ---------------------------------------------------------------------------
# Bounded-Lipschitz lower bound
# ---------------------------------------------------------------------------

@dataclass
class _TestFn:
    kind: str          # "probe" or "radial"
    probe_u: np.ndarray | None
    probe_v: np.ndarray | None
    offset: float

    def __call__(self, law: EmpiricalLaw):
        if self.kind == "probe":
            wq = law.grid.weights.ravel()
            inner = (law.u.reshape(law.n_atoms, -1) * wq) @ self.probe_u \
                + (law.v.reshape(law.n_atoms, -1) * wq) @ self.probe_v
            vals = inner - self.offset
        elif self.kind == "radial":
            vals = self.offset - np.sqrt(law.pair_norms_sq())
        else:  # constant composition: clamp of a constant argument
            vals = np.full(law.n_atoms, self.offset)
        # 1/2 * 1-Lipschitz clamp keeps sup-norm + Lipschitz constant <= 1
        return 0.5 * np.clip(vals, -1.0, 1.0)


class TestFunctionFamily:
    """Finite family of bounded-Lipschitz test functions.

    Members are half-scaled unit clamps of either inner products against
    fixed unit-norm probe pairs or radial functions of the pair norm, so
    each satisfies ||phi||_inf + Lip(phi) <= 1.  The induced supremum is
    therefore a lower bound on the bounded-Lipschitz metric that can only
    grow as members are added.
    """

    __test__ = False        # not a test case despite the name

    def __init__(self, grid: SpatialGrid, size=64, seed=0):
        if size < 1:
            raise StructuralError("family size must be positive")
        self.grid = grid
        self.size = size
        self.members = []
        n_radial = max(size // 4, 1) if size > 1 else 0
        n_probe = size - n_radial
        flat = grid.size
        for j in range(n_probe):
            draws = rng.normal_block(seed, rng.PROBE_DRAW_KEY + 7 + j,
                                     2, flat)
            pu, pv = draws[0], draws[1]
            nrm = math.sqrt(float(
                l2_sq_array(pu.reshape(grid.shape), grid)
                + l2_sq_array(pv.reshape(grid.shape), grid)))
            off = rng.uniform_block(seed, rng.PROBE_DRAW_KEY + 7 + j,
                                    3, 1, -1.0, 1.0)[2, 0]
            self.members.append(_TestFn("probe", pu / nrm, pv / nrm, off))
        for j in range(n_radial):
            off = rng.uniform_block(seed, rng.PROBE_DRAW_KEY + 5000 + j,
                                    1, 1, 0.0, 4.0)[0, 0]
            self.members.append(_TestFn("radial", None, None, off))

    @classmethod
    def constant(cls, grid, value=0.5):
        fam = cls.__new__(cls)
        fam.grid = grid
        fam.size = 1
        fam.members = [_TestFn("constant", None, None, value)]
        return fam

    def extended(self, extra_size, seed):
        """A strictly larger family containing these members."""
        bigger = TestFunctionFamily(self.grid, extra_size, seed)
        out = TestFunctionFamily.__new__(TestFunctionFamily)
        out.grid = self.grid
        out.size = self.size + bigger.size
        out.members = self.members + bigger.members
        return out

    def verify(self, seed=0, trials=64):
        """Max observed violation of |phi| <= 1 and Lip(phi) <= 1 on
        random field pairs; should be <= 0 up to rounding."""
        worst = -math.inf
        g = self.grid
        for i in range(trials):
            draws = rng.normal_block(seed, rng.PROBE_DRAW_KEY + 9000 + i,
                                     4, g.size)
            law1 = EmpiricalLaw(grid=g,
                                u_stack=draws[0].reshape((1,) + g.shape),
                                v_stack=draws[1].reshape((1,) + g.shape))
            law2 = EmpiricalLaw(grid=g,
                                u_stack=draws[2].reshape((1,) + g.shape),
                                v_stack=draws[3].reshape((1,) + g.shape))
            dist = math.sqrt(float(
                l2_sq_array(law1.u[0] - law2.u[0], g)
                + l2_sq_array(law1.v[0] - law2.v[0], g)))
            for phi in self.members:
                v1, v2 = float(phi(law1)[0]), float(phi(law2)[0])
                worst = max(worst, abs(v1) - 1.0, abs(v2) - 1.0)
                if dist > 0:
                    worst = max(worst, abs(v1 - v2) - dist)
        return worst


def bounded_lipschitz_distance(lawA: EmpiricalLaw, lawB: EmpiricalLaw,
                               family: TestFunctionFamily) -> float:
    """max over the family of |(phi, muA) - (phi, muB)|: a lower bound on
    the bounded-Lipschitz metric that grows monotonically with the
    family."""
    _check_same_grid(lawA, lawB)
    if not family.members:
        raise StructuralError("family must be nonempty")
    best = 0.0
    for phi in family.members:
        va = float(lawA.weights @ phi(lawA))
        vb = float(lawB.weights @ phi(lawB))
        best = max(best, abs(va - vb))
    return best


# ---------------------------------------------------------------------------
# Serialization (CSV pair + grid sidecar)
# ---------------------------------------------------------------------------

def save_law(law: EmpiricalLaw, directory):
    """Write atoms.csv / weights.csv (and a grid.csv sidecar) into a
    directory."""
    os.makedirs(directory, exist_ok=True)
    g = law.grid
    with open(os.path.join(directory, "atoms.csv"), "w") as fh:
        fh.write("atom_index,component,grid_index,value\n")
        for j in range(law.n_atoms):
            for comp, stack in (("u", law.u), ("v", law.v)):
                flat = stack[j].ravel()
                for i, val in enumerate(flat):
                    fh.write(f"{j},{comp},{i},{_FLOAT_FMT.format(val)}\n")
    with open(os.path.join(directory, "weights.csv"), "w") as fh:
        fh.write("atom_index,weight\n")
        for j, wv in enumerate(law.weights):
            fh.write(f"{j},{_FLOAT_FMT.format(wv)}\n")
    with open(os.path.join(directory, "grid.csv"), "w") as fh:
        fh.write("dimension,half_width,points_per_axis\n")
        fh.write(f"{g.dimension},{_FLOAT_FMT.format(g.half_width)},"
                 f"{g.points_per_axis}\n")


def load_law(directory, grid=None) -> EmpiricalLaw:
    """Read a law from its CSV pair; the grid comes from grid.csv unless
    supplied."""
    atoms_path = os.path.join(directory, "atoms.csv")
    weights_path = os.path.join(directory, "weights.csv")
    if not (os.path.exists(atoms_path) and os.path.exists(weights_path)):
        raise FileNotFoundError(f"no serialized law in {directory}")
    if grid is None:
        with open(os.path.join(directory, "grid.csv")) as fh:
            fh.readline()
            dim, half, pts = fh.readline().strip().split(",")
        grid = SpatialGrid(int(dim), float(half), int(pts))
    weights = {}
    with open(weights_path) as fh:
        fh.readline()
        for line in fh:
            j, wv = line.strip().split(",")
            weights[int(j)] = float(wv)
    m = len(weights)
    u = np.zeros((m, grid.size))
    v = np.zeros((m, grid.size))
    with open(atoms_path) as fh:
        fh.readline()
        for line in fh:
            j, comp, i, val = line.strip().split(",")
            (u if comp == "u" else v)[int(j), int(i)] = float(val)
    w = np.array([weights[j] for j in range(m)])
    return EmpiricalLaw(grid=grid, u_stack=u.reshape((m,) + grid.shape),
                        v_stack=v.reshape((m,) + grid.shape), weights=w)


def distance_line(metric, value, flag):
    """Single-line CSV record for an emitted distance."""
    return f"{metric},{_FLOAT_FMT.format(value)},{flag}\n"
