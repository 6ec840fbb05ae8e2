"""Non-autonomous process on laws and pullback-attraction diagnostics.

The process maps a law mu through the ensemble dynamics from a start
time to a target time.  Noise is keyed by absolute step index on a
global step grid, so runs launched at different pullback depths
experience the same realized environment over overlapping windows; this
is what makes pulled-back laws at the same target time comparable and
the identity/cocycle relations exact.

The attractor itself is represented only by its evidence: a Cauchy trend
of pulled-back laws, absorbing-ball membership, and a tightness
certificate.  Families whose initial moments grow too fast with depth
(outside the admissible attraction class) are detected and flagged, not
masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fields as F
from .errors import CalibrationRequiredError, ConfigError, StructuralError
from .integrator import (EnsembleState, SchemeConfig, _step_index_for,
                         make_initial_ensemble, simulate)
from .measures import (EmpiricalLaw, TestFunctionFamily,
                       bounded_lipschitz_distance, second_moment,
                       wasserstein2_exact)
from .model import forcing_integrals
from .splitting import detect_transient


@dataclass
class PullbackSchedule:
    """Target time, increasing pullback depths, and the initial-law
    family drawn at each depth.

    ``family`` names a factory; "bounded" keeps the initial scale fixed
    (inside the admissible class), "supercritical" grows the fourth
    moment like e^{2.5 eta depth}, violating the class decay condition.
    """

    target_time: float
    depths: list
    family: str = "bounded"
    base_scale: float = 1.0
    eta: float = 0.1

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        if len(d) < 1 or np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ConfigError("depths must be positive and increasing")
        self.depths = [float(x) for x in d]

    def initial_state(self, grid, M, master_seed, depth, dt):
        if self.family == "bounded":
            scale = self.base_scale
        elif self.family == "supercritical":
            scale = self.base_scale * math.exp(0.625 * self.eta * depth)
        else:
            raise ConfigError(f"unknown pullback family {self.family!r}")
        return make_initial_ensemble(
            "gaussian_bump", grid, M, master_seed, scale=scale,
            time=self.target_time - depth, dt=dt)


@dataclass
class DepthRecord:
    depth: float
    m2: float
    m4: float
    tail: float
    in_absorbing_set: bool
    w2_to_previous_depth: float
    dP_to_previous_depth: float
    initial_m2: float
    initial_m4: float
    failed: bool = False


@dataclass
class PullbackReport:
    records: list
    entry_depth: float | None
    cauchy_rate: float
    mc_floor: float
    absorbing_radius: float
    class_violation: bool
    membership_monotone: bool
    details: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("depth,m2,m4,tail,in_ball,w2_prev,dP_prev,floor\n")
            for r in self.records:
                fh.write(",".join([
                    f"{r.depth:.17g}", f"{r.m2:.17g}", f"{r.m4:.17g}",
                    f"{r.tail:.17g}", str(int(r.in_absorbing_set)),
                    f"{r.w2_to_previous_depth:.17g}",
                    f"{r.dP_to_previous_depth:.17g}",
                    f"{self.mc_floor:.17g}"]) + "\n")


# ---------------------------------------------------------------------------
# The process map
# ---------------------------------------------------------------------------

def materialize(mu: EmpiricalLaw, M, master_seed=0) -> tuple:
    """Turn a law into an M-member ensemble.

    Uniform laws with exactly M atoms pass through unchanged (atom order
    preserved), which makes composition of process maps exact; otherwise
    atoms are drawn by deterministic systematic resampling on the weight
    cumulative."""
    if mu.n_atoms == M and mu.is_uniform:
        return mu.u.copy(), mu.v.copy()
    from . import rng
    jitter = rng.uniform_block(master_seed, rng.PROBE_DRAW_KEY + 99, 1, 1)[0, 0]
    positions = (np.arange(M) + jitter) / M
    cum = np.cumsum(mu.weights)
    idx = np.searchsorted(cum, positions, side="right")
    idx = np.minimum(idx, mu.n_atoms - 1)
    return mu.u[idx].copy(), mu.v[idx].copy()


def process_map(mu: EmpiricalLaw, tau, t, coeffs, cfg: SchemeConfig,
                master_seed) -> EmpiricalLaw:
    """Push the law mu from time tau to tau + t through the dynamics.

    t = 0 is the exact identity.  Start times and horizons must sit on
    the global step grid so that absolute-index noise keying lines up.
    """
    if t < 0:
        raise ConfigError("pullback horizon must be nonnegative")
    if t == 0:
        return EmpiricalLaw(grid=mu.grid, u_stack=mu.u.copy(),
                            v_stack=mu.v.copy(), weights=mu.weights.copy())
    U, V = materialize(mu, cfg.ensemble_size, master_seed)
    state = EnsembleState(mu.grid, U, V, time=tau,
                          step_index=_step_index_for(tau, cfg.dt))
    out = simulate(state, coeffs, cfg, tau + t, master_seed)
    return out.final.law


# ---------------------------------------------------------------------------
# Absorbing set
# ---------------------------------------------------------------------------

def calibrate_absorbing_constant(coeffs, grid, cfg: SchemeConfig,
                                 master_seed=0, horizon=4.0,
                                 scale=1.0) -> float:
    """Fitted steady constant of the pair fourth moment on a calibration
    run from a localized initial family."""
    init = make_initial_ensemble("gaussian_bump", grid, cfg.ensemble_size,
                                 master_seed, scale=scale, dt=cfg.dt)
    res = simulate(init, coeffs, cfg, horizon, master_seed)
    times = res.series.column("t")
    m4 = res.series.column("pair_m4")
    start = detect_transient(times, m4)
    if start is None:
        raise CalibrationRequiredError(
            "calibration run did not reach a steady fourth-moment band")
    return 1.1 * float(np.mean(m4[start:]))


def absorbing_radius(coeffs, tau, eta, c_hat=None) -> float:
    """Operational absorbing-ball radius at the target time.

    R = c_hat * (1 + I4(tau)) with I4 the fourth-power forcing history
    integral; requires the fitted calibration constant."""
    if c_hat is None:
        raise CalibrationRequiredError(
            "absorbing_radius needs the fitted constant from "
            "calibrate_absorbing_constant")
    i4 = forcing_integrals(coeffs, tau, eta)["I4"]
    return float(c_hat) * (1.0 + i4)


# ---------------------------------------------------------------------------
# Pullback convergence run
# ---------------------------------------------------------------------------

def _subsampled(law, size):
    if law.n_atoms <= size:
        return law
    idx = np.linspace(0, law.n_atoms - 1, size).round().astype(int)
    return law.subsample(idx)


def _law_distance(lawA, lawB, family, size=64):
    a, b = _subsampled(lawA, size), _subsampled(lawB, size)
    w2 = wasserstein2_exact(a, b)
    dp = bounded_lipschitz_distance(lawA, lawB, family)
    return w2, dp


def measure_mc_floor(schedule, coeffs, cfg, grid, master_seed,
                     n_replicates=8, depth=None):
    """Distance noise floor: same initial law pushed through the same
    window under different seeds; the floor is the median pairwise
    transport distance between consecutive replicate images."""
    if depth is None:
        depth = schedule.depths[0]
    tau = schedule.target_time
    laws = []
    for r in range(n_replicates):
        seed = master_seed + 7919 * (r + 1)
        init = schedule.initial_state(grid, cfg.ensemble_size, master_seed,
                                      depth, cfg.dt)
        out = simulate(init, coeffs, cfg, tau, seed)
        laws.append(out.final.law)
    dists = []
    for i in range(len(laws) - 1):
        a = _subsampled(laws[i], cfg.w2_subsample)
        b = _subsampled(laws[i + 1], cfg.w2_subsample)
        dists.append(wasserstein2_exact(a, b))
    return float(np.median(dists))


def pullback_run(schedule: PullbackSchedule, coeffs, cfg: SchemeConfig,
                 master_seed, grid, c_hat=None, family_seed=0,
                 n_floor_replicates=8, keep_laws=False) -> PullbackReport:
    """Pull the initial family back through increasing depths.

    For each depth t_i a fresh law is drawn at tau - t_i from the
    schedule's family (scaled per its decay tag), pushed to tau under the
    shared environment, and compared to the previous depth's image at
    tau.  Initial-moment growth faster than the admissible class decay
    (rate 2 eta for the fourth moment, eta for the second) raises the
    class-violation flag.  Failed depth runs leave a partial report.
    """
    tau = schedule.target_time
    eta = schedule.eta
    if c_hat is None:
        c_hat = calibrate_absorbing_constant(coeffs, grid, cfg, master_seed)
    radius = absorbing_radius(coeffs, tau, eta, c_hat)
    test_family = TestFunctionFamily(grid, 64, seed=family_seed)

    records = []
    kept = []
    prev_law = None
    for depth in schedule.depths:
        init = schedule.initial_state(grid, cfg.ensemble_size, master_seed,
                                      depth, cfg.dt)
        init_law = init.law
        im2 = second_moment(init_law, 2)
        im4 = second_moment(init_law, 4)
        try:
            out = simulate(init, coeffs, cfg, tau, master_seed)
        except Exception:
            records.append(DepthRecord(
                depth=depth, m2=float("nan"), m4=float("nan"),
                tail=float("nan"), in_absorbing_set=False,
                w2_to_previous_depth=float("nan"),
                dP_to_previous_depth=float("nan"),
                initial_m2=im2, initial_m4=im4, failed=True))
            continue
        law = out.final.law
        m2 = second_moment(law, 2)
        m4 = second_moment(law, 4)
        tail = float(out.series.column("tail_mass_R")[-1])
        in_ball = m4 <= radius
        if prev_law is None:
            w2 = dp = float("nan")
        else:
            w2, dp = _law_distance(prev_law, law, test_family,
                                   cfg.w2_subsample)
        records.append(DepthRecord(
            depth=depth, m2=m2, m4=m4, tail=tail, in_absorbing_set=in_ball,
            w2_to_previous_depth=w2, dP_to_previous_depth=dp,
            initial_m2=im2, initial_m4=im4))
        if keep_laws:
            kept.append(law)
        prev_law = law

    ok = [r for r in records if not r.failed]
    # class-condition check on the drawn family's initial moments
    class_violation = False
    if len(ok) >= 2:
        depths = np.array([r.depth for r in ok])
        lm4 = np.log(np.maximum([r.initial_m4 for r in ok], 1e-300))
        lm2 = np.log(np.maximum([r.initial_m2 for r in ok], 1e-300))
        slope4 = float(np.polyfit(depths, lm4, 1)[0])
        slope2 = float(np.polyfit(depths, lm2, 1)[0])
        class_violation = (slope4 >= 2.0 * eta * 0.95
                           or slope2 >= eta * 0.95)

    entry_depth = None
    for r in ok:
        if r.in_absorbing_set:
            entry_depth = r.depth
            break
    membership_monotone = True
    seen_entry = False
    for r in ok:
        if r.in_absorbing_set:
            seen_entry = True
        elif seen_entry:
            membership_monotone = False

    # fitted decay rate of consecutive-law distances over depth
    w2s = np.array([r.w2_to_previous_depth for r in ok[1:]])
    dps = np.array([r.depth for r in ok[1:]])
    cauchy_rate = float("nan")
    positive = w2s > 0
    if positive.sum() >= 2:
        cauchy_rate = float(-np.polyfit(dps[positive],
                                        np.log(w2s[positive]), 1)[0])

    floor = measure_mc_floor(schedule, coeffs, cfg, grid, master_seed,
                             n_replicates=n_floor_replicates)
    details = {"c_hat": c_hat}
    if keep_laws:
        details["laws"] = kept
    return PullbackReport(records=records, entry_depth=entry_depth,
                          cauchy_rate=cauchy_rate, mc_floor=floor,
                          absorbing_radius=radius,
                          class_violation=class_violation,
                          membership_monotone=membership_monotone,
                          details=details)


# ---------------------------------------------------------------------------
# Weak continuity probe
# ---------------------------------------------------------------------------

def weak_continuity_probe(mu: EmpiricalLaw, perturbed_sequence, tau, t,
                          coeffs, cfg: SchemeConfig, master_seed,
                          moment_bound, family_seed=0) -> dict:
    """Map a convergent sequence of laws through the same realized noise
    and report the image distances.

    Precondition (checked): every input law has fourth moment at most
    ``moment_bound``.  Matched streams make the output distances track
    the input distances down to the statistical floor.
    """
    for law in [mu, *perturbed_sequence]:
        if second_moment(law, 4) > moment_bound:
            raise StructuralError(
                "probe input violates the fourth-moment bound")
    family = TestFunctionFamily(mu.grid, 64, seed=family_seed)
    base = process_map(mu, tau, t, coeffs, cfg, master_seed)
    in_w2, out_w2, out_dp = [], [], []
    for law in perturbed_sequence:
        in_w2.append(wasserstein2_exact(_subsampled(law, cfg.w2_subsample),
                                        _subsampled(mu, cfg.w2_subsample)))
        img = process_map(law, tau, t, coeffs, cfg, master_seed)
        w2, dp = _law_distance(base, img, family, cfg.w2_subsample)
        out_w2.append(w2)
        out_dp.append(dp)
    return {"input_w2": np.array(in_w2), "output_w2": np.array(out_w2),
            "output_dP": np.array(out_dp)}


# ---------------------------------------------------------------------------
# Tightness diagnostics
# ---------------------------------------------------------------------------

def tightness_diagnostic(law_sequence, m4_threshold, radii=None) -> dict:
    """Tail/moment profiles over a family of laws and the scalar
    certificate max_j (tail at L/2 + m4_j / threshold); small values
    certify the family concentrates on a compact core."""
    if len(law_sequence) < 2:
        raise StructuralError("tightness diagnostics need >= 2 laws")
    grid = law_sequence[0].grid
    L = grid.half_width
    if radii is None:
        radii = [L / 4.0, L / 2.0, 3.0 * L / 4.0]
    tail_profile = []
    moment_profile = []
    for law in law_sequence:
        if law.grid != grid:
            raise StructuralError("laws must share one grid")
        tails = [float(law.weights @ F.tail_mass_array(law.u, law.v, grid, r))
                 for r in radii]
        tail_profile.append(tails)
        moment_profile.append(second_moment(law, 4))
    tail_profile = np.array(tail_profile)
    moment_profile = np.array(moment_profile)
    mid = len(radii) // 2
    certificate = float(np.max(tail_profile[:, mid]
                               + moment_profile / m4_threshold))
    return {"radii": list(radii), "tail_profile": tail_profile,
            "moment_profile": moment_profile,
            "split_certificate": certificate}
