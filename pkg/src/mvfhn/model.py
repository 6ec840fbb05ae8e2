"""Coefficient data for the coupled activator-recovery system and
executable verification of its structural assumptions.

A :class:`CoefficientSet` carries the drift rates (lambda, alpha, beta,
gamma), the nonlinearity ``f``, the forcings ``G1``/``G2``, the noise
ingredients (``sigma_k``, ``theta_{i,k}``, ``delta_k``, ``w``), and the
bound functions/constants the estimates rely on.  The law argument of the
coefficients enters through the scalar ``m2``, the second moment of the
u-marginal law; user-supplied coefficients receive that scalar and must
be numpy-broadcastable in their array arguments.

Spatial arguments: callables take the signed coordinate in 1-D and the
radius in 2-D (``grid.coord``), so 2-D instances must be radial.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import ConfigError, EvaluationError, IntegrabilityError

log = logging.getLogger(__name__)

#: finite-difference step for derivative-form assumption checks;
#: balances truncation against round-off for O(1) coefficients
FD_STEP = 1e-5


def _sqrtp(m2):
    """sqrt clipped at zero; broadcasts over scalars and arrays."""
    return np.sqrt(np.maximum(m2, 0.0))


def _as_callable(value):
    """Wrap a constant as a (t, x) callable; pass callables through."""
    if callable(value):
        return value
    c = float(value)
    return lambda t, x: np.broadcast_to(c, np.shape(x)).astype(float) \
        if np.ndim(x) else c


@dataclass
class SeparableNoise:
    """Mode-separable noise structure sigma_k(t,u,m2) = s_k(t) * g(t,u,m2)
    and theta_{i,k}(t,x) = s_k(t) * Theta_i(t,x), used by the fast noise
    path: the mode sum collapses to (dW @ scales) times the shared
    profile, agreeing with the generic mode loop to rounding."""

    sigma_scales: object           # (t) -> (K,)
    sigma_profile: object          # (t, u, m2) -> array like u
    theta1_scales: object          # (t) -> (K,)
    theta1_profile: object         # (t, x) -> array like x
    theta2_scales: object
    theta2_profile: object


@dataclass
class BoundSet:
    """The (H)-assumption data: growth constants, bound functions, and
    mode-sequence norms.  ``declared_norms`` overrides grid-computed
    norms where analytic values are known."""

    alpha1: float
    alpha2: float
    alpha3: float
    phi1: object
    phi2: object
    phi3: object
    phi4: object
    phi5: object
    phi6: object
    phi7: object
    phi8: object
    phi_g: object
    psi1: object                   # x-only
    psi_g: object                  # x-only
    beta1: np.ndarray
    gamma1: np.ndarray
    L_sigma: np.ndarray
    declared_norms: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("phi1", "phi2", "phi3", "phi4", "phi5", "phi6",
                     "phi7", "phi8", "phi_g"):
            setattr(self, name, _as_callable(getattr(self, name)))
        for name in ("psi1", "psi_g"):
            f = getattr(self, name)
            if not callable(f):
                c = float(f)
                setattr(self, name, lambda x, c=c: np.full_like(
                    np.asarray(x, dtype=float), c))
        self.beta1 = np.asarray(self.beta1, dtype=float)
        self.gamma1 = np.asarray(self.gamma1, dtype=float)
        self.L_sigma = np.asarray(self.L_sigma, dtype=float)


# reference grid for norm evaluation when nothing is declared
_REF_X = np.linspace(-12.0, 12.0, 8193)


def _linf(values):
    return float(np.max(np.abs(values)))


def _l1(values, x=_REF_X):
    return float(np.trapezoid(np.abs(values), x))


def _l2_sq(values, x=_REF_X):
    return float(np.trapezoid(values**2, x))


@dataclass
class CoefficientSet:
    """All model data for one instance of the coupled system."""

    lambda_: float
    alpha: float
    beta: float
    gamma: float
    p: float
    f: object                      # (t, x, u, m2) -> like u
    G1: object                     # (t, x, u, m2)
    G2: object                     # (t, x)
    sigma: list                    # K callables (t, u, m2)
    theta1: list                   # K callables (t, x)
    theta2: list
    delta: np.ndarray
    w: object                      # (x)
    bounds: BoundSet
    K: int
    separable: SeparableNoise | None = None
    checked: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not (len(self.sigma) == len(self.theta1) == len(self.theta2)
                == len(self.delta) == self.K):
            raise ConfigError("mode sequences must all have length K")
        if self.gamma <= self.lambda_:
            raise ConfigError("gamma must exceed lambda")
        if 2.0 * float(np.sum(self.delta**2)) >= self.gamma:
            raise ConfigError("need 2*sum(delta_k^2) < gamma")
        if self.p < 2:
            raise ConfigError("growth exponent p must be >= 2")
        self._w_cache = {}

    def w_values(self, grid):
        vals = self._w_cache.get(grid.grid_id)
        if vals is None:
            vals = np.asarray(self.w(grid.coord), dtype=float)
            self._w_cache[grid.grid_id] = vals
        return vals

    @property
    def delta_l2_sq(self):
        return float(np.sum(self.delta**2))

    # -- norm resolution ----------------------------------------------------
    def norm(self, name, t_samples=None):
        """Resolve a named norm: declared value if present, else computed
        on the reference grid (sup over sampled times for t-dependent
        bound functions)."""
        declared = self.bounds.declared_norms.get(name)
        if declared is not None:
            return float(declared)
        if t_samples is None:
            t_samples = np.linspace(0.0, 10.0, 41)
        b = self.bounds
        if name == "w_l2_sq":
            return _l2_sq(np.asarray(self.w(_REF_X), dtype=float))
        if name == "w_linf":
            return _linf(np.asarray(self.w(_REF_X), dtype=float))
        if name == "beta1_l2_sq":
            return float(np.sum(b.beta1**2))
        if name == "gamma1_l2_sq":
            return float(np.sum(b.gamma1**2))
        if name == "Lsigma_l2_sq":
            return float(np.sum(b.L_sigma**2))
        if name == "phi1_sup":
            return max(_linf(b.phi1(t, _REF_X)) for t in t_samples)
        if name == "psi1_l1":
            return _l1(b.psi1(_REF_X))
        if name == "phi7_l1_linf":
            return max(max(_l1(b.phi7(t, _REF_X)), _linf(b.phi7(t, _REF_X)))
                       for t in t_samples)
        if name == "psig_l1_linf":
            vals = b.psi_g(_REF_X)
            return max(_l1(vals), _linf(vals))
        raise ConfigError(f"unknown norm name {name!r}")


@dataclass
class AssumptionRecord:
    name: str
    worst_violation: float
    sample_count: int
    witness: dict


@dataclass
class AssumptionReport:
    """Per-inequality worst signed violations; <= 0 means the inequality
    held on every sample."""

    records: list

    def record(self, name):
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def passed(self, tol=1e-6):
        return all(r.worst_violation <= tol for r in self.records)

    def worst(self):
        return max(r.worst_violation for r in self.records)

    def to_csv(self, path):
        lines = ["inequality,worst_violation,sample_count,t,x,u,u2,m2,m2p"]
        for r in self.records:
            wit = r.witness
            parts = [r.name, f"{r.worst_violation:.17g}", str(r.sample_count)]
            for key in ("t", "x", "u", "u2", "m2", "m2p"):
                v = wit.get(key)
                parts.append("" if v is None else f"{v:.17g}")
            lines.append(",".join(parts))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Canonical instance
# ---------------------------------------------------------------------------

def canonical_instance(epsilon_couple=0.1, K=16, omega=1.0, *, eta=0.1,
                       margin_target=1.0, lambda_override=None,
                       auto_scale=True, amp_g1=1.0, amp_g2=1.0):
    """The shipped non-autonomous instance.

    Cubic nonlinearity with a square-root law coupling, Gaussian-localized
    time-periodic forcing, and k^-2 mode decay throughout, so the finite
    mode truncation omits a controlled Hilbert-Schmidt tail.  By default
    ``lambda`` is scaled up until the dissipativity margin at ``eta``
    reaches ``margin_target`` and ``gamma = lambda + 1`` afterwards.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    eps = float(epsilon_couple)
    A, B = float(amp_g1), float(amp_g2)

    def b_profile(x):
        return np.exp(-np.asarray(x, dtype=float)**2)

    def f(t, x, u, m2):
        return u * u * u + eps * b_profile(x) * _sqrtp(m2)

    def G1(t, x, u, m2):
        bx = b_profile(x)
        return A * bx * (1.0 + np.sin(omega * t)) + eps * bx * _sqrtp(m2)

    def G2(t, x):
        return B * b_profile(x) * (1.0 + np.cos(omega * t))

    modes = np.arange(1, K + 1, dtype=float)
    kinv2 = modes**-2.0

    # the law term carries the coupling strength so eps = 0 fully
    # decouples every coefficient from the law
    def make_sigma(k):
        s = kinv2[k - 1]
        return lambda t, u, m2: s * (np.sin(u) + eps * _sqrtp(m2))

    def make_theta(k):
        s = kinv2[k - 1]
        return lambda t, x: s * b_profile(x) * math.cos(omega * t + k)

    sigma = [make_sigma(k) for k in range(1, K + 1)]
    theta1 = [make_theta(k) for k in range(1, K + 1)]
    theta2 = [make_theta(k) for k in range(1, K + 1)]

    def w(x):
        return np.exp(-np.asarray(x, dtype=float)**2 / 2.0)

    sum_k4 = float(np.sum(kinv2**2))
    sqrt_pi = math.sqrt(math.pi)

    bounds = BoundSet(
        alpha1=1.0, alpha2=1.5, alpha3=1.0,
        phi1=lambda t, x: 0.5 * eps * b_profile(x),
        phi2=0.0,
        phi3=lambda t, x: eps * b_profile(x),
        phi4=0.0,
        phi5=lambda t, x: 2.0 * eps * np.abs(x) * b_profile(x),
        phi6=lambda t, x: eps * b_profile(x),
        phi7=lambda t, x: eps * (1.0 + 2.0 * np.abs(x)) * b_profile(x),
        phi8=lambda t, x: 4.0 * A * np.abs(x) * b_profile(x),
        phi_g=lambda t, x: A * b_profile(x) * (1.0 + np.sin(omega * t)),
        psi1=lambda x: 0.5 * eps * b_profile(x),
        psi_g=lambda x: eps * b_profile(x),
        beta1=kinv2, gamma1=kinv2, L_sigma=kinv2,
    )
    # analytic/reference norms (Gaussian integrals on the reference grid)
    phi7_ref = eps * (1.0 + 2.0 * np.abs(_REF_X)) * b_profile(_REF_X)
    bounds.declared_norms.update({
        "w_l2_sq": sqrt_pi,
        "w_linf": 1.0,
        "beta1_l2_sq": sum_k4,
        "gamma1_l2_sq": sum_k4,
        "Lsigma_l2_sq": sum_k4,
        "phi1_sup": 0.5 * eps,
        "psi1_l1": 0.5 * eps * sqrt_pi,
        "phi7_l1_linf": max(_l1(phi7_ref), _linf(phi7_ref)),
        "psig_l1_linf": max(eps * sqrt_pi, eps),
    })

    # lambda sizing against the margin inequality; the delta sequence is
    # tied to gamma = lambda + 1 through 2 sum delta_k^2 = gamma / 2, so
    # margin(lambda) = 0.5 lambda - 5 eta - C0 - 1.5 and the target pins
    # lambda directly.
    c0 = (24.0 * sqrt_pi * sum_k4
          + 12.0 * 1.0 * sum_k4
          + 2.0 * bounds.declared_norms["phi1_sup"]
          + 2.0 * bounds.declared_norms["psi1_l1"]
          + 2.0 * bounds.declared_norms["phi7_l1_linf"]
          + bounds.declared_norms["psig_l1_linf"])
    lam_required = 2.0 * (5.0 * eta + c0 + 1.5 + margin_target)
    scaled = False
    if lambda_override is not None:
        lam = float(lambda_override)
        if auto_scale and lam < lam_required:
            lam = lam_required
            scaled = True
    else:
        lam = lam_required
    gamma = lam + 1.0
    delta0 = math.sqrt(gamma / (4.0 * sum_k4))
    delta = delta0 * kinv2

    # theta_{i,k}(t,x) = k^-2 cos(omega t + k) b(x): time-dependent mode
    # scales over a shared spatial profile
    separable = SeparableNoise(
        sigma_scales=lambda t: kinv2,
        sigma_profile=lambda t, u, m2: np.sin(u) + eps * _sqrtp(m2),
        theta1_scales=lambda t: kinv2 * np.cos(omega * t + modes),
        theta1_profile=lambda t, x: b_profile(x),
        theta2_scales=lambda t: kinv2 * np.cos(omega * t + modes),
        theta2_profile=lambda t, x: b_profile(x),
    )

    coeffs = CoefficientSet(
        lambda_=lam, alpha=1.0, beta=1.0, gamma=gamma, p=4.0,
        f=f, G1=G1, G2=G2, sigma=sigma, theta1=theta1, theta2=theta2,
        delta=delta, w=w, bounds=bounds, K=K, separable=separable,
        checked=True,
        meta={"family": "canonical", "eps_couple": eps, "omega": omega,
              "amp_g1": A, "amp_g2": B, "eta": eta,
              "lambda_auto_scaled": scaled or lambda_override is None,
              "mode_tail_fraction": _mode_tail_fraction(K)},
    )
    if scaled:
        log.info("lambda auto-scaled to %.6g to meet the dissipativity "
                 "margin target %.3g at eta=%.3g", lam, margin_target, eta)
    return coeffs


def _mode_tail_fraction(K):
    """Fraction of the k^-4 Hilbert-Schmidt mass omitted beyond mode K."""
    zeta4 = math.pi**4 / 90.0
    kept = float(np.sum(np.arange(1, K + 1, dtype=float)**-4.0))
    return (zeta4 - kept) / zeta4


# ---------------------------------------------------------------------------
# Assumption checking
# ---------------------------------------------------------------------------

def _draws(seed, slot, n, lo, hi):
    u = rng.uniform_block(seed, rng.PROBE_DRAW_KEY + slot, 1, n)[0]
    return lo + (hi - lo) * u


def _finite_or_raise(name, values, witness):
    if not np.all(np.isfinite(values)):
        idx = int(np.argmin(np.isfinite(values)))
        raise EvaluationError(
            f"{name} evaluated to a non-finite value",
            {k: float(v[idx]) for k, v in witness.items()})


def check_assumptions(coeffs: CoefficientSet, sampler, seed=0) -> AssumptionReport:
    """Monte-Carlo sample the pointwise structural inequalities.

    ``sampler`` is a mapping with keys ``t_range``, ``x_range``,
    ``u_range``, ``m2_range``, ``n_samples``.  Growth and coercivity
    conditions are sampled directly; Lipschitz conditions on sample
    pairs, with the law-coupling modulus taken as |sqrt(m2) - sqrt(m2')|
    (the smallest transport distance compatible with the two second
    moments, hence the strictest right-hand side); derivative conditions
    via central differences with step :data:`FD_STEP`.
    """
    n = int(sampler["n_samples"])
    if n < 1:
        raise ConfigError("n_samples must be >= 1")
    t_lo, t_hi = sampler["t_range"]
    x_lo, x_hi = sampler["x_range"]
    u_lo, u_hi = sampler["u_range"]
    m_lo, m_hi = sampler["m2_range"]
    if m_lo < 0:
        raise ConfigError("m2_range must be nonnegative")

    t = _draws(seed, 0, n, t_lo, t_hi)
    x = _draws(seed, 1, n, x_lo, x_hi)
    u = _draws(seed, 2, n, u_lo, u_hi)
    u2 = _draws(seed, 3, n, u_lo, u_hi)
    m2 = _draws(seed, 4, n, m_lo, m_hi)
    m2p = _draws(seed, 5, n, m_lo, m_hi)
    wit_all = {"t": t, "x": x, "u": u, "u2": u2, "m2": m2, "m2p": m2p}

    b = coeffs.bounds
    p = coeffs.p
    h = FD_STEP
    records = []

    def feval(func, *args):
        """Vectorized evaluation with scalar fallback for callables that
        only accept scalar arguments."""
        try:
            out = np.asarray(func(*args), dtype=float)
            if out.shape == (n,):
                return out
        except Exception:
            pass
        return np.array([func(*(float(a[i]) for a in args))
                         for i in range(n)], dtype=float)

    f_u_m = feval(coeffs.f, t, x, u, m2)
    _finite_or_raise("f", f_u_m, wit_all)

    def add(name, violation):
        i = int(np.argmax(violation))
        records.append(AssumptionRecord(
            name=name, worst_violation=float(violation[i]), sample_count=n,
            witness={k: float(v[i]) for k, v in wit_all.items()}))

    # (zero anchor) f(t, x, 0, delta_0) = 0
    f_zero = feval(coeffs.f, t, x, np.zeros(n), np.zeros(n))
    add("f_zero_at_origin", np.abs(f_zero) - 1e-12)

    # coercivity: f u >= alpha1 |u|^p - phi1 (1 + u^2) - psi1 m2
    phi1 = feval(b.phi1, t, x)
    psi1 = np.asarray(b.psi1(x), dtype=float)
    add("f_coercivity",
        b.alpha1 * np.abs(u)**p - phi1 * (1 + u**2) - psi1 * m2 - f_u_m * u)

    # f Lipschitz in (u, law)
    f_2 = feval(coeffs.f, t, x, u2, m2p)
    phi2 = feval(b.phi2, t, x)
    phi3 = feval(b.phi3, t, x)
    wmod = np.abs(np.sqrt(m2) - np.sqrt(m2p))
    rhs = b.alpha2 * (phi2 + np.abs(u)**(p - 2) + np.abs(u2)**(p - 2)) \
        * np.abs(u - u2) + phi3 * wmod
    add("f_lipschitz", np.abs(f_u_m - f_2) - rhs)

    # df/du >= -phi4
    dfdu = (feval(coeffs.f, t, x, u + h, m2)
            - feval(coeffs.f, t, x, u - h, m2)) / (2 * h)
    phi4 = feval(b.phi4, t, x)
    add("f_du_lower", -phi4 - dfdu)

    # |df/dx| <= phi5 (1 + |u| + sqrt m2)
    dfdx = (feval(coeffs.f, t, x + h, u, m2)
            - feval(coeffs.f, t, x - h, u, m2)) / (2 * h)
    phi5 = feval(b.phi5, t, x)
    add("f_dx_growth", np.abs(dfdx) - phi5 * (1 + np.abs(u) + np.sqrt(m2)))

    # |f| <= alpha3 |u|^{p-1} + phi6 (1 + sqrt m2)
    phi6 = feval(b.phi6, t, x)
    add("f_growth",
        np.abs(f_u_m) - b.alpha3 * np.abs(u)**(p - 1) - phi6 * (1 + np.sqrt(m2)))

    # G1 growth / Lipschitz / derivative bounds
    g1 = feval(coeffs.G1, t, x, u, m2)
    _finite_or_raise("G1", g1, wit_all)
    g1_2 = feval(coeffs.G1, t, x, u2, m2p)
    phi_g = feval(b.phi_g, t, x)
    phi7 = feval(b.phi7, t, x)
    phi8 = feval(b.phi8, t, x)
    psi_g = np.asarray(b.psi_g(x), dtype=float)
    add("G1_growth", np.abs(g1) - phi_g - phi7 * np.abs(u) - psi_g * np.sqrt(m2))
    add("G1_lipschitz", np.abs(g1 - g1_2) - phi7 * (np.abs(u - u2) + wmod))
    dg1dx = (feval(coeffs.G1, t, x + h, u, m2)
             - feval(coeffs.G1, t, x - h, u, m2)) / (2 * h)
    add("G1_dx_growth",
        np.abs(dg1dx) - phi8 - phi7 * (np.abs(u) + np.sqrt(m2)))
    dg1du = (feval(coeffs.G1, t, x, u + h, m2)
             - feval(coeffs.G1, t, x, u - h, m2)) / (2 * h)
    add("G1_du_bound", np.abs(dg1du) - phi7)

    # sigma_k growth / Lipschitz / derivative bounds; reduce over modes
    def seval(func, tt, uu, mm):
        try:
            out = np.asarray(func(tt, uu, mm), dtype=float)
            if out.shape == (n,):
                return out
        except Exception:
            pass
        return np.array([func(float(tt[i]), float(uu[i]), float(mm[i]))
                         for i in range(n)], dtype=float)

    grow = np.full(n, -np.inf)
    lip = np.full(n, -np.inf)
    der = np.full(n, -np.inf)
    for k in range(coeffs.K):
        sk = seval(coeffs.sigma[k], t, u, m2)
        _finite_or_raise(f"sigma_{k+1}", sk, wit_all)
        sk2 = seval(coeffs.sigma[k], t, u2, m2p)
        grow = np.maximum(grow, np.abs(sk)
                          - b.beta1[k] * (1 + np.sqrt(m2))
                          - b.gamma1[k] * np.abs(u))
        lip = np.maximum(lip, np.abs(sk - sk2)
                         - b.L_sigma[k] * (np.abs(u - u2) + wmod))
        dsk = (seval(coeffs.sigma[k], t, u + h, m2)
               - seval(coeffs.sigma[k], t, u - h, m2)) / (2 * h)
        der = np.maximum(der, np.abs(dsk) - b.L_sigma[k])
    add("sigma_growth", grow)
    add("sigma_lipschitz", lip)
    add("sigma_du_bound", der)

    return AssumptionReport(records=records)


# ---------------------------------------------------------------------------
# Dissipativity margin and forcing integrals
# ---------------------------------------------------------------------------

def dissipativity_margin(coeffs: CoefficientSet, eta) -> float:
    """Signed slack in the drift-domination inequality at a given eta.

    Positive certifies the dissipativity condition the uniform estimates
    hang on; the margin is affine in both eta (slope -5) and lambda
    (slope +2).
    """
    if not 0.0 < eta < 1.0:
        raise ConfigError("eta must lie in (0, 1)")
    burden = (24.0 * coeffs.norm("w_l2_sq") * coeffs.norm("beta1_l2_sq")
              + 12.0 * coeffs.norm("w_linf")**2 * coeffs.norm("gamma1_l2_sq")
              + 2.0 * coeffs.norm("phi1_sup")
              + 2.0 * coeffs.norm("psi1_l1")
              + 2.0 * coeffs.norm("phi7_l1_linf")
              + coeffs.norm("psig_l1_linf")
              + 6.0 * coeffs.delta_l2_sq)
    return 2.0 * coeffs.lambda_ - 5.0 * eta - burden


def _forcing_rates(coeffs, s, x, wq):
    """(squared, fourth-power) instantaneous forcing sizes at time s."""
    phi_g = np.asarray(coeffs.bounds.phi_g(s, x), dtype=float)
    pg2 = float(phi_g**2 @ wq)
    th1 = 0.0
    th2 = 0.0
    for k in range(coeffs.K):
        th1 += float(np.asarray(coeffs.theta1[k](s, x), dtype=float)**2 @ wq)
        th2 += float(np.asarray(coeffs.theta2[k](s, x), dtype=float)**2 @ wq)
    return pg2 + th1 + th2, pg2**2 + th1**2 + th2**2


def forcing_integrals(coeffs: CoefficientSet, tau, eta,
                      n_points=2001) -> dict:
    """Exponentially weighted forcing history integrals ending at tau.

    I2 integrates e^{eta (s - tau)} times the squared forcing sizes, I4
    the fourth-power analogue with weight e^{2 eta (s - tau)}, over the
    window [tau - 40/eta, tau] by composite Simpson quadrature, plus a
    geometric bound on the omitted tail.  Raises IntegrabilityError when
    the value keeps growing as the window doubles.
    """
    if eta <= 0:
        raise ConfigError("eta must be positive")
    window = 40.0 / eta
    x = _REF_X
    wq = np.empty_like(x)
    dx = x[1] - x[0]
    wq[:] = dx
    wq[0] = wq[-1] = 0.5 * dx

    if n_points % 2 == 0:
        n_points += 1
    s_grid = np.linspace(tau - window, tau, n_points)
    g2 = np.empty(n_points)
    g4 = np.empty(n_points)
    for i, s in enumerate(s_grid):
        g2[i], g4[i] = _forcing_rates(coeffs, s, x, wq)
    if not (np.all(np.isfinite(g2)) and np.all(np.isfinite(g4))):
        raise EvaluationError("forcing evaluated to a non-finite value")

    from scipy.integrate import simpson

    w2 = np.exp(eta * (s_grid - tau))
    w4 = np.exp(2.0 * eta * (s_grid - tau))
    i2_full = float(simpson(w2 * g2, x=s_grid))
    i4_full = float(simpson(w4 * g4, x=s_grid))
    half = n_points // 2
    i2_half = float(simpson((w2 * g2)[half:], x=s_grid[half:]))
    i4_half = float(simpson((w4 * g4)[half:], x=s_grid[half:]))

    # divergence check: the half window already carries all but an
    # e^{-eta W/2} sliver for an integrable history
    for full, part in ((i2_full, i2_half), (i4_full, i4_half)):
        if full > 1.05 * part + 1e-12 and full > 1e-12:
            raise IntegrabilityError(
                "forcing integral grows with the quadrature window; "
                "the exponentially weighted history looks divergent")

    tail2 = float(np.max(g2)) * math.exp(-eta * window) / eta
    tail4 = float(np.max(g4)) * math.exp(-2.0 * eta * window) / (2.0 * eta)
    return {"I2": i2_full + tail2, "I4": i4_full + tail4}

