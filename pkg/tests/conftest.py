import numpy as np
import pytest

from mvfhn import rng
from mvfhn.fields import SpatialGrid
from mvfhn.measures import EmpiricalLaw


@pytest.fixture(scope="session")
def grid_small():
    return SpatialGrid(1, 8.0, 16)


@pytest.fixture(scope="session")
def grid_mid():
    return SpatialGrid(1, 8.0, 128)


@pytest.fixture(scope="session")
def grid_fine():
    return SpatialGrid(1, 8.0, 256)


def random_fields(grid, count, seed, key=0, zero_boundary=False):
    """Stack of seeded random fields on a grid."""
    draws = rng.normal_block(seed, rng.PROBE_DRAW_KEY + 1234 + key,
                             count, grid.size)
    out = draws.reshape((count,) + grid.shape)
    if zero_boundary:
        if grid.dimension == 1:
            out[:, 0] = out[:, -1] = 0.0
        else:
            out[:, 0, :] = out[:, -1, :] = 0.0
            out[:, :, 0] = out[:, :, -1] = 0.0
    return out


def random_law(grid, n_atoms, seed, scale=1.0, weights=None):
    u = scale * random_fields(grid, n_atoms, seed, key=1)
    v = scale * random_fields(grid, n_atoms, seed, key=2)
    return EmpiricalLaw(grid=grid, u_stack=u, v_stack=v, weights=weights)


def mild_coeffs(lam=5.0, gamma=6.0, alpha=0.5, beta=0.5, K=4,
                delta_total_sq=0.1, noise=0.0, forcing=0.0):
    """A small non-canonical coefficient set for targeted integrator
    tests: linear/zero drift pieces, optional localized forcing and
    noise, no law coupling."""
    import math

    from mvfhn.model import BoundSet, CoefficientSet, SeparableNoise

    kinv2 = np.arange(1, K + 1, dtype=float)**-2
    d0 = math.sqrt(delta_total_sq / float(np.sum(kinv2**2)))
    delta = d0 * kinv2

    def zero4(t, x, u, m2):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))

    def g2(t, x):
        return forcing * np.exp(-np.asarray(x)**2)

    sigma = [lambda t, u, m2, s=s: 0.0 * u for s in kinv2]
    theta = [lambda t, x, s=s: noise * s * np.exp(-np.asarray(x)**2)
             for s in kinv2]
    bounds = BoundSet(alpha1=1.0, alpha2=1.0, alpha3=1.0, phi1=0.0,
                      phi2=0.0, phi3=0.0, phi4=0.0, phi5=0.0, phi6=0.0,
                      phi7=0.0, phi8=0.0, phi_g=lambda t, x: g2(t, x),
                      psi1=0.0, psi_g=0.0, beta1=0.0 * kinv2,
                      gamma1=0.0 * kinv2, L_sigma=0.0 * kinv2)
    separable = SeparableNoise(
        sigma_scales=lambda t: 0.0 * kinv2,
        sigma_profile=lambda t, u, m2: np.zeros_like(u),
        theta1_scales=lambda t: noise * kinv2,
        theta1_profile=lambda t, x: np.exp(-np.asarray(x)**2),
        theta2_scales=lambda t: noise * kinv2,
        theta2_profile=lambda t, x: np.exp(-np.asarray(x)**2),
    )
    return CoefficientSet(
        lambda_=lam, alpha=alpha, beta=beta, gamma=gamma, p=4.0,
        f=zero4, G1=zero4, G2=g2, sigma=sigma, theta1=theta, theta2=theta,
        delta=delta, w=lambda x: np.exp(-np.asarray(x)**2 / 2.0),
        bounds=bounds, K=K, separable=separable, checked=True)
