"""Independent finite-difference reference solvers for the interaction game
with drift ``sigma (a - k x)``, running reward
``kappa1 * mean f(X) - a^2/2`` and terminal reward ``g(X_T)``.

These deliberately share no code with the package: they discretize the
dynamic-programming PDEs on a grid instead of simulating paths.
"""
import numpy as np
from scipy.linalg import solve_banded


def _H(z, a_min, a_max):
    a = np.clip(z, a_min, a_max)
    return a * z - 0.5 * a * a, a


def _implicit_step(u, rhs_explicit, dt, dx, sigma):
    # (I - dt/2 sigma^2 D2) u_new = u + dt * rhs, reflecting boundaries
    n = u.size
    c = 0.5 * sigma ** 2 * dt / dx ** 2
    ab = np.zeros((3, n))
    ab[0, 1:] = -c
    ab[1, :] = 1 + 2 * c
    ab[2, :-1] = -c
    ab[0, 1] = -2 * c
    ab[2, -2] = -2 * c
    return solve_banded((1, 1), ab, u + dt * rhs_explicit)


def _grad(u, dx):
    g = np.empty_like(u)
    g[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    g[0] = g[-1] = 0.0
    return g


def mfg_value_1d(kappa1=1.0, k=0.0, sigma=1.0, f=np.tanh, g=None, x0=0.0, T=1.0,
                 a_min=-1.0, a_max=1.0, half_width=8.0, nx=1601, nt=4000):
    """Mean-field value at ``(0, x0)``.

    With ``kappa2 = 0`` the population enters only through the additive term
    ``kappa1 E f(X_t)``, so the equilibrium control solves the HJB equation
    ``u_t + sigma^2/2 u_xx - k x sigma u_x + H(sigma u_x) = 0`` without it, and
    the population term is added through the linear Feynman-Kac equation
    ``v_t + sigma^2/2 v_xx + sigma (alpha - k x) v_x + kappa1 f = 0``
    driven by the equilibrium drift (the representative player's own law is
    the population law).
    """
    g = (lambda x: np.zeros_like(x)) if g is None else g
    x = x0 + np.linspace(-half_width, half_width, nx)
    dx = x[1] - x[0]
    dt = T / nt
    u = g(x).astype(float)
    v = np.zeros_like(x)
    for _ in range(nt):
        ux = _grad(u, dx)
        z = sigma * ux
        Hval, a = _H(z, a_min, a_max)
        vx = _grad(v, dx)
        v = _implicit_step(v, sigma * (a - k * x) * vx + kappa1 * f(x), dt, dx, sigma)
        u = _implicit_step(u, -k * x * z + Hval, dt, dx, sigma)
    i0 = nx // 2
    return float(u[i0] + v[i0])


def two_player_value(kappa1=1.0, k=0.0, sigma=1.0, f=np.tanh, g=None, x0=0.0, T=1.0,
                     a_min=-1.0, a_max=1.0, half_width=6.0, nx=241, safety=0.2):
    """Nash value of player 1 at ``(0, x0, x0)`` for two players, ``kappa2 = 0``.

    Explicit scheme for the coupled HJB system
    ``v_t + sigma^2/2 Lap v + sigma (a2 - k x2) d2 v + sup_a [sigma (a - k x1) d1 v - a^2/2]
    + kappa1 (f(x1) + f(x2)) / 2 = 0``, where player 2's control is the
    mirror image ``a2(x1, x2) = a1(x2, x1)`` by symmetry.
    """
    g = (lambda x: np.zeros_like(x)) if g is None else g
    x = x0 + np.linspace(-half_width, half_width, nx)
    dx = x[1] - x[0]
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    nt = int(np.ceil(T / (safety * dx ** 2 / sigma ** 2)))
    dt = T / nt
    v = g(X1).astype(float)
    run = 0.5 * kappa1 * (f(X1) + f(X2))
    for _ in range(nt):
        p = np.pad(v, 1, mode="edge")
        d1 = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * dx)
        d2 = (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * dx)
        lap = (p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2] - 4 * v) / dx ** 2
        a1 = np.clip(sigma * d1, a_min, a_max)
        a2 = a1.T
        ham = sigma * (a1 - k * X1) * d1 - 0.5 * a1 * a1 + sigma * (a2 - k * X2) * d2
        v = v + dt * (0.5 * sigma ** 2 * lap + ham + run)
    i0 = nx // 2
    return float(v[i0, i0])
