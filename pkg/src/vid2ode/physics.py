"""RK4 one-step flow map and rollout.

The same integrator advances both the exact generating dynamics (simulation)
and the learned library dynamics (forward-reconstruction constraint), so
trajectories simulated here and re-simulated under a perfectly learned model
agree bit for bit. Input samples are given at the step endpoints; the midpoint
stages use their average.
"""

from __future__ import annotations

import numpy as np

from .errors import SimulationDivergedError
from .sindy import CandidateLibrary, build_library, library_grad_states


class LibraryModel:
    """dx/dt = Theta(x) @ (xi * mask) + g, with analytic VJPs."""

    def __init__(self, lib: CandidateLibrary, xi: np.ndarray, mask: np.ndarray = None):
        self.lib = lib
        self.xi = np.asarray(xi, dtype=float)
        self.mask = np.ones_like(self.xi, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    @property
    def xi_eff(self):
        return np.where(self.mask, self.xi, 0.0)

    def f(self, x, g):
        theta = build_library(np.atleast_2d(x), self.lib)
        out = theta @ self.xi_eff
        if g is not None:
            out = out + np.atleast_2d(g)
        return out.reshape(np.shape(x))

    def f_vjp(self, x, cot):
        """Returns (d_x, d_xi, d_g) for a batch of states [k, d]."""
        x = np.atleast_2d(x)
        cot = np.atleast_2d(cot)
        theta = build_library(x, self.lib)
        d_xi = theta.T @ cot
        d_xi = np.where(self.mask, d_xi, 0.0)
        cot_theta = cot @ self.xi_eff.T
        d_x = library_grad_states(theta, self.lib, cot_theta)
        return d_x, d_xi, cot.copy()


class ExactModel:
    """Wraps a closed-form right-hand side f(x, g) (ground-truth simulation)."""

    def __init__(self, fn):
        self.fn = fn

    def f(self, x, g):
        return self.fn(x, g)


def rk4_step(x, g0, g1, dt, model, want_cache=False):
    """Classic RK4 step with input samples g0 at t and g1 at t+dt.

    Stage inputs: g0, (g0+g1)/2, (g0+g1)/2, g1. Works on a single state [d] or
    a batch [k, d]; g may be None for unforced dynamics.
    """
    x = np.asarray(x, dtype=float)
    gm = None if g0 is None else 0.5 * (np.asarray(g0) + np.asarray(g1))
    k1 = model.f(x, g0)
    x2 = x + 0.5 * dt * k1
    k2 = model.f(x2, gm)
    x3 = x + 0.5 * dt * k2
    k3 = model.f(x3, gm)
    x4 = x + dt * k3
    k4 = model.f(x4, g1)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationDivergedError(0, "rk4 step produced non-finite values")
    if want_cache:
        return out, (x, x2, x3, x4)
    return out


def rk4_step_vjp(cache, dt, model, cot):
    """Backpropagate one RK4 step through a LibraryModel.

    cache comes from rk4_step(..., want_cache=True). Returns cotangents
    (d_x, d_xi, d_g0, d_g1).
    """
    x, x2, x3, x4 = cache
    cot = np.asarray(cot, dtype=float)
    c_x = cot.copy()
    c_k1 = (dt / 6.0) * cot
    c_k2 = (dt / 3.0) * cot
    c_k3 = (dt / 3.0) * cot
    c_k4 = (dt / 6.0) * cot

    d_xi = np.zeros_like(model.xi)
    d_g0 = np.zeros_like(cot)
    d_g1 = np.zeros_like(cot)

    # k4 = f(x4, g1); x4 = x + dt*k3
    dx4, dxi, dg = model.f_vjp(x4, c_k4)
    d_xi += dxi
    d_g1 += dg
    c_x += dx4
    c_k3 += dt * dx4
    # k3 = f(x3, gm); x3 = x + dt/2 * k2
    dx3, dxi, dg = model.f_vjp(x3, c_k3)
    d_xi += dxi
    d_g0 += 0.5 * dg
    d_g1 += 0.5 * dg
    c_x += dx3
    c_k2 += 0.5 * dt * dx3
    # k2 = f(x2, gm); x2 = x + dt/2 * k1
    dx2, dxi, dg = model.f_vjp(x2, c_k2)
    d_xi += dxi
    d_g0 += 0.5 * dg
    d_g1 += 0.5 * dg
    c_x += dx2
    c_k1 += 0.5 * dt * dx2
    # k1 = f(x, g0)
    dx1, dxi, dg = model.f_vjp(x, c_k1)
    d_xi += dxi
    d_g0 += dg
    c_x += dx1
    return c_x, d_xi, d_g0, d_g1


def rollout(x0, g, dt, steps, model):
    """Iterate rk4_step from x0; returns states [steps+1, d].

    g must provide at least steps+1 input samples (rows), or be None.
    """
    x0 = np.asarray(x0, dtype=float)
    if g is not None:
        g = np.asarray(g, dtype=float)
        if g.shape[0] < steps + 1:
            raise ValueError(f"input series too short: {g.shape[0]} rows for {steps} steps")
    out = np.empty((steps + 1,) + x0.shape)
    out[0] = x0
    x = x0
    for j in range(steps):
        g0 = None if g is None else g[j]
        g1 = None if g is None else g[j + 1]
        try:
            x = rk4_step(x, g0, g1, dt, model)
        except SimulationDivergedError:
            raise SimulationDivergedError(j, "state became non-finite during rollout")
        out[j + 1] = x
    return out
