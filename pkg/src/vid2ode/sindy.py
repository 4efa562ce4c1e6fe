"""Candidate library, derivative estimation and sparse regression.

The governing-equation model is  dX/dt = Theta(X) @ Xi + g(t)  with a monomial
candidate library Theta, a sparse coefficient matrix Xi and an unknown input
series g restricted to selected state equations. This module holds the pieces
shared by the video trainer and by direct discovery from state trajectories.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEquationError, IllConditionedError, TooShortError

COND_LIMIT = 1e10


def _monomial_exponents(n_states: int, degree: int, include_constant: bool):
    """All exponent tuples with total degree <= degree, graded order.

    Within a grade the tuples are ordered lexicographically descending, which
    for two states (q, v) gives [1, q, v, q^2, qv, v^2, ...].
    """
    out = []
    lo = 0 if include_constant else 1
    for total in range(lo, degree + 1):
        grade = [e for e in itertools.product(range(total + 1), repeat=n_states) if sum(e) == total]
        grade.sort(reverse=True)
        out.extend(grade)
    return tuple(out)


@dataclass(frozen=True)
class CandidateLibrary:
    """Monomial candidate functions over `n_states` variables."""

    n_states: int
    degree: int = 3
    include_constant: bool = True
    exponents: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "exponents", _monomial_exponents(self.n_states, self.degree, self.include_constant)
        )

    @property
    def n_terms(self) -> int:
        return len(self.exponents)

    def index_of(self, exponent) -> int:
        return self.exponents.index(tuple(int(e) for e in exponent))

    @property
    def constant_index(self):
        zero = (0,) * self.n_states
        return self.exponents.index(zero) if self.include_constant else None

    def term_names(self, state_names) -> list:
        names = []
        for exp in self.exponents:
            parts = []
            for name, k in zip(state_names, exp):
                if k == 1:
                    parts.append(name)
                elif k > 1:
                    parts.append(f"{name}^{k}")
            names.append("*".join(parts) if parts else "1")
        return names

    def reduce_table(self):
        """ridx[t, l] = library index of exponent(t) minus e_l, or -1.

        Used for analytic gradients: d theta_t / d x_l = E[t,l] * theta_{ridx}.
        """
        E = np.asarray(self.exponents, dtype=int)
        ridx = np.full((self.n_terms, self.n_states), -1, dtype=int)
        lookup = {exp: i for i, exp in enumerate(self.exponents)}
        for t, exp in enumerate(self.exponents):
            for l in range(self.n_states):
                if exp[l] > 0:
                    red = list(exp)
                    red[l] -= 1
                    ridx[t, l] = lookup[tuple(red)]
        return E, ridx

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "degree": self.degree,
            "include_constant": self.include_constant,
            "exponents": [list(e) for e in self.exponents],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(n_states=int(d["n_states"]), degree=int(d["degree"]),
                   include_constant=bool(d["include_constant"]))


@dataclass
class CoefficientMatrix:
    """Sparse coefficients [n_terms, n_states] with their active mask."""

    xi: np.ndarray
    mask: np.ndarray

    @classmethod
    def dense(cls, xi):
        xi = np.asarray(xi, dtype=float)
        return cls(xi=xi, mask=np.ones_like(xi, dtype=bool))

    def apply_mask(self):
        self.xi = np.where(self.mask, self.xi, 0.0)
        return self


@dataclass
class InputEstimate:
    """Trainable forcing series [m, n_states]; inactive columns stay zero."""

    values: np.ndarray
    dt: float
    input_rows: np.ndarray  # bool per state equation

    def project(self):
        """Zero inactive columns and remove the temporal mean of active ones."""
        self.values[:, ~self.input_rows] = 0.0
        act = self.values[:, self.input_rows]
        self.values[:, self.input_rows] = act - act.mean(axis=0, keepdims=True)
        return self


def central_difference(X: np.ndarray, dt: float):
    """Interior central differences: (X[j+1] - X[j-1]) / (2 dt), endpoints dropped."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 3:
        raise TooShortError(f"need at least 3 samples for central differences, got {X.shape[0]}")
    return (X[2:] - X[:-2]) / (2.0 * dt)


def central_difference_vjp(cot: np.ndarray, m: int, dt: float):
    """Adjoint of central_difference for an input of length m."""
    c = np.zeros((m,) + cot.shape[1:], dtype=float)
    w = cot / (2.0 * dt)
    c[2:] += w
    c[:-2] -= w
    return c


def build_library(states: np.ndarray, lib: CandidateLibrary) -> np.ndarray:
    """Evaluate every candidate monomial at each state row -> [k, n_terms]."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    k, d = states.shape
    if d != lib.n_states:
        raise ValueError(f"library built for {lib.n_states} states, got {d}")
    # powers[:, l, p] = states[:, l] ** p
    powers = np.ones((k, d, lib.degree + 1))
    for p in range(1, lib.degree + 1):
        powers[:, :, p] = powers[:, :, p - 1] * states
    E = np.asarray(lib.exponents, dtype=int)
    theta = np.ones((k, lib.n_terms))
    for l in range(d):
        theta *= powers[:, l, E[:, l]]
    return theta


def library_grad_states(theta: np.ndarray, lib: CandidateLibrary, cot_theta: np.ndarray) -> np.ndarray:
    """VJP of build_library: cotangent on Theta -> cotangent on the states.

    `theta` must be the library evaluated at the same states (its columns are
    reused as the reduced monomials of the analytic derivative).
    """
    E, ridx = lib.reduce_table()
    k = theta.shape[0]
    out = np.zeros((k, lib.n_states))
    for t in range(lib.n_terms):
        for l in range(lib.n_states):
            if E[t, l] > 0:
                out[:, l] += cot_theta[:, t] * (E[t, l] * theta[:, ridx[t, l]])
    return out


def dynamics_residual(Xdot: np.ndarray, theta: np.ndarray, xi: np.ndarray, g: np.ndarray):
    """Residual R = Xdot - Theta Xi - g and its mean-square loss."""
    Xdot = np.asarray(Xdot, dtype=float)
    pred = theta @ xi
    if pred.shape != Xdot.shape or (g is not None and np.shape(g) != Xdot.shape):
        raise ValueError(
            f"row-aligned shapes required, got Xdot {Xdot.shape}, Theta@Xi {pred.shape}, g {np.shape(g)}"
        )
    resid = Xdot - pred - (g if g is not None else 0.0)
    return float(np.mean(resid ** 2)), resid


def l_half_reg(xi: np.ndarray, eps: float, mask: np.ndarray = None) -> float:
    """Smoothed l_0.5 sparsity penalty, exactly sum |xi|^0.5 at eps = 0."""
    xi = np.asarray(xi, dtype=float)
    vals = (xi ** 2 + eps ** 2) ** 0.25 - np.sqrt(eps)
    if mask is not None:
        vals = vals[mask]
    return float(np.sum(vals))


def l_half_reg_grad(xi: np.ndarray, eps: float, mask: np.ndarray = None) -> np.ndarray:
    g = 0.5 * xi * (xi ** 2 + eps ** 2) ** (-0.75)
    if mask is not None:
        g = np.where(mask, g, 0.0)
    return g


def sequential_threshold(xi: np.ndarray, tau: float, input_rows=None, prev_mask=None,
                         state_names=None) -> np.ndarray:
    """Hard-threshold coefficients; the active set can only shrink.

    Raises EmptyEquationError if a state equation loses every term while having
    no input channel to fall back on.
    """
    if tau <= 0:
        raise ValueError("threshold must be positive")
    mask = np.abs(np.asarray(xi, dtype=float)) >= tau
    if prev_mask is not None:
        mask &= prev_mask
    for c in range(mask.shape[1]):
        if not mask[:, c].any() and (input_rows is None or not input_rows[c]):
            name = state_names[c] if state_names else f"column {c}"
            raise EmptyEquationError(name, f"threshold {tau} removed every term")
    return mask


def refit_active(theta: np.ndarray, Xdot: np.ndarray, g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-equation ordinary least squares on the active columns.

    g is the already-known input contribution (zeros where inactive); it is
    subtracted from the target before the solve.
    """
    theta = np.asarray(theta, dtype=float)
    Xdot = np.asarray(Xdot, dtype=float)
    xi = np.zeros((theta.shape[1], Xdot.shape[1]))
    for c in range(Xdot.shape[1]):
        active = np.flatnonzero(mask[:, c])
        if active.size == 0:
            continue
        A = theta[:, active]
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllConditionedError(active, cond)
        y = Xdot[:, c] - (g[:, c] if g is not None else 0.0)
        sol, *_ = np.linalg.lstsq(A, y, rcond=None)
        xi[active, c] = sol
    return xi


def substitute_affine(lib: CandidateLibrary, coeffs: np.ndarray, alpha, beta) -> np.ndarray:
    """Rewrite a library polynomial under the change of variables x_l = alpha_l*y_l + beta_l.

    Returns coefficients over the same library in the new variables y. Exact:
    the library is closed under lowering exponents, so no terms are lost.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    single = coeffs.ndim == 1
    C = coeffs.reshape(lib.n_terms, -1)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (lib.n_states,))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (lib.n_states,))
    lookup = {exp: i for i, exp in enumerate(lib.exponents)}
    out = np.zeros_like(C)
    from math import comb

    for t, exp in enumerate(lib.exponents):
        row = C[t]
        if not row.any():
            continue
        choices = []
        for l, e in enumerate(exp):
            choices.append([(k, comb(e, k) * alpha[l] ** k * beta[l] ** (e - k)) for k in range(e + 1)])
        for picks in itertools.product(*choices):
            new_exp = tuple(p[0] for p in picks)
            w = 1.0
            for p in picks:
                w *= p[1]
            out[lookup[new_exp]] += w * row
    return out[:, 0] if single else out


def _within_transform(blocks):
    """Subtract the across-trajectory mean at each time index (stacked back)."""
    stack = np.stack(blocks)  # [R, k, ...]
    centered = stack - stack.mean(axis=0, keepdims=True)
    return np.concatenate(list(centered), axis=0)


def _fit_columns(thetas, ydots, mask, input_rows, lib):
    """Least-squares fit of every state equation under the current mask.

    Forced equations eliminate the shared unknown input via the within
    transform (needs >= 2 trajectories); the constant column is recovered from
    the pooled residual mean afterwards. Returns (xi, g_interior).
    """
    R = len(thetas)
    k = thetas[0].shape[0]
    T = lib.n_terms
    d = ydots[0].shape[1]
    const_idx = lib.constant_index
    xi = np.zeros((T, d))
    g = np.zeros((k, d))
    theta_all = np.concatenate(thetas, axis=0)
    y_all = np.concatenate(ydots, axis=0)
    for c in range(d):
        active = np.flatnonzero(mask[:, c])
        if not input_rows[c]:
            if active.size == 0:
                continue
            A = theta_all[:, active]
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise IllConditionedError(active, cond)
            sol, *_ = np.linalg.lstsq(A, y_all[:, c], rcond=None)
            xi[active, c] = sol
            continue
        if R < 2:
            raise ValueError("forced equations need at least 2 trajectories to separate the shared input")
        act_nc = np.array([a for a in active if a != const_idx], dtype=int)
        if act_nc.size:
            A_w = _within_transform([th[:, act_nc] for th in thetas])
            y_w = _within_transform([yd[:, c] for yd in ydots])
            cond = np.linalg.cond(A_w)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise IllConditionedError(act_nc, cond)
            sol, *_ = np.linalg.lstsq(A_w, y_w, rcond=None)
            xi[act_nc, c] = sol
        resid = np.stack([yd[:, c] - th[:, act_nc] @ xi[act_nc, c] for th, yd in zip(thetas, ydots)])
        per_time = resid.mean(axis=0)
        mu = per_time.mean()
        if const_idx is not None and const_idx in active:
            xi[const_idx, c] = mu
        g[:, c] = per_time - mu
    return xi, g


def discover_from_states(trajectories, dt: float, lib: CandidateLibrary, input_rows,
                         tau: float = 0.1, rounds: int = 2, state_names=None):
    """Sequentially-thresholded discovery straight from state trajectories.

    trajectories: list of [m, d] arrays sharing one (unknown) input series.
    Returns (xi, mask, g_interior [m-2, d], info).
    """
    input_rows = np.asarray(input_rows, dtype=bool)
    thetas, ydots = [], []
    for tr in trajectories:
        tr = np.asarray(tr, dtype=float)
        ydots.append(central_difference(tr, dt))
        thetas.append(build_library(tr[1:-1], lib))
    mask = np.ones((lib.n_terms, ydots[0].shape[1]), dtype=bool)
    xi, g = _fit_columns(thetas, ydots, mask, input_rows, lib)
    history = [mask.sum()]
    for _ in range(rounds):
        mask = sequential_threshold(xi, tau, input_rows=input_rows, prev_mask=mask,
                                    state_names=state_names)
        xi, g = _fit_columns(thetas, ydots, mask, input_rows, lib)
        history.append(mask.sum())
    xi = np.where(mask, xi, 0.0)
    info = {"active_history": history}
    return xi, mask, g, info
