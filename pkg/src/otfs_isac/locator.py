"""Three-ellipse target localisation and transmitter velocity estimation.

Each instant contributes one ellipse ``|p - s_i| + |p| = r_i`` with foci
at the transmitter and the receiver (origin). Squaring gives the pseudo
linear system ``alpha - A z = B e`` in ``z = [x, y, |p|]``, solved by an
iteratively reweighted WLS. A second WLS on the squared coordinates
reinstates ``|p|^2 = x^2 + y^2``, and the remaining sign ambiguity is
settled by the range residual.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scene import SensingMeasurement

__all__ = [
    "LocalizationError",
    "IllConditionedWarning",
    "CoarseEstimate",
    "LocalizationResult",
    "build_system",
    "coarse_wls",
    "refine_wls",
    "resolve_sign",
    "range_loss",
    "locate",
    "estimate_velocity",
    "velocity_matrix",
    "algebraic_residual",
    "geometric_residual",
    "locate_lm",
    "locate_dfp",
    "initial_guess",
    "brute_force_locate",
]

_SELECTION = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


class LocalizationError(ValueError):
    pass


class IllConditionedWarning(UserWarning):
    pass


@dataclass
class CoarseEstimate:
    z_hat: np.ndarray  # [x, y, |p|]
    cov_z: np.ndarray
    iterations: int
    converged: bool


@dataclass
class LocalizationResult:
    p_hat: np.ndarray
    upsilon_hat: np.ndarray
    loss_L: float
    sign_choice: tuple[int, int]
    velocities: np.ndarray
    coarse: CoarseEstimate
    velocity_condition: np.ndarray
    flags: list[str] = field(default_factory=list)


def _stack(meas: Sequence[SensingMeasurement]):
    s = np.array([m.s for m in meas], dtype=float).reshape(-1, 2)
    r = np.array([m.r_hat for m in meas], dtype=float)
    return s, r


def build_system(meas: Sequence[SensingMeasurement]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``alpha`` (n,) and ``A`` (n, 3) of the pseudo-linear ellipse system.

    ``alpha_i = (r_i^2 - |s_i|^2) / 2`` and row ``i`` of ``A`` is
    ``-[s_i^T, -r_i]``.
    """
    if len(meas) < 3:
        raise LocalizationError(f"at least three ellipses are required, got {len(meas)}")
    s, r = _stack(meas)
    alpha = 0.5 * (r**2 - np.sum(s**2, axis=1))
    A = -np.column_stack([s, -r])
    if np.linalg.matrix_rank(A) < 3:
        raise LocalizationError("degenerate transmitter geometry: A is rank deficient")
    return alpha, A


def _wls(A, alpha, R):
    Ri_A = np.linalg.solve(R, A)
    normal = A.T @ Ri_A
    if np.linalg.cond(normal) > 1e14:
        raise LocalizationError("A^T R^-1 A is singular; transmitter positions are degenerate")
    cov = np.linalg.inv(normal)
    z = cov @ (Ri_A.T @ alpha)
    return z, cov


def coarse_wls(
    alpha: np.ndarray,
    A: np.ndarray,
    Q: np.ndarray,
    eps: float = 1e-6,
    max_iter: int = 50,
) -> CoarseEstimate:
    """Two-stage reweighted WLS for ``z = [x, y, |p|]`` treating ``|p|`` as free.

    Starts from ``R = Q``; each pass rebuilds ``B = v I - diag(r)`` from the
    current ``v = z[2]`` and sets ``R = B Q B^T``. Stops once consecutive
    iterates differ by at most ``eps`` (2-norm).
    """
    alpha = np.asarray(alpha, dtype=float)
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    r = A[:, 2]
    z, cov = _wls(A, alpha, Q)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        B = z[2] * np.eye(len(r)) - np.diag(r)
        R = B @ Q @ B.T
        try:
            z_new, cov_new = _wls(A, alpha, R)
        except np.linalg.LinAlgError:
            # B singular: current |p| equals one of the measured ranges
            break
        step = np.linalg.norm(z_new - z)
        z, cov = z_new, cov_new
        if step <= eps:
            converged = True
            break
    return CoarseEstimate(z_hat=z, cov_z=0.5 * (cov + cov.T), iterations=it, converged=converged)


def refine_wls(coarse: CoarseEstimate, reg: float = 1e-9, tiny: float = 1e-6):
    """Second WLS on ``[x^2, y^2, |p|^2] = S [x^2, y^2]``.

    Returns ``(upsilon_hat, flags)``. Negative components are clamped to
    zero. When a coarse coordinate is (near) zero the weight matrix is
    singular and is loaded with ``reg * trace / 3`` on the diagonal.
    """
    z = np.asarray(coarse.z_hat, dtype=float)
    theta = z**2
    Cbar = np.diag(z)
    omega = 4.0 * Cbar @ coarse.cov_z @ Cbar
    flags = []
    if np.any(np.abs(z) < tiny):
        omega = omega + reg * max(np.trace(omega), np.finfo(float).tiny) / 3.0 * np.eye(3)
        flags.append("omega_regularized")
    try:
        Wi_S = np.linalg.solve(omega, _SELECTION)
        Wi_theta = np.linalg.solve(omega, theta)
    except np.linalg.LinAlgError:
        omega = omega + reg * max(np.trace(omega), 1.0) / 3.0 * np.eye(3)
        flags.append("omega_regularized")
        Wi_S = np.linalg.solve(omega, _SELECTION)
        Wi_theta = np.linalg.solve(omega, theta)
    ups = np.linalg.solve(_SELECTION.T @ Wi_S, _SELECTION.T @ Wi_theta)
    if np.any(ups < 0):
        flags.append("upsilon_clamped")
        ups = np.maximum(ups, 0.0)
    return ups, flags


def range_loss(p, meas: Sequence[SensingMeasurement]) -> float:
    """Accumulated squared bistatic-range residual ``sum(|p - s_i| + |p| - r_i)^2``."""
    s, r = _stack(meas)
    p = np.asarray(p, dtype=float)
    res = np.linalg.norm(p - s, axis=1) + np.linalg.norm(p) - r
    return float(res @ res)


def resolve_sign(upsilon_hat, meas: Sequence[SensingMeasurement]):
    """Pick the sign pattern of ``[+-sqrt(u1), +-sqrt(u2)]`` with the smallest range loss.

    Returns ``(p_hat, loss, signs)``. Candidates are tried in the order
    ``(+,+), (+,-), (-,+), (-,-)``; zero components collapse duplicates and
    ties keep the earlier candidate.
    """
    root = np.sqrt(np.maximum(np.asarray(upsilon_hat, dtype=float), 0.0))
    best = None
    seen = set()
    for signs in itertools.product((1, -1), repeat=2):
        cand = root * np.array(signs)
        key = tuple(cand)
        if key in seen:
            continue
        seen.add(key)
        loss = range_loss(cand, meas)
        if best is None or loss < best[1]:
            best = (cand, loss, signs)
    return best


def velocity_matrix(p_hat, s) -> np.ndarray:
    """Rows: unit vectors from the target and from the receiver towards the transmitter."""
    s = np.asarray(s, dtype=float)
    a = s - np.asarray(p_hat, dtype=float)
    b = s.copy()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise LocalizationError("transmitter coincides with target or receiver")
    return np.vstack([a / na, b / nb])


def estimate_velocity(p_hat, meas_i: SensingMeasurement, max_cond: float = 1e6):
    """Least-squares transmitter velocity from the two range rates.

    Returns ``(velocity, condition_number)``; a condition number above
    ``max_cond`` raises an :class:`IllConditionedWarning`.
    """
    Ci = velocity_matrix(p_hat, meas_i.s)
    u = np.array([meas_i.r_dot_hat, meas_i.d_dot_hat])
    cond = np.linalg.cond(Ci)
    if not np.isfinite(cond) or cond > max_cond:
        warnings.warn(f"velocity system ill-conditioned (cond={cond:.3g})",
                      IllConditionedWarning, stacklevel=2)
    v, *_ = np.linalg.lstsq(Ci, u, rcond=None)
    return v, float(cond)


def _velocities(p_hat, meas):
    vels, conds = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        for m in meas:
            v, c = estimate_velocity(p_hat, m)
            vels.append(v)
            conds.append(c)
    return np.array(vels), np.array(conds)


def default_weights(meas: Sequence[SensingMeasurement]) -> np.ndarray:
    sig = np.array([m.sigma_r for m in meas], dtype=float)
    if np.all(sig > 0):
        return np.diag(sig**2)
    return np.eye(len(meas))


def locate(
    meas: Sequence[SensingMeasurement],
    Q: np.ndarray | None = None,
    eps: float = 1e-6,
    max_iter: int = 50,
) -> LocalizationResult:
    """Double-WLS position estimate followed by per-instant velocity estimates."""
    alpha, A = build_system(meas)
    if Q is None:
        Q = default_weights(meas)
    coarse = coarse_wls(alpha, A, Q, eps=eps, max_iter=max_iter)
    ups, flags = refine_wls(coarse)
    p_hat, loss, signs = resolve_sign(ups, meas)
    if not coarse.converged:
        flags.append("tse_not_converged")
    vels, conds = _velocities(p_hat, meas)
    if np.any(~np.isfinite(conds) | (conds > 1e6)):
        flags.append("velocity_ill_conditioned")
    return LocalizationResult(p_hat=p_hat, upsilon_hat=ups, loss_L=loss, sign_choice=signs,
                              velocities=vels, coarse=coarse, velocity_condition=conds,
                              flags=flags)


# -- baselines -------------------------------------------------------------

def algebraic_residual(meas: Sequence[SensingMeasurement]):
    """Residual ``alpha - A [p; |p|]`` of the squared ellipse equations and its Jacobian."""
    alpha, A = build_system(meas)

    def fun(p):
        p = np.asarray(p, dtype=float)
        n = np.linalg.norm(p)
        res = alpha - A @ np.array([p[0], p[1], n])
        dz = np.vstack([np.eye(2), p / n if n > 0 else np.zeros(2)])
        return res, -A @ dz

    return fun


def geometric_residual(meas: Sequence[SensingMeasurement]):
    """Residual ``|p - s_i| + |p| - r_i`` and its Jacobian."""
    s, r = _stack(meas)

    def fun(p):
        p = np.asarray(p, dtype=float)
        d = p - s
        nd = np.linalg.norm(d, axis=1)
        n = np.linalg.norm(p)
        res = nd + n - r
        J = d / np.where(nd > 0, nd, 1.0)[:, None] + (p / n if n > 0 else np.zeros(2))
        return res, J

    return fun


def _residual_fun(meas, residual: str):
    if residual == "algebraic":
        return algebraic_residual(meas)
    if residual == "geometric":
        return geometric_residual(meas)
    raise ValueError(f"unknown residual {residual!r}")


def initial_guess(meas: Sequence[SensingMeasurement], how: str = "linear",
                  grid_step: float = 1.0) -> np.ndarray:
    """Starting point shared by the iterative baselines.

    ``"linear"`` solves the stacked ellipse equations by ordinary least
    squares (no weighting, no refinement); ``"grid"`` is the argmin of
    :func:`range_loss` on a ``grid_step`` lattice covering every point
    with ``|p| <= (r_i + |s_i|) / 2``; ``"centroid"`` is the mean
    transmitter position.
    """
    if how == "centroid":
        return np.mean([m.s for m in meas], axis=0)
    if how == "linear":
        alpha, A = build_system(meas)
        z, *_ = np.linalg.lstsq(A, alpha, rcond=None)
        return z[:2]
    if how == "grid":
        s, r = _stack(meas)
        # r_i = |p - s_i| + |p| >= 2|p| - |s_i|
        reach = float(np.max(r + np.linalg.norm(s, axis=1)) / 2)
        return brute_force_locate(meas, (-reach, reach, -reach, reach), grid_step)
    raise ValueError(f"unknown initialiser {how!r}")


def _start(meas, init, grid_step: float = 1.0):
    if init is None or isinstance(init, str):
        return initial_guess(meas, init or "linear", grid_step)
    return np.array(init, dtype=float)


def locate_lm(
    meas: Sequence[SensingMeasurement],
    init=None,
    damping: float = 1e-3,
    max_iter: int = 100,
    residual: str = "algebraic",
    xtol: float = 1e-10,
    gtol: float = 1e-12,
) -> np.ndarray:
    """Levenberg-Marquardt on the ellipse residuals.

    ``init`` is a point or an :func:`initial_guess` mode (default linear LS).

    ``damping`` scales the initial ``mu = damping * max(diag(J^T J))``;
    the step is accepted on cost decrease with the gain-ratio update of
    Nielsen.
    """
    fun = _residual_fun(meas, residual)
    p = _start(meas, init)
    if max_iter <= 0:
        return p
    res, J = fun(p)
    cost = res @ res
    JtJ = J.T @ J
    g = J.T @ res
    mu = damping * max(np.max(np.diag(JtJ)), 1e-12)
    nu = 2.0
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= gtol:
            break
        step = np.linalg.solve(JtJ + mu * np.eye(2), -g)
        if np.linalg.norm(step) <= xtol * (np.linalg.norm(p) + xtol):
            break
        p_new = p + step
        res_new, J_new = fun(p_new)
        cost_new = res_new @ res_new
        predicted = step @ (mu * step - g)
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if rho > 0:
            p, res, J, cost = p_new, res_new, J_new, cost_new
            JtJ = J.T @ J
            g = J.T @ res
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2.0
    return p


def _fd_gradient(f, p, h):
    f0 = f(p)
    g = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f0) / h
    return g


def locate_dfp(
    meas: Sequence[SensingMeasurement],
    init=None,
    max_iter: int = 200,
    residual: str = "algebraic",
    fd_step: float = 0.01,
    gtol: float = 1e-8,
    c1: float = 1e-4,
    shrink: float = 0.5,
) -> np.ndarray:
    """Davidon-Fletcher-Powell quasi-Newton on the summed squared residual.

    Gradients are forward differences with step ``fd_step`` (metres); the
    inverse Hessian starts from the identity scaled by the first gradient
    and is updated with the DFP rank-two formula. Each step uses an Armijo
    backtracking line search.
    """
    fun = _residual_fun(meas, residual)

    def f(p):
        res, _ = fun(p)
        return 0.5 * float(res @ res)

    p = _start(meas, init)
    if max_iter <= 0:
        return p
    g = _fd_gradient(f, p, fd_step)
    H = np.eye(2) / max(np.linalg.norm(g), 1e-12)
    fp = f(p)
    for _ in range(max_iter):
        if np.linalg.norm(g) <= gtol:
            break
        d = -H @ g
        if d @ g >= 0:
            H = np.eye(2) / max(np.linalg.norm(g), 1e-12)
            d = -H @ g
        t = 1.0
        while True:
            p_new = p + t * d
            f_new = f(p_new)
            if f_new <= fp + c1 * t * (g @ d) or t < 1e-12:
                break
            t *= shrink
        if t < 1e-12:
            break
        g_new = _fd_gradient(f, p_new, fd_step)
        s = p_new - p
        y = g_new - g
        sy = s @ y
        if sy > 1e-16:
            Hy = H @ y
            H = H + np.outer(s, s) / sy - np.outer(Hy, Hy) / (y @ Hy)
        p, g, fp = p_new, g_new, f_new
    return p


def brute_force_locate(
    meas: Sequence[SensingMeasurement],
    bbox: tuple[float, float, float, float],
    step: float,
) -> np.ndarray:
    """Grid argmin of :func:`range_loss` over ``(xmin, xmax, ymin, ymax)``."""
    xmin, xmax, ymin, ymax = bbox
    if step <= 0:
        raise ValueError("step must be positive")
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"empty bounding box {bbox}")
    xs = np.arange(xmin, xmax + step / 2, step)
    ys = np.arange(ymin, ymax + step / 2, step)
    s, r = _stack(meas)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    norm_p = np.hypot(X, Y)
    loss = np.zeros_like(X)
    for si, ri in zip(s, r):
        res = np.hypot(X - si[0], Y - si[1]) + norm_p - ri
        loss += res * res
    i, j = np.unravel_index(np.argmin(loss), loss.shape)
    return np.array([xs[i], ys[j]])
