"""Matrix-free nonlinear least squares.

Minimizes L(w) = ||r(w)||^2 by Gauss-Newton outer rounds. Each round solves
the local quadratic model

    L_w(dw) = dw' J'J dw + 2 dw' J' r + r' r,      J = dr/dw at w,

with the conjugate-gradient method applied to J'J dw = -J'r, where J'J is
only ever touched through one Jacobian-vector product followed by one
vector-Jacobian product per CG iteration. Steps are applied unconditionally
by default; there is no line search, damping or preconditioning.

A steepest-descent solver with an exact step on the same quadratic model is
provided as the equal-budget baseline for optimizer comparisons (one jvp and
one vjp per iteration, the same cost as a CG iteration).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

__all__ = [
    "ResidualProblem",
    "GnConfig",
    "SolveReport",
    "SolverDivergence",
    "cg_solve",
    "gn_normal_apply",
    "solve_nlls",
    "solve_nlls_gd",
]


class ResidualProblem(Protocol):
    """Evaluation surface for a stacked residual and its Jacobian products.

    jvp and vjp must be exact adjoints of each other:
    <jvp(w, p), u> == <p, vjp(w, u)> for all p, u. Implementations must be
    reentrant for the duration of a solve; the solver passes the same w object
    to every jvp/vjp call of one round, so caching the linearization keyed on
    object identity is safe.
    """

    n_params: int
    n_residuals: int

    def residual(self, w: np.ndarray) -> np.ndarray: ...

    def jvp(self, w: np.ndarray, p: np.ndarray) -> np.ndarray: ...

    def vjp(self, w: np.ndarray, u: np.ndarray) -> np.ndarray: ...


class SolverDivergence(RuntimeError):
    """Non-finite values encountered while solving."""

    def __init__(self, message: str, iteration: int | None = None,
                 report: "SolveReport | None" = None) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.report = report


@dataclass
class GnConfig:
    """always_accept=True applies every increment unconditionally. With
    False, an increment that raises the loss is halved (up to
    max_step_halvings times, deterministically) until it does not; if even
    the smallest step raises the loss the round leaves w unchanged, so the
    reported loss sequence is non-increasing."""

    outer_iterations: int = 6
    cg_iterations: int = 10
    cg_residual_tolerance: float = 1e-8
    always_accept: bool = True
    max_step_halvings: int = 20

    def __post_init__(self) -> None:
        if self.outer_iterations < 0 or self.cg_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.cg_residual_tolerance <= 0:
            raise ValueError("cg_residual_tolerance must be > 0")


@dataclass
class SolveReport:
    """Loss trace and solve statistics; losses[k] is L(w) entering round k."""

    losses: list[float] = field(default_factory=list)
    cg_iterations_total: int = 0
    final_gradient_norm: float = 0.0


def _cg(apply_operator: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
        max_iters: int, tol: float) -> tuple[np.ndarray, int]:
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return x, 0
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    iters = 0
    for k in range(max_iters):
        if np.sqrt(rs) <= tol * rhs_norm:
            break
        ap = apply_operator(p)
        if ap.shape != rhs.shape:
            raise ValueError(f"operator returned shape {ap.shape}, expected {rhs.shape}")
        curvature = float(p @ ap)
        if not np.isfinite(curvature):
            raise SolverDivergence("non-finite curvature in CG", iteration=k)
        if curvature <= 0.0:
            # PSD operator with a flat direction; nothing more to gain.
            break
        alpha = rs / curvature
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise SolverDivergence("non-finite residual in CG", iteration=k)
        p = r + (rs_new / rs) * p
        rs = rs_new
        iters = k + 1
    return x, iters


def cg_solve(apply_operator: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
             max_iters: int, tol: float = 1e-8) -> np.ndarray:
    """Approximately solve A x = rhs for symmetric PSD A given only x -> A x.

    Starts from zero, runs standard CG recurrences, and stops early once the
    residual norm falls below tol * ||rhs||. Returns the last iterate.
    """
    x, _ = _cg(apply_operator, rhs, max_iters, tol)
    return x


def gn_normal_apply(problem: ResidualProblem, w: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Apply the Gauss-Newton normal operator: p -> J'(J p), two backprops."""
    p = np.asarray(p, dtype=float)
    if p.shape != (problem.n_params,):
        raise ValueError(f"direction has shape {p.shape}, expected ({problem.n_params},)")
    q1 = problem.jvp(w, p)
    if q1.shape != (problem.n_residuals,):
        raise ValueError(f"jvp returned shape {q1.shape}, expected ({problem.n_residuals},)")
    return problem.vjp(w, q1)


def solve_nlls(problem: ResidualProblem, w0: np.ndarray,
               config: GnConfig) -> tuple[np.ndarray, SolveReport]:
    """Gauss-Newton with CG inner solves; returns the iterate and its report."""
    w = np.array(w0, dtype=float)
    if w.shape != (problem.n_params,):
        raise ValueError(f"w0 has shape {w.shape}, expected ({problem.n_params},)")
    if not np.all(np.isfinite(w)):
        raise ValueError("w0 must be finite")

    report = SolveReport()
    r = problem.residual(w)
    loss = float(r @ r)
    report.losses.append(loss)
    _check_finite(loss, report, iteration=0)

    for k in range(config.outer_iterations):
        rhs = -problem.vjp(w, r)
        dw, iters = _cg(lambda p: problem.vjp(w, problem.jvp(w, p)),
                        rhs, config.cg_iterations, config.cg_residual_tolerance)
        report.cg_iterations_total += iters
        w_new = w + dw
        r_new = problem.residual(w_new)
        loss_new = float(r_new @ r_new)
        _check_finite(loss_new, report, iteration=k)
        if config.always_accept:
            w, r, loss = w_new, r_new, loss_new
        else:
            scale = 1.0
            for _ in range(config.max_step_halvings):
                if loss_new <= loss:
                    break
                scale *= 0.5
                w_new = w + scale * dw
                r_new = problem.residual(w_new)
                loss_new = float(r_new @ r_new)
                _check_finite(loss_new, report, iteration=k)
            if loss_new <= loss:
                w, r, loss = w_new, r_new, loss_new
        report.losses.append(loss)

    report.final_gradient_norm = 2.0 * float(np.linalg.norm(problem.vjp(w, r)))
    return w, report


def solve_nlls_gd(problem: ResidualProblem, w0: np.ndarray, iterations: int,
                  max_step_halvings: int = 20) -> tuple[np.ndarray, SolveReport]:
    """Steepest descent on ||r(w)||^2 with the exact step for the local quadratic.

    Per iteration: d = -J'r, alpha = ||d||^2 / ||J d||^2, w += alpha d. Costs
    one jvp and one vjp, matching one CG iteration of solve_nlls, which makes
    an iteration budget directly comparable. A step that raises the true loss
    is halved (deterministically, at most max_step_halvings times).
    """
    w = np.array(w0, dtype=float)
    if w.shape != (problem.n_params,):
        raise ValueError(f"w0 has shape {w.shape}, expected ({problem.n_params},)")

    report = SolveReport()
    r = problem.residual(w)
    loss = float(r @ r)
    report.losses.append(loss)
    _check_finite(loss, report, iteration=0)

    for k in range(iterations):
        d = -problem.vjp(w, r)
        dd = float(d @ d)
        if dd == 0.0:
            break
        jd = problem.jvp(w, d)
        curvature = float(jd @ jd)
        if not np.isfinite(curvature):
            raise SolverDivergence("non-finite curvature in GD", iteration=k, report=report)
        if curvature <= 0.0:
            break
        alpha = dd / curvature
        w_new = w + alpha * d
        r_new = problem.residual(w_new)
        loss_new = float(r_new @ r_new)
        _check_finite(loss_new, report, iteration=k)
        for _ in range(max_step_halvings):
            if loss_new <= loss:
                break
            alpha *= 0.5
            w_new = w + alpha * d
            r_new = problem.residual(w_new)
            loss_new = float(r_new @ r_new)
            _check_finite(loss_new, report, iteration=k)
        if loss_new <= loss:
            w, r, loss = w_new, r_new, loss_new
        report.losses.append(loss)

    report.final_gradient_norm = 2.0 * float(np.linalg.norm(problem.vjp(w, r)))
    return w, report


def _check_finite(loss: float, report: SolveReport, iteration: int) -> None:
    if not np.isfinite(loss):
        raise SolverDivergence(f"loss diverged at outer iteration {iteration}",
                               iteration=iteration, report=report)
