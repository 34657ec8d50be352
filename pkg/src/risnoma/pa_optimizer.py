"""Uplink power allocation minimising the total average BER.

Powers and cost both live in dB.  The per-user caps are handled with a
Lagrangian whose multipliers are adapted in an outer loop; the inner problem
is solved by damped Newton with finite-difference derivatives.  Only channel
statistics enter the cost, never instantaneous channels.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ber_analytic import BerRangeError, NumericalIntegrationError, ber_all
from .channel_model import SystemConfig
from .constellation import BerExpression, extract_ber_terms

__all__ = ["OptimizerDivergedError", "PaProblem", "PaResult", "cost", "optimize", "grid_search", "trace_csv"]

log = logging.getLogger(__name__)

FD_STEP = 0.05
GRAD_TOL = 1e-4
MAX_INNER = 200
MAX_OUTER = 40
ETA = 0.5
CONSTRAINT_TOL = 1e-3
COST_TOL = 1e-4
P_FLOOR = -50.0
MAX_STEP = 5.0
PA_EPSABS = 1e-13


class OptimizerDivergedError(RuntimeError):
    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace


def cost(p_dB, cfg: SystemConfig, exprs: Sequence[BerExpression] | None = None, epsabs: float = PA_EPSABS) -> float:
    """``10 log10(sum_k BER_k)`` at per-user powers ``p_dB``."""
    p_dB = np.asarray(p_dB, dtype=float)
    if not np.all(np.isfinite(p_dB)):
        return float("nan")
    exprs = extract_ber_terms(cfg.bits) if exprs is None else exprs
    total = float(np.sum(ber_all(cfg.with_powers(p_dB), exprs, epsabs=epsabs)))
    return 10 * np.log10(total) if total > 0 else float("-inf")


@dataclass
class PaProblem:
    cfg: SystemConfig
    P_max_dB: float | Sequence[float]
    xi: Sequence[float] | None = None
    p0: Sequence[float] | None = None

    def __post_init__(self):
        K = self.cfg.K
        self.P_max_dB = np.broadcast_to(np.asarray(self.P_max_dB, dtype=float), (K,)).copy()
        if not np.all(np.isfinite(self.P_max_dB)):
            raise ValueError("P_max must be finite")
        if self.xi is not None:
            self.xi = np.asarray(self.xi, dtype=float).copy()
        if self.xi is not None and np.any(self.xi < 0):
            raise ValueError("Lagrange multipliers must be non-negative")
        if self.p0 is None:
            self.p0 = self.P_max_dB - 10.0 * np.arange(K) / K
        self.p0 = np.asarray(self.p0, dtype=float)


@dataclass
class PaResult:
    p_star: np.ndarray
    cost: float
    trace: list = field(default_factory=list)
    xi: np.ndarray | None = None


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    K = len(trace[0]["p"]) if trace else 0
    w.writerow(["iteration"] + [f"p{k + 1}" for k in range(K)] + ["cost", "max_violation"])
    for t in trace:
        w.writerow([t["iteration"]] + [repr(float(x)) for x in t["p"]] + [repr(t["cost"]), repr(t["max_violation"])])
    return buf.getvalue()


class _Objective:
    """Memoised cost; finite differences revisit the same stencil points."""

    def __init__(self, cfg, exprs):
        self.cfg = cfg
        self.exprs = exprs
        self.cache: dict[tuple, float] = {}

    def __call__(self, p) -> float:
        key = tuple(np.round(np.asarray(p, dtype=float), 12))
        if key not in self.cache:
            try:
                self.cache[key] = cost(p, self.cfg, self.exprs)
            except (NumericalIntegrationError, BerRangeError):
                self.cache[key] = float("nan")
        return self.cache[key]

    def derivatives(self, p, h=FD_STEP):
        K = len(p)
        f0 = self(p)
        g = np.zeros(K)
        H = np.zeros((K, K))
        E = np.eye(K) * h
        fp = [self(p + E[i]) for i in range(K)]
        fm = [self(p - E[i]) for i in range(K)]
        for i in range(K):
            g[i] = (fp[i] - fm[i]) / (2 * h)
            H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h**2
            for j in range(i + 1, K):
                H[i, j] = H[j, i] = (
                    self(p + E[i] + E[j]) - self(p + E[i] - E[j]) - self(p - E[i] + E[j]) + self(p - E[i] - E[j])
                ) / (4 * h**2)
        return f0, g, H


def _newton_direction(g, H, free):
    """Damped Newton step on the free coordinates; curvature kept positive."""
    d = np.zeros_like(g)
    if not np.any(free):
        return d
    w, V = np.linalg.eigh(H[np.ix_(free, free)])
    floor = max(1e-3, 1e-6 * np.max(np.abs(w)))
    w = np.maximum(np.abs(w), floor)
    d[free] = -(V @ ((V.T @ g[free]) / w))
    scale = np.max(np.abs(d))
    if scale > MAX_STEP:
        d *= MAX_STEP / scale
    return d


def optimize(problem: PaProblem, exprs: Sequence[BerExpression] | None = None) -> PaResult:
    """Minimise the total BER in dB subject to ``P_k <= P_max``.

    Inner loop: projected damped Newton on ``f(p) + sum_k xi_k (P_k - P_max)``
    over ``[P_FLOOR, P_max]`` until the projected Lagrangian gradient is below
    ``GRAD_TOL`` (or the line search stalls).  Outer loop:
    ``xi_k <- xi_k exp(ETA (P_k - P_max))``, which relaxes the multipliers of
    caps that are not binding.  Each outer pass restarts from the best
    iterate seen so far, which is also what is returned.

    Raises
    ------
    OptimizerDivergedError
        If the cost is non-finite at the start point, or the finite-difference
        stencil leaves the region where the cost is defined in three
        consecutive outer passes.
    """
    cfg = problem.cfg
    exprs = extract_ber_terms(cfg.bits) if exprs is None else exprs
    obj = _Objective(cfg, exprs)
    pmax = problem.P_max_dB
    lo = np.minimum(P_FLOOR, pmax)
    p = np.clip(problem.p0.copy(), lo, pmax)
    if problem.xi is None:
        # start from the multipliers that balance the cost slope at p0
        xi = np.maximum(0.0, -obj.derivatives(p)[1])
    else:
        xi = problem.xi.copy()
    trace = []
    it = 0
    best_p, best_f = p.copy(), np.inf

    prev_cost = np.inf
    bad_passes = 0
    for outer in range(MAX_OUTER):
        if outer:
            # a runaway pass must not strand later passes in a flat region
            p = best_p.copy()
        prev_p = None
        stalled = False
        for inner in range(MAX_INNER):
            f0, g_f, H = obj.derivatives(p)
            if not np.isfinite(f0) or not np.all(np.isfinite(g_f)) or not np.all(np.isfinite(H)):
                if outer == 0 and prev_p is None:
                    raise OptimizerDivergedError(f"non-finite cost at p={p.tolist()}", trace)
                # stencil left the valid region: end this pass at the last good point
                p = best_p.copy() if prev_p is None else prev_p
                stalled = True
                break
            trace.append({"iteration": it, "p": p.copy(), "cost": float(f0),
                          "max_violation": float(max(0.0, np.max(p - pmax)))})
            it += 1
            if f0 < best_f:
                best_p, best_f = p.copy(), f0
            g = g_f + xi
            # coordinates resting on a bound with the gradient pushing outward stay put
            at_hi = (p >= pmax - 1e-12) & (g < 0)
            at_lo = (p <= lo + 1e-12) & (g > 0)
            free = ~(at_hi | at_lo)
            if np.max(np.abs(g[free]), initial=0.0) < GRAD_TOL:
                break
            d = _newton_direction(g, H, free)
            lag0 = f0 + xi @ (p - pmax)
            t = 1.0
            accepted = False
            for _ in range(9):
                trial = np.clip(p + t * d, lo, pmax)
                f_t = obj(trial)
                if np.isfinite(f_t) and f_t + xi @ (trial - pmax) < lag0:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break  # no decrease along a descent direction at FD resolution
            prev_p, p = p, trial
        bad_passes = bad_passes + 1 if stalled else 0
        if bad_passes >= 3:
            raise OptimizerDivergedError(f"cost repeatedly non-finite near p={p.tolist()}", trace)
        f_now = obj(p)
        log.debug("outer %d: p=%s xi=%s cost=%.6f", outer, p, xi, f_now)
        if not stalled and abs(f_now - prev_cost) < COST_TOL and np.all(p - pmax <= CONSTRAINT_TOL):
            break
        prev_cost = f_now
        xi = xi * np.exp(ETA * (p - pmax))
    return PaResult(p_star=best_p, cost=float(best_f), trace=trace, xi=xi)


def grid_search(cfg: SystemConfig, P_max_dB, lo_dB, step: float = 0.5, exprs=None):
    """Brute-force minimum of the cost over a ``step`` dB grid in ``[lo_dB, P_max]^K``."""
    import itertools

    exprs = extract_ber_terms(cfg.bits) if exprs is None else exprs
    pmax = np.broadcast_to(np.asarray(P_max_dB, dtype=float), (cfg.K,))
    lo = np.broadcast_to(np.asarray(lo_dB, dtype=float), (cfg.K,))
    axes = [np.arange(pmax[k], lo[k] - 1e-9, -step)[::-1] for k in range(cfg.K)]
    best = (np.inf, None)
    for pt in itertools.product(*axes):
        c = cost(np.array(pt), cfg, exprs)
        if c < best[0]:
            best = (c, np.array(pt))
    return best[1], best[0]
