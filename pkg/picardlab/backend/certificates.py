"""Deterministic certificates: constant ledger, contraction partitions, the bound M and the majorant sequence."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from .errors import CertificationFailed, GateFailed, InvalidArgument
from .models import (
    BudgetSlack,
    ConstantLedger,
    GateReport,
    IntervalBudget,
    LedgerOverrides,
    Partition,
    QuadratureConfig,
)
from .modulus import TimeModulus
from .paths import TimeGrid
from .quadrature import ZERO, TimeFunction, integrate_function


logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
MAX_INTERVALS = 100_000
BISECTION_STEPS = 200
SNAP_TOLERANCE = 1e-6
MONOTONE_ULPS = 4


def c_p(p: float) -> float:
    return p / 2.0 * min(p - 1.0, 1.0)


def default_constant(p: float) -> float:
    return 16.0 * p**2 / min(p - 1.0, 1.0) ** 2


def make_ledger(p: float, overrides: Optional[Union[LedgerOverrides, Mapping[str, float]]] = None) -> ConstantLedger:
    if not p > 1:
        raise InvalidArgument("The constant ledger needs p > 1.")
    if isinstance(overrides, Mapping):
        overrides = LedgerOverrides(**overrides)
    chosen = overrides.model_dump(exclude_none=True) if overrides is not None else {}
    base = default_constant(p)
    values = {name: chosen.get(name, base) for name in ("m_p", "k_p", "bar_m_p", "hat_m_p", "tilde_m_p")}
    return ConstantLedger(p=p, c_p=c_p(p), **values)


@dataclass(frozen=True)
class _Budget:
    name: str
    b_threshold: Optional[float]
    ab_threshold: float


def _budget(kind: str, ledger: ConstantLedger) -> _Budget:
    if kind == "existence":
        return _Budget(kind, 0.5, LN2 / max(ledger.hat_m_p, ledger.bar_m_p))
    if kind == "uniqueness":
        return _Budget(kind, None, LN2 / ledger.tilde_m_p)
    if kind == "lipschitz":
        return _Budget(kind, None, LN2 / ledger.bar_m_p)
    raise InvalidArgument(f"Unknown partition budget {kind!r}.")


def _require_finite(named: Mapping[str, TimeFunction], T: float, quad: Optional[QuadratureConfig]) -> None:
    for name, func in named.items():
        if not math.isfinite(func.integral(0.0, T, quad)):
            raise CertificationFailed(f"The integral of {name} over [0, {T!r}] diverges.", integrand=name)


def _greedy_partition(
    alpha_q: TimeFunction,
    beta_sq: TimeFunction,
    b_env: TimeFunction,
    budget: _Budget,
    grid: TimeGrid,
    quad: Optional[QuadratureConfig],
) -> Partition:
    quad = quad or QuadratureConfig()
    T = grid.T

    def costs(lo: float, hi: float) -> tuple:
        return b_env.integral(lo, hi, quad), alpha_q.integral(lo, hi, quad), beta_sq.integral(lo, hi, quad)

    def within(lo: float, hi: float, margin: float) -> bool:
        b_int, a_hat, b_hat = costs(lo, hi)
        if budget.b_threshold is not None and b_int > budget.b_threshold * (1.0 - margin):
            return False
        return a_hat + b_hat <= budget.ab_threshold * (1.0 - margin)

    # interior cuts keep a quadrature-sized margin so independent re-quadrature still fits
    margin = quad.rel_tol
    snap = SNAP_TOLERANCE * T
    cuts = [T]
    hi = T
    while hi > 0.0:
        if len(cuts) > MAX_INTERVALS:
            raise CertificationFailed(f"Partition needs more than {MAX_INTERVALS} intervals.")
        if within(0.0, hi, 0.0):
            cuts.append(0.0)
            break
        bad, good = 0.0, hi
        for _ in range(BISECTION_STEPS):
            middle = 0.5 * (bad + good)
            if middle <= bad or middle >= good:
                break
            if within(middle, hi, margin):
                good = middle
            else:
                bad = middle
        lo = good
        nearby = grid.points[(np.abs(grid.points - lo) <= snap) & (grid.points < hi)]
        for point in sorted(nearby.tolist()):
            if within(point, hi, 0.0):
                lo = point
                break
        if lo >= hi:
            raise CertificationFailed(f"Partition stalled at t={hi!r}; the budget integrands are not integrable there.")
        cuts.append(lo)
        hi = lo
    points = sorted(cuts)
    intervals = []
    for lo, hi in zip(points[:-1], points[1:]):
        b_int, a_hat, b_hat = costs(lo, hi)
        intervals.append(IntervalBudget(t_lo=lo, t_hi=hi, b_integral=b_int, alpha_hat=a_hat, beta_hat=b_hat))
    logger.info("%s partition of [0, %s]: %d intervals.", budget.name.capitalize(), T, len(intervals))
    return Partition(
        budget=budget.name,
        b_threshold=budget.b_threshold,
        ab_threshold=budget.ab_threshold,
        points=points,
        intervals=intervals,
    )


def compute_partition(
    alpha: TimeFunction,
    beta: TimeFunction,
    b_env: TimeFunction,
    ledger: ConstantLedger,
    grid: TimeGrid,
    quad: Optional[QuadratureConfig] = None,
    budget: str = "existence",
) -> Partition:
    """Greedy backward partition of [0, T] meeting the per-interval contraction budgets.

    alpha-hat and beta-hat are the interval integrals of alpha^(p/(p-1)) and
    beta^2. ``existence`` also bounds the integral of b_env by 1/2.
    """
    p = ledger.p
    rule = _budget(budget, ledger)
    alpha_q = alpha.power(p / (p - 1.0))
    beta_sq = beta.power(2.0)
    required = {f"alpha^(p/(p-1)) = {alpha_q.name}": alpha_q, f"beta^2 = {beta_sq.name}": beta_sq}
    if rule.b_threshold is not None:
        required[f"b = {b_env.name}"] = b_env
    else:
        b_env = ZERO
    _require_finite(required, grid.T, quad)
    return _greedy_partition(alpha_q, beta_sq, b_env, rule, grid, quad)


def contraction_partition(
    u: TimeFunction,
    v: TimeFunction,
    ledger: ConstantLedger,
    grid: TimeGrid,
    quad: Optional[QuadratureConfig] = None,
) -> Partition:
    """Partition for Lipschitz-type coefficients u, v: int u^(p/(p-1)) + int v^2 <= ln 2 / bar_m_p."""
    p = ledger.p
    u_q = u.power(p / (p - 1.0))
    v_sq = v.power(2.0)
    _require_finite({f"u^(p/(p-1)) = {u_q.name}": u_q, f"v^2 = {v_sq.name}": v_sq}, grid.T, quad)
    return _greedy_partition(u_q, v_sq, ZERO, _budget("lipschitz", ledger), grid, quad)


def _raw_integral(func: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, quad: QuadratureConfig) -> float:
    adaptive = quad.model_copy(update={"rule": "adaptive", "abs_tol": quad.abs_tol * 1e-2, "rel_tol": quad.rel_tol * 1e-2})
    value, _ = integrate_function(func, lo, hi, adaptive)
    return value


def verify_partition(
    partition: Partition,
    alpha: TimeFunction,
    beta: TimeFunction,
    b_env: TimeFunction,
    p: float,
    quad: Optional[QuadratureConfig] = None,
) -> List[BudgetSlack]:
    """Recompute every budget by adaptive quadrature on the raw integrands and report the slack."""
    quad = quad or QuadratureConfig()
    q = p / (p - 1.0)

    def alpha_q(t: np.ndarray) -> np.ndarray:
        return np.power(alpha(t), q)

    def beta_sq(t: np.ndarray) -> np.ndarray:
        return np.square(beta(t))

    slacks = []
    for interval in partition.intervals:
        lo, hi = interval.t_lo, interval.t_hi
        ab = _raw_integral(alpha_q, lo, hi, quad) + _raw_integral(beta_sq, lo, hi, quad)
        b_slack = None
        if partition.b_threshold is not None:
            b_slack = partition.b_threshold - _raw_integral(b_env, lo, hi, quad)
        slacks.append(BudgetSlack(t_lo=lo, t_hi=hi, b_slack=b_slack, ab_slack=partition.ab_threshold - ab))
    worst = min(slack.ab_slack for slack in slacks)
    logger.debug("Partition re-quadrature: smallest (alpha-hat + beta-hat) slack %.3g.", worst)
    return slacks


@dataclass(frozen=True)
class UniformBound:
    C_hat: float
    M: float
    a_integral: float

    def to_dict(self) -> Dict[str, float]:
        return {"CHat": self.C_hat, "M": self.M, "aIntegral": self.a_integral}


def constant_M(
    ledger: ConstantLedger,
    xi_pth_moment: float,
    g00_integral_pth_moment: float,
    a_env: TimeFunction,
    alpha_hat: float,
    beta_hat: float,
    T: float,
    quad: Optional[QuadratureConfig] = None,
) -> UniformBound:
    """C-hat = hat_m e^{hat_m (alpha-hat + beta-hat)} (E|xi|^p + E(int|g(.,0,0)|)^p); M = 2 C-hat + 2 int a."""
    for name, value in (("E|xi|^p", xi_pth_moment), ("E(int|g(s,0,0)|ds)^p", g00_integral_pth_moment)):
        if not (math.isfinite(value) and value >= 0):
            raise InvalidArgument(f"{name} must be finite and nonnegative, got {value!r}.")
    if not (math.isfinite(alpha_hat + beta_hat) and alpha_hat >= 0 and beta_hat >= 0):
        raise InvalidArgument("alpha-hat and beta-hat must be finite and nonnegative.")
    a_integral = a_env.integral(0.0, T, quad)
    if not math.isfinite(a_integral):
        raise InvalidArgument(f"The integral of a = {a_env.name} over [0, T] diverges.")
    hat = ledger.hat_m_p
    C_hat = hat * math.exp(hat * (alpha_hat + beta_hat)) * (xi_pth_moment + g00_integral_pth_moment)
    return UniformBound(C_hat=C_hat, M=2.0 * C_hat + 2.0 * a_integral, a_integral=a_integral)


def rho_integral(rho: TimeModulus, u: float, t_lo: float, t_hi: float, quad: Optional[QuadratureConfig] = None) -> float:
    """Integral of rho(s, u) over [t_lo, t_hi] for a constant level u."""
    if rho.separable:
        level = float(rho.kappa(np.array(u)))
        return 0.0 if level == 0.0 else level * rho.weight.integral(t_lo, t_hi, quad)
    value, _ = integrate_function(lambda s: rho(s, np.full_like(s, u)), t_lo, t_hi, quad)
    return value


def gate_report(
    rho: TimeModulus,
    M: float,
    t_lo: float,
    t_hi: float,
    C_hat: Optional[float] = None,
    quad: Optional[QuadratureConfig] = None,
) -> GateReport:
    integral = rho_integral(rho, M, t_lo, t_hi, quad)
    with_c_hat = None if C_hat is None else C_hat + integral <= M
    return GateReport(integral=integral, M=M, CHat=C_hat, passed=integral <= M, passed_with_c_hat=with_c_hat)


@dataclass(frozen=True)
class MajorantTrace:
    times: np.ndarray
    values: np.ndarray = field(repr=False)
    M: float
    converged: bool
    gate: GateReport
    repaired: int = 0

    @property
    def n_stop(self) -> int:
        return self.values.shape[0] - 1

    @property
    def t_lo(self) -> float:
        return float(self.times[0])

    @property
    def t_hi(self) -> float:
        return float(self.times[-1])

    @property
    def at_t_lo(self) -> np.ndarray:
        return self.values[:, 0]

    def bound(self, n: int) -> float:
        """phi_n(t_lo), with phi_{-1} read as M and indices past n_stop clamped."""
        if n < 0:
            return self.M
        return float(self.values[min(n, self.n_stop), 0])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.times})
        for n in range(self.values.shape[0]):
            frame[f"phi_{n}"] = self.values[n]
        return frame

    def to_dict(self) -> dict:
        return {
            "tLo": self.t_lo,
            "tHi": self.t_hi,
            "M": self.M,
            "converged": self.converged,
            "nStop": self.n_stop,
            "phiAtTLo": self.at_t_lo.tolist(),
            "gate": self.gate.model_dump(by_alias=True),
            "monotoneRepairs": self.repaired,
        }


def _step_weights(rho: TimeModulus, nodes: np.ndarray, quad: Optional[QuadratureConfig]) -> Optional[np.ndarray]:
    if not rho.separable:
        return None
    return np.array([rho.weight.integral(float(a), float(b), quad) for a, b in zip(nodes[:-1], nodes[1:])])


def _integrate_from_right(rho: TimeModulus, nodes: np.ndarray, values: np.ndarray, weights: Optional[np.ndarray]) -> np.ndarray:
    """t -> integral over [t, t_hi] of rho(s, values(s)) on the nodes; every quadrature weight is positive."""
    if weights is not None:
        heights = rho.kappa(values)
        pieces = weights * (heights[:-1] + heights[1:]) / 2.0
    else:
        floor = nodes[1] / 2.0 if nodes[0] == 0.0 else nodes[0]
        heights = rho(np.maximum(nodes, floor), values)
        pieces = np.diff(nodes) * (heights[:-1] + heights[1:]) / 2.0
    out = np.zeros_like(nodes)
    out[:-1] = np.cumsum(pieces[::-1])[::-1]
    return out


def majorant_sequence(
    rho: TimeModulus,
    M: float,
    t_lo: float,
    t_hi: float,
    quad: Optional[QuadratureConfig] = None,
    n_max: int = 500,
    tol: float = 1e-8,
    grid: Optional[TimeGrid] = None,
    min_nodes: int = 4096,
) -> MajorantTrace:
    """phi_0(t) = int_t^{t_hi} rho(s, M) ds, phi_{n+1}(t) = int_t^{t_hi} rho(s, phi_n(s)) ds.

    The iteration runs on a refined node set containing the solver grid
    points of [t_lo, t_hi]; only values at those report nodes are kept.
    """
    if not (0.0 <= t_lo < t_hi):
        raise InvalidArgument("The majorant interval needs 0 <= t_lo < t_hi.")
    if not (math.isfinite(M) and M >= 0):
        raise InvalidArgument("M must be finite and nonnegative.")
    gate = gate_report(rho, M, t_lo, t_hi, quad=quad)
    if not gate.passed:
        raise GateFailed(gate.integral, M)

    if grid is not None:
        inner = grid.points[(grid.points > t_lo) & (grid.points < t_hi)]
        report = np.concatenate(([t_lo], inner, [t_hi]))
    else:
        report = np.array([t_lo, t_hi])
    nodes = np.union1d(np.linspace(t_lo, t_hi, max(min_nodes, 2)), report)
    where = np.searchsorted(nodes, report)
    weights = _step_weights(rho, nodes, quad)

    phi = _integrate_from_right(rho, nodes, np.full_like(nodes, M), weights)
    phi = np.minimum(phi, M)
    kept = [phi[where]]
    repaired = 0
    n = 0
    while phi[0] >= tol and n < n_max:
        raw = _integrate_from_right(rho, nodes, phi, weights)
        excess = raw - phi
        allowed = MONOTONE_ULPS * np.spacing(np.maximum(np.abs(phi), np.finfo(float).tiny))
        if np.any(excess > allowed):
            raise CertificationFailed(
                f"Majorant iterate {n + 1} rose above iterate {n} by {float(excess.max())!r}; "
                f"{rho.name} is not nondecreasing in u."
            )
        # phi_{n+1} <= phi_n holds exactly; rounding in the quadrature is absorbed by the minimum
        repaired += int(np.count_nonzero(excess > 0))
        phi = np.minimum(raw, phi)
        n += 1
        kept.append(phi[where])
    if repaired:
        logger.debug("Quadrature rounding capped %d majorant values at the previous iterate.", repaired)
    converged = bool(phi[0] < tol)
    logger.info("Majorant on [%s, %s]: phi_%d(t_lo) = %.3g, converged=%s.", t_lo, t_hi, n, phi[0], converged)
    return MajorantTrace(report, np.vstack(kept), M, converged, gate, repaired)
