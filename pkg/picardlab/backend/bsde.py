"""Least-squares Monte Carlo BSDE solver with an outer Picard iteration.

Each Picard step freezes y at the previous iterate and sweeps backward
through the grid: Z from the martingale-increment regression, Y from the
regression of the next value plus the explicit driver term.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats.mstats import mquantiles
from threadpoolctl import threadpool_limits

from .certificates import MajorantTrace
from .errors import DivergenceError, InvalidArgument
from .generators import Generator, driver_times, translate_hypotheses
from .models import BasisSpec
from .paths import PathEnsemble, TimeGrid, write_block
from .terminals import Terminal


logger = logging.getLogger(__name__)

DIVERGENCE_RUN = 3
RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class RegressionBasis:
    kind: str = "polynomial"
    degree: int = 3
    bins: int = 16

    @classmethod
    def from_spec(cls, spec: BasisSpec) -> "RegressionBasis":
        return cls(spec.kind, spec.degree, spec.bins)

    def features(self, t: float, b: np.ndarray) -> np.ndarray:
        """Design matrix at time t; column 0 is the constant."""
        b = np.asarray(b, dtype=float)
        x = b / math.sqrt(t) if t > 0 else b
        count, d = x.shape
        if self.kind == "polynomial":
            columns = [np.ones(count)]
            for degree in range(1, self.degree + 1):
                for combo in itertools.combinations_with_replacement(range(d), degree):
                    columns.append(np.prod(x[:, combo], axis=1))
            return np.column_stack(columns)
        if self.kind == "piecewise":
            lead = x[:, 0]
            edges = mquantiles(lead, prob=np.linspace(0.0, 1.0, self.bins + 1)[1:-1])
            which = np.searchsorted(edges, lead, side="right")
            columns = [np.ones(count)]
            for j in range(self.bins):
                inside = (which == j).astype(float)
                if j > 0:
                    columns.append(inside)
                columns.append(inside * lead)
            columns.extend(x[:, j] for j in range(1, d))
            return np.column_stack(columns)
        raise InvalidArgument(f"Unknown basis kind {self.kind!r}.")

    @property
    def label(self) -> str:
        return f"polynomial({self.degree})" if self.kind == "polynomial" else f"piecewise({self.bins})"


@dataclass(frozen=True)
class Fit:
    fitted: np.ndarray
    rank: int
    ridge: float = 0.0


def conditional_expectation(values: np.ndarray, basis: RegressionBasis, t: float, b: np.ndarray) -> Fit:
    """Least-squares projection of per-path values onto basis functions of (t, B_t)."""
    values = np.asarray(values, dtype=float)
    flat = values.reshape(values.shape[0], -1)
    if np.all(np.ptp(flat, axis=0) == 0):
        return Fit(values.copy(), 1)
    design = basis.features(t, b)
    count, width = design.shape
    if count < width:
        raise InvalidArgument(f"{count} paths cannot fit a basis of {width} functions.")
    keep = np.ptp(design, axis=0) > 0
    keep[0] = True
    design = design[:, keep]
    if design.shape[1] == 1:
        return Fit(np.broadcast_to(flat.mean(axis=0), flat.shape).reshape(values.shape).copy(), 1)
    with threadpool_limits(limits=1):
        coefficients, _, rank, _ = linalg.lstsq(design, flat, lapack_driver="gelsd")
        ridge = 0.0
        if rank < design.shape[1]:
            gram = design.T @ design
            ridge = RIDGE_SCALE * float(np.trace(gram)) / gram.shape[0]
            coefficients = linalg.solve(gram + ridge * np.eye(gram.shape[0]), design.T @ flat, assume_a="pos")
            logger.debug("Rank %d of %d at t=%s; ridge %.3g.", rank, design.shape[1], t, ridge)
        fitted = design @ coefficients
    return Fit(fitted.reshape(values.shape), int(rank), ridge)


@dataclass(frozen=True, eq=False)
class SolutionEnsemble:
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    grid: TimeGrid
    ens: PathEnsemble

    @property
    def k(self) -> int:
        return self.Y.shape[2]

    @property
    def y0(self) -> np.ndarray:
        return self.Y[0].mean(axis=0)

    def save(self, directory: Path) -> List[Path]:
        M, P, k = self.Y.shape[0] - 1, self.Y.shape[1], self.Y.shape[2]
        d = self.Z.shape[3]
        y_path, z_path = directory / "Y.bin", directory / "Z.bin"
        write_block(y_path, (k, P, M + 1), self.ens.seed, self.Y)
        write_block(z_path, (k * d, P, M + 1), self.ens.seed, self.Z.reshape(M + 1, P, k * d))
        return [y_path, z_path]


def _coupling_beta(g: Generator):
    if not g.descriptors.attached():
        return None
    try:
        h4 = translate_hypotheses(g).descriptors.h4
    except InvalidArgument:
        return None
    return None if h4 is None else h4.beta


def _martingale_z(target: np.ndarray, dB: np.ndarray, dt: float, basis: RegressionBasis, t: float, b: np.ndarray) -> np.ndarray:
    """E[target * dB^T | B_t] / dt, centred on E[target | B_t] first."""
    centred = target - conditional_expectation(target, basis, t, b).fitted
    return conditional_expectation(centred[:, :, None] * dB[:, None, :] / dt, basis, t, b).fitted


def solve_inner(
    xi: np.ndarray,
    frozen_y: np.ndarray,
    g: Generator,
    grid: TimeGrid,
    ens: PathEnsemble,
    basis: RegressionBasis,
    inner_iters: int = 1,
    t_floor: Optional[float] = None,
) -> SolutionEnsemble:
    """One backward sweep with the driver's y argument frozen.

    With ``inner_iters > 1`` each step iterates Z_i = E[(Y_{i+1} + g(t_{i+1},
    y_{i+1}, Z_i, B_{i+1}) dt) dB^T | B_{t_i}] / dt from the explicit Z before
    Y_i is formed; the map contracts when beta^2 dt is small.
    """
    P, k, d, M = ens.P, g.k, ens.d, grid.M
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (P, k):
        raise InvalidArgument(f"xi has shape {xi.shape}, expected {(P, k)}.")
    if frozen_y.shape != (M + 1, P, k):
        raise InvalidArgument(f"frozen y has shape {frozen_y.shape}, expected {(M + 1, P, k)}.")
    if inner_iters < 1:
        raise InvalidArgument("inner_iters must be at least 1.")
    times = driver_times(g, grid, t_floor)
    Y = np.empty((M + 1, P, k))
    Z = np.zeros((M + 1, P, k, d))
    Y[M] = xi
    for i in range(M - 1, -1, -1):
        t, b, dB, dt = float(grid.points[i]), ens.values[i], ens.increments[i], float(grid.steps[i])
        following = Y[i + 1]
        Z[i] = _martingale_z(following, dB, dt, basis, t, b)
        for _ in range(inner_iters - 1):
            ahead = g(times[i + 1], frozen_y[i + 1], Z[i], ens.values[i + 1])
            if not np.all(np.isfinite(ahead)):
                raise DivergenceError(f"The backward sweep for {g.name} produced non-finite values at t={grid.points[i + 1]!r}.", [])
            Z[i] = _martingale_z(following + ahead * dt, dB, dt, basis, t, b)
        target = following + g(times[i], frozen_y[i], Z[i], b) * dt
        if not np.all(np.isfinite(target)):
            raise DivergenceError(f"The backward sweep for {g.name} produced non-finite values at t={grid.points[i]!r}.", [])
        Y[i] = conditional_expectation(target, basis, t, b).fitted
    return SolutionEnsemble(Y, Z, grid, ens)


def _path_norms(values: np.ndarray, trailing: int) -> np.ndarray:
    axes = tuple(range(values.ndim - trailing, values.ndim))
    return np.sqrt(np.sum(np.square(values), axis=axes)) if axes else np.abs(values)


def empirical_sp_norm(Y: np.ndarray, p: float) -> float:
    """(E sup_t |Y_t|^p)^(1/p) over the grid; Y is (M+1, P) or (M+1, P, k)."""
    Y = np.asarray(Y, dtype=float)
    sup = _path_norms(Y, Y.ndim - 2).max(axis=0)
    return float(np.mean(np.power(sup, p)) ** (1.0 / p))


def empirical_mp_norm(Z: np.ndarray, p: float, grid: TimeGrid) -> float:
    """(E (int |Z_t|^2 dt)^(p/2))^(1/p) with a left Riemann sum; Z is (M+1, P, ...)."""
    Z = np.asarray(Z, dtype=float)
    squares = np.square(_path_norms(Z, Z.ndim - 2))
    energy = np.tensordot(grid.steps, squares[:-1], axes=(0, 0))
    return float(np.mean(np.power(energy, p / 2.0)) ** (1.0 / p))


def _sup_moments(difference: np.ndarray, p: float, start: int) -> Tuple[float, float]:
    sup = _path_norms(difference[start:], difference.ndim - 2).max(axis=0)
    powered = np.power(sup, p)
    se = float(np.std(powered, ddof=1) / math.sqrt(powered.size)) if powered.size > 1 else 0.0
    return float(np.mean(powered)), se


@dataclass
class ConvergenceTrace:
    sp_distances: List[float] = field(default_factory=list)
    mp_distances: List[float] = field(default_factory=list)
    majorant_distances: List[Optional[float]] = field(default_factory=list)
    majorant_bounds: List[Optional[float]] = field(default_factory=list)
    dominated: List[Optional[bool]] = field(default_factory=list)
    converged_at: Optional[int] = None
    wall_times: List[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.converged_at is not None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "n": np.arange(1, len(self.sp_distances) + 1),
                "spDistance": self.sp_distances,
                "mpDistance": self.mp_distances,
                "majorantDistance": self.majorant_distances,
                "majorantBound": self.majorant_bounds,
                "dominated": self.dominated,
            }
        )


def picard_solve(
    xi: np.ndarray,
    g: Generator,
    grid: TimeGrid,
    ens: PathEnsemble,
    basis: RegressionBasis,
    n_max: int = 50,
    tol_sp: float = 1e-10,
    p: float = 2.0,
    inner_iters: int = 1,
    initial: str = "zero",
    majorant: Optional[MajorantTrace] = None,
    t_floor: Optional[float] = None,
) -> Tuple[SolutionEnsemble, ConvergenceTrace]:
    """y^0 = 0 (or xi held constant); y^n solves the BSDE with driver g(s, y^{n-1}_s, z^n_s).

    Stops when the S^p distance between successive iterates drops below
    ``tol_sp``; ``converged_at`` is the iterate that reached the fixed
    point. With a majorant trace, E sup_{t >= t_lo} |y^{n+1} - y^n|^p is
    compared with phi_{n-1}(t_lo) plus three standard errors.
    """
    if not p > 1:
        raise InvalidArgument("p must exceed 1.")
    xi = np.asarray(xi, dtype=float)
    M = grid.M
    beta = _coupling_beta(g)
    if beta is not None:
        coupling = np.square(beta(np.maximum(grid.points[:-1], grid.points[1] / 2.0))) * grid.steps
        if np.any(coupling > 1.0):
            logger.warning("beta^2(t) dt exceeds 1 on %d steps; the explicit z-coupling may not contract.", int(np.count_nonzero(coupling > 1.0)))
    if initial == "zero":
        previous_Y = np.zeros((M + 1, ens.P, g.k))
    elif initial == "terminal":
        previous_Y = np.broadcast_to(xi, (M + 1,) + xi.shape).copy()
    else:
        raise InvalidArgument(f"Unknown initial iterate {initial!r}.")
    previous_Z = np.zeros((M + 1, ens.P, g.k, ens.d))
    start = 0
    if majorant is not None:
        start = int(np.searchsorted(grid.points, majorant.t_lo - 1e-12 * max(1.0, grid.T)))

    trace = ConvergenceTrace()
    sol = None
    increases = 0
    for n in range(1, n_max + 1):
        began = time.perf_counter()
        sol = solve_inner(xi, previous_Y, g, grid, ens, basis, inner_iters, t_floor)
        difference = sol.Y - previous_Y
        distance = empirical_sp_norm(difference, p)
        trace.sp_distances.append(distance)
        trace.mp_distances.append(empirical_mp_norm(sol.Z - previous_Z, p, grid))
        if majorant is not None:
            moment, se = _sup_moments(difference, p, start)
            # iterate n pairs with phi_{n-2}; the first distance is bounded by M
            bound = majorant.bound(n - 2) + 3.0 * se
            trace.majorant_distances.append(moment)
            trace.majorant_bounds.append(bound)
            trace.dominated.append(moment <= bound)
            if moment > bound:
                logger.warning("Iteration %d: E sup|dy|^p = %.4g exceeds the majorant bound %.4g.", n, moment, bound)
        else:
            trace.majorant_distances.append(None)
            trace.majorant_bounds.append(None)
            trace.dominated.append(None)
        trace.wall_times.append(time.perf_counter() - began)
        logger.info("Picard iteration %d: S^p distance %.4g, M^p distance %.4g.", n, distance, trace.mp_distances[-1])
        if distance < tol_sp:
            trace.converged_at = n - 1
            break
        if n > 1 and distance > trace.sp_distances[-2]:
            increases += 1
            if increases >= DIVERGENCE_RUN:
                raise DivergenceError(
                    f"Picard distances grew for {DIVERGENCE_RUN} consecutive iterations.", trace.sp_distances
                )
        else:
            increases = 0
        previous_Y, previous_Z = sol.Y, sol.Z
    if trace.converged_at is None:
        logger.warning("Picard iteration stopped at n_max=%d without reaching tol_sp=%.3g.", n_max, tol_sp)
    return sol, trace


@dataclass(frozen=True)
class ResidualReport:
    times: np.ndarray
    mean: np.ndarray
    rms: np.ndarray

    @property
    def max_abs_mean(self) -> float:
        return float(np.max(np.abs(self.mean)))

    @property
    def max_rms(self) -> float:
        return float(np.max(self.rms))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "meanResidual": self.mean, "rmsResidual": self.rms})


def residual_check(
    sol: SolutionEnsemble,
    xi: np.ndarray,
    g: Generator,
    t_floor: Optional[float] = None,
) -> ResidualReport:
    """r_i = Y_i - (Y_{i+1} + g(t_i, Y_i, Z_i) dt_i - Z_i dB_i) per step and path."""
    grid, ens = sol.grid, sol.ens
    times = driver_times(g, grid, t_floor)
    means, rms = [], []
    for i in range(grid.M):
        following = np.asarray(xi, dtype=float) if i + 1 == grid.M else sol.Y[i + 1]
        drive = g(times[i], sol.Y[i], sol.Z[i], ens.values[i])
        martingale = np.einsum("pkd,pd->pk", sol.Z[i], ens.increments[i])
        residual = sol.Y[i] - (following + drive * grid.steps[i] - martingale)
        means.append(float(np.mean(residual)))
        rms.append(float(np.sqrt(np.mean(np.square(residual)))))
    return ResidualReport(grid.points[:-1].copy(), np.array(means), np.array(rms))


@dataclass(frozen=True)
class UniquenessReport:
    sp_distance: Optional[float]
    mp_distance: Optional[float]
    sup_moments: Tuple[float, float]
    moment_gap: float
    pooled_se: float
    residual_rms: Tuple[float, float]
    y0: Tuple[float, float]

    @property
    def within_noise(self) -> bool:
        return self.moment_gap <= 3.0 * self.pooled_se

    def to_dict(self) -> dict:
        return {
            "spDistance": self.sp_distance,
            "mpDistance": self.mp_distance,
            "supMoments": list(self.sup_moments),
            "momentGap": self.moment_gap,
            "pooledSe": self.pooled_se,
            "residualRms": list(self.residual_rms),
            "y0": list(self.y0),
            "withinNoise": self.within_noise,
        }


def uniqueness_probe(
    g: Generator,
    terminal: Terminal,
    grid: TimeGrid,
    ensembles: Sequence[PathEnsemble],
    bases: Sequence[RegressionBasis],
    p: float = 2.0,
    initials: Sequence[str] = ("zero", "zero"),
    n_max: int = 50,
    tol_sp: float = 1e-10,
    t_floor: Optional[float] = None,
) -> UniquenessReport:
    """Solve twice with different bases, seeds or initial iterates and measure how far apart the solutions are."""
    if len(ensembles) != 2 or len(bases) != 2 or len(initials) != 2:
        raise InvalidArgument("The uniqueness probe compares exactly two solves.")
    solutions, xis = [], []
    for ens, basis, initial in zip(ensembles, bases, initials):
        xi = terminal(ens)
        sol, _ = picard_solve(xi, g, grid, ens, basis, n_max, tol_sp, p, initial=initial, t_floor=t_floor)
        solutions.append(sol)
        xis.append(xi)
    first, second = solutions
    shared = ensembles[0] is ensembles[1] or (
        ensembles[0].seed == ensembles[1].seed and ensembles[0].P == ensembles[1].P and ensembles[0].d == ensembles[1].d
    )
    sp = mp = None
    if shared:
        sp = empirical_sp_norm(first.Y - second.Y, p)
        mp = empirical_mp_norm(first.Z - second.Z, p, grid)
    moments = [_sup_moments(sol.Y, p, 0) for sol in solutions]
    pooled = math.sqrt(moments[0][1] ** 2 + moments[1][1] ** 2)
    rms = tuple(residual_check(sol, xi, g, t_floor).max_rms for sol, xi in zip(solutions, xis))
    return UniquenessReport(
        sp_distance=sp,
        mp_distance=mp,
        sup_moments=(moments[0][0], moments[1][0]),
        moment_gap=abs(moments[0][0] - moments[1][0]),
        pooled_se=pooled,
        residual_rms=rms,
        y0=(float(first.y0[0]), float(second.y0[0])),
    )


def solution_summary(sol: SolutionEnsemble) -> pd.DataFrame:
    """Per grid point: mean Y, its standard error and mean |Z|."""
    P = sol.Y.shape[1]
    frame = pd.DataFrame({"t": sol.grid.points})
    for j in range(sol.k):
        suffix = "" if sol.k == 1 else f"_{j}"
        component = sol.Y[:, :, j]
        frame[f"meanY{suffix}"] = component.mean(axis=1)
        frame[f"seY{suffix}"] = component.std(axis=1, ddof=1) / math.sqrt(P) if P > 1 else 0.0
    frame["meanAbsZ"] = _path_norms(sol.Z, 2).mean(axis=1)
    return frame
