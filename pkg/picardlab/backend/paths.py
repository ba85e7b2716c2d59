from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .errors import HorizonRejected, InvalidArgument
from .models import QuadratureConfig
from .quadrature import PowerLaw, TimeFunction


logger = logging.getLogger(__name__)

BLOCK_SIZE = 1024
TAIL_WINDOWS = 60
TAIL_RATIO_LIMIT = 0.99
HEADER_DTYPE = np.dtype("<u8")
VALUE_DTYPE = np.dtype("<f8")


@dataclass(frozen=True)
class TailEntry:
    name: str
    value: float
    error: float
    source: Literal["closed-form", "extrapolated"]
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "error": self.error,
            "source": self.source,
            "flagged": self.flagged,
        }


@dataclass(frozen=True)
class Horizon:
    kind: Literal["finite", "truncated_infinite"]
    T: float
    tail_report: Tuple[TailEntry, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "tailReport": [entry.to_dict() for entry in self.tail_report],
        }


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray
    horizon: Horizon

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float)
        if points.ndim != 1 or points.size < 2:
            raise InvalidArgument("A time grid needs at least 2 points.")
        if points[0] != 0.0:
            raise InvalidArgument("A time grid starts exactly at 0.")
        steps = np.diff(points)
        if not np.all(np.isfinite(points)) or not np.all(steps > 0):
            raise InvalidArgument("Grid points must be finite and strictly increasing.")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def M(self) -> int:
        return self.points.size - 1

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @cached_property
    def steps(self) -> np.ndarray:
        steps = np.diff(self.points)
        steps.setflags(write=False)
        return steps

    @property
    def dt_max(self) -> float:
        return float(self.steps.max())


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    d: int
    P: int
    seed: int
    increments: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        increments = np.ascontiguousarray(self.increments, dtype=float)
        if increments.shape != (self.grid.M, self.P, self.d):
            raise InvalidArgument(
                f"Increments have shape {increments.shape}, expected {(self.grid.M, self.P, self.d)}."
            )
        increments.setflags(write=False)
        object.__setattr__(self, "increments", increments)

    @cached_property
    def values(self) -> np.ndarray:
        return brownian_values(self)


def build_grid(
    T: float,
    M: int,
    spacing: str = "uniform",
    ratio: Optional[float] = None,
    horizon: Optional[Horizon] = None,
) -> TimeGrid:
    if not (isinstance(T, (int, float)) and math.isfinite(T) and T > 0):
        raise InvalidArgument("T must be positive and finite.")
    if not isinstance(M, (int, np.integer)) or M < 1:
        raise InvalidArgument("M must be a positive integer.")
    if spacing == "uniform" or (spacing == "geometric" and ratio == 1.0):
        points = T * np.arange(M + 1, dtype=float) / M
    elif spacing == "geometric":
        if ratio is None or not ratio > 0:
            raise InvalidArgument("Geometric spacing needs a ratio > 0.")
        # first step chosen so the steps telescope to T
        first = T * (1.0 - ratio) / (1.0 - ratio**M)
        steps = first * np.power(ratio, np.arange(M, dtype=float))
        points = np.concatenate(([0.0], np.cumsum(steps)))
    else:
        raise InvalidArgument(f"Unknown grid spacing {spacing!r}.")
    points[-1] = T
    return TimeGrid(points, horizon or Horizon("finite", float(T)))


def _extrapolated_tail(func: TimeFunction, T_star: float, quad: QuadratureConfig) -> TailEntry:
    edges = [T_star]
    for _ in range(TAIL_WINDOWS):
        edges.append(2.0 * edges[-1] + 1.0)
    windows = np.array([func.integral(lo, hi, quad) for lo, hi in zip(edges[:-1], edges[1:])])
    if not np.all(np.isfinite(windows)):
        raise HorizonRejected(func.name, "is not finite on a bounded window")
    total = float(windows.sum())
    if windows[-1] == 0.0:
        return TailEntry(func.name, total, 0.0, "extrapolated")
    ratios = windows[-3:] / np.maximum(windows[-4:-1], np.finfo(float).tiny)
    ratio = float(ratios.max())
    if ratio >= TAIL_RATIO_LIMIT:
        raise HorizonRejected(func.name, f"does not decay (window ratio {ratio:.4f})")
    remainder = float(windows[-1] * ratio / (1.0 - ratio))
    value = total + remainder
    flagged = remainder > max(quad.abs_tol, quad.rel_tol * abs(value))
    return TailEntry(func.name, value, remainder, "extrapolated", flagged)


def truncate_horizon(
    tail_integrands: Union[Mapping[str, TimeFunction], Iterable[TimeFunction]],
    T_star: float,
    quad: Optional[QuadratureConfig] = None,
) -> Horizon:
    """Represent [0, inf) by [0, T*] plus an audited report of every tail integral."""
    quad = quad or QuadratureConfig()
    if not (math.isfinite(T_star) and T_star > 0):
        raise InvalidArgument("T* must be positive and finite.")
    if isinstance(tail_integrands, Mapping):
        named = list(tail_integrands.items())
    else:
        named = [(func.name, func) for func in tail_integrands]
    report: List[TailEntry] = []
    for name, func in named:
        if isinstance(func, PowerLaw):
            value = func.integral(T_star, math.inf)
            if not math.isfinite(value):
                raise HorizonRejected(name, "diverges")
            report.append(TailEntry(name, value, 0.0, "closed-form"))
        else:
            entry = _extrapolated_tail(func, T_star, quad)
            report.append(TailEntry(name, entry.value, entry.error, entry.source, entry.flagged))
        logger.debug("Tail of %s beyond %s: %r", name, T_star, report[-1].value)
    return Horizon("truncated_infinite", float(T_star), tuple(report))


def _block_normals(seed: int, block: int, steps: int, size: int, d: int) -> np.ndarray:
    # Philox is counter-based; the block index is part of the key
    sequence = np.random.SeedSequence(seed, spawn_key=(block,))
    generator = np.random.Generator(np.random.Philox(sequence))
    return generator.standard_normal((steps, size, d))


def simulate_brownian(grid: TimeGrid, d: int, P: int, seed: int, n_jobs: int = 1) -> PathEnsemble:
    if d < 1 or P < 1:
        raise InvalidArgument("Brownian ensembles need d >= 1 and P >= 1.")
    if not 0 <= seed < 2**64:
        raise InvalidArgument("Seeds are 64-bit unsigned integers.")
    blocks = [(start, min(BLOCK_SIZE, P - start)) for start in range(0, P, BLOCK_SIZE)]
    parts = Parallel(n_jobs=max(1, n_jobs), prefer="threads")(
        delayed(_block_normals)(seed, index, grid.M, size, d) for index, (_, size) in enumerate(blocks)
    )
    normals = np.concatenate(parts, axis=1)
    increments = normals * np.sqrt(grid.steps)[:, None, None]
    logger.debug("Simulated %d paths over %d steps in %d blocks.", P, grid.M, len(blocks))
    return PathEnsemble(grid, d, P, seed, increments)


def brownian_values(ens: PathEnsemble) -> np.ndarray:
    values = np.zeros((ens.grid.M + 1, ens.P, ens.d))
    np.cumsum(ens.increments, axis=0, out=values[1:])
    values.setflags(write=False)
    return values


def write_block(path: Path, dims: Tuple[int, int, int], seed: int, array: np.ndarray) -> None:
    header = np.array([*dims, seed], dtype=HEADER_DTYPE)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(array, dtype=VALUE_DTYPE).tobytes(order="C"))


def read_block(path: Path) -> Tuple[Tuple[int, int, int], int, np.ndarray]:
    raw = path.read_bytes()
    header = np.frombuffer(raw[: 4 * HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)
    width, count, steps, seed = (int(value) for value in header)
    data = np.frombuffer(raw[4 * HEADER_DTYPE.itemsize :], dtype=VALUE_DTYPE)
    if data.size != width * count * steps:
        raise InvalidArgument(f"{path.name} holds {data.size} values, header announces {width * count * steps}.")
    return (width, count, steps), seed, data.reshape(steps, count, width).astype(float)


def save_ensemble(ens: PathEnsemble, path: Path) -> None:
    write_block(path, (ens.d, ens.P, ens.grid.M), ens.seed, ens.increments)


def load_ensemble(path: Path, grid: TimeGrid) -> PathEnsemble:
    (d, P, M), seed, increments = read_block(path)
    if M != grid.M:
        raise InvalidArgument(f"Ensemble has {M} steps but the grid has {grid.M}.")
    return PathEnsemble(grid, d, P, seed, increments)
