"""Deterministic time functions (envelopes) and the quadrature behind them.

Envelopes such as a(t), b(t), alpha(t) or beta(t) appear in integral
budgets everywhere. Power laws c*(s + t)^theta cover every built-in
example and integrate in closed form; anything else is wrapped in a
``SampledFunction`` and handed to ``scipy.integrate.quad``.
"""

from __future__ import annotations

import logging
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import integrate

from .errors import InvalidArgument
from .models import QuadratureConfig


logger = logging.getLogger(__name__)

DEFAULT_QUADRATURE = QuadratureConfig()


def integrate_function(
    func: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    quad: Optional[QuadratureConfig] = None,
) -> Tuple[float, float]:
    """Integrate ``func`` over [a, b] with the configured rule; returns (value, error estimate)."""
    quad = quad or DEFAULT_QUADRATURE
    if b == a:
        return 0.0, 0.0
    if b < a:
        value, error = integrate_function(func, b, a, quad)
        return -value, error
    if quad.rule == "trapezoid" and math.isfinite(b):
        nodes = np.linspace(a, b, quad.max_subdivisions + 1)
        values = np.asarray(func(nodes), dtype=float)
        return float(integrate.trapezoid(values, nodes)), float("nan")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, error, info = integrate.quad(
            lambda s: float(func(np.asarray(s, dtype=float))),
            a,
            b,
            epsabs=quad.abs_tol,
            epsrel=quad.rel_tol,
            limit=quad.max_subdivisions,
            full_output=1,
        )[:3]
    if not math.isfinite(value):
        return math.inf, math.inf
    return float(value), float(error)


class TimeFunction(ABC):
    """Nonnegative function of time with an integral."""

    name: str

    @abstractmethod
    def __call__(self, t: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def integral(self, a: float, b: float, quad: Optional[QuadratureConfig] = None) -> float: ...

    @abstractmethod
    def power(self, q: float) -> "TimeFunction": ...

    @abstractmethod
    def scaled(self, factor: float) -> "TimeFunction": ...

    def is_zero(self) -> bool:
        return False


@dataclass(frozen=True)
class PowerLaw(TimeFunction):
    coef: float
    exponent: float = 0.0
    shift: float = 0.0

    def __post_init__(self) -> None:
        if self.coef < 0 or self.shift < 0:
            raise InvalidArgument("Power-law envelopes need coef >= 0 and shift >= 0.")

    @property
    def name(self) -> str:
        if self.exponent == 0:
            return f"{self.coef!r}"
        base = "t" if self.shift == 0 else f"({self.shift!r}+t)"
        return f"{self.coef!r}*{base}^{self.exponent!r}"

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.coef == 0 or self.exponent == 0:
            return np.full_like(t, self.coef)
        with np.errstate(divide="ignore"):
            return self.coef * np.power(self.shift + t, self.exponent)

    def _antiderivative(self, x: float) -> float:
        base = self.shift + x
        if self.exponent == -1.0:
            return math.log(base) if base > 0 else -math.inf
        if base == 0:
            return 0.0 if self.exponent > -1.0 else -math.inf
        return base ** (self.exponent + 1.0) / (self.exponent + 1.0)

    def integral(self, a: float, b: float, quad: Optional[QuadratureConfig] = None) -> float:
        if b <= a or self.coef == 0:
            return 0.0
        if math.isinf(b):
            if self.exponent >= -1.0:
                return math.inf
            return self.coef * (self.shift + a) ** (self.exponent + 1.0) / (-self.exponent - 1.0)
        lower = self._antiderivative(a)
        if math.isinf(lower):
            return math.inf
        return self.coef * (self._antiderivative(b) - lower)

    def power(self, q: float) -> "PowerLaw":
        if self.coef == 0:
            return PowerLaw(0.0)
        return PowerLaw(self.coef**q, self.exponent * q, self.shift)

    def scaled(self, factor: float) -> "PowerLaw":
        return PowerLaw(self.coef * factor, self.exponent, self.shift)

    def is_zero(self) -> bool:
        return self.coef == 0


@dataclass(frozen=True)
class SampledFunction(TimeFunction):
    func: Callable[[np.ndarray], np.ndarray]
    name: str = "sampled"

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return np.asarray(self.func(np.asarray(t, dtype=float)), dtype=float)

    def integral(self, a: float, b: float, quad: Optional[QuadratureConfig] = None) -> float:
        if b <= a:
            return 0.0
        value, _ = integrate_function(self, a, b, quad)
        return value

    def power(self, q: float) -> "SampledFunction":
        func = self.func
        return SampledFunction(lambda t: np.power(func(t), q), f"({self.name})^{q!r}")

    def scaled(self, factor: float) -> "SampledFunction":
        func = self.func
        return SampledFunction(lambda t: factor * func(t), f"{factor!r}*{self.name}")


ZERO = PowerLaw(0.0)
ONE = PowerLaw(1.0)


def constant(value: float) -> PowerLaw:
    return PowerLaw(float(value))
