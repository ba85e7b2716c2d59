from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .errors import InvalidArgument
from .paths import PathEnsemble


@dataclass(frozen=True, eq=False)
class Terminal:
    """A terminal condition xi as a functional of B_T."""

    name: str
    k: int
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    params: Dict[str, float] = field(default_factory=dict)

    def __call__(self, ens: PathEnsemble) -> np.ndarray:
        xi = np.asarray(self.func(ens.values[-1]), dtype=float)
        if xi.shape != (ens.P, self.k):
            raise InvalidArgument(f"Terminal {self.name} produced shape {xi.shape}, expected {(ens.P, self.k)}.")
        return xi

    def moment(self, ens: PathEnsemble, p: float) -> float:
        """Monte Carlo estimate of E|xi|^p."""
        return float(np.mean(np.power(np.linalg.norm(self(ens), axis=1), p)))


def _constant(c: float = 1.0, k: int = 1) -> Terminal:
    return Terminal("constant", int(k), lambda b: np.full((b.shape[0], int(k)), float(c)), {"c": c, "k": k})


def _brownian(component: int = 0, scale: float = 1.0) -> Terminal:
    index = int(component)

    def xi(b: np.ndarray) -> np.ndarray:
        if index >= b.shape[1]:
            raise InvalidArgument(f"B has {b.shape[1]} components; component {index} does not exist.")
        return scale * b[:, index : index + 1]

    return Terminal("brownian", 1, xi, {"component": component, "scale": scale})


def _abs_capped(cap: float = 1.0) -> Terminal:
    if not cap > 0:
        raise InvalidArgument("abs_capped needs cap > 0.")
    return Terminal("abs_capped", 1, lambda b: np.minimum(np.linalg.norm(b, axis=1), cap)[:, None], {"cap": cap})


@dataclass(frozen=True)
class TerminalFamily:
    name: str
    builder: Callable[..., Terminal]
    defaults: Dict[str, float]
    description: str


TERMINALS: Dict[str, TerminalFamily] = {
    "constant": TerminalFamily("constant", _constant, {"c": 1.0, "k": 1}, "xi = c in every component"),
    "brownian": TerminalFamily("brownian", _brownian, {"component": 0, "scale": 1.0}, "xi = scale * B_T[component]"),
    "abs_capped": TerminalFamily("abs_capped", _abs_capped, {"cap": 1.0}, "xi = min(|B_T|, cap)"),
}

TERMINAL_ALIASES = {"const": "constant", "bt": "brownian", "b_t": "brownian", "capped": "abs_capped"}


def normalize_terminal_name(value: Optional[str]) -> str:
    raw = str(value or "").strip().lower()
    if raw in TERMINALS:
        return raw
    if raw in TERMINAL_ALIASES:
        return TERMINAL_ALIASES[raw]
    raise InvalidArgument(f"Unknown terminal condition {value!r}; choose one of {sorted(TERMINALS)}.")


def make_terminal(name: str, params: Optional[Mapping[str, float]] = None) -> Terminal:
    family = TERMINALS[normalize_terminal_name(name)]
    params = dict(params or {})
    unknown = set(params) - set(family.defaults)
    if unknown:
        raise InvalidArgument(f"{family.name} does not take {sorted(unknown)}.")
    merged = {**family.defaults, **params}
    for key in ("k", "component"):
        if key in merged and (merged[key] != int(merged[key]) or merged[key] < 0):
            raise InvalidArgument(f"{key} must be a nonnegative integer.")
    if merged.get("k", 1) < 1:
        raise InvalidArgument("k must be at least 1.")
    return family.builder(**merged)


def public_terminal_payload() -> List[dict]:
    return [
        {"name": family.name, "defaults": family.defaults, "description": family.description}
        for family in TERMINALS.values()
    ]
