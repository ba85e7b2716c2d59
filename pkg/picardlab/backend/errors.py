from __future__ import annotations

from typing import Any, Dict, List, Optional


class PicardLabError(Exception):
    code = "numerical-failure"
    exit_code = 1

    def payload(self) -> Dict[str, Any]:
        return {"error": self.code, "detail": str(self)}


class InvalidArgument(PicardLabError, ValueError):
    code = "invalid-argument"
    exit_code = 2


class InvalidModulus(InvalidArgument):
    code = "invalid-modulus"


class HorizonRejected(PicardLabError):
    code = "horizon-rejected"

    def __init__(self, integrand: str, detail: str) -> None:
        super().__init__(f"Tail of {integrand} on [T*, inf) {detail}.")
        self.integrand = integrand

    def payload(self) -> Dict[str, Any]:
        return {**super().payload(), "integrand": self.integrand}


class CertificationFailed(PicardLabError):
    code = "certification-failed"

    def __init__(self, message: str, integrand: Optional[str] = None) -> None:
        super().__init__(message)
        self.integrand = integrand

    def payload(self) -> Dict[str, Any]:
        body = super().payload()
        if self.integrand is not None:
            body["integrand"] = self.integrand
        return body


class GateFailed(CertificationFailed):
    code = "gate-failed"

    def __init__(self, integral: float, bound: float) -> None:
        super().__init__(
            f"Gate violated: integral of rho(s, M) over the interval is {integral!r} > M = {bound!r}; refine the partition."
        )
        self.integral = integral
        self.bound = bound

    def payload(self) -> Dict[str, Any]:
        return {**super().payload(), "integral": self.integral, "M": self.bound}


class DivergenceError(PicardLabError):
    code = "divergence-reported"

    def __init__(self, message: str, distances: List[float]) -> None:
        super().__init__(message)
        self.distances = list(distances)

    def payload(self) -> Dict[str, Any]:
        return {**super().payload(), "distances": self.distances}
