from __future__ import annotations

import math
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic.alias_generators import to_camel


class CamelModel(BaseModel):
    model_config = ConfigDict(alias_generator=to_camel, populate_by_name=True, extra="forbid")


ParamValue = Union[float, List[List[float]]]


class QuadratureConfig(CamelModel):
    rule: Literal["trapezoid", "adaptive"] = "adaptive"
    abs_tol: float = Field(1e-10, gt=0)
    rel_tol: float = Field(1e-8, gt=0)
    max_subdivisions: int = Field(200, ge=1)


class GeneratorSpec(CamelModel):
    name: str = Field("zero", min_length=1)
    params: Dict[str, float] = Field(default_factory=dict)


class TerminalSpec(CamelModel):
    name: str = Field("constant", min_length=1)
    params: Dict[str, float] = Field(default_factory=dict)


class GridSpec(CamelModel):
    T: float = Field(1.0, gt=0, alias="T")
    steps: int = Field(50, ge=1)
    spacing: Literal["uniform", "geometric"] = "uniform"
    ratio: Optional[float] = Field(None, gt=0)
    horizon: Literal["finite", "truncated_infinite"] = "finite"

    @field_validator("T")
    @classmethod
    def finite_horizon_time(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("T must be finite; infinite horizons use horizon='truncated_infinite'.")
        return value

    @model_validator(mode="after")
    def ratio_for_geometric(self) -> "GridSpec":
        if self.spacing == "geometric" and self.ratio is None:
            raise ValueError("Geometric spacing needs a ratio.")
        return self


class EnsembleSpec(CamelModel):
    d: int = Field(1, ge=1)
    paths: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class LedgerOverrides(CamelModel):
    m_p: Optional[float] = Field(None, gt=0)
    k_p: Optional[float] = Field(None, gt=0)
    bar_m_p: Optional[float] = Field(None, gt=0)
    hat_m_p: Optional[float] = Field(None, gt=0)
    tilde_m_p: Optional[float] = Field(None, gt=0)


class BasisSpec(CamelModel):
    kind: Literal["polynomial", "piecewise"] = "polynomial"
    degree: int = Field(3, ge=0, le=8)
    bins: int = Field(16, ge=1)


class SolverOptions(CamelModel):
    basis: BasisSpec = Field(default_factory=BasisSpec)
    n_max: int = Field(50, ge=1)
    tol_sp: float = Field(1e-10, gt=0)
    inner_iters: int = Field(1, ge=1)
    initial: Literal["zero", "terminal"] = "zero"
    export_ensembles: bool = False
    estimates: bool = False
    uniqueness: bool = False


class EnvelopeSpec(CamelModel):
    """c * (shift + t)^exponent."""

    coef: float = Field(1.0, ge=0)
    exponent: float = 0.0
    shift: float = Field(0.0, ge=0)


class ModulusRef(CamelModel):
    name: str = "linear"
    params: Dict[str, ParamValue] = Field(default_factory=dict)


class H4Spec(CamelModel):
    """An explicit H4 descriptor: alpha, beta and rho(t, u) = weight(t) * kappa(u)."""

    alpha: EnvelopeSpec = Field(default_factory=EnvelopeSpec)
    beta: EnvelopeSpec = Field(default_factory=lambda: EnvelopeSpec(coef=0.0))
    weight: EnvelopeSpec = Field(default_factory=EnvelopeSpec)
    kappa: ModulusRef = Field(default_factory=ModulusRef)


class CheckOptions(CamelModel):
    samples: int = Field(10_000, ge=1)
    y_range: float = Field(10.0, gt=0)
    z_range: float = Field(10.0, gt=0)
    seed: int = Field(0, ge=0)
    h4: Optional[H4Spec] = None


class CertifyOptions(CamelModel):
    n_max: int = Field(500, ge=0)
    tol: float = Field(1e-8, gt=0)
    min_nodes: int = Field(4096, ge=2)
    moment_paths: int = Field(10_000, ge=2)
    budget: Literal["existence", "uniqueness"] = "existence"


class ModulusSpec(CamelModel):
    name: str = "power"
    params: Dict[str, ParamValue] = Field(default_factory=lambda: {"theta": 0.5})
    action: Literal["diagnose", "transform", "concavify"] = "diagnose"
    u0: float = Field(1.0, gt=0)
    eps_floor: float = Field(1e-300, gt=0)
    r: float = Field(2.0, gt=0)
    domain_cap: float = Field(1.0, gt=0)
    grid_size: int = Field(512, ge=3)


class ExperimentConfig(CamelModel):
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    terminal: TerminalSpec = Field(default_factory=TerminalSpec)
    p: float = Field(2.0, gt=1)
    grid: GridSpec = Field(default_factory=GridSpec)
    ensemble: EnsembleSpec = Field(default_factory=EnsembleSpec)
    ledger: LedgerOverrides = Field(default_factory=LedgerOverrides)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    check: CheckOptions = Field(default_factory=CheckOptions)
    certify: CertifyOptions = Field(default_factory=CertifyOptions)
    modulus: ModulusSpec = Field(default_factory=ModulusSpec)
    output_dir: str = "runs"


class Witness(CamelModel):
    t: float
    y1: List[float]
    y2: List[float]
    z1: List[List[float]]
    z2: List[List[float]]
    lhs: float
    rhs: float


class CheckResult(CamelModel):
    name: str
    status: Literal["pass", "fail", "heuristic-pass"]
    detail: str = ""
    value: Optional[float] = None
    witness: Optional[Witness] = None

    @model_validator(mode="after")
    def failures_carry_detail(self) -> "CheckResult":
        if self.status == "fail" and not (self.detail or self.witness):
            raise ValueError("A failed check needs a witness or a detail.")
        return self


class SClassReport(CamelModel):
    member: bool
    checks: List[CheckResult]
    envelope_integral: float
    r_at_zero: float


class HypothesisReport(CamelModel):
    generator: str
    hypothesis: str
    p: float
    status: Literal["pass", "fail", "heuristic-pass"]
    samples: int
    checks: List[CheckResult]
    integrals: Dict[str, float] = Field(default_factory=dict)
    s_class: Optional[SClassReport] = None

    @property
    def witnesses(self) -> List[Witness]:
        return [check.witness for check in self.checks if check.witness is not None]


class OsgoodReport(CamelModel):
    classification: Literal["divergent-likely", "convergent-likely"]
    numeric_classification: Literal["divergent-likely", "convergent-likely"]
    source: Literal["registry", "heuristic"]
    heuristic: bool = True
    slope: float
    tail_decay: float
    tail_power: float
    eps: List[float]
    integral: List[float]


class H5Estimate(CamelModel):
    estimate: float
    standard_error: float
    stable: bool
    half_estimates: List[float]


class ConstantLedger(CamelModel):
    p: float = Field(..., gt=1)
    c_p: float = Field(..., gt=0)
    m_p: float = Field(..., gt=0)
    k_p: float = Field(..., gt=0)
    bar_m_p: float = Field(..., gt=0)
    hat_m_p: float = Field(..., gt=0)
    tilde_m_p: float = Field(..., gt=0)

    @model_validator(mode="after")
    def c_p_formula(self) -> "ConstantLedger":
        if self.c_p != self.p / 2.0 * min(self.p - 1.0, 1.0):
            raise ValueError("c_p must equal p/2 * min(p - 1, 1).")
        return self


class IntervalBudget(CamelModel):
    t_lo: float
    t_hi: float
    b_integral: float
    alpha_hat: float
    beta_hat: float


class Partition(CamelModel):
    budget: Literal["existence", "uniqueness", "lipschitz"] = "existence"
    b_threshold: Optional[float] = 0.5
    ab_threshold: float
    points: List[float]
    intervals: List[IntervalBudget]

    @property
    def n(self) -> int:
        return len(self.intervals)

    @property
    def last(self) -> IntervalBudget:
        return self.intervals[-1]


class BudgetSlack(CamelModel):
    t_lo: float
    t_hi: float
    b_slack: Optional[float]
    ab_slack: float


class GateReport(CamelModel):
    integral: float
    M: float = Field(..., alias="M")
    C_hat: Optional[float] = Field(None, alias="CHat")
    passed: bool
    passed_with_c_hat: Optional[bool] = None


class EstimateReport(CamelModel):
    name: str
    t: float
    lhs: float
    rhs_shape: Dict[str, float]
    rhs_total: float
    fitted_constant: float = Field(..., ge=0)
    ledger_constant: float
    pass_at_ledger: bool
    notes: List[str] = Field(default_factory=list)


class RemarkOneReport(CamelModel):
    lhs: float
    lhs_standard_error: float
    rhs: float
    holds: bool


class Lemma2Report(CamelModel):
    p: float
    c_p: float
    slack_constant: float
    times: List[float]
    pass_fraction: List[float]

    @property
    def min_fraction(self) -> float:
        return min(self.pass_fraction)


class ErrorPayload(CamelModel):
    error: str
    detail: Optional[str] = None
    fields: Optional[List[str]] = None
