from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel
from tabulate import tabulate

from .bsde import RegressionBasis, SolutionEnsemble, picard_solve, residual_check, solution_summary, uniqueness_probe
from .certificates import (
    compute_partition,
    constant_M,
    gate_report,
    make_ledger,
    majorant_sequence,
    verify_partition,
)
from .errors import CertificationFailed, InvalidArgument
from .estimates import assumption_from_h4, estimate_table, lemma2_check, prop1_report, prop2_report, remark1_bound
from .generators import Generator, H4, check_H4_sampled, check_H5, translate_hypotheses, zoo, zoo_catalog
from .models import CheckResult, ExperimentConfig, H4Spec, ModulusSpec
from .moduli import make_modulus, public_modulus_payload
from .modulus import (
    chord_bound_check,
    concavify,
    osgood_diagnostic,
    power_transform,
    separable,
)
from .paths import PathEnsemble, TimeGrid, build_grid, save_ensemble, simulate_brownian, truncate_horizon
from .quadrature import PowerLaw
from .terminals import Terminal, make_terminal, public_terminal_payload


logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parents[2]
load_dotenv(REPO_ROOT / ".env")
OUTPUT_DIR = os.getenv("PICARDLAB_OUTPUT_DIR")
THREADS = os.getenv("PICARDLAB_THREADS", "1")
FLOAT_FORMAT = "%.17g"


def serialize_model(model: BaseModel) -> dict:
    return model.model_dump(by_alias=True, mode="json")


def load_config(path: Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InvalidArgument(f"Config file {path} does not exist.") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"Config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.model_validate(raw)


def canonical_json(config: ExperimentConfig) -> str:
    return json.dumps(serialize_model(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def resolve_output_dir(config: ExperimentConfig, override: Optional[str] = None) -> Path:
    chosen = override or OUTPUT_DIR or config.output_dir
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def resolve_threads(override: Optional[int] = None) -> int:
    if override is not None:
        value = override
    else:
        try:
            value = int(THREADS)
        except ValueError as exc:
            raise InvalidArgument(f"PICARDLAB_THREADS must be an integer, got {THREADS!r}.") from exc
    if value < 1:
        raise InvalidArgument("The thread cap must be at least 1.")
    return value


def write_csv(frame: pd.DataFrame, path: Path, digest: str) -> Path:
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# config-sha256: {digest}\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_json(payload: Dict[str, Any], path: Path, digest: str) -> Path:
    body = {"configHash": digest, **payload}
    path.write_text(json.dumps(body, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_resolved_config(config: ExperimentConfig, directory: Path) -> Tuple[str, Path]:
    digest = config_hash(config)
    path = directory / "config.json"
    path.write_text(json.dumps(serialize_model(config), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest, path


def build_generator(config: ExperimentConfig) -> Generator:
    params = dict(config.generator.params)
    g = zoo(config.generator.name, params)
    if g.p != config.p and "p" not in params:
        g = zoo(config.generator.name, {**params, "p": config.p})
    return g


def h4_from_spec(spec: H4Spec) -> H4:
    def envelope(item) -> PowerLaw:
        return PowerLaw(item.coef, item.exponent, item.shift)

    kappa = make_modulus(spec.kappa.name, spec.kappa.params)
    return H4(envelope(spec.alpha), envelope(spec.beta), separable(envelope(spec.weight), kappa))


def _h4_or_fail(g: Generator, p: float) -> H4:
    h4 = translate_hypotheses(g, p).descriptors.h4
    if h4 is None:
        raise CertificationFailed(f"{g.name} has no H4 descriptor to certify with.")
    return h4


def build_time_grid(config: ExperimentConfig, g: Generator) -> TimeGrid:
    spec = config.grid
    horizon = None
    if spec.horizon == "truncated_infinite":
        p = config.p
        h4 = _h4_or_fail(g, p)
        tails = {
            "alpha^(p/(p-1))": h4.alpha.power(p / (p - 1.0)),
            "beta^2": h4.beta.power(2.0),
            "a": h4.rho.envelope_a,
            "b": h4.rho.envelope_b,
        }
        horizon = truncate_horizon(tails, spec.T, config.quadrature)
    elif g.infinite_horizon:
        logger.warning("%s is posed on [0, inf); solving on the finite horizon T=%s.", g.name, spec.T)
    return build_grid(spec.T, spec.steps, spec.spacing, spec.ratio, horizon)


def build_ensemble(
    config: ExperimentConfig,
    grid: TimeGrid,
    threads: int,
    paths: Optional[int] = None,
    seed: Optional[int] = None,
) -> PathEnsemble:
    chosen = config.ensemble.seed if seed is None else seed
    ens = simulate_brownian(grid, config.ensemble.d, paths or config.ensemble.paths, chosen, threads)
    logger.info("Simulated %d Brownian paths on %d steps (seed %d).", ens.P, grid.M, ens.seed)
    return ens


def _checked_dimensions(g: Generator, terminal: Terminal, config: ExperimentConfig) -> None:
    if g.d != config.ensemble.d:
        raise InvalidArgument(f"{g.name} expects d={g.d}, the ensemble has d={config.ensemble.d}.")
    if g.k != terminal.k:
        raise InvalidArgument(f"{g.name} has k={g.k} but the terminal condition has k={terminal.k}.")


def estimate_reports(g: Generator, sol: SolutionEnsemble, xi: np.ndarray, config: ExperimentConfig) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """A priori estimate checks on one solution, at t=0 and at the middle grid point."""
    p = config.p
    lemma2 = lemma2_check(sol, xi, g, p)
    payload: Dict[str, Any] = {"lemma2": serialize_model(lemma2), "reports": [], "remark1": None}
    h4 = translate_hypotheses(g, p).descriptors.h4
    if h4 is None:
        logger.warning("%s has no H4 descriptor; only the pathwise check is reported.", g.name)
        return estimate_table([]), payload
    ledger = make_ledger(p, config.ledger)
    assumption = assumption_from_h4(g, sol, p)
    reports = []
    for index in sorted({0, sol.grid.M // 2}):
        reports.append(prop1_report(sol, xi, assumption, index, ledger, config.quadrature))
        reports.append(prop2_report(sol, xi, assumption, index, ledger, config.quadrature))
    payload["reports"] = [serialize_model(report) for report in reports]
    payload["remark1"] = serialize_model(remark1_bound(h4.rho, sol, p, quad=config.quadrature))
    return estimate_table({g.name: reports}), payload


def cmd_solve(config: ExperimentConfig, output_dir: Optional[str] = None, threads: Optional[int] = None) -> Dict[str, Any]:
    directory = resolve_output_dir(config, output_dir)
    g = build_generator(config)
    terminal = make_terminal(config.terminal.name, config.terminal.params)
    _checked_dimensions(g, terminal, config)
    grid = build_time_grid(config, g)
    ens = build_ensemble(config, grid, resolve_threads(threads))
    xi = terminal(ens)
    options = config.solver
    sol, trace = picard_solve(
        xi,
        g,
        grid,
        ens,
        RegressionBasis.from_spec(options.basis),
        n_max=options.n_max,
        tol_sp=options.tol_sp,
        p=config.p,
        inner_iters=options.inner_iters,
        initial=options.initial,
    )
    residuals = residual_check(sol, xi, g)
    digest, config_path = write_resolved_config(config, directory)
    files = [
        config_path,
        write_csv(solution_summary(sol), directory / "solution_summary.csv", digest),
        write_csv(trace.to_frame(), directory / "convergence_trace.csv", digest),
        write_csv(residuals.to_frame(), directory / "residuals.csv", digest),
    ]
    if options.export_ensembles:
        save_ensemble(ens, directory / "increments.bin")
        files.append(directory / "increments.bin")
        files.extend(sol.save(directory))
    if grid.horizon.tail_report:
        files.append(write_json({"horizon": grid.horizon.to_dict()}, directory / "horizon.json", digest))
    if options.estimates:
        table, payload = estimate_reports(g, sol, xi, config)
        files.append(write_csv(table, directory / "estimates.csv", digest))
        files.append(write_json(payload, directory / "estimates.json", digest))
    if options.uniqueness:
        second = build_ensemble(config, grid, resolve_threads(threads), seed=config.ensemble.seed + 1)
        probe = uniqueness_probe(
            g,
            terminal,
            grid,
            [ens, second],
            [RegressionBasis.from_spec(options.basis)] * 2,
            p=config.p,
            n_max=options.n_max,
            tol_sp=options.tol_sp,
        )
        files.append(write_json({"uniqueness": probe.to_dict()}, directory / "uniqueness.json", digest))
    summary = {
        "generator": g.name,
        "y0": sol.y0.tolist(),
        "convergedAt": trace.converged_at,
        "iterations": len(trace.sp_distances),
        "maxResidualRms": residuals.max_rms,
        "files": [path.name for path in files],
    }
    logger.info("Solve finished: y0=%s, converged at %s.", summary["y0"], trace.converged_at)
    return summary


def cmd_certify(config: ExperimentConfig, output_dir: Optional[str] = None, threads: Optional[int] = None) -> Dict[str, Any]:
    directory = resolve_output_dir(config, output_dir)
    p = config.p
    quad = config.quadrature
    options = config.certify
    g = build_generator(config)
    terminal = make_terminal(config.terminal.name, config.terminal.params)
    _checked_dimensions(g, terminal, config)
    h4 = _h4_or_fail(g, p)
    grid = build_time_grid(config, g)
    T = grid.T
    ledger = make_ledger(p, config.ledger)
    partition = compute_partition(h4.alpha, h4.beta, h4.rho.envelope_b, ledger, grid, quad, options.budget)
    slacks = verify_partition(partition, h4.alpha, h4.beta, h4.rho.envelope_b, p, quad)

    ens = build_ensemble(config, grid, resolve_threads(threads), paths=options.moment_paths)
    xi_moment = terminal.moment(ens, p)
    h5 = check_H5(g, ens, p)
    if not math.isfinite(h5.estimate):
        raise CertificationFailed("E(int |g(s,0,0)| ds)^p is not finite on the sample.", integrand="|g(s,0,0)|")
    alpha_hat = h4.alpha.power(p / (p - 1.0)).integral(0.0, T, quad)
    beta_hat = h4.beta.power(2.0).integral(0.0, T, quad)
    bound = constant_M(ledger, xi_moment, h5.estimate, h4.rho.envelope_a, alpha_hat, beta_hat, T, quad)
    last = partition.last
    gate = gate_report(h4.rho, bound.M, last.t_lo, last.t_hi, bound.C_hat, quad)
    trace = majorant_sequence(
        h4.rho,
        bound.M,
        last.t_lo,
        last.t_hi,
        quad,
        n_max=options.n_max,
        tol=options.tol,
        grid=grid,
        min_nodes=options.min_nodes,
    )

    digest, config_path = write_resolved_config(config, directory)
    certificate = {
        "generator": g.name,
        "p": p,
        "ledger": serialize_model(ledger),
        "partition": serialize_model(partition),
        "partitionSlack": [serialize_model(slack) for slack in slacks],
        "moments": {"xi": xi_moment, "h5": serialize_model(h5)},
        "bound": bound.to_dict(),
        "gate": serialize_model(gate),
        "majorant": trace.to_dict(),
        "horizon": grid.horizon.to_dict(),
    }
    write_json(certificate, directory / "certificate.json", digest)
    write_csv(trace.to_frame(), directory / "majorant.csv", digest)
    logger.info("Certificate for %s: %d intervals, majorant converged=%s.", g.name, partition.n, trace.converged)
    return {
        "generator": g.name,
        "intervals": partition.n,
        "M": bound.M,
        "majorantConverged": trace.converged,
        "nStop": trace.n_stop,
        "files": [config_path.name, "certificate.json", "majorant.csv"],
    }


def cmd_check(config: ExperimentConfig, output_dir: Optional[str] = None, threads: Optional[int] = None) -> Dict[str, Any]:
    directory = resolve_output_dir(config, output_dir)
    p = config.p
    g = build_generator(config)
    grid = build_time_grid(config, g)
    options = config.check
    desc = h4_from_spec(options.h4) if options.h4 is not None else None
    report = check_H4_sampled(
        g,
        grid,
        desc=desc,
        p=p,
        samples=options.samples,
        y_range=options.y_range,
        z_range=options.z_range,
        seed=options.seed,
        quad=config.quadrature,
    )
    ens = build_ensemble(config, grid, resolve_threads(threads))
    h5 = check_H5(g, ens, p)
    extra: List[CheckResult] = []
    h6 = translate_hypotheses(g, p).descriptors.h6
    if h6 is not None:
        osgood = osgood_diagnostic(h6.kappa_bar, quad=config.quadrature)
        divergent = osgood.classification == "divergent-likely"
        status = ("pass" if osgood.source == "registry" else "heuristic-pass") if divergent else "fail"
        extra.append(
            CheckResult(
                name=f"osgood {h6.kappa_bar.name}",
                status=status,
                value=osgood.slope,
                detail="" if divergent else "integral of 1/kappa_bar converges near 0",
            )
        )
    digest, config_path = write_resolved_config(config, directory)
    payload = {
        "h4": serialize_model(report),
        "h5": serialize_model(h5),
        "h6": [serialize_model(item) for item in extra],
    }
    write_json(payload, directory / "hypotheses.json", digest)
    status = report.status
    if any(item.status == "fail" for item in extra):
        status = "fail"
    logger.info("Hypothesis check for %s: %s.", g.name, status)
    return {"generator": g.name, "status": status, "witnesses": len(report.witnesses), "files": [config_path.name, "hypotheses.json"]}


def _midpoint_concavity(func, xs: np.ndarray) -> float:
    """Largest violation of f((x+y)/2) >= (f(x)+f(y))/2 over neighbouring sample pairs."""
    left, right = xs[:-2], xs[2:]
    middle = 0.5 * (left + right)
    return float(np.max(0.5 * (func(left) + func(right)) - func(middle)))


def cmd_modulus(spec: ModulusSpec, digest: str, directory: Path, quad=None) -> Dict[str, Any]:
    kappa = make_modulus(spec.name, spec.params)
    if spec.action == "diagnose":
        report = osgood_diagnostic(kappa, spec.u0, spec.eps_floor, quad)
        frame = pd.DataFrame({"eps": report.eps, "integral": report.integral})
        write_csv(frame, directory / "osgood.csv", digest)
        write_json({"modulus": kappa.name, "osgood": serialize_model(report)}, directory / "osgood.json", digest)
        return {"modulus": kappa.name, "classification": report.classification, "files": ["osgood.csv", "osgood.json"]}
    u = np.concatenate(([0.0], np.geomspace(spec.domain_cap * 1e-12, spec.domain_cap, spec.grid_size - 1)))
    if spec.action == "transform":
        transformed = power_transform(kappa, spec.r)
        frame = pd.DataFrame({"u": u, "kappa": kappa(u), "transformed": transformed(u)})
        holds, worst = chord_bound_check(transformed)
        summary = {
            "modulus": transformed.name,
            "claims": sorted(transformed.claims),
            "midpointConcavityViolation": _midpoint_concavity(transformed, np.linspace(0.0, spec.domain_cap, spec.grid_size)),
            "chordBound": {"holds": holds, "worstGap": worst},
        }
        write_csv(frame, directory / "transform.csv", digest)
        write_json(summary, directory / "transform.json", digest)
        return {**summary, "files": ["transform.csv", "transform.json"]}
    majorant = concavify(kappa, spec.domain_cap, spec.grid_size)
    base, hull = kappa(u), majorant(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(base > 0, hull / base, 1.0)
    summary = {"modulus": majorant.name, "maxRatio": float(np.max(ratio)), "withinFactorTwo": bool(np.max(ratio) <= 2.0 + 1e-12)}
    write_csv(pd.DataFrame({"u": u, "kappa": base, "majorant": hull}), directory / "concavify.csv", digest)
    write_json(summary, directory / "concavify.json", digest)
    return {**summary, "files": ["concavify.csv", "concavify.json"]}


def run_modulus(config: ExperimentConfig, output_dir: Optional[str] = None) -> Dict[str, Any]:
    directory = resolve_output_dir(config, output_dir)
    digest, _ = write_resolved_config(config, directory)
    return cmd_modulus(config.modulus, digest, directory, config.quadrature)


def zoo_list(as_json: bool = False) -> str:
    rows = zoo_catalog()
    moduli, terminals = public_modulus_payload(), public_terminal_payload()
    if as_json:
        return json.dumps({"generators": rows, "moduli": moduli, "terminals": terminals}, indent=2, sort_keys=True)
    table = [
        [
            row["name"],
            ", ".join(f"{key}={value}" for key, value in row["defaults"].items()),
            " ".join(sorted(row["descriptors"])),
            "yes" if row["infiniteHorizon"] else "",
            row["description"],
        ]
        for row in rows
    ]
    sections = [tabulate(table, headers=["name", "defaults", "descriptors", "infinite", "generator"])]
    for label, families in (("modulus", moduli), ("terminal", terminals)):
        listing = [[family["name"], ", ".join(f"{key}={value}" for key, value in family["defaults"].items()), family["description"]] for family in families]
        sections.append(tabulate(listing, headers=["name", "defaults", label]))
    return "\n\n".join(sections)
