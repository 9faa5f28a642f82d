"""
Experiment service with one method per command line subcommand

Each subcommand writes the resolved configuration first, then its tables and
snapshots, and returns a summary dict for the command line to print. On a
numerical blow-up the partial tables get a BLOWUP marker row and the
error is raised again.
"""
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from app.config import CHUNK_SIZE, SHOW_PROGRESS, RunConfig, resolve_output_dir, resolve_workers
from app.services.basis_noise import NoiseStream, basis_audit
from app.services.diagnostics import (
    divergence_norm,
    energy,
    energy_report,
    ips_energy_identity_residual,
    l2_error,
    relative_l2_error,
    v1_nondissipation_terms,
    v2_dissipation_bound,
    v2_dissipation_rate,
)
from app.services.dynamics import ModelVariant, Variant
from app.services.errors import BlowUpError, ConvergenceError
from app.services.initial_conditions import build_initial_condition
from app.services.lagrangian import AUDIT_COLUMNS, Loop, kelvin_audit, label_transport_map
from app.services.sde_engine import (
    Coupling,
    Ensemble,
    ReferenceRun,
    heat_flow,
    meanfield_transport_map,
    picard_iterate,
    run_ensemble,
    run_reference,
    trajectory_distance,
)
from app.services.snapshot_io import Checkpoint, write_basis_audit, write_csv, write_csv_with_blowup
from app.services.spectral_core import VectorField, norm_l2

logger = logging.getLogger(__name__)

REFERENCE_COLUMNS = ["t", "E_d", "heat_flow_deviation", "divergence_max"]
ENERGY_COLUMNS = ["t", "E_d", "E_s_hat", "stderr", "E_d_of_mean", "divergence_max"]
V1_TERM_COLUMNS = ["bracket", "stretching", "pressure", "truncation"]
V2_TERM_COLUMNS = ["v2_rate", "v2_bound"]
IDENTITY_COLUMNS = ["identity_formula", "identity_drift", "identity_stderr", "identity_residual"]
MEANFIELD_COLUMNS = ["t", "l2_error", "relative_error", "mc_stderr", "E_d", "E_s_hat", "jensen_gap"]
PICARD_COLUMNS = ["iteration", "residual", "tolerance", "mc_error", "reference_distance"]

ARTIFACTS = ("*.csv", "*.tmf", "manifest.json", "config.ini")


def _finish_table(rows: List[Dict], path: Path, columns: List[str], error: Optional[BlowUpError]) -> None:
    if error is None:
        write_csv(pd.DataFrame(rows, columns=columns), path, columns)
    else:
        write_csv_with_blowup(rows, path, columns, error)


def _variant_terms(ens: Ensemble, mean: VectorField) -> Dict[str, float]:
    variant = ens.variant
    fields = ens.fields
    if variant.tag is Variant.V1_HAMILTONIAN:
        parts = [v1_nondissipation_terms(xi, mean, variant) for xi in fields]
        return {name: float(np.mean([getattr(p, name) for p in parts])) for name in V1_TERM_COLUMNS}
    if variant.tag is Variant.V2_PROJECTED:
        return {"v2_rate": float(np.mean([v2_dissipation_rate(xi, variant) for xi in fields])),
                "v2_bound": v2_dissipation_bound(mean, variant)}
    return {}


class ExperimentService:
    """Runs one subcommand against a resolved configuration"""

    def __init__(self, command: str, config: RunConfig, workers: Optional[int] = None):
        self.command = command
        self.config = config
        self.workers = resolve_workers(workers)
        self.chunk_size = CHUNK_SIZE
        self.progress = SHOW_PROGRESS
        self.directory = resolve_output_dir(config) / command

    @property
    def grid(self):
        return self.config.grid_spec()

    @property
    def dt(self) -> float:
        return self.config.physics.dt

    @property
    def T(self) -> float:
        return self.config.physics.T

    @property
    def cadence(self) -> int:
        return self.config.output.cadence

    def prepare(self) -> Path:
        """Create the output directory, clear stale artifacts and echo the configuration"""
        self.directory.mkdir(parents=True, exist_ok=True)
        for pattern in ARTIFACTS:
            for stale in sorted(self.directory.glob(pattern)):
                stale.unlink()
        self.path("config.ini").write_text(self.config.to_ini(include_derived=True))
        logger.info("%s: writing to %s", self.command, self.directory)
        return self.directory

    def run(self) -> Dict:
        self.prepare()
        return RUNNERS[self.command](self)

    def variant(self, tag: Optional[Variant] = None) -> ModelVariant:
        return self.config.model_variant(tag)

    def stream(self) -> NoiseStream:
        return NoiseStream(self.config.noise.seed)

    def initial_field(self) -> VectorField:
        initial = self.config.initial
        return build_initial_condition(initial.preset, self.grid, initial.amplitude, initial.band, initial.seed)

    def checkpoint(self, label: str, variant: Optional[ModelVariant] = None) -> Optional[Checkpoint]:
        if not self.config.output.snapshots:
            return None
        noise = self.config.noise
        header = {"command": self.command, "seed": noise.seed, "K": noise.K, "s": noise.s,
                  "n": self.grid.n, "m": self.grid.m, "dt": self.dt}
        if variant is not None:
            header.update(variant.describe())
        return Checkpoint(self.directory, label, header)

    def path(self, name: str) -> Path:
        return self.directory / name

    def _paired_reference(self, u0: VectorField, store_every: int) -> ReferenceRun:
        return run_reference(u0, self.config.physics.eta, self.dt, self.T, store_every=store_every,
                             progress=self.progress)

    # -----------------------------------------------------------------------
    # subcommands
    # -----------------------------------------------------------------------

    def reference(self) -> Dict:
        """Deterministic Navier-Stokes run with energy table and snapshots"""
        eta = self.config.physics.eta
        u0 = self.initial_field()
        checkpoint = self.checkpoint("u_ref")
        rows: List[Dict] = []

        def observe(step: int, t: float, values: np.ndarray):
            u = VectorField(self.grid, values, solenoidal=True)
            heat = VectorField(self.grid, heat_flow(u0, eta, [t])[0])
            rows.append({"t": t, "E_d": energy(u), "heat_flow_deviation": relative_l2_error(u, heat),
                         "divergence_max": divergence_norm(u)})
            if checkpoint:
                checkpoint.save(u, step, t)

        try:
            ref = run_reference(u0, eta, self.dt, self.T, store_every=self.cadence, progress=self.progress,
                                observer=observe)
        except BlowUpError as e:
            _finish_table(rows, self.path("energy.csv"), REFERENCE_COLUMNS, e)
            raise
        _finish_table(rows, self.path("energy.csv"), REFERENCE_COLUMNS, None)
        return {
            "command": self.command,
            "directory": str(self.directory),
            "steps": ref.metadata["steps"],
            "E_d(0)": rows[0]["E_d"],
            "E_d(T)": rows[-1]["E_d"],
            "cfl_max": ref.metadata["cfl_max"],
        }

    def ips(self) -> Dict:
        """Interacting particle run with energy and identity tables and u^N snapshots"""
        variant = self.variant()
        u0 = self.initial_field()
        ref = self._paired_reference(u0, self.cadence)
        ens = Ensemble.from_initial(u0, self.config.model.particles, variant, self.stream(), Coupling.IPS)

        terms_columns = {Variant.V1_HAMILTONIAN: V1_TERM_COLUMNS,
                         Variant.V2_PROJECTED: V2_TERM_COLUMNS}.get(variant.tag, [])
        with_identity = variant.tag is not Variant.H17_RAW
        columns = ENERGY_COLUMNS + terms_columns + (IDENTITY_COLUMNS if with_identity else []) + ["l2_error"]
        seeds = [self.config.noise.seed + 1 + j for j in range(self.config.model.identity_seeds)]
        checkpoint = self.checkpoint("u_N", variant)
        rows: List[Dict] = []

        def observe(current: Ensemble):
            mean = current.mean()
            report = energy_report(current.t, current, terms=_variant_terms(current, mean))
            row = report.as_row()
            if with_identity:
                residual = ips_energy_identity_residual(current, self.dt, seeds, self.workers)
                row.update({"identity_formula": residual.formula, "identity_drift": residual.drift_estimate,
                            "identity_stderr": residual.standard_error, "identity_residual": residual.residual})
            row["l2_error"] = l2_error(mean, ref.at(current.t))
            rows.append(row)
            if checkpoint:
                checkpoint.save(mean, current.step, current.t)

        try:
            ens = run_ensemble(ens, self.dt, self.T, scheme=self.config.model.scheme, cadence=self.cadence,
                               observer=observe, workers=self.workers, chunk_size=self.chunk_size,
                               progress=self.progress)
        except BlowUpError as e:
            _finish_table(rows, self.path("energy.csv"), columns, e)
            raise
        _finish_table(rows, self.path("energy.csv"), columns, None)
        final = rows[-1]
        summary = {
            "command": self.command,
            "directory": str(self.directory),
            "variant": variant.tag.value,
            "particles": len(ens),
            "E_s_hat(T)": final["E_s_hat"],
            "E_d(T)": final["E_d"],
            "l2_error(T)": final["l2_error"],
        }
        if with_identity:
            summary["identity_residual(T)"] = final["identity_residual"]
        return summary

    def meanfield(self) -> Dict:
        """Prescribed-coupling Monte Carlo against a stored reference run"""
        variant = self.variant()
        u0 = self.initial_field()
        ref = self._paired_reference(u0, 1)
        ens = Ensemble.from_initial(u0, self.config.model.trajectories, variant, self.stream(), Coupling.PRESCRIBED)
        checkpoint = self.checkpoint("mean", variant)
        rows: List[Dict] = []

        def observe(current: Ensemble):
            mean = current.mean()
            u_ref = ref.at(current.t)
            report = energy_report(current.t, current, reference=u_ref)
            rows.append({"t": current.t, "l2_error": l2_error(mean, u_ref),
                         "relative_error": relative_l2_error(mean, u_ref), "mc_stderr": current.mean_standard_error(),
                         "E_d": report.E_d, "E_s_hat": report.E_s_hat, "jensen_gap": report.jensen_gap})
            if checkpoint:
                checkpoint.save(mean, current.step, current.t)

        try:
            run_ensemble(ens, self.dt, self.T, u_provider=ref.provider(), scheme=self.config.model.scheme,
                         cadence=self.cadence, observer=observe, workers=self.workers, chunk_size=self.chunk_size,
                         progress=self.progress)
        except BlowUpError as e:
            _finish_table(rows, self.path("error_curve.csv"), MEANFIELD_COLUMNS, e)
            raise
        _finish_table(rows, self.path("error_curve.csv"), MEANFIELD_COLUMNS, None)
        final = rows[-1]
        scale = norm_l2(ref.at(rows[-1]["t"]))
        bound = 3.0 * final["mc_stderr"] / scale + 10.0 * self.dt if scale > 0 else float("inf")
        return {
            "command": self.command,
            "directory": str(self.directory),
            "variant": variant.tag.value,
            "line_stretching": variant.line_stretching,
            "trajectories": self.config.model.trajectories,
            "relative_error(T)": final["relative_error"],
            "bound(T)": bound,
            "within_bound": final["relative_error"] <= bound,
        }

    def picard(self) -> Dict:
        """
        Fixed-point iteration u ← Φ(u) with a residual log

        Raises ConvergenceError after the log is written when the iteration
        stalls or runs out of iterations.
        """
        model = self.config.model
        variant = self.variant(Variant.V1_HAMILTONIAN)
        u0 = self.initial_field()
        ref = self._paired_reference(u0, 1)
        if model.picard_transport == "labels":
            phi = label_transport_map(u0, variant, self.stream(), model.trajectories, self.dt, model.scheme)
        else:
            phi = meanfield_transport_map(u0, variant, self.stream(), model.trajectories, self.dt,
                                          self.workers, self.chunk_size)
        result = picard_iterate(u0, self.config.physics.eta, self.dt, self.T, model.picard_iters, phi,
                                damping=model.picard_damping)
        rows = [{"iteration": i + 1, "residual": result.residuals[i], "tolerance": result.tolerances[i],
                 "mc_error": result.mc_errors[i],
                 "reference_distance": trajectory_distance(result.iterates[i + 1], ref.fields, self.grid)}
                for i in range(result.iterations)]
        write_csv(pd.DataFrame(rows, columns=PICARD_COLUMNS), self.path("picard.csv"), PICARD_COLUMNS)
        checkpoint = self.checkpoint("picard", variant)
        if checkpoint:
            final = result.final()
            checkpoint.save(VectorField(self.grid, final[-1], solenoidal=True), len(final) - 1, self.T)
        if not result.converged:
            raise ConvergenceError(f"picard iteration {result.reason} after {result.iterations} iterations "
                                   f"(residual {result.residuals[-1]:.3g})")
        return {
            "command": self.command,
            "directory": str(self.directory),
            "transport": model.picard_transport,
            "iterations": result.iterations,
            "residual": result.residuals[-1],
            "reference_distance": rows[-1]["reference_distance"],
        }

    def circulation(self) -> Dict:
        """Kelvin circulation audit over the configured seeds"""
        config = self.config
        variant = self.variant()
        u0 = self.initial_field()
        loop = Loop.circle(config.loop_center(), config.loop.radius, config.loop.points)
        provider = None
        if config.model.coupling == Coupling.PRESCRIBED.value:
            provider = self._paired_reference(u0, 1).provider()
        frames: List[pd.DataFrame] = []
        try:
            for seed in config.loop.seeds:
                frames.append(kelvin_audit(u0, variant, loop, [seed], self.dt, self.T, u_provider=provider,
                                           particles=config.model.particles, scheme=config.model.scheme,
                                           cadence=self.cadence, workers=self.workers, chunk_size=self.chunk_size,
                                           quadrature=config.loop.quadrature))
        except BlowUpError as e:
            rows = [row for frame in frames for row in frame.to_dict("records")]
            _finish_table(rows, self.path("circulation.csv"), AUDIT_COLUMNS, e)
            raise
        audit = pd.concat(frames, ignore_index=True)
        write_csv(audit, self.path("circulation.csv"), AUDIT_COLUMNS)
        final = audit[np.isclose(audit["t"], audit["t"].max())]
        return {
            "command": self.command,
            "directory": str(self.directory),
            "variant": variant.tag.value,
            "seeds": len(config.loop.seeds),
            "max_relative_drift(T)": float(np.max(np.abs(final["relative_drift"]))),
        }

    def basis_check(self) -> Dict:
        """Basis audit table with c_K and ε_K"""
        trunc = self.config.truncation()
        audit = basis_audit(trunc, self.grid)
        write_basis_audit(audit, self.path("basis_audit.csv"))
        return {
            "command": self.command,
            "directory": str(self.directory),
            "basis_count": len(trunc),
            "c_K": trunc.c_K,
            "epsilon_K": trunc.epsilon_K,
            "max_div_norm": float(audit["div_norm"].max()),
            "max_self_advection_norm": float(audit["self_advection_norm"].max()),
        }


RUNNERS: Dict[str, Callable[[ExperimentService], Dict]] = {
    "reference": ExperimentService.reference,
    "ips": ExperimentService.ips,
    "meanfield": ExperimentService.meanfield,
    "picard": ExperimentService.picard,
    "circulation": ExperimentService.circulation,
    "basis-check": ExperimentService.basis_check,
}


def run_command(command: str, config: RunConfig, workers: Optional[int] = None) -> Dict:
    """Prepare the output directory and dispatch to the subcommand"""
    return ExperimentService(command, config, workers).run()
