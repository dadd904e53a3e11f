"""End-to-end planning session: phantom in, sequenced plan and report out.

A session owns everything that is fixed per case: CT, structures, arc
geometry, the dose operator, the conformal initial fluence, and the baseline
dose the organ-sparing references are frozen against.  Replans vary only the
objective controls and iteration budget, reuse the session baseline (so
steering factors always refer to the same plan), and report a per-stage
timing breakdown.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .analytics import DVHCurve, MetricReport, compute_metric_report, dvh
from .config import PipelineSettings
from .dose import DoseOperator, FluenceStack, ct_normalize
from .geometry import VoxelGrid, build_arc_geometry
from .objective import ObjectiveConfig, freeze_references
from .optimizer import (
    FeedbackWorkspace,
    OptimizerConfig,
    PlanningResult,
    feedback_correct,
    propose_initial_fluence,
)
from .phantom import StructureSet, generate_phantom
from .sequencer import AperturePlan, reconstruct_fluence, sequence_plan


class StageTimings:
    """Per-stage wall-clock breakdown; ``total`` brackets the whole run so
    unattributed time is visible."""

    def __init__(self):
        self.entries: list[tuple[str, float]] = []
        self._t0 = time.perf_counter()

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        yield
        self.entries.append((name, time.perf_counter() - start))

    def close(self):
        self.entries.append(("total", time.perf_counter() - self._t0))

    def seconds(self, name: str) -> float:
        return sum(t for n, t in self.entries if n == name)

    def attributed_fraction(self) -> float:
        total = self.seconds("total")
        if total <= 0:
            return 1.0
        return sum(t for n, t in self.entries if n != "total") / total

    def table(self) -> str:
        width = max(len(n) for n, _ in self.entries) if self.entries else 10
        lines = [f"{'stage':<{width}}  time_ms"]
        for name, sec in self.entries:
            lines.append(f"{name:<{width}}  {sec * 1000.0:10.1f}")
        return "\n".join(lines)


@dataclass
class ReplanOutput:
    revision: int
    controls: dict[str, float]
    result: PlanningResult
    plan: AperturePlan
    sequenced_fluence: FluenceStack
    dose: VoxelGrid  # post-sequencing dose
    metrics: MetricReport
    dvh_curves: dict[str, DVHCurve]
    timings: StageTimings


DVH_BINS = 200


class PlanSession:
    """One phantom case with a frozen baseline and an interactive replan loop."""

    def __init__(self, settings: PipelineSettings):
        self.settings = settings
        timings = StageTimings()
        with timings.stage("phantom"):
            self.ct, self.structures = generate_phantom(settings.phantom)
        with timings.stage("geometry"):
            self.geoms = build_arc_geometry(
                n_cp=settings.arc.n_cp,
                start_angle=settings.arc.start_angle,
                sad=settings.arc.sad,
                bev_spacing=settings.arc.bev_spacing,
                bev_fov=settings.arc.bev_fov,
            )
        with timings.stage("dose_operator"):
            self.ct_norm = ct_normalize(self.ct)
            self.op = DoseOperator(self.ct_norm, self.geoms, settings.beam)
        with timings.stage("initial_fluence"):
            self.initial_fluence = propose_initial_fluence(
                self.structures, self.op, margin=settings.aperture_margin
            )
        with timings.stage("baseline_dose"):
            self.baseline_dose = self.op.forward(self.initial_fluence)
        with timings.stage("feedback_setup"):
            self.workspace = FeedbackWorkspace(
                self.op, self.structures, self.initial_fluence.values,
                use_active_subset=settings.optimizer.smoothness_weight == 0,
            )
            self.workspace.operator_norm_sq()
        timings.close()
        self.setup_timings = timings
        self.revision = -1
        self.latest: ReplanOutput | None = None

    @property
    def prescription(self) -> float:
        return self.structures.prescription_dose

    def objective_config(self, s_bladder: float, s_rectum: float,
                         lambda_plus: float, lambda_minus: float) -> ObjectiveConfig:
        controls = {}
        if "Bladder" in self.structures.masks:
            controls["Bladder"] = s_bladder
        if "Rectum" in self.structures.masks:
            controls["Rectum"] = s_rectum
        cfg = ObjectiveConfig(
            lambda_plus=lambda_plus,
            lambda_minus=lambda_minus,
            rx_dose=self.prescription,
            oar_controls=controls,
        )
        return freeze_references(cfg, self.baseline_dose, self.structures)

    def replan(self, s_bladder: float | None = None, s_rectum: float | None = None,
               lambda_plus: float | None = None, lambda_minus: float | None = None,
               iters: int | None = None) -> ReplanOutput:
        """Run feedback correction and sequencing against the frozen baseline."""
        obj = self.settings.objective
        controls = {
            "s_bladder": obj.s_bladder if s_bladder is None else float(s_bladder),
            "s_rectum": obj.s_rectum if s_rectum is None else float(s_rectum),
            "lambda_plus": obj.lambda_plus if lambda_plus is None else float(lambda_plus),
            "lambda_minus": obj.lambda_minus if lambda_minus is None else float(lambda_minus),
        }
        opt_config = self.settings.optimizer
        if iters is not None:
            opt_config = replace(opt_config, max_iters=int(iters))

        timings = StageTimings()
        with timings.stage("objective_freeze"):
            cfg = self.objective_config(
                controls["s_bladder"], controls["s_rectum"],
                controls["lambda_plus"], controls["lambda_minus"],
            )
        with timings.stage("feedback_correction"):
            result = feedback_correct(
                self.initial_fluence, self.op, self.structures, cfg, opt_config,
                workspace=self.workspace,
            )
        with timings.stage("leaf_sequencing"):
            plan = sequence_plan(
                result.fluence, self.settings.sequencer,
                gantry_angles=np.array([g.gantry_angle for g in self.geoms]),
            )
        with timings.stage("plan_dose"):
            seq_fluence = reconstruct_fluence(plan)
            dose = self.op.forward(seq_fluence)
        with timings.stage("analytics"):
            metrics = compute_metric_report(dose, self.structures, self.prescription)
            top = max(float(dose.values.max()), self.prescription) * 1.1
            curves = {
                name: dvh(dose, self.structures.masks[name], n_bins=DVH_BINS,
                          max_dose=top, structure=name)
                for name in ("PTV", *self.structures.oar_names)
            }
        timings.close()

        self.revision += 1
        out = ReplanOutput(
            revision=self.revision,
            controls=controls,
            result=result,
            plan=plan,
            sequenced_fluence=seq_fluence,
            dose=dose,
            metrics=metrics,
            dvh_curves=curves,
            timings=timings,
        )
        self.latest = out
        return out
