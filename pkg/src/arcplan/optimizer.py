"""Dose-feedback fluence optimization.

Projected gradient descent on the composite objective (dose terms plus the
deliverability regularizer) with Armijo backtracking, so the recorded
objective trace is non-increasing by construction.  Iterates stay
non-negative via projection to zero.

With the smoothness (TV) weight at zero, rays that start closed and can never
receive a negative gradient provably stay closed: organ-at-risk errors are
non-negative everywhere and target errors are negative only inside the PTV,
so after smoothing the attracting region is contained in the PTV expanded by
the blur kernel support.  The loop therefore restricts itself to the exact
active ray set (initial support plus rays crossing that expansion), which is
what makes desk-scale replanning interactive; iterates match the full-stack
iteration exactly.  A positive TV weight couples neighboring pixels and falls
back to the full ray set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dose import DoseOperator, FluenceStack
from .geometry import VoxelGrid
from .objective import ObjectiveConfig, objective_terms
from .phantom import StructureSet, dilate_margin

logger = logging.getLogger(__name__)

DEFAULT_APERTURE_MARGIN_MM = 12.0
_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 25
    initial_step: float | None = None  # None: 1 / (curvature estimate)
    step_shrink: float = 0.5
    step_growth: float = 1.25
    sufficient_decrease: float = 1e-4
    tol: float = 1e-5
    two_level_weight: float = 0.1
    smoothness_weight: float = 0.0
    step_rule: str = "bb"  # "bb": Barzilai-Borwein trial steps; "fixed": growth only

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.step_shrink < 1.0:
            raise ValueError("step_shrink must lie in (0, 1)")
        if self.two_level_weight < 0 or self.smoothness_weight < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.step_rule not in ("bb", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class PlanningResult:
    fluence: FluenceStack
    dose: VoxelGrid
    objective_trace: list[float]
    iterations_used: int
    converged: bool = False


def deliverability_reg(fluence_values: np.ndarray, smoothness_weight: float,
                       two_level_weight: float) -> tuple[float, np.ndarray]:
    """Deliverability penalty and its exact (a.e.) gradient.

    Per control point: ``two_level_weight * sum(min(f, |f - m|)^2)`` where m
    is the mean of above-half-max pixels (the two-level target the sequencer
    will extract), plus ``smoothness_weight`` times anisotropic total
    variation.  Subgradient 0 is used at kinks; the two-level gradient
    includes the dependence of m on the in-set pixels.
    """
    f = np.asarray(fluence_values, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(f)

    if two_level_weight > 0:
        vmax = f.max(axis=(1, 2), keepdims=True)
        sset = (f >= 0.5 * vmax) & (vmax > 0)
        k = sset.sum(axis=(1, 2), keepdims=True)
        safe_k = np.where(k > 0, k, 1)
        m = np.where(k > 0, (f * sset).sum(axis=(1, 2), keepdims=True) / safe_k, 0.0)
        fm = f - m
        dist = np.abs(fm)
        t = np.minimum(f, dist)
        value += two_level_weight * float(np.sum(t * t))
        near = f > dist  # the (f - m)^2 branch; ties get subgradient 0
        far = f < dist  # the f^2 branch
        g = np.where(far, 2.0 * f, 0.0) + np.where(near, 2.0 * fm, 0.0)
        coupling = np.where(near, 2.0 * fm, 0.0).sum(axis=(1, 2), keepdims=True)
        g -= np.where(sset, coupling / safe_k, 0.0)
        grad += two_level_weight * g

    if smoothness_weight > 0:
        dr = f[:, 1:, :] - f[:, :-1, :]
        dc = f[:, :, 1:] - f[:, :, :-1]
        value += smoothness_weight * float(np.abs(dr).sum() + np.abs(dc).sum())
        g = np.zeros_like(f)
        sr, sc = np.sign(dr), np.sign(dc)
        g[:, 1:, :] += sr
        g[:, :-1, :] -= sr
        g[:, :, 1:] += sc
        g[:, :, :-1] -= sc
        grad += smoothness_weight * g

    return value, grad


def propose_initial_fluence(structures: StructureSet, op: DoseOperator,
                            margin: float = DEFAULT_APERTURE_MARGIN_MM) -> FluenceStack:
    """Conformal start: unit fluence on rays crossing the margin-expanded PTV,
    globally scaled so the mean PTV dose equals the prescription."""
    if structures.masks["PTV"].values.sum() == 0:
        raise ValueError("cannot propose fluence for an empty PTV")
    expanded = dilate_margin(structures.masks["PTV"], margin)
    proj = op.projector.project(expanded.values).values
    unit = (proj > 0.0).astype(np.float64)
    empty_cps = np.flatnonzero(unit.sum(axis=(1, 2)) == 0)
    if empty_cps.size:
        logger.warning("PTV invisible from %d control points: %s", empty_cps.size, empty_cps[:10])
    dose = op.forward(FluenceStack(unit, spacing=op.geoms[0].bev_spacing))
    mean_ptv = float(dose.values[structures.mask("PTV")].mean())
    if mean_ptv <= 0:
        raise ValueError("conformal aperture delivers no dose to the PTV")
    scale = structures.prescription_dose / mean_ptv
    return FluenceStack(unit * scale, spacing=op.geoms[0].bev_spacing)


class FeedbackWorkspace:
    """Session-reusable state for the feedback loop on one (operator, structures) pair.

    Holds the active ray set, the restricted operator, and a cached curvature
    estimate so interactive replans skip the setup cost.
    """

    def __init__(self, op: DoseOperator, structures: StructureSet,
                 initial_support: np.ndarray | None = None, use_active_subset: bool = True):
        self.op = op
        self.structures = structures
        if use_active_subset:
            # The separable blur kernel's support is an L-inf box of halfwidth
            # truncate*sigma per axis; cover its corners in Euclidean metric.
            pad = np.sqrt(3.0) * 4.0 * op.model.kernel_sigma + max(op.grid.spacing)
            attracting = dilate_margin(structures.masks["PTV"], pad)
            active = op.projector.project(attracting.values).values.reshape(-1) > 0.0
            if initial_support is not None:
                active |= np.asarray(initial_support).reshape(-1) > 0.0
            self.active = np.flatnonzero(active)
        else:
            self.active = np.arange(op.rays.n_rays)
        self._adj = op.matrix[self.active]
        self._fwd = self._adj.T
        self._curvature: float | None = None

    def dose_from_active(self, f_active: np.ndarray) -> VoxelGrid:
        dose = self.op.smooth(self._fwd @ f_active)
        return self.op.grid.with_values(dose.reshape(self.op.grid.dims))

    def gradient_from_error(self, error: VoxelGrid) -> np.ndarray:
        return self._adj @ self.op.smooth(error.values.reshape(-1))

    def operator_norm_sq(self) -> float:
        """Largest eigenvalue of (S A)^T (S A) on the active set, by power iteration."""
        if self._curvature is None:
            v = np.ones(len(self.active))
            s2 = 1.0
            for _ in range(8):
                av = self.op.smooth(self._fwd @ v)
                atav = self._adj @ self.op.smooth(av)
                s2 = float(np.linalg.norm(atav))
                if s2 == 0:
                    s2 = 1.0
                    break
                v = atav / s2
            self._curvature = max(s2, 1e-12)
        return self._curvature

    def expand(self, f_active: np.ndarray) -> np.ndarray:
        full = np.zeros(self.op.rays.n_rays)
        full[self.active] = f_active
        n = self.op.rays.n_pix
        return full.reshape(self.op.rays.n_cp, n, n)


def feedback_correct(fluence0: FluenceStack, op: DoseOperator, structures: StructureSet,
                     obj_config: ObjectiveConfig, opt_config: OptimizerConfig,
                     workspace: FeedbackWorkspace | None = None) -> PlanningResult:
    """Iterate ``f <- max(0, f - eta * (A^T E(A f) + grad_reg(f)))`` with
    backtracking on the composite objective.

    References must already be frozen against the dose of ``fluence0``; the
    returned trace holds the composite objective at the start and after every
    accepted iterate and never increases.
    """
    if fluence0.values.shape != op.fluence_shape():
        raise ValueError("initial fluence shape does not match the operator")
    if not np.any(fluence0.values > 0):
        raise ValueError("initial fluence is identically zero")
    for organ in obj_config.oar_controls:
        obj_config.reference_for(organ)  # raises StateError if not frozen

    if workspace is None:
        workspace = FeedbackWorkspace(
            op, structures, fluence0.values,
            use_active_subset=opt_config.smoothness_weight == 0,
        )
    elif workspace.op is not op:
        raise ValueError("workspace was built for a different operator")
    sw, tw = opt_config.smoothness_weight, opt_config.two_level_weight

    def composite(f_active):
        dose = workspace.dose_from_active(f_active)
        j_dose, err = objective_terms(dose, structures, obj_config)
        j_reg, _ = deliverability_reg(workspace.expand(f_active), sw, tw)
        total = j_dose + j_reg
        if not np.isfinite(total):
            raise RuntimeError(f"objective became non-finite (dose={j_dose}, reg={j_reg})")
        return total, err

    f = fluence0.values.reshape(-1)[workspace.active].copy()
    phi, err = composite(f)
    trace = [phi]
    eta = opt_config.initial_step
    if eta is None:
        curv = workspace.operator_norm_sq() * max(
            obj_config.lambda_plus, obj_config.lambda_minus, 1.0
        ) + 2.0 * tw + 1e-12
        eta = 1.0 / curv

    eta_floor, eta_cap = eta * 1e-6, eta * 1e6
    iterations = 0
    converged = False
    prev_f = prev_g = None
    for _ in range(opt_config.max_iters):
        g = workspace.gradient_from_error(err)
        _, reg_grad = deliverability_reg(workspace.expand(f), sw, tw)
        g = g + reg_grad.reshape(-1)[workspace.active]

        if prev_g is not None:
            if opt_config.step_rule == "bb":
                # Barzilai-Borwein trial step; the Armijo test below still
                # guarantees a non-increasing trace.
                s = f - prev_f
                y = g - prev_g
                sy = float(np.dot(s, y))
                if sy > 0:
                    eta = min(max(float(np.dot(s, s)) / sy, eta_floor), eta_cap)
                else:
                    eta = min(eta * opt_config.step_growth, eta_cap)
            else:
                eta = min(eta * opt_config.step_growth, eta_cap)
        prev_f, prev_g = f, g

        accepted = False
        fixed_point = False
        for _ in range(_MAX_BACKTRACKS):
            f_trial = np.clip(f - eta * g, 0.0, None)
            step = f_trial - f
            if not np.any(step):
                fixed_point = True
                break
            phi_trial, err_trial = composite(f_trial)
            if phi_trial <= phi + opt_config.sufficient_decrease * float(np.dot(g, step)):
                accepted = True
                break
            eta *= opt_config.step_shrink
        if not accepted:
            if fixed_point and iterations == 0:
                # Exact fixed point: the mandatory first iteration is a no-op.
                iterations = 1
                trace.append(phi)
            elif not fixed_point:
                logger.info("backtracking stalled after %d iterations; stopping", iterations)
            converged = True
            break

        decrease = phi - phi_trial
        f, phi, err = f_trial, phi_trial, err_trial
        trace.append(phi)
        iterations += 1
        if decrease <= opt_config.tol * max(abs(phi), 1e-30):
            converged = True
            break

    full = FluenceStack(workspace.expand(f), spacing=fluence0.spacing)
    dose = op.forward(full)
    return PlanningResult(
        fluence=full,
        dose=dose,
        objective_trace=trace,
        iterations_used=iterations,
        converged=converged,
    )
