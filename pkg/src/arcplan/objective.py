"""Planning objective J(D) and its voxel-wise gradient error maps.

The target term penalizes deviation from the prescription asymmetrically
(hot spots weighted by ``lambda_plus``, cold spots by ``lambda_minus``); each
steered organ at risk carries a squared-hinge penalty against a reference
field frozen at ``(1 - s_o)`` times the baseline dose.  Error maps are the
exact gradients of these terms, in Gy-conjugate units, zero outside the
structure masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StateError
from .geometry import BevProjector, BevStack, ControlPointGeometry, VoxelGrid, project_stack
from .phantom import StructureSet


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights, prescription, and per-organ suppression controls.

    ``references`` holds the frozen per-organ reference fields (Gy, full-grid
    arrays, meaningful only on the organ mask); it is populated by
    :func:`freeze_references` and never mutated in place.
    """

    lambda_plus: float = 2.0
    lambda_minus: float = 1.0
    rx_dose: float = 40.0
    oar_controls: dict[str, float] = field(default_factory=dict)
    references: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lambda_plus > self.lambda_minus > 0:
            raise ValueError(
                f"need lambda_plus > lambda_minus > 0, got {self.lambda_plus}, {self.lambda_minus}"
            )
        for organ, s in self.oar_controls.items():
            if not 0.0 <= s < 1.0:
                raise ValueError(f"suppression factor for {organ!r} must be in [0, 1), got {s}")

    def reference_for(self, organ: str) -> np.ndarray:
        if organ not in self.references:
            raise StateError(
                f"no frozen reference for {organ!r}; call freeze_references on the baseline dose first"
            )
        return self.references[organ]


def _check_aligned(dose: VoxelGrid, mask_grid: VoxelGrid):
    if not dose.same_grid_as(mask_grid):
        raise ValueError("dose and mask are not on the same grid")


def ptv_objective(dose: VoxelGrid, ptv_mask: VoxelGrid, config: ObjectiveConfig) -> float:
    """Asymmetric quadratic target objective: sum over PTV voxels of
    ``lambda_plus/2 * relu(D - rx)^2 + lambda_minus/2 * relu(rx - D)^2``."""
    _check_aligned(dose, ptv_mask)
    x = dose.values[ptv_mask.values > 0.5] - config.rx_dose
    hot = np.clip(x, 0.0, None)
    cold = np.clip(-x, 0.0, None)
    return float(0.5 * config.lambda_plus * np.sum(hot**2) + 0.5 * config.lambda_minus * np.sum(cold**2))


def ptv_error(dose: VoxelGrid, ptv_mask: VoxelGrid, config: ObjectiveConfig) -> VoxelGrid:
    """Gradient of :func:`ptv_objective`: positive on hot voxels, negative on cold."""
    _check_aligned(dose, ptv_mask)
    x = dose.values - config.rx_dose
    inside = ptv_mask.values > 0.5
    err = np.zeros_like(dose.values)
    err[inside] = config.lambda_plus * np.clip(x[inside], 0.0, None) - config.lambda_minus * np.clip(
        -x[inside], 0.0, None
    )
    return dose.with_values(err)


def freeze_references(config: ObjectiveConfig, baseline_dose: VoxelGrid,
                      structures: StructureSet) -> ObjectiveConfig:
    """Freeze per-organ references ``R_o = (1 - s_o) * baseline`` against the
    stage-0 dose.  Returns a new config; refreezing replaces all references."""
    refs = {}
    for organ, s in config.oar_controls.items():
        if organ not in structures.masks:
            raise ValueError(f"control for unknown organ {organ!r}")
        ref = (1.0 - s) * baseline_dose.values
        ref.setflags(write=False)
        refs[organ] = ref
    return replace(config, references=refs)


def oar_objective(dose: VoxelGrid, organ_mask: VoxelGrid, reference: np.ndarray) -> float:
    """Squared-hinge excess over the frozen reference: ``1/2 * sum(max(D - R, 0)^2)``."""
    _check_aligned(dose, organ_mask)
    inside = organ_mask.values > 0.5
    excess = np.clip(dose.values[inside] - reference[inside], 0.0, None)
    return float(0.5 * np.sum(excess**2))


def oar_error(dose: VoxelGrid, organ_mask: VoxelGrid, reference: np.ndarray) -> VoxelGrid:
    """Gradient of :func:`oar_objective`: ``max(D - R, 0)`` on the organ mask."""
    _check_aligned(dose, organ_mask)
    inside = organ_mask.values > 0.5
    err = np.zeros_like(dose.values)
    err[inside] = np.clip(dose.values[inside] - reference[inside], 0.0, None)
    return dose.with_values(err)


def total_error(parts: list[VoxelGrid]) -> VoxelGrid:
    """Voxel-wise sum of error maps (target plus every steered organ)."""
    if not parts:
        raise ValueError("total_error needs at least one error map")
    for p in parts[1:]:
        if not p.same_grid_as(parts[0]):
            raise ValueError("error maps are not on the same grid")
    out = parts[0].values.copy()
    for p in parts[1:]:
        out += p.values
    return parts[0].with_values(out)


def objective_terms(dose: VoxelGrid, structures: StructureSet,
                    config: ObjectiveConfig) -> tuple[float, VoxelGrid]:
    """Total objective value and total error map for one dose evaluation.

    Organs with a zero suppression factor contribute nothing: at s_o = 0 the
    reference equals the baseline and the penalty is disabled.
    """
    j = ptv_objective(dose, structures.masks["PTV"], config)
    err = ptv_error(dose, structures.masks["PTV"], config)
    parts = [err]
    for organ, s in config.oar_controls.items():
        if s == 0.0:
            continue
        ref = config.reference_for(organ)
        mask = structures.masks[organ]
        j += oar_objective(dose, mask, ref)
        parts.append(oar_error(dose, mask, ref))
    return j, total_error(parts)


def bev_project_error(error: VoxelGrid,
                      geoms: list[ControlPointGeometry] | BevProjector) -> BevStack:
    """Project a signed error map into the BEV of every control point."""
    if isinstance(geoms, BevProjector):
        return geoms.project(error.values)
    return project_stack(error, geoms)
