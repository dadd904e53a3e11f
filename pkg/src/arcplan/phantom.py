"""Synthetic prostate-like CT phantoms, structure sets, and augmentation.

Axes follow the package world frame: x lateral, y the source axis at gantry
0, z superior-inferior (the rotation axis).  The phantom is an ellipsoidal
soft-tissue body in air with a spherical target surrogate (CTV) between a
spherical bladder surrogate and a rod-shaped rectum surrogate; the PTV is the
CTV expanded by a 3 mm Euclidean margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import affine_transform, distance_transform_edt, gaussian_filter

from .errors import AugmentationRejected, ConfigError
from .geometry import VoxelGrid

CTV_TO_PTV_MARGIN_MM = 3.0
OAR_NAMES = ("Bladder", "Rectum")


@dataclass(frozen=True)
class StructureSet:
    """Named binary masks on a shared grid plus the prescription dose."""

    masks: dict[str, VoxelGrid]
    prescription_dose: float = 40.0

    def __post_init__(self):
        required = {"PTV", "CTV", "Body"}
        missing = required - set(self.masks)
        if missing:
            raise ConfigError(f"structure set missing masks: {sorted(missing)}")
        ref = next(iter(self.masks.values()))
        for name, grid in self.masks.items():
            if not grid.same_grid_as(ref):
                raise ConfigError(f"mask {name!r} is not on the shared grid")
            vals = grid.values
            if not np.all((vals == 0.0) | (vals == 1.0)):
                raise ConfigError(f"mask {name!r} is not binary")
        ptv, ctv, body = (self.masks[k].values for k in ("PTV", "CTV", "Body"))
        if ptv.sum() == 0:
            raise ConfigError("PTV is empty")
        if np.any(ptv > body):
            raise ConfigError("PTV extends outside the body")
        if np.any(ctv > ptv):
            raise ConfigError("CTV extends outside the PTV")

    def mask(self, name: str) -> np.ndarray:
        return self.masks[name].values > 0.5

    @property
    def grid(self) -> VoxelGrid:
        return self.masks["PTV"]

    @property
    def oar_names(self) -> list[str]:
        return [n for n in OAR_NAMES if n in self.masks]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 4.0
    body_semiaxes: tuple[float, float, float] = (115.0, 95.0, 120.0)
    prostate_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    prostate_radius: float = 22.0
    bladder_center: tuple[float, float, float] = (0.0, -48.0, 10.0)
    bladder_radius: float = 26.0
    rectum_center: tuple[float, float, float] = (0.0, 36.0, 0.0)
    rectum_radius: float = 12.0
    rectum_half_length: float = 50.0
    body_hu: float = 30.0
    prostate_hu: float = 45.0
    bladder_hu: float = 10.0
    rectum_hu: float = -30.0
    air_hu: float = -1000.0
    noise_hu: float = 6.0
    prescription_dose: float = 40.0
    seed: int = 7

    def __post_init__(self):
        if min(self.dims) < 8:
            raise ConfigError("phantom grid must be at least 8 voxels per axis")
        if self.spacing <= 0:
            raise ConfigError("phantom spacing must be positive")
        for r in (self.prostate_radius, self.bladder_radius, self.rectum_radius):
            if r <= 0:
                raise ConfigError("organ radii must be positive")


def _voxel_centers(dims, spacing):
    grid = VoxelGrid.centered(dims, spacing)
    axes = [grid.origin[a] + spacing * np.arange(dims[a]) for a in range(3)]
    return grid, np.meshgrid(*axes, indexing="ij")


def _ellipsoid(coords, center, semiaxes) -> np.ndarray:
    q = sum(((c - o) / s) ** 2 for c, o, s in zip(coords, center, semiaxes))
    return q <= 1.0


def _rod(coords, center, radius, half_length) -> np.ndarray:
    x, y, z = coords
    lateral = (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius**2
    return lateral & (np.abs(z - center[2]) <= half_length)


def generate_phantom(spec: PhantomSpec) -> tuple[VoxelGrid, StructureSet]:
    """Deterministic CT + structure set for a spec and its seed."""
    grid, coords = _voxel_centers(spec.dims, spec.spacing)
    body = _ellipsoid(coords, (0.0, 0.0, 0.0), spec.body_semiaxes)
    ctv = _ellipsoid(coords, spec.prostate_center, (spec.prostate_radius,) * 3)
    bladder = _ellipsoid(coords, spec.bladder_center, (spec.bladder_radius,) * 3)
    rectum = _rod(coords, spec.rectum_center, spec.rectum_radius, spec.rectum_half_length)

    for name, organ in (("prostate", ctv), ("bladder", bladder), ("rectum", rectum)):
        if np.any(organ & ~body):
            raise ConfigError(f"{name} extends outside the body ellipsoid")

    ctv_grid = grid.with_values(ctv.astype(np.float64))
    ptv_grid = dilate_margin(ctv_grid, CTV_TO_PTV_MARGIN_MM)
    if np.any((ptv_grid.values > 0.5) & ~body):
        raise ConfigError("PTV margin extends outside the body ellipsoid")

    rng = np.random.default_rng(spec.seed)
    noise = gaussian_filter(rng.standard_normal(spec.dims), 1.5, mode="nearest")
    hu = np.full(spec.dims, spec.air_hu)
    hu[body] = spec.body_hu + spec.noise_hu * noise[body]
    hu[bladder] = spec.bladder_hu
    hu[rectum] = spec.rectum_hu
    hu[ctv] = spec.prostate_hu
    ct = grid.with_values(hu)

    masks = {
        "PTV": ptv_grid,
        "CTV": ctv_grid,
        "Bladder": grid.with_values(bladder.astype(np.float64)),
        "Rectum": grid.with_values(rectum.astype(np.float64)),
        "Body": grid.with_values(body.astype(np.float64)),
    }
    return ct, StructureSet(masks=masks, prescription_dose=spec.prescription_dose)


def dilate_margin(mask: VoxelGrid, margin: float) -> VoxelGrid:
    """Binary mask of all voxels within Euclidean distance ``margin`` (mm) of the input."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if margin == 0:
        return mask.with_values(mask.values.copy())
    inside = mask.values > 0.5
    if not inside.any():
        return mask.with_values(np.zeros_like(mask.values))
    dist = distance_transform_edt(~inside, sampling=mask.spacing)
    return mask.with_values((dist <= margin).astype(np.float64))


@dataclass(frozen=True)
class AugmentParams:
    scale_range: tuple[float, float] = (-0.20, 0.20)
    rotation_range: tuple[float, float] = (-5.0, 5.0)
    ptv_margin_range: tuple[float, float] = (3.0, 6.0)
    rectum_margin_range: tuple[float, float] = (0.0, 5.0)
    per_transform_probability: float = 0.5
    rounds: int = 1

    def __post_init__(self):
        for name in ("scale_range", "rotation_range", "ptv_margin_range", "rectum_margin_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered, got ({lo}, {hi})")
        if not 0.0 <= self.per_transform_probability <= 1.0:
            raise ConfigError("per_transform_probability must lie in [0, 1]")
        if self.ptv_margin_range[0] < 0 or self.rectum_margin_range[0] < 0:
            raise ConfigError("margin ranges must be non-negative")


def _affine_resample(grid: VoxelGrid, scale: float, rotation_deg: float, order: int,
                     cval: float) -> VoxelGrid:
    # Output->input index map: undo rotation about the z axis through the grid
    # center, then undo magnification.  Isotropic spacing keeps index-space
    # rotation equal to world-space rotation.
    if len(set(grid.spacing)) != 1:
        raise ConfigError("augmentation requires isotropic voxels")
    th = np.deg2rad(rotation_deg)
    rot = np.array(
        [[np.cos(th), np.sin(th), 0.0], [-np.sin(th), np.cos(th), 0.0], [0.0, 0.0, 1.0]]
    )
    matrix = rot / (1.0 + scale)
    center = (np.asarray(grid.dims) - 1) / 2.0
    offset = center - matrix @ center
    out = affine_transform(
        grid.values, matrix, offset=offset, order=order, mode="constant", cval=cval
    )
    if order == 0:
        out = (out > 0.5).astype(np.float64)
    return grid.with_values(out)


def augment(ct: VoxelGrid, structures: StructureSet, params: AugmentParams,
            seed: int) -> tuple[VoxelGrid, StructureSet]:
    """One randomized augmentation round; identical geometry applied to CT and masks.

    Transform draw order is fixed (scale, rotation, PTV margin, rectum
    margin); each fires independently with ``per_transform_probability``.
    """
    rng = np.random.default_rng(seed)

    def draw(rg):
        if rng.random() < params.per_transform_probability:
            return float(rng.uniform(*rg))
        return None

    scale = draw(params.scale_range)
    rotation = draw(params.rotation_range)
    ptv_margin = draw(params.ptv_margin_range)
    rectum_margin = draw(params.rectum_margin_range)

    new_ct = ct
    new_masks = {name: grid for name, grid in structures.masks.items()}
    if scale is not None or rotation is not None:
        s = scale if scale is not None else 0.0
        r = rotation if rotation is not None else 0.0
        new_ct = _affine_resample(ct, s, r, order=1, cval=float(ct.values.min()))
        new_masks = {
            name: _affine_resample(grid, s, r, order=0, cval=0.0)
            for name, grid in new_masks.items()
        }
    if ptv_margin is not None and ptv_margin > 0:
        new_masks["PTV"] = dilate_margin(new_masks["PTV"], ptv_margin)
    if rectum_margin is not None and rectum_margin > 0 and "Rectum" in new_masks:
        new_masks["Rectum"] = dilate_margin(new_masks["Rectum"], rectum_margin)

    if not np.any(new_masks["PTV"].values > 0.5):
        raise AugmentationRejected(
            f"augmentation (seed={seed}) produced an empty PTV; transform rejected"
        )
    try:
        new_structures = StructureSet(
            masks=new_masks, prescription_dose=structures.prescription_dose
        )
    except ConfigError as exc:
        raise AugmentationRejected(f"augmentation (seed={seed}) broke mask invariants: {exc}")
    return new_ct, new_structures
