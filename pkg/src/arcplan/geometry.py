"""Arc geometry and the parameter-free beam's-eye-view (BEV) projection.

Coordinate conventions (fixed for the whole package):

* World frame is the voxel grid's frame, in mm.  Voxel ``(i, j, k)`` of a
  ``VoxelGrid`` has its *center* at ``origin + (i, j, k) * spacing`` and the
  value buffer is C-ordered ``(nx, ny, nz)`` (x slowest), i.e. row-major with
  flat index ``i*ny*nz + j*nz + k``.
* The gantry rotates about the z axis.  At gantry angle ``g`` (degrees) the
  source sits at ``iso + sad * (-sin g, cos g, 0)`` and fires through the
  isocenter.
* The BEV raster lies on the isocenter plane.  Its u axis (leaf travel,
  columns) is ``(cos g, sin g, 0)``, its v axis (leaf rows) is ``+z``; a
  collimator angle rotates (u, v) within that plane.  Pixel centers sit at
  ``(idx + 0.5) * spacing - fov / 2`` along each axis, and BEV images are
  indexed ``[row, col]`` = ``[v, u]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_SAD_MM = 1000.0
DEFAULT_BEV_SPACING_MM = 5.0
DEFAULT_BEV_FOV_MM = 200.0
DEFAULT_N_CP = 180


@dataclass(frozen=True)
class VoxelGrid:
    """3D scalar field (CT density, dose, or mask) on a regular grid."""

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ConfigError(f"voxel grid must be 3D with all dims >= 1, got shape {v.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"voxel spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "values", np.ascontiguousarray(v, dtype=np.float64))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_grid_as(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(values, self.spacing, self.origin)

    @classmethod
    def centered(cls, dims, spacing, values=None) -> "VoxelGrid":
        """Grid whose geometric center is the world origin (0, 0, 0)."""
        dims = tuple(int(d) for d in dims)
        spacing = (spacing,) * 3 if np.isscalar(spacing) else tuple(spacing)
        origin = tuple(-(d - 1) * s / 2.0 for d, s in zip(dims, spacing))
        if values is None:
            values = np.zeros(dims)
        return cls(values, spacing, origin)


@dataclass(frozen=True)
class ControlPointGeometry:
    """One control point of a single coplanar arc."""

    index: int
    gantry_angle: float
    source_axis_distance: float = DEFAULT_SAD_MM
    isocenter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    collimator_angle: float = 0.0
    bev_spacing: float = DEFAULT_BEV_SPACING_MM
    bev_fov: float = DEFAULT_BEV_FOV_MM

    def __post_init__(self):
        if self.source_axis_distance <= 0:
            raise ConfigError(f"source-axis distance must be > 0, got {self.source_axis_distance}")
        n = self.bev_fov / self.bev_spacing
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ConfigError(
                f"bev_fov ({self.bev_fov}) must be an integer multiple of bev_spacing ({self.bev_spacing})"
            )
        object.__setattr__(self, "isocenter", tuple(float(c) for c in self.isocenter))

    @property
    def n_pixels(self) -> int:
        return int(round(self.bev_fov / self.bev_spacing))

    def source_position(self) -> np.ndarray:
        g = np.deg2rad(self.gantry_angle)
        iso = np.asarray(self.isocenter)
        return iso + self.source_axis_distance * np.array([-np.sin(g), np.cos(g), 0.0])

    def bev_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """(u_hat, v_hat) of the BEV raster, collimator rotation applied."""
        g = np.deg2rad(self.gantry_angle)
        u = np.array([np.cos(g), np.sin(g), 0.0])
        v = np.array([0.0, 0.0, 1.0])
        c = np.deg2rad(self.collimator_angle)
        if c != 0.0:
            u, v = np.cos(c) * u + np.sin(c) * v, -np.sin(c) * u + np.cos(c) * v
        return u, v

    def pixel_targets(self) -> np.ndarray:
        """World positions of all pixel centers on the isocenter plane, shape (n*n, 3).

        Ray order matches BEV image order: index = row * n + col.
        """
        n = self.n_pixels
        offs = (np.arange(n) + 0.5) * self.bev_spacing - self.bev_fov / 2.0
        u, v = self.bev_axes()
        iso = np.asarray(self.isocenter)
        vv, uu = np.meshgrid(offs, offs, indexing="ij")  # [row, col] = [v, u]
        return iso + uu.reshape(-1, 1) * u + vv.reshape(-1, 1) * v

    def same_raster_as(self, other: "ControlPointGeometry") -> bool:
        return (
            self.bev_spacing == other.bev_spacing
            and self.bev_fov == other.bev_fov
            and self.source_axis_distance == other.source_axis_distance
            and self.isocenter == other.isocenter
        )


@dataclass(frozen=True)
class BevStack:
    """Per-control-point 2D images stacked as (n_cp, height, width)."""

    values: np.ndarray
    spacing: float

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values), dtype=np.float64)
        if v.ndim != 3:
            raise ConfigError(f"BEV stack must be 3D (n_cp, h, w), got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def n_cp(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def validate_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("BEV stack contains non-finite values")


def build_arc_geometry(
    n_cp: int = DEFAULT_N_CP,
    start_angle: float = 0.0,
    sad: float = DEFAULT_SAD_MM,
    bev_spacing: float = DEFAULT_BEV_SPACING_MM,
    bev_fov: float = DEFAULT_BEV_FOV_MM,
    isocenter=(0.0, 0.0, 0.0),
) -> list[ControlPointGeometry]:
    """Uniformly spaced control points covering one full 360-degree arc."""
    if n_cp < 2:
        raise ConfigError(f"an arc needs at least 2 control points, got {n_cp}")
    step = 360.0 / n_cp
    return [
        ControlPointGeometry(
            index=i,
            gantry_angle=(start_angle + i * step) % 360.0,
            source_axis_distance=sad,
            isocenter=tuple(isocenter),
            bev_spacing=bev_spacing,
            bev_fov=bev_fov,
        )
        for i in range(n_cp)
    ]


def _ray_segments(grid: VoxelGrid, source: np.ndarray, targets: np.ndarray):
    """Exact voxel traversal (Siddon) for a fan of rays from one source point.

    Returns ``(indptr, vox, seg_mm, s_mid)`` in CSR-like layout: ray ``r`` owns
    segments ``indptr[r]:indptr[r+1]``, ordered by increasing distance from the
    source.  ``vox`` holds flat C-order voxel indices, ``seg_mm`` the
    intersection lengths in mm and ``s_mid`` the source distance of each
    segment midpoint in mm.
    """
    nx, ny, nz = grid.dims
    dims = np.array([nx, ny, nz])
    spacing = np.asarray(grid.spacing)
    gmin = np.asarray(grid.origin) - spacing / 2.0
    gmax = gmin + dims * spacing

    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n_rays = targets.shape[0]
    d = targets - source[None, :]
    norm = np.linalg.norm(d, axis=1)

    # Entry/exit parameters of each ray against the grid bounding box.
    t_lo = np.zeros(n_rays)
    t_hi = np.full(n_rays, np.inf)
    for a in range(3):
        da = d[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (gmin[a] - source[a]) / da
            t1 = (gmax[a] - source[a]) / da
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        par = da == 0.0
        inside = (source[a] > gmin[a]) & (source[a] < gmax[a])
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
    hit = t_hi > t_lo
    t_lo = np.where(hit, t_lo, 0.0)
    t_hi = np.where(hit, t_hi, 0.0)

    # Candidate crossing parameters: every grid plane of every axis, clipped
    # into [t_lo, t_hi]; out-of-range and axis-parallel entries collapse onto
    # t_lo and produce zero-length segments that are filtered below.
    cols = []
    for a in range(3):
        planes = gmin[a] + spacing[a] * np.arange(dims[a] + 1)
        da = d[:, a]
        safe = np.where(da == 0.0, 1.0, da)
        t = (planes[None, :] - source[a]) / safe[:, None]
        t = np.where((da == 0.0)[:, None], t_lo[:, None], t)
        cols.append(t)
    cols.append(t_hi[:, None])
    t_all = np.concatenate(cols, axis=1)
    np.clip(t_all, t_lo[:, None], t_hi[:, None], out=t_all)
    t_all.sort(axis=1)

    dt = np.diff(t_all, axis=1)
    t_mid = 0.5 * (t_all[:, :-1] + t_all[:, 1:])
    mids = source[None, None, :] + t_mid[:, :, None] * d[:, None, :]
    idx = np.floor((mids - gmin[None, None, :]) / spacing[None, None, :]).astype(np.int64)

    valid = dt > 0.0
    for a in range(3):
        valid &= (idx[:, :, a] >= 0) & (idx[:, :, a] < dims[a])

    counts = valid.sum(axis=1)
    indptr = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    vox = (idx[:, :, 0] * (ny * nz) + idx[:, :, 1] * nz + idx[:, :, 2])[valid].astype(np.int32)
    seg_mm = (dt * norm[:, None])[valid]
    s_mid = (t_mid * norm[:, None])[valid]
    return indptr, vox, seg_mm, s_mid


def _segment_sums(values_flat: np.ndarray, indptr, vox, seg_mm) -> np.ndarray:
    """Per-ray sum of ``values[vox] * seg_mm`` (the line integral, value*mm)."""
    n_rays = len(indptr) - 1
    counts = np.diff(indptr)
    ray_ids = np.repeat(np.arange(n_rays), counts)
    return np.bincount(ray_ids, weights=values_flat[vox] * seg_mm, minlength=n_rays)


def project_to_bev(volume: VoxelGrid, geom: ControlPointGeometry) -> np.ndarray:
    """Divergent-beam line-integral projection of a volume into one BEV image.

    Each pixel accumulates the exact radiological path integral (value*mm)
    along the ray from the source through the pixel's position on the
    isocenter plane.  Rays missing the volume yield zero.
    """
    if not np.all(np.isfinite(volume.values)):
        raise ValueError("projection input volume contains non-finite values")
    source = geom.source_position()
    indptr, vox, seg_mm, _ = _ray_segments(volume, source, geom.pixel_targets())
    n = geom.n_pixels
    return _segment_sums(volume.values.reshape(-1), indptr, vox, seg_mm).reshape(n, n)


def project_stack(volume: VoxelGrid, geoms: list[ControlPointGeometry]) -> BevStack:
    """Stack of BEV projections, one slice per control point."""
    if not geoms:
        raise ConfigError("project_stack needs at least one control point")
    for g in geoms[1:]:
        if not g.same_raster_as(geoms[0]):
            raise ConfigError("all control points of a stack must share raster parameters")
    slices = [project_to_bev(volume, g) for g in geoms]
    return BevStack(np.stack(slices, axis=0), spacing=geoms[0].bev_spacing)


@dataclass
class ArcRays:
    """Precomputed Siddon traversal of every BEV ray of an arc through a grid.

    The ray index of control point ``c``, BEV row ``r``, column ``k`` is
    ``c * n_pix**2 + r * n_pix + k``, matching flattened fluence/BEV stacks.
    """

    indptr: np.ndarray
    vox: np.ndarray
    seg_mm: np.ndarray
    s_mid: np.ndarray
    n_cp: int
    n_pix: int
    grid_dims: tuple[int, int, int]
    sad: float
    rays_per_cp: int = field(init=False)

    def __post_init__(self):
        self.rays_per_cp = self.n_pix * self.n_pix

    @property
    def n_rays(self) -> int:
        return self.n_cp * self.rays_per_cp

    @property
    def n_vox(self) -> int:
        nx, ny, nz = self.grid_dims
        return nx * ny * nz


def trace_arc(grid: VoxelGrid, geoms: list[ControlPointGeometry]) -> ArcRays:
    """Traverse every control point's ray fan once; shared by projector and dose."""
    if not geoms:
        raise ConfigError("trace_arc needs at least one control point")
    for g in geoms[1:]:
        if not g.same_raster_as(geoms[0]):
            raise ConfigError("all control points of an arc must share raster parameters")
    ptrs, voxs, segs, smids = [], [], [], []
    offset = 0
    for g in geoms:
        indptr, vox, seg_mm, s_mid = _ray_segments(grid, g.source_position(), g.pixel_targets())
        ptrs.append(indptr[:-1] + offset if offset else indptr[:-1])
        voxs.append(vox)
        segs.append(seg_mm)
        smids.append(s_mid)
        offset += indptr[-1]
    indptr = np.concatenate(ptrs + [np.array([offset], dtype=np.int64)])
    return ArcRays(
        indptr=indptr,
        vox=np.concatenate(voxs),
        seg_mm=np.concatenate(segs),
        s_mid=np.concatenate(smids),
        n_cp=len(geoms),
        n_pix=geoms[0].n_pixels,
        grid_dims=grid.dims,
        sad=geoms[0].source_axis_distance,
    )


class BevProjector:
    """Cached projection operator: one sparse matrix application per stack.

    Produces bit-identical results to :func:`project_stack` on the traced grid.
    """

    def __init__(self, rays: ArcRays, spacing: float):
        import scipy.sparse as sp

        self.rays = rays
        self.spacing = spacing
        self._mat = sp.csr_matrix(
            (rays.seg_mm, rays.vox, rays.indptr), shape=(rays.n_rays, rays.n_vox)
        )

    @classmethod
    def build(cls, grid: VoxelGrid, geoms: list[ControlPointGeometry]) -> "BevProjector":
        return cls(trace_arc(grid, geoms), geoms[0].bev_spacing)

    def project(self, volume_values: np.ndarray) -> BevStack:
        flat = np.ascontiguousarray(volume_values, dtype=np.float64).reshape(-1)
        if flat.size != self.rays.n_vox:
            raise ValueError(
                f"volume has {flat.size} voxels, projector was traced for {self.rays.n_vox}"
            )
        out = self._mat @ flat
        n = self.rays.n_pix
        return BevStack(out.reshape(self.rays.n_cp, n, n), spacing=self.spacing)
