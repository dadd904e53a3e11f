"""Rule-based conversion of fluence maps into a deliverable single-arc plan.

Per control point, each MLC row opens over the longest run of pixels at or
above ``threshold_frac`` of the map maximum; the control point's monitor
units are the mean fluence over all selected pixels.  Leaf edges then move
outward by the partial-transmission fraction of the first excluded pixel,
the dosimetric leaf gap widens every open row, and a cross-CP pass bounds
per-leaf travel.  ``reconstruct_fluence`` is the exact inverse used for
verification: monitor units times the covered area fraction of every pixel,
with the leaf gap removed again.

BEV pixel k of a row spans ``[k*spacing - fov/2, (k+1)*spacing - fov/2]`` mm,
so integer-aligned leaf edges sit exactly on pixel boundaries.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np

from .dose import FluenceStack

MLC_MODEL = "M120"  # central 5 mm leaf pairs map 1:1 onto BEV rows
DEFAULT_THRESHOLD_FRAC = 0.5
DEFAULT_DLG_MM = 1.5
DEFAULT_MAX_TRAVEL_MM = 8.0
OVERTRAVEL_MM = 20.0


@dataclass(frozen=True)
class SequencerParams:
    threshold_frac: float = DEFAULT_THRESHOLD_FRAC
    dlg: float = DEFAULT_DLG_MM
    max_travel_per_cp: float = DEFAULT_MAX_TRAVEL_MM
    subpixel: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold_frac < 1.0:
            raise ValueError("threshold_frac must lie in (0, 1)")
        if self.dlg < 0:
            raise ValueError("dlg must be >= 0")
        if self.max_travel_per_cp <= 0:
            raise ValueError("max_travel_per_cp must be > 0")


@dataclass(frozen=True)
class Aperture:
    """Per-row left/right leaf positions (mm, BEV frame) and monitor units."""

    left: np.ndarray
    right: np.ndarray
    mu: float
    cp_index: int = 0

    def __post_init__(self):
        left = np.ascontiguousarray(self.left, dtype=np.float64)
        right = np.ascontiguousarray(self.right, dtype=np.float64)
        if left.shape != right.shape or left.ndim != 1:
            raise ValueError("left/right leaf banks must be 1D arrays of equal length")
        if np.any(left > right):
            raise ValueError("left leaf positions must not exceed right positions")
        if self.mu < 0:
            raise ValueError("monitor units must be >= 0")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def n_rows(self) -> int:
        return self.left.shape[0]

    def row_centers(self) -> np.ndarray:
        return 0.5 * (self.left + self.right)

    def is_closed(self) -> np.ndarray:
        return self.left == self.right


@dataclass(frozen=True)
class AperturePlan:
    apertures: tuple[Aperture, ...]
    spacing: float
    gantry_angles: np.ndarray
    n_cols: int = 0  # leaf-travel raster width; 0 means same as n_rows
    mlc_model: str = MLC_MODEL
    dlg: float = 0.0
    max_travel_per_cp: float = DEFAULT_MAX_TRAVEL_MM
    travel_adjustment_mm: float = 0.0

    def __post_init__(self):
        angles = np.ascontiguousarray(self.gantry_angles, dtype=np.float64)
        if len(self.apertures) != len(angles):
            raise ValueError("one gantry angle per aperture required")
        object.__setattr__(self, "apertures", tuple(self.apertures))
        object.__setattr__(self, "gantry_angles", angles)
        if self.n_cols == 0:
            object.__setattr__(self, "n_cols", self.apertures[0].n_rows)

    @property
    def n_cp(self) -> int:
        return len(self.apertures)

    @property
    def n_rows(self) -> int:
        return self.apertures[0].n_rows

    @property
    def fov(self) -> float:
        """Raster extent along the leaf-travel (u) axis, mm."""
        return self.n_cols * self.spacing

    def total_mu(self) -> float:
        return float(sum(a.mu for a in self.apertures))

    def left_stack(self) -> np.ndarray:
        return np.stack([a.left for a in self.apertures])

    def right_stack(self) -> np.ndarray:
        return np.stack([a.right for a in self.apertures])

    def mu_values(self) -> np.ndarray:
        return np.array([a.mu for a in self.apertures])


def _runs_at_or_above(row: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximal runs [start, end) of pixels with value >= threshold."""
    above = row >= threshold
    if not above.any():
        return []
    padded = np.concatenate(([False], above, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def sequence_cp(fluence_map: np.ndarray, threshold_frac: float = DEFAULT_THRESHOLD_FRAC,
                spacing: float = 5.0, prev: Aperture | None = None,
                cp_index: int = 0) -> Aperture:
    """Initial aperture of one control point: per row, the longest contiguous
    run of significant fluence; MU is the mean over all selected pixels.

    Rows with no significant fluence close at the previous control point's row
    position (row center for the first).  Ties between equal-length runs break
    toward the previous aperture's row center, then leftmost.
    """
    fmap = np.asarray(fluence_map, dtype=np.float64)
    if fmap.ndim != 2:
        raise ValueError("fluence map must be 2D")
    if np.any(fmap < 0):
        raise ValueError("fluence map must be non-negative")
    n_rows, n_cols = fmap.shape
    fov = n_cols * spacing
    vmax = float(fmap.max())

    left = np.empty(n_rows)
    right = np.empty(n_rows)
    selected: list[tuple[int, int, int]] = []  # (row, start, end)
    for r in range(n_rows):
        runs = _runs_at_or_above(fmap[r], threshold_frac * vmax) if vmax > 0 else []
        if not runs:
            park = float(prev.row_centers()[r]) if prev is not None else 0.0
            left[r] = right[r] = park
            continue
        best_len = max(e - s for s, e in runs)
        candidates = [(s, e) for s, e in runs if e - s == best_len]
        if len(candidates) > 1 and prev is not None:
            ref = float(prev.row_centers()[r])
            candidates.sort(key=lambda se: (abs((se[0] + se[1]) / 2.0 * spacing - fov / 2.0 - ref), se[0]))
        s, e = candidates[0]
        left[r] = s * spacing - fov / 2.0
        right[r] = e * spacing - fov / 2.0
        selected.append((r, s, e))

    if selected:
        mu = float(np.mean(np.concatenate([fmap[r, s:e] for r, s, e in selected])))
    else:
        mu = 0.0
    return Aperture(left=left, right=right, mu=mu, cp_index=cp_index)


def refine_subpixel(aperture: Aperture, fluence_map: np.ndarray,
                    spacing: float = 5.0) -> Aperture:
    """Move each leaf edge outward by ``min(1, f_edge / MU)`` of a pixel, where
    ``f_edge`` is the first excluded pixel's value (partial transmission)."""
    if aperture.mu <= 0:
        return aperture
    fmap = np.asarray(fluence_map, dtype=np.float64)
    n_cols = fmap.shape[1]
    fov = n_cols * spacing
    left = aperture.left.copy()
    right = aperture.right.copy()
    for r in range(aperture.n_rows):
        if left[r] == right[r]:
            continue
        first = int(round((left[r] + fov / 2.0) / spacing))
        last = int(round((right[r] + fov / 2.0) / spacing)) - 1
        if first - 1 >= 0:
            frac = min(1.0, fmap[r, first - 1] / aperture.mu)
            left[r] -= frac * spacing
        if last + 1 <= n_cols - 1:
            frac = min(1.0, fmap[r, last + 1] / aperture.mu)
            right[r] += frac * spacing
    return replace(aperture, left=left, right=right)


def apply_dlg(plan: AperturePlan, dlg: float) -> AperturePlan:
    """Widen every open row by the dosimetric leaf gap (dlg/2 per side)."""
    if dlg < 0:
        raise ValueError(f"dlg must be >= 0, got {dlg}")
    if dlg == 0:
        return replace(plan, dlg=0.0)
    lim = plan.fov / 2.0 + OVERTRAVEL_MM
    new = []
    for ap in plan.apertures:
        open_rows = ap.left < ap.right
        left = np.where(open_rows, np.clip(ap.left - dlg / 2.0, -lim, lim), ap.left)
        right = np.where(open_rows, np.clip(ap.right + dlg / 2.0, -lim, lim), ap.right)
        new.append(replace(ap, left=left, right=right))
    return replace(plan, apertures=tuple(new), dlg=dlg)


class _SlopeTrick:
    """Convex piecewise-linear DP state for min sum |x_i - p_i| with a
    per-step movement bound; tracks the minimizing interval after each step."""

    def __init__(self):
        self._neg_left: list[float] = []
        self._right: list[float] = []
        self._off_left = 0.0
        self._off_right = 0.0

    def flatten(self, delta: float):
        self._off_left -= delta
        self._off_right += delta

    def add_abs(self, p: float):
        heapq.heappush(self._neg_left, -(p - self._off_left))
        heapq.heappush(self._right, p - self._off_right)
        lo = -self._neg_left[0] + self._off_left
        hi = self._right[0] + self._off_right
        if lo > hi:
            heapq.heappop(self._neg_left)
            heapq.heappop(self._right)
            heapq.heappush(self._neg_left, -(hi - self._off_left))
            heapq.heappush(self._right, lo - self._off_right)

    def min_interval(self) -> tuple[float, float]:
        return (-self._neg_left[0] + self._off_left, self._right[0] + self._off_right)


def _bounded_l1_fit(positions: np.ndarray, delta: float) -> np.ndarray:
    """Trajectory minimizing total |x_i - p_i| subject to |x_{i+1} - x_i| <= delta."""
    n = len(positions)
    if n == 1:
        return positions.copy()
    st = _SlopeTrick()
    st.add_abs(float(positions[0]))
    intervals = [st.min_interval()]
    for p in positions[1:]:
        st.flatten(delta)
        st.add_abs(float(p))
        intervals.append(st.min_interval())
    out = np.empty(n)
    lo, hi = intervals[-1]
    out[-1] = min(max(float(positions[-1]), lo), hi)
    for i in range(n - 2, -1, -1):
        a, b = out[i + 1] - delta, out[i + 1] + delta
        lo, hi = intervals[i]
        if hi < a:
            out[i] = a
        elif lo > b:
            out[i] = b
        else:
            out[i] = min(max(float(positions[i]), max(a, lo)), min(b, hi))
    return out


def enforce_leaf_travel(plan: AperturePlan, max_travel_per_cp: float) -> AperturePlan:
    """Bound per-leaf movement between adjacent control points.

    Each leaf trajectory is refit to the minimal-total-displacement path
    satisfying the bound (forward value-function sweep, backward extraction),
    followed by a clamp pass that repairs any left/right crossing and
    guarantees the bound unconditionally.  The applied displacement is
    reported on the returned plan.
    """
    if max_travel_per_cp <= 0:
        raise ValueError("max_travel_per_cp must be > 0")
    left = plan.left_stack()
    right = plan.right_stack()
    delta = float(max_travel_per_cp)

    moved = 0.0
    for bank in (left, right):
        for r in range(bank.shape[1]):
            traj = bank[:, r]
            if np.abs(np.diff(traj)).max(initial=0.0) <= delta:
                continue  # already feasible: identity
            fitted = _bounded_l1_fit(traj, delta)
            moved += float(np.abs(fitted - traj).sum())
            bank[:, r] = fitted

    # Safety pass: repair crossings at the midpoint, then a backward clamp
    # sweep that enforces the bound and provably preserves left <= right.
    crossing = left > right
    if crossing.any():
        mid = 0.5 * (left + right)
        left[crossing] = mid[crossing]
        right[crossing] = mid[crossing]
        for i in range(plan.n_cp - 2, -1, -1):
            for bank in (left, right):
                np.clip(bank[i], bank[i + 1] - delta, bank[i + 1] + delta, out=bank[i])

    new = tuple(
        replace(ap, left=left[i], right=right[i]) for i, ap in enumerate(plan.apertures)
    )
    return replace(
        plan, apertures=new, max_travel_per_cp=delta, travel_adjustment_mm=moved
    )


def reconstruct_fluence(plan: AperturePlan) -> FluenceStack:
    """Exact verification inverse: MU times the covered fraction of each pixel
    (partial pixels by exact length fraction), with the DLG removed again."""
    n_cp, n_rows, n_cols = plan.n_cp, plan.n_rows, plan.n_cols
    spacing, fov = plan.spacing, plan.fov
    edges_lo = np.arange(n_cols) * spacing - fov / 2.0
    edges_hi = edges_lo + spacing
    out = np.zeros((n_cp, n_rows, n_cols))
    for i, ap in enumerate(plan.apertures):
        if ap.mu <= 0:
            continue
        l_eff = np.where(ap.left < ap.right, ap.left + plan.dlg / 2.0, ap.left)
        r_eff = np.where(ap.left < ap.right, ap.right - plan.dlg / 2.0, ap.right)
        overlap = np.minimum(r_eff[:, None], edges_hi[None, :]) - np.maximum(
            l_eff[:, None], edges_lo[None, :]
        )
        out[i] = ap.mu * np.clip(overlap / spacing, 0.0, 1.0)
    return FluenceStack(out, spacing=spacing)


def sequence_plan(fluence: FluenceStack, params: SequencerParams = SequencerParams(),
                  gantry_angles: np.ndarray | None = None) -> AperturePlan:
    """Full sequencing pipeline: per-CP aperture extraction and sub-pixel
    refinement, then leaf-gap application and travel enforcement across CPs."""
    maps = fluence.values
    n_cp = maps.shape[0]
    if gantry_angles is None:
        gantry_angles = np.arange(n_cp) * (360.0 / n_cp)
    apertures = []
    prev: Aperture | None = None
    for i in range(n_cp):
        ap = sequence_cp(maps[i], params.threshold_frac, fluence.spacing, prev=prev, cp_index=i)
        if params.subpixel:
            ap = refine_subpixel(ap, maps[i], fluence.spacing)
        apertures.append(ap)
        prev = ap
    plan = AperturePlan(
        apertures=tuple(apertures),
        spacing=fluence.spacing,
        gantry_angles=np.asarray(gantry_angles, dtype=np.float64),
        n_cols=maps.shape[2],
        dlg=0.0,
        max_travel_per_cp=params.max_travel_per_cp,
    )
    plan = apply_dlg(plan, params.dlg)
    return enforce_leaf_travel(plan, params.max_travel_per_cp)


def write_plan(plan: AperturePlan, path) -> None:
    """Plan document: header then per-CP ``cp/left/right`` records, mm units,
    floats as shortest round-trip decimals (bit-exact reload)."""
    lines = [
        "arcplan-plan v1",
        f"mlc_model {plan.mlc_model}",
        f"n_cp {plan.n_cp}",
        f"n_rows {plan.n_rows}",
        f"n_cols {plan.n_cols}",
        f"spacing_mm {float(plan.spacing)!r}",
        f"dlg_mm {float(plan.dlg)!r}",
        f"max_travel_per_cp_mm {float(plan.max_travel_per_cp)!r}",
        f"travel_adjustment_mm {float(plan.travel_adjustment_mm)!r}",
    ]
    for i, ap in enumerate(plan.apertures):
        lines.append(f"cp {i} gantry {float(plan.gantry_angles[i])!r} mu {float(ap.mu)!r}")
        lines.append("left " + " ".join(repr(float(v)) for v in ap.left))
        lines.append("right " + " ".join(repr(float(v)) for v in ap.right))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_plan(path) -> AperturePlan:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != "arcplan-plan v1":
        raise ValueError(f"{path}: not an arcplan plan document")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("cp "):
        key, _, val = lines[i].partition(" ")
        header[key] = val
        i += 1
    n_cp = int(header["n_cp"])
    apertures = []
    angles = []
    for _ in range(n_cp):
        head = lines[i].split()
        angles.append(float(head[3]))
        mu = float(head[5])
        left = np.array([float(v) for v in lines[i + 1].split()[1:]])
        right = np.array([float(v) for v in lines[i + 2].split()[1:]])
        apertures.append(Aperture(left=left, right=right, mu=mu, cp_index=int(head[1])))
        i += 3
    return AperturePlan(
        apertures=tuple(apertures),
        spacing=float(header["spacing_mm"]),
        gantry_angles=np.array(angles),
        n_cols=int(header.get("n_cols", header["n_rows"])),
        mlc_model=header.get("mlc_model", MLC_MODEL),
        dlg=float(header["dlg_mm"]),
        max_travel_per_cp=float(header["max_travel_per_cp_mm"]),
        travel_adjustment_mm=float(header.get("travel_adjustment_mm", "0.0")),
    )
