"""Plan evaluation: DVH curves and metrics, fluence-domain similarity, and
the paired statistics used for non-inferiority claims.

Conventions fixed here: dose percentiles interpolate linearly between order
statistics (``D_x`` is the dose received by at least x% of the structure);
the conformity index is Paddick's ``(TV_PIV)^2 / (TV * PIV)``; PSNR and SSIM
use the reference maximum as the dynamic range; the signed-rank test drops
zero differences, enumerates the exact null for n <= 25 and uses the
tie-corrected normal approximation above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .geometry import VoxelGrid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_WILCOXON_MAX_N = 25


@dataclass(frozen=True)
class DVHCurve:
    structure: str
    edges: np.ndarray  # Gy, ascending
    volume_fraction: np.ndarray  # fraction of structure receiving >= edge

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.float64))
        object.__setattr__(self, "volume_fraction", np.asarray(self.volume_fraction, dtype=np.float64))
        if self.edges.shape != self.volume_fraction.shape:
            raise ValueError("DVH edges and fractions must align")


def _masked_doses(dose: VoxelGrid, mask: VoxelGrid) -> np.ndarray:
    if not dose.same_grid_as(mask):
        raise ValueError("dose and mask are not on the same grid")
    vals = dose.values[mask.values > 0.5]
    if vals.size == 0:
        raise ValueError("structure mask is empty")
    return vals


def dvh(dose: VoxelGrid, mask: VoxelGrid, n_bins: int = 200, max_dose: float | None = None,
        structure: str = "") -> DVHCurve:
    """Exact empirical cumulative dose-volume curve on ``n_bins + 1`` edges."""
    vals = _masked_doses(dose, mask)
    top = max_dose if max_dose is not None else float(vals.max()) * 1.05 + 1e-9
    edges = np.linspace(0.0, top, n_bins + 1)
    frac = (vals[None, :] >= edges[:, None]).mean(axis=1)
    return DVHCurve(structure=structure, edges=edges, volume_fraction=frac)


def dose_percentile(dose: VoxelGrid, mask: VoxelGrid, x: float) -> float:
    """D_x: minimum dose received by the hottest x% of the structure volume,
    by linear interpolation between order statistics."""
    if not 0.0 <= x <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    return float(np.percentile(_masked_doses(dose, mask), 100.0 - x, method="linear"))


def dmean(dose: VoxelGrid, mask: VoxelGrid) -> float:
    return float(_masked_doses(dose, mask).mean())


def homogeneity_index(dose: VoxelGrid, ptv_mask: VoxelGrid) -> float:
    """(D2 - D98) / D50; lower is more homogeneous."""
    d2 = dose_percentile(dose, ptv_mask, 2.0)
    d50 = dose_percentile(dose, ptv_mask, 50.0)
    d98 = dose_percentile(dose, ptv_mask, 98.0)
    if d50 <= 0.0:
        raise ValueError("homogeneity index undefined: median dose is zero")
    return (d2 - d98) / d50


def conformity_index(dose: VoxelGrid, ptv_mask: VoxelGrid, rx: float) -> float:
    """Paddick conformity: (TV_PIV)^2 / (TV * PIV); 0 when nothing reaches rx."""
    if rx <= 0:
        raise ValueError("prescription dose must be positive")
    if not dose.same_grid_as(ptv_mask):
        raise ValueError("dose and mask are not on the same grid")
    target = ptv_mask.values > 0.5
    tv = int(target.sum())
    if tv == 0:
        raise ValueError("structure mask is empty")
    piv_mask = dose.values >= rx
    piv = int(piv_mask.sum())
    if piv == 0:
        return 0.0
    tv_piv = int((target & piv_mask).sum())
    return tv_piv**2 / (tv * piv)


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_single(pred: np.ndarray, ref: np.ndarray, peak: float) -> float:
    half = SSIM_WINDOW // 2
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"maps must be at least {SSIM_WINDOW} pixels for SSIM")
    k = _ssim_kernel()
    crop = (slice(half, -half), slice(half, -half))
    mu_p = correlate(pred, k, mode="constant")[crop]
    mu_r = correlate(ref, k, mode="constant")[crop]
    var_p = correlate(pred * pred, k, mode="constant")[crop] - mu_p**2
    var_r = correlate(ref * ref, k, mode="constant")[crop] - mu_r**2
    cov = correlate(pred * ref, k, mode="constant")[crop] - mu_p * mu_r
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_r**2 + c1) * (var_p + var_r + c2)
    return float((num / den).mean())


def fluence_metrics(pred, ref) -> dict[str, float]:
    """PSNR (dB, peak = reference max), mean per-map SSIM, and elementwise MAE."""
    pred_v = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    ref_v = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    if pred_v.shape != ref_v.shape:
        raise ValueError(f"shape mismatch: {pred_v.shape} vs {ref_v.shape}")
    peak = float(ref_v.max())
    mse = float(np.mean((pred_v - ref_v) ** 2))
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(peak**2 / mse)
    if pred_v.ndim == 2:
        pred_v, ref_v = pred_v[None], ref_v[None]
    ssim = float(np.mean([_ssim_single(p, r, peak) for p, r in zip(pred_v, ref_v)]))
    mae = float(np.mean(np.abs(pred_v - ref_v)))
    return {"psnr": psnr, "ssim": ssim, "mae": mae}


def _rankdata_average(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+ (sum of ranks of positive differences)
    p_value: float
    n: int  # pairs remaining after zero removal
    method: str  # "exact", "normal", or "degenerate"
    degenerate: bool = False


def _exact_tail_probs(scaled_ranks: np.ndarray, w2: int) -> tuple[float, float]:
    """P(W <= w) and P(W >= w) under the exact sign-flip null (ranks doubled
    to integers so midranks stay exact)."""
    total = int(scaled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in scaled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    denom = counts.sum()
    p_le = counts[: w2 + 1].sum() / denom
    p_ge = counts[w2:].sum() / denom
    return float(p_le), float(p_ge)


def wilcoxon_signed_rank(paired_a, paired_b, alternative: str = "two-sided") -> WilcoxonResult:
    """Wilcoxon signed-rank test on paired samples (zeros dropped).

    ``alternative``: "two-sided", "less" (a tends below b), or "greater".
    Exact sign-flip enumeration for n <= 25, tie-corrected normal above.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("need equal-length 1D paired samples")
    if alternative not in ("two-sided", "less", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0, method="degenerate", degenerate=True)
    ranks = _rankdata_average(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        scaled = np.round(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w_plus))
        p_le, p_ge = _exact_tail_probs(scaled, w2)
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        tie_term = float(((tie_counts**3 - tie_counts) / 48.0).sum())
        sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
        z = (w_plus - mu) / sigma
        p_le = 0.5 * math.erfc(-z / math.sqrt(2.0))
        p_ge = 0.5 * math.erfc(z / math.sqrt(2.0))
        method = "normal"

    if alternative == "two-sided":
        p = min(1.0, 2.0 * min(p_le, p_ge))
    elif alternative == "less":
        p = p_le
    else:
        p = p_ge
    return WilcoxonResult(statistic=w_plus, p_value=float(p), n=n, method=method)


@dataclass(frozen=True)
class NonInferiorityResult:
    mean_diff: float  # candidate minus reference, unshifted
    p_value: float
    margin: float
    verdict: bool  # True: non-inferior at p < 0.05
    n: int
    direction: str = "lower"


def noninferiority_test(ai_vals, ref_vals, margin: float,
                        direction: str = "lower") -> NonInferiorityResult:
    """One-sided shifted signed-rank non-inferiority test.

    ``direction="lower"``: lower metric values are better (dose metrics, HI);
    H0 says the candidate is worse by at least ``margin``.  ``"higher"`` flips
    the comparison for higher-is-better metrics.
    """
    a = np.asarray(ai_vals, dtype=np.float64)
    r = np.asarray(ref_vals, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError("paired metric arrays must have equal length")
    if a.size < 5:
        raise ValueError("non-inferiority needs at least 5 pairs")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if direction not in ("lower", "higher"):
        raise ValueError(f"unknown direction {direction!r}")
    deficit = (a - r) if direction == "lower" else (r - a)
    shifted = deficit - margin
    res = wilcoxon_signed_rank(shifted, np.zeros_like(shifted), alternative="less")
    p = 1.0 if res.degenerate else res.p_value
    return NonInferiorityResult(
        mean_diff=float(np.mean(a - r)),
        p_value=float(p),
        margin=float(margin),
        verdict=bool(p < 0.05),
        n=int(a.size),
        direction=direction,
    )


PTV_METRICS = ("HI", "D2", "D50", "D98", "Dmean", "CI")
OAR_METRICS = ("Dmean", "D2", "D50", "D98")


@dataclass
class MetricReport:
    structures: dict[str, dict[str, float]] = field(default_factory=dict)
    fluence: dict[str, float] = field(default_factory=dict)

    def validate(self):
        for name, row in self.structures.items():
            if {"D2", "D50", "D98"} <= set(row) and not (
                row["D2"] >= row["D50"] >= row["D98"]
            ):
                raise ValueError(f"{name}: percentile ordering violated: {row}")

    def rows(self):
        for name in sorted(self.structures):
            for metric in sorted(self.structures[name]):
                yield name, metric, self.structures[name][metric]
        for metric in sorted(self.fluence):
            yield "fluence", metric, self.fluence[metric]


def compute_metric_report(dose: VoxelGrid, structures, rx: float) -> MetricReport:
    """Standard per-structure DVH metrics for the PTV and each organ at risk."""
    report = MetricReport()
    ptv = structures.masks["PTV"]
    report.structures["PTV"] = {
        "HI": homogeneity_index(dose, ptv),
        "D2": dose_percentile(dose, ptv, 2.0),
        "D50": dose_percentile(dose, ptv, 50.0),
        "D98": dose_percentile(dose, ptv, 98.0),
        "Dmean": dmean(dose, ptv),
        "CI": conformity_index(dose, ptv, rx),
    }
    for organ in structures.oar_names:
        mask = structures.masks[organ]
        report.structures[organ] = {
            "Dmean": dmean(dose, mask),
            "D2": dose_percentile(dose, mask, 2.0),
            "D50": dose_percentile(dose, mask, 50.0),
            "D98": dose_percentile(dose, mask, 98.0),
        }
    report.validate()
    return report
