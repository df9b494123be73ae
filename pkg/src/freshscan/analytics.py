"""Bias quantification and catalog measurement statistics.

The central quantity is the divergence between the TI distribution of a
selection of impacts (observed) and the TI distribution of surveyed surface
area (expected): D = sum_i O_i * ln(O_i / E_i) over TI bins, with observed
counts normalized to probabilities and zero-count bins contributing nothing.
Expected distributions weight equirectangular pixels by cos(latitude) so
they measure surface area, not pixel count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .basemap import BasemapGrid, TIBasemap
from .candidates import DEFAULT_TI_BIN_EDGES, Candidate, ti_bin_index


class AnalyticsError(ValueError):
    """Invalid distribution, measurement, or selection input."""


@dataclass(frozen=True)
class TIHistogram:
    bin_edges: tuple[float, ...]
    observed: tuple[int, ...]       # counts per bin
    expected: tuple[float, ...]     # probabilities per bin, summing to 1

    def __post_init__(self):
        n_bins = len(self.bin_edges) - 1
        if len(self.observed) != n_bins or len(self.expected) != n_bins:
            raise AnalyticsError("histogram arrays must match the number of bins")
        if any(o < 0 or int(o) != o for o in self.observed):
            raise AnalyticsError("observed counts must be nonnegative integers")
        if any(e < 0 for e in self.expected):
            raise AnalyticsError("expected probabilities must be nonnegative")
        if abs(sum(self.expected) - 1.0) >= 1e-9:
            raise AnalyticsError("expected probabilities must sum to 1")
        object.__setattr__(self, "observed", tuple(int(o) for o in self.observed))
        object.__setattr__(self, "expected", tuple(float(e) for e in self.expected))
        object.__setattr__(self, "bin_edges", tuple(float(e) for e in self.bin_edges))


@dataclass(frozen=True)
class BiasReport:
    histogram: TIHistogram
    d_kl: float
    selection_label: str

    def __post_init__(self):
        if self.d_kl < 0:
            raise AnalyticsError("d_kl must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "selection_label": self.selection_label,
            "bin_edges": list(self.histogram.bin_edges),
            "observed_counts": list(self.histogram.observed),
            "expected_probabilities": list(self.histogram.expected),
            "d_kl": self.d_kl,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BiasReport":
        return cls(
            histogram=TIHistogram(
                bin_edges=tuple(doc["bin_edges"]),
                observed=tuple(doc["observed_counts"]),
                expected=tuple(doc["expected_probabilities"]),
            ),
            d_kl=float(doc["d_kl"]),
            selection_label=doc["selection_label"],
        )


def kl_divergence(observed, expected) -> float:
    """D(O || E) in nats; O may be counts (normalized internally)."""
    o = np.asarray(observed, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if o.shape != e.shape or o.ndim != 1:
        raise AnalyticsError("observed and expected must be 1-D and the same length")
    if (o < 0).any() or (e < 0).any():
        raise AnalyticsError("distributions must be nonnegative")
    total = o.sum()
    if total <= 0:
        raise AnalyticsError("observed distribution has no mass")
    if abs(e.sum() - 1.0) > 1e-6:
        raise AnalyticsError(f"expected probabilities must sum to 1, got {e.sum():.6g}")
    mask = o > 0
    if (e[mask] == 0).any():
        raise AnalyticsError("undefined divergence: observed mass in a zero-probability bin")
    o = o / total
    e = e / e.sum()
    return float(np.sum(o[mask] * np.log(o[mask] / e[mask])))


def histogram_counts(ti_values: Sequence[float],
                     bin_edges: Sequence[float] = DEFAULT_TI_BIN_EDGES) -> np.ndarray:
    counts = np.zeros(len(bin_edges) - 1, dtype=np.int64)
    for ti in ti_values:
        b = ti_bin_index(float(ti), bin_edges)
        if b is None:
            raise AnalyticsError(f"TI value {ti} below the first bin edge")
        counts[b] += 1
    return counts


def _grid_band_weights(grid: BasemapGrid, lat_band: tuple[float, float]):
    rows = np.arange(grid.height, dtype=np.float64)
    lats = grid.geo.origin_lat - rows * grid.geo.deg_per_px
    in_band = (lats >= lat_band[0]) & (lats <= lat_band[1])
    weights = np.cos(np.radians(lats)) * grid.geo.deg_per_px**2
    return lats, in_band, weights


def _accumulate(grid: BasemapGrid, include: np.ndarray, lat_band, bin_edges,
                mass: np.ndarray) -> None:
    lats, in_band, row_w = _grid_band_weights(grid, lat_band)
    valid = grid.valid_mask() & include & in_band[:, None]
    n_bins = len(bin_edges) - 1
    for r in range(grid.height):
        if not in_band[r] or not valid[r].any():
            continue
        vals = grid.values[r][valid[r]]
        idx = np.searchsorted(bin_edges, vals, side="right") - 1
        keep = idx >= 0
        idx = np.minimum(idx[keep], n_bins - 1)
        mass += np.bincount(idx, minlength=n_bins).astype(np.float64) * row_w[r]


def expected_distribution(ti_map: TIBasemap, lat_band: tuple[float, float] = (-60.0, 60.0),
                          bin_edges: Sequence[float] = DEFAULT_TI_BIN_EDGES) -> np.ndarray:
    """Area-fraction of the latitude band per TI bin, cos(latitude)-weighted.

    Fallback pixels contribute only where the primary map has no valid value.
    """
    mass = np.zeros(len(bin_edges) - 1, dtype=np.float64)
    primary, fallback = ti_map.primary, ti_map.fallback
    if primary is not None:
        _accumulate(primary, np.ones(primary.values.shape, dtype=bool), lat_band,
                    bin_edges, mass)
    if fallback is not None:
        include = np.ones(fallback.values.shape, dtype=bool)
        if primary is not None:
            rows = np.arange(fallback.height, dtype=np.float64)
            cols = np.arange(fallback.width, dtype=np.float64)
            lats = fallback.geo.origin_lat - rows * fallback.geo.deg_per_px
            lons = (fallback.geo.origin_lon + cols * fallback.geo.deg_per_px) % 360.0
            for r in range(fallback.height):
                for c in range(fallback.width):
                    include[r, c] = primary.nearest_value(lats[r], lons[c]) is None
        _accumulate(fallback, include, lat_band, bin_edges, mass)
    total = mass.sum()
    if total <= 0:
        raise AnalyticsError("no valid basemap area inside the latitude band")
    return mass / total


def effective_diameter(diameters: Sequence[float]) -> float:
    """Cube root of the summed cubes: the single-crater size equivalent to a cluster."""
    d = np.asarray(diameters, dtype=np.float64)
    if d.size == 0:
        raise AnalyticsError("effective_diameter requires at least one diameter")
    if (d <= 0).any() or not np.isfinite(d).all():
        raise AnalyticsError("diameters must be positive and finite")
    return float(np.cbrt(np.sum(d**3)))


def summary_stats(entries: Sequence) -> dict:
    """Sample statistics over catalog entries (n-1 denominator for std).

    Fractions are taken over entries that record the attribute; std fields are
    None (with *_std_defined False) when fewer than two values exist.
    """
    if not entries:
        raise AnalyticsError("summary_stats requires at least one entry")

    def stats(values):
        arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
        if arr.size == 0:
            return None, None, False
        if arr.size == 1:
            return float(arr[0]), None, False
        return float(arr.mean()), float(arr.std(ddof=1)), True

    diam_mean, diam_std, diam_ok = stats(e.effective_diameter for e in entries)
    dci_mean, dci_std, dci_ok = stats(e.dust_cover_index for e in entries)
    ti_mean, _, _ = stats(e.thermal_inertia for e in entries)
    tones = [e.tone for e in entries if e.tone is not None]
    tone_fractions = {t: tones.count(t) / len(tones) for t in ("dark", "light", "dual")} \
        if tones else {}
    types = [e.type for e in entries if e.type is not None]
    halos = [e.halo for e in entries if e.halo is not None]
    rays = [e.rays for e in entries if e.rays is not None]
    return {
        "n": len(entries),
        "mean_diam": diam_mean,
        "std_diam": diam_std,
        "diam_std_defined": diam_ok,
        "cluster_fraction": types.count("cluster") / len(types) if types else None,
        "halo_fraction": sum(halos) / len(halos) if halos else None,
        "ray_fraction": sum(rays) / len(rays) if rays else None,
        "tone_fractions": tone_fractions,
        "mean_dci": dci_mean,
        "std_dci": dci_std,
        "dci_std_defined": dci_ok,
        "mean_ti": ti_mean,
    }


def bias_report(ti_values: Sequence[float], label: str,
                ti_map: TIBasemap | None = None,
                expected: Sequence[float] | None = None,
                lat_band: tuple[float, float] = (-60.0, 60.0),
                bin_edges: Sequence[float] = DEFAULT_TI_BIN_EDGES) -> BiasReport:
    """Bin a selection's TI values and compare against the area expectation."""
    if len(ti_values) == 0:
        raise AnalyticsError("bias_report requires a nonempty selection")
    if expected is None:
        if ti_map is None:
            raise AnalyticsError("bias_report needs either a TI map or an expected distribution")
        expected = expected_distribution(ti_map, lat_band, bin_edges)
    expected = np.asarray(expected, dtype=np.float64)
    counts = histogram_counts(ti_values, bin_edges)
    d = kl_divergence(counts, expected)
    hist = TIHistogram(bin_edges=tuple(bin_edges), observed=tuple(int(c) for c in counts),
                       expected=tuple(expected.tolist()))
    return BiasReport(histogram=hist, d_kl=d, selection_label=label)


def selection_ti_values(candidates: Sequence[Candidate]) -> list[float]:
    values = []
    for cand in candidates:
        if cand.ti_value is None:
            raise AnalyticsError(f"candidate {cand.id} carries no TI value")
        values.append(cand.ti_value)
    return values


# ---------------------------------------------------------------------------
# Report serialization: JSON, CSV table, SVG chart
# ---------------------------------------------------------------------------

def write_report_json(path: Path | str, report: BiasReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report_json(path: Path | str) -> BiasReport:
    return BiasReport.from_dict(json.loads(Path(path).read_text()))


def report_csv(report: BiasReport) -> str:
    lines = ["bin_lo,bin_hi,observed,observed_prob,expected_prob,obs_over_exp"]
    hist = report.histogram
    total = max(1, sum(hist.observed))
    for i, count in enumerate(hist.observed):
        lo = hist.bin_edges[i]
        hi = hist.bin_edges[i + 1] if i < len(hist.observed) - 1 else math.inf
        o_prob = count / total
        e_prob = hist.expected[i]
        ratio = o_prob / e_prob if e_prob > 0 else math.nan
        lines.append(f"{lo:g},{hi:g},{count},{o_prob:.6f},{e_prob:.6f},{ratio:.6f}")
    return "\n".join(lines) + "\n"


def report_svg(report: BiasReport, width: int = 640, height: int = 360) -> str:
    """Paired observed/expected bar chart: solid black observed counts,
    hatched outline bars for the area-expected counts."""
    hist = report.histogram
    n = len(hist.observed)
    total = sum(hist.observed)
    expected_counts = [e * total for e in hist.expected]
    peak = max(max(hist.observed, default=0), max(expected_counts, default=0.0), 1.0)
    margin, base = 46, height - 40
    plot_w, plot_h = width - margin - 12, base - 16
    group_w = plot_w / n
    bar_w = group_w * 0.38

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<defs><pattern id='hatch' width='5' height='5' patternTransform='rotate(45)' "
        "patternUnits='userSpaceOnUse'><line x1='0' y1='0' x2='0' y2='5' "
        "stroke='#b22222' stroke-width='1.5'/></pattern></defs>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{base}" x2="{width - 12}" y2="{base}" stroke="black"/>',
        f'<line x1="{margin}" y1="{base}" x2="{margin}" y2="{base - plot_h}" stroke="black"/>',
    ]
    for i in range(n):
        x0 = margin + i * group_w
        h_obs = hist.observed[i] / peak * plot_h
        h_exp = expected_counts[i] / peak * plot_h
        parts.append(f'<rect x="{x0 + group_w * 0.08:.2f}" y="{base - h_obs:.2f}" '
                     f'width="{bar_w:.2f}" height="{h_obs:.2f}" fill="black"/>')
        parts.append(f'<rect x="{x0 + group_w * 0.52:.2f}" y="{base - h_exp:.2f}" '
                     f'width="{bar_w:.2f}" height="{h_exp:.2f}" fill="url(#hatch)" '
                     f'stroke="#b22222"/>')
        parts.append(f'<text x="{x0 + group_w / 2:.2f}" y="{base + 14}" font-size="9" '
                     f'text-anchor="middle">{hist.bin_edges[i]:g}+</text>')
    parts.append(f'<text x="{margin}" y="12" font-size="12">'
                 f'{report.selection_label}: observed (black) vs expected (hatched), '
                 f'D_KL = {report.d_kl:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
