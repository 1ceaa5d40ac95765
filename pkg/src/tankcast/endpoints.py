"""Endpoint extraction from heatmaps and displacement metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import InvalidArgument
from .geometry import GridGeometry


@dataclass(frozen=True)
class ClusterConfig:
    eps: float = 3.0
    min_samples: int = 10
    rel_threshold: float = 0.1
    k: int = 3

    def __post_init__(self):
        if not self.eps > 0 or self.min_samples < 1 or self.k < 1:
            raise InvalidArgument("eps > 0, min_samples >= 1 and k >= 1 required")


@dataclass
class EndpointSet:
    points: List[Tuple[float, float]]       # world metres
    pixels: List[Tuple[int, int]]
    peaks: List[float]
    method: str = "argmax"

    def __len__(self):
        return len(self.points)


def _argmax_pixel(heatmap: np.ndarray) -> Tuple[int, int]:
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.size == 0:
        raise InvalidArgument("empty heatmap")
    if np.isnan(hm).all():
        raise InvalidArgument("heatmap is all NaN")
    # nanargmax returns the first maximum in row-major order
    return tuple(int(i) for i in np.unravel_index(np.nanargmax(hm), hm.shape))


def argmax_endpoint(heatmap: np.ndarray, geometry: GridGeometry) -> Tuple[float, float]:
    r, c = _argmax_pixel(heatmap)
    return geometry.pixel_to_world(r, c)


def candidate_pixels(heatmap: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    hm = np.nan_to_num(np.asarray(heatmap, dtype=np.float64), nan=-np.inf)
    peak = hm.max()
    if not peak > 0:
        return np.zeros((0, 2), dtype=int)
    return np.argwhere(hm >= cfg.rel_threshold * peak)


def cluster_labels(coords: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    if len(coords) == 0:
        return np.zeros(0, dtype=int)
    return DBSCAN(eps=cfg.eps, min_samples=cfg.min_samples).fit(coords).labels_


def endpoints_from_labels(heatmap: np.ndarray, coords: np.ndarray, labels: np.ndarray,
                          geometry: GridGeometry, cfg: ClusterConfig) -> EndpointSet:
    """Peak pixel per cluster, ranked by peak value, with the global argmax first."""
    hm = np.asarray(heatmap, dtype=np.float64)
    top = _argmax_pixel(hm)
    peaks = []
    for lab in sorted(set(labels.tolist()) - {-1}):
        members = coords[labels == lab]
        vals = hm[members[:, 0], members[:, 1]]
        best = np.flatnonzero(vals == vals.max())
        # lexicographically smallest pixel among equal peaks
        r, c = min(tuple(int(v) for v in members[i]) for i in best)
        peaks.append((-float(vals.max()), r, c))
    if not peaks:
        return EndpointSet([geometry.pixel_to_world(*top)], [top], [float(hm[top])], "argmax")
    peaks.sort()
    pixels = [(r, c) for _, r, c in peaks]
    method = "dbscan"
    if pixels[0] != top:
        # global maximum was a noise point: keep it as the first sample
        pixels = [top] + pixels
        method = "dbscan+argmax"
    pixels = pixels[:cfg.k]
    return EndpointSet([geometry.pixel_to_world(r, c) for r, c in pixels], pixels,
                       [float(hm[p]) for p in pixels], method)


def dbscan_endpoints(heatmap: np.ndarray, geometry: GridGeometry,
                     cfg: ClusterConfig = ClusterConfig()) -> EndpointSet:
    """Up to ``cfg.k`` endpoints from density clusters of supra-threshold pixels.

    Falls back to the argmax when no cluster forms.
    """
    coords = candidate_pixels(heatmap, cfg)
    if len(coords) == 0:
        top = _argmax_pixel(heatmap)
        return EndpointSet([geometry.pixel_to_world(*top)], [top],
                           [float(np.asarray(heatmap)[top])], "argmax")
    return endpoints_from_labels(heatmap, coords, cluster_labels(coords, cfg), geometry, cfg)


def fde(pred: Sequence[float], truth: Sequence[float]) -> float:
    return math.hypot(pred[0] - truth[0], pred[1] - truth[1])


def fde_at_k(points, truth: Sequence[float]) -> float:
    pts = points.points if isinstance(points, EndpointSet) else list(points)
    if not pts:
        raise InvalidArgument("FDE@k needs at least one endpoint")
    return min(fde(p, truth) for p in pts)


def rel_fde(prediction_error_m: float, baseline_error_m: float, floor_m: float) -> float:
    """Baseline error over prediction error, both floored at ``floor_m``.

    1.0 matches the stay-put baseline, 2.0 halves its error.
    """
    if prediction_error_m < 0 or baseline_error_m < 0 or floor_m <= 0:
        raise InvalidArgument("errors must be non-negative and the floor positive")
    return max(baseline_error_m, floor_m) / max(prediction_error_m, floor_m)


@dataclass
class SampleScore:
    sample_id: int
    vtype: str
    preset: str
    fde1: float
    fde3: float
    baseline: float
    rel1: float
    rel3: float
    endpoints: EndpointSet = field(repr=False, default=None)


def score_heatmap(sample_id: int, heatmap: np.ndarray, current_xy, truth_xy,
                  geometry: GridGeometry, cfg: ClusterConfig = ClusterConfig(),
                  vtype: str = "", preset: str = "") -> SampleScore:
    """FDE@1 (argmax), FDE@3 (clusters) and their Rel. FDE for one prediction.

    The stay-put baseline uses the current position's pixel centre so that
    predictions and baseline are measured on the same grid.
    """
    top = argmax_endpoint(heatmap, geometry)
    eps = dbscan_endpoints(heatmap, geometry, cfg)
    cur_px = geometry.pixel_to_world(*geometry.world_to_index(*current_xy))
    base = fde(cur_px, truth_xy)
    f1 = fde(top, truth_xy)
    f3 = fde_at_k(eps, truth_xy)
    floor = geometry.half_pixel_m
    return SampleScore(sample_id, vtype, preset, f1, f3, base, rel_fde(f1, base, floor),
                       rel_fde(f3, base, floor), eps)


@dataclass
class MetricsReport:
    rows: List[dict]
    param_count: int = 0

    def row(self, split: str = "all", group: str = "all") -> dict:
        for r in self.rows:
            if r["split"] == split and r["group"] == group:
                return r
        raise KeyError((split, group))


def aggregate(scores: Sequence[SampleScore], split: str = "eval",
              param_count: int = 0) -> MetricsReport:
    if not scores:
        raise InvalidArgument("no samples to aggregate")

    def summarise(group, sel):
        return {"split": split, "group": group, "n": len(sel),
                "rel_fde1": float(np.mean([s.rel1 for s in sel])),
                "rel_fde3": float(np.mean([s.rel3 for s in sel])),
                "fde1_m": float(np.mean([s.fde1 for s in sel])),
                "fde3_m": float(np.mean([s.fde3 for s in sel]))}

    rows = [summarise("all", list(scores))]
    for key, attr in (("type", "vtype"), ("preset", "preset")):
        for val in sorted({getattr(s, attr) for s in scores}):
            rows.append(summarise(f"{key}:{val}", [s for s in scores if getattr(s, attr) == val]))
    return MetricsReport(rows, param_count)


def write_endpoints_csv(path, scores: Iterable[SampleScore]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sample_id", "method", "rank", "x_m", "y_m", "peak_prob"])
        for s in scores:
            e = s.endpoints
            for rank, ((x, y), p) in enumerate(zip(e.points, e.peaks)):
                out.writerow([s.sample_id, e.method, rank, f"{x:.3f}", f"{y:.3f}", f"{p:.6g}"])


def write_metrics_csv(path, report: MetricsReport) -> None:
    cols = ["split", "group", "n", "rel_fde1", "rel_fde3", "fde1_m", "fde3_m"]
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=cols + ["param_count"])
        out.writeheader()
        for r in report.rows:
            out.writerow({**{c: r[c] for c in cols}, "param_count": report.param_count})


def format_table(rows: Sequence[Tuple[str, ...]], header: Tuple[str, ...]) -> str:
    """Plain-text table with right-aligned numeric columns."""
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    sep = "-" * len(line(header))
    return "\n".join([sep, line(header), sep] + [line(r) for r in rows] + [sep])
