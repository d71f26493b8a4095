"""Boundary benchmark: NMS thinning, tolerance matching, ODS / OIS / AP, and
side-output combination strategies."""

from __future__ import annotations

import csv
import re
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_TOLERANCE = 0.0075
NYUD_TOLERANCE = 0.011
# relative slack so bilinear resampling of a plateau does not count as "greater"
TIE_EPS = 1e-12


def default_thresholds(n: int = 99) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1)


# NMS ------------------------------------------------------------------------


def edge_orientation(prob: np.ndarray) -> tuple:
    """Unit normal (ny, nx) from central differences of the 3x3 box-smoothed map.

    Flat spots get the horizontal normal (0, 1).
    """
    smooth = ndimage.uniform_filter(prob.astype(np.float64), size=3, mode="nearest")
    gy, gx = np.gradient(smooth)
    mag = np.hypot(gy, gx)
    flat = mag == 0
    safe = np.where(flat, 1.0, mag)
    ny = np.where(flat, 0.0, gy / safe)
    nx = np.where(flat, 1.0, gx / safe)
    return ny, nx


def nms(prob: np.ndarray) -> np.ndarray:
    """Zero every pixel that has a strictly larger bilinear-sampled neighbour one
    pixel away along the edge normal; survivors keep their value."""
    p = np.asarray(prob, dtype=np.float64)
    ny, nx = edge_orientation(p)
    yy, xx = np.mgrid[0 : p.shape[0], 0 : p.shape[1]].astype(np.float64)
    keep = np.ones(p.shape, dtype=bool)
    for sign in (1.0, -1.0):
        coords = np.stack([yy + sign * ny, xx + sign * nx])
        nb = ndimage.map_coordinates(p, coords, order=1, mode="nearest")
        keep &= ~(nb - p > TIE_EPS)
    return np.where(keep, p, 0.0)


# matching -------------------------------------------------------------------


def hopcroft_karp(adj: Sequence[Sequence[int]], n_right: int) -> tuple:
    """Maximum-cardinality matching of a bipartite graph.

    ``adj[u]`` lists right vertices adjacent to left vertex ``u``. Returns
    ``(size, match_left)`` with ``match_left[u] == -1`` for unmatched vertices.
    """
    n_left = len(adj)
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    inf = n_left + n_right + 1
    size = 0
    while True:
        dist = [inf] * n_left
        queue = deque()
        for u in range(n_left):
            if match_l[u] == -1:
                dist[u] = 0
                queue.append(u)
        found = False
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                w = match_r[v]
                if w == -1:
                    found = True
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        if not found:
            break
        # iterative DFS along the layered graph
        it = [0] * n_left
        for root in range(n_left):
            if match_l[root] != -1:
                continue
            stack = [root]
            path_found = False
            while stack:
                u = stack[-1]
                if it[u] < len(adj[u]):
                    v = adj[u][it[u]]
                    it[u] += 1
                    w = match_r[v]
                    if w == -1:
                        # augment along the stack
                        for uu in stack:
                            vv = adj[uu][it[uu] - 1]
                            match_l[uu] = vv
                            match_r[vv] = uu
                        path_found = True
                        break
                    if dist[w] == dist[u] + 1:
                        stack.append(w)
                else:
                    dist[u] = inf
                    stack.pop()
            if path_found:
                size += 1
    return size, match_l


def _disk_offsets(radius: float) -> list:
    # same slack as the distance test, so a radius of 1 - 1ulp still reaches 1 px
    r = int(np.floor(radius + 1e-9))
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= radius * radius + 1e-12]


def _neighbours(pys, pxs, gt: np.ndarray, offsets: list, base: int = 0) -> list:
    """Per predicted pixel, indices (offset by ``base``) of ground-truth pixels in reach."""
    gidx = -np.ones(gt.shape, dtype=np.int64)
    gys, gxs = np.nonzero(gt)
    gidx[gys, gxs] = np.arange(len(gys)) + base
    h, w = gt.shape
    adj = []
    for y, x in zip(pys, pxs):
        nbrs = []
        for dy, dx in offsets:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and gidx[yy, xx] >= 0:
                nbrs.append(int(gidx[yy, xx]))
        adj.append(nbrs)
    return adj


def match_pixels(pred: np.ndarray, gt: np.ndarray, radius: float) -> tuple:
    """One-to-one matching of predicted to ground-truth pixels within ``radius``.

    Returns ``(size, matched_pred_mask)``.
    """
    pys, pxs = np.nonzero(pred)
    adj = _neighbours(pys, pxs, gt, _disk_offsets(radius))
    size, match_l = hopcroft_karp(adj, int(np.count_nonzero(gt)))
    matched = np.zeros(pred.shape, dtype=bool)
    for k, m in enumerate(match_l):
        if m != -1:
            matched[pys[k], pxs[k]] = True
    return size, matched


@dataclass
class MatchCounts:
    tp_pred: int
    total_pred: int
    tp_gt: int
    total_gt: int

    def as_tuple(self) -> tuple:
        return (self.tp_pred, self.total_pred, self.tp_gt, self.total_gt)


def correspond(thin: np.ndarray, threshold: float, annotations: Sequence[np.ndarray], tolerance: float = DEFAULT_TOLERANCE) -> MatchCounts:
    """Match the binarized map (``thin >= threshold``) against each annotator.

    ``tolerance`` is a fraction of the image diagonal. Ground-truth hits are the
    per-annotator maximum matching sizes, summed. A predicted pixel is a true
    positive when some annotator matches it; since maximum matchings are not
    unique, the count is the largest such union, which equals one maximum
    matching of the predictions against all annotators' pixels pooled.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    pred = np.asarray(thin) >= threshold
    h, w = pred.shape
    offsets = _disk_offsets(tolerance * np.hypot(h, w))
    pys, pxs = np.nonzero(pred)
    pooled: list = [[] for _ in range(len(pys))]
    tp_gt = total_gt = 0
    for ann in annotations:
        gt = np.asarray(ann) > 0
        n_gt = int(gt.sum())
        adj = _neighbours(pys, pxs, gt, offsets, base=total_gt)
        tp_gt += hopcroft_karp([[j - total_gt for j in nb] for nb in adj], n_gt)[0]
        for i, nb in enumerate(adj):
            pooled[i].extend(nb)
        total_gt += n_gt
    tp_pred = hopcroft_karp(pooled, total_gt)[0]
    return MatchCounts(int(tp_pred), int(pred.sum()), int(tp_gt), total_gt)


def image_counts(thin: np.ndarray, annotations, thresholds, tolerance: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """(T, 4) counts ``tp_pred, total_pred, tp_gt, total_gt`` per threshold."""
    return np.array([correspond(thin, t, annotations, tolerance).as_tuple() for t in thresholds], dtype=np.int64)


# summary --------------------------------------------------------------------


def precision_recall(counts: np.ndarray) -> tuple:
    """Precision and recall from (..., 4) counts; empty predictions have precision 1."""
    counts = np.asarray(counts, dtype=np.float64)
    tp_p, tot_p, tp_g, tot_g = counts[..., 0], counts[..., 1], counts[..., 2], counts[..., 3]
    p = np.divide(tp_p, tot_p, out=np.ones_like(tp_p), where=tot_p > 0)
    r = np.divide(tp_g, tot_g, out=np.zeros_like(tp_g), where=tot_g > 0)
    return p, r


def f_score(p, r):
    p, r = np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope ``max{P : R' >= R}`` over recall.

    The envelope is extended flat to recall 0 and integrated with the trapezoid rule.
    """
    order = np.lexsort((-np.asarray(precision), -np.asarray(recall)))
    r = np.asarray(recall)[order]
    p = np.maximum.accumulate(np.asarray(precision)[order])
    # ascending recall
    r, p = r[::-1], p[::-1]
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


@dataclass
class EvalSummary:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    ods: float
    ods_threshold: float
    ois: float
    ap: float
    tolerance: float
    strategy: str = ""
    per_image_best: list = field(default_factory=list)

    def write_pr_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f"])
            for row in zip(self.thresholds, self.precision, self.recall, self.f):
                writer.writerow([f"{v:.6f}" for v in row])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ods", "ois", "ap", "tolerance", "strategy"])
            writer.writerow([f"{self.ods:.6f}", f"{self.ois:.6f}", f"{self.ap:.6f}", self.tolerance, self.strategy])


def summarize(counts: np.ndarray, thresholds, tolerance: float = DEFAULT_TOLERANCE, strategy: str = "") -> EvalSummary:
    """Aggregate per-image counts of shape (n_images, T, 4) into ODS / OIS / AP."""
    counts = np.asarray(counts, dtype=np.int64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if counts.ndim != 3 or counts.shape[0] < 1 or counts.shape[1] != len(thresholds) or len(thresholds) < 1:
        raise ValueError(f"counts shape {counts.shape} does not fit {len(thresholds)} thresholds")
    total = counts.sum(axis=0)
    p, r = precision_recall(total)
    f = f_score(p, r)
    best = int(np.argmax(f))
    per_p, per_r = precision_recall(counts)
    per_best = np.argmax(f_score(per_p, per_r), axis=1)
    ois_counts = counts[np.arange(counts.shape[0]), per_best].sum(axis=0)
    op, orr = precision_recall(ois_counts)
    return EvalSummary(
        thresholds=thresholds,
        precision=p,
        recall=r,
        f=f,
        ods=float(f[best]),
        ods_threshold=float(thresholds[best]),
        ois=float(f_score(op, orr)),
        ap=average_precision(p, r),
        tolerance=tolerance,
        strategy=strategy,
        per_image_best=[float(thresholds[i]) for i in per_best],
    )


def evaluate(
    prob_maps: Sequence[np.ndarray],
    annotations: Sequence[Sequence[np.ndarray]],
    thresholds=None,
    tolerance: float = DEFAULT_TOLERANCE,
    apply_nms: bool = True,
    strategy: str = "",
    threads: int = 1,
) -> EvalSummary:
    """NMS (optional), per-image threshold sweep and corpus summary."""
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds)
    if len(prob_maps) != len(annotations):
        raise ValueError(f"{len(prob_maps)} prediction maps but {len(annotations)} annotation sets")

    def one(i):
        thin = nms(prob_maps[i]) if apply_nms else np.asarray(prob_maps[i])
        return image_counts(thin, annotations[i], thresholds, tolerance)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            counts = list(pool.map(one, range(len(prob_maps))))
    else:
        counts = [one(i) for i in range(len(prob_maps))]
    return summarize(np.stack(counts), thresholds, tolerance, strategy)


# combination strategies -----------------------------------------------------

STANDARD_STRATEGIES = (
    "side1",
    "side2",
    "side3",
    "side4",
    "side5",
    "fuse",
    "average(1..4)",
    "average(1..5)",
    "average(2..4)",
    "average(2..5)",
    "merged",
)

_AVG = re.compile(r"^average\((\d+)\s*(?:\.\.|-)\s*(\d+)\)(\+fuse)?$")
_SIDE = re.compile(r"^side(\d+)$")


def combine(maps, strategy: str) -> np.ndarray:
    """Combine an :class:`~hed.model.EdgeMaps` bundle into one probability map.

    Strategies: ``fuse``; ``side<m>``; ``average(a..b)`` (mean of sides a..b,
    1-based, inclusive); ``average(a..b)+fuse`` and ``hed`` (fused map averaged
    in with the sides); ``merged`` (mean of the fused map and the all-sides average).
    """
    s = strategy.strip().lower().replace(" ", "")
    sides = maps.sides
    m_count = len(sides)
    if s == "fuse":
        return np.asarray(maps.fused, dtype=np.float64).copy()
    if s == "merged":
        return 0.5 * (maps.fused + np.mean(sides, axis=0))
    if s == "hed":
        return np.mean([maps.fused] + list(sides), axis=0)
    side = _SIDE.match(s)
    if side:
        a = b = int(side.group(1))
        with_fuse = False
    else:
        avg = _AVG.match(s)
        if not avg:
            raise ValueError(f"unknown combination strategy {strategy!r}")
        a, b, with_fuse = int(avg.group(1)), int(avg.group(2)), bool(avg.group(3))
    if a > b:
        raise ValueError(f"empty side range in {strategy!r}")
    if a < 1 or b > m_count:
        raise ValueError(f"side range {a}..{b} outside 1..{m_count}")
    chosen = list(sides[a - 1 : b]) + ([maps.fused] if with_fuse else [])
    return np.mean(chosen, axis=0)


def combine_all(maps, strategies: Sequence[str] = STANDARD_STRATEGIES) -> dict:
    return {s: combine(maps, s) for s in strategies}
