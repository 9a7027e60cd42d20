"""Training-free keypoint detection on match confidence maps.

Three post-filters over a MatchSet: overlapping-window NMS with a frozen
lowest-index tie-break, non-overlapping grid top-1, and plain confidence
thresholding.  Windows at the border shrink to the map (no zero padding,
which would crown weak border cells).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import MatchSet


class DetectError(ValueError):
    pass


@dataclass
class ConfidenceMap:
    """Top-1 match confidence per source cell at one pyramid stride.

    Cells with no surviving match carry confidence 0 and valid=False;
    they are never selected by any detector.
    """

    values: np.ndarray
    valid: np.ndarray
    stride: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise DetectError("values/valid must be matching 2-D arrays")
        if self.values.min() < 0.0 or self.values.max() > 1.0 + 1e-9:
            raise DetectError("confidence values must lie in [0, 1]")
        if np.any(self.values[~self.valid] != 0.0):
            raise DetectError("invalid cells must have confidence 0")

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        h, w = self.values.shape
        header = {"shape": [int(h), int(w)], "stride": int(self.stride),
                  "values_dtype": "<f4", "valid_dtype": "u1"}
        path.with_suffix(".json").write_text(
            json.dumps(header, sort_keys=True) + "\n")
        with open(path.with_suffix(".bin"), "wb") as fh:
            fh.write(self.values.astype("<f4").tobytes())
            fh.write(self.valid.astype("u1").tobytes())

    @classmethod
    def load(cls, path) -> "ConfidenceMap":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        h, w = header["shape"]
        raw = Path(path.with_suffix(".bin")).read_bytes()
        n = h * w
        values = np.frombuffer(raw[:4 * n], dtype="<f4").reshape(h, w)
        valid = np.frombuffer(raw[4 * n:4 * n + n], dtype="u1").reshape(h, w)
        return cls(values.astype(np.float64), valid > 0, header["stride"])


def _match_cells(matches: MatchSet, cmap: ConfidenceMap) -> np.ndarray:
    """Linear source-cell index per match (source coords are cell centers)."""
    h, w = cmap.values.shape
    rows = np.floor(matches.ya / cmap.stride).astype(int)
    cols = np.floor(matches.xa / cmap.stride).astype(int)
    if rows.size and (rows.min() < 0 or rows.max() >= h
                      or cols.min() < 0 or cols.max() >= w):
        raise DetectError("match source coordinates fall outside the map")
    return rows * w + cols


def nms_detect(cmap: ConfidenceMap, kernel: int, matches: MatchSet) -> MatchSet:
    """Keep a match iff its cell attains the max of the centered clamped
    kernel window and is the lowest-linear-index cell attaining that max."""
    if kernel < 3 or kernel % 2 == 0:
        raise DetectError(f"NMS kernel must be odd and >= 3, got {kernel}")
    h, w = cmap.values.shape
    half = kernel // 2
    # replicated borders give the same window max as clamped windows
    winmax = maximum_filter(cmap.values, size=kernel, mode="nearest")
    cells = _match_cells(matches, cmap)
    keep = np.zeros(len(matches), dtype=bool)
    for i, cell in enumerate(cells):
        r, c = divmod(int(cell), w)
        if not cmap.valid[r, c] or cmap.values[r, c] != winmax[r, c]:
            continue
        r0, r1 = max(r - half, 0), min(r + half + 1, h)
        c0, c1 = max(c - half, 0), min(c + half + 1, w)
        window = cmap.values[r0:r1, c0:c1]
        att = np.argwhere(window == winmax[r, c])
        rr, cc = att[0]  # argwhere scans row-major: first hit = lowest index
        keep[i] = (r0 + rr == r) and (c0 + cc == c)
    return matches.take(np.flatnonzero(keep))


def grid_detect(cmap: ConfidenceMap, cell: int, matches: MatchSet) -> MatchSet:
    """Top-1 valid cell per non-overlapping cell x cell tile (lowest index
    wins ties)."""
    if cell < 2:
        raise DetectError(f"grid cell must be >= 2, got {cell}")
    h, w = cmap.values.shape
    winners = set()
    for r0 in range(0, h, cell):
        for c0 in range(0, w, cell):
            tile = cmap.values[r0:r0 + cell, c0:c0 + cell]
            tvalid = cmap.valid[r0:r0 + cell, c0:c0 + cell]
            if not tvalid.any():
                continue
            masked = np.where(tvalid, tile, -np.inf)
            rr, cc = np.unravel_index(int(masked.argmax()), masked.shape)
            winners.add((r0 + rr) * w + (c0 + cc))
    cells = _match_cells(matches, cmap)
    keep = np.array([int(c) in winners for c in cells], dtype=bool)
    return matches.take(np.flatnonzero(keep))


def threshold_filter(matches: MatchSet, thr: float) -> MatchSet:
    if not 0.0 <= thr <= 1.0:
        raise DetectError(f"threshold must lie in [0, 1], got {thr}")
    return matches.take(np.flatnonzero(matches.conf > thr))
