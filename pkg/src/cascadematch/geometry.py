"""Ground-truth synthesis, coordinate warping, robust estimation and metrics.

Coordinate convention used across the package: continuous image coordinates
are corner-based, i.e. pixel (row i, col j) covers the square
[j, j+1) x [i, i+1) and its center is (j + 0.5, i + 0.5).  A point (x, y) is
inside an H x W image iff 0 <= x < W and 0 <= y < H.  The center of grid
cell (r, c) at stride k is ((c + 0.5) * k, (r + 0.5) * k).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class GeometryError(ValueError):
    """Invalid geometric input or unsatisfiable sampling constraint."""


class EstimationFailure(GeometryError):
    """Robust estimation failed (degenerate/insufficient data).

    The metric layer scores pairs raising this as +inf error.
    """


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class Homography:
    """3x3 pixel-to-pixel projective map, normalized so m[2, 2] == 1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise GeometryError("homography is singular")
        if abs(m[2, 2]) < 1e-12:
            raise GeometryError("cannot normalize: m[2,2] ~ 0")
        self.m = m / m[2, 2]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


@dataclass
class RelativePose:
    """Relative camera motion mapping A-frame points to B: X_b = r @ X_a + t.

    t is a unit direction (scale is unobservable from two views).
    """

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise GeometryError("r is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("r is not a proper rotation")
        n = np.linalg.norm(t)
        if abs(n - 1.0) > 1e-9:
            if n < 1e-12:
                raise GeometryError("t has zero norm")
            t = t / n
        self.r = r
        self.t = t


@dataclass
class CameraTruth:
    """Two-view ground truth: pose + shared intrinsics + per-view depth.

    depth_a drives reprojection; depth_b is used for the occlusion test and
    may be omitted (validity then reduces to in-bounds checks).
    """

    pose: RelativePose
    k: np.ndarray
    depth_a: np.ndarray
    depth_b: np.ndarray | None = None

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.k.shape != (3, 3):
            raise GeometryError("K must be 3x3")
        self.depth_a = np.asarray(self.depth_a, dtype=np.float64)
        if self.depth_b is not None:
            self.depth_b = np.asarray(self.depth_b, dtype=np.float64)


@dataclass
class SyntheticPair:
    """Two grayscale images in [0,1] plus exact correspondence ground truth."""

    image_a: np.ndarray
    image_b: np.ndarray
    truth: Homography | CameraTruth
    seed: int = 0

    @property
    def is_homography(self) -> bool:
        return isinstance(self.truth, Homography)


@dataclass
class MatchSet:
    """Columnar set of sub-pixel correspondences in full-image pixels."""

    xa: np.ndarray
    ya: np.ndarray
    xb: np.ndarray
    yb: np.ndarray
    conf: np.ndarray
    scale: np.ndarray  # fraction of full resolution, e.g. 0.125 for 1/8

    def __post_init__(self):
        cols = [np.asarray(c, dtype=np.float64).reshape(-1)
                for c in (self.xa, self.ya, self.xb, self.yb, self.conf, self.scale)]
        n = len(cols[0])
        if any(len(c) != n for c in cols):
            raise GeometryError("MatchSet columns must have equal length")
        self.xa, self.ya, self.xb, self.yb, self.conf, self.scale = cols

    def __len__(self) -> int:
        return len(self.xa)

    @classmethod
    def empty(cls) -> "MatchSet":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z)

    def take(self, idx) -> "MatchSet":
        return MatchSet(self.xa[idx], self.ya[idx], self.xb[idx], self.yb[idx],
                        self.conf[idx], self.scale[idx])

    def check(self, shape_a=None, shape_b=None):
        """Validate invariants; shapes are (H, W) when bounds are known."""
        if len(self) and (self.conf.min() < 0 or self.conf.max() > 1):
            raise GeometryError("conf outside [0,1]")
        for shape, xs, ys in ((shape_a, self.xa, self.ya), (shape_b, self.xb, self.yb)):
            if shape is None or len(self) == 0:
                continue
            h, w = shape
            if xs.min() < 0 or xs.max() >= w or ys.min() < 0 or ys.max() >= h:
                raise GeometryError("match coordinates out of image bounds")
        if len(self):
            src = np.stack([self.xa, self.ya], axis=1)
            if len(np.unique(src, axis=0)) != len(self):
                raise GeometryError("duplicate source points")

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for i in range(len(self)):
                f.write(json.dumps({
                    "xa": self.xa[i], "ya": self.ya[i],
                    "xb": self.xb[i], "yb": self.yb[i],
                    "conf": self.conf[i], "scale": self.scale[i],
                }, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "MatchSet":
        rows = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        if not rows:
            return cls.empty()
        cols = {k: np.array([r[k] for r in rows], dtype=np.float64)
                for k in ("xa", "ya", "xb", "yb", "conf", "scale")}
        return cls(**cols)


@dataclass
class HomographyBounds:
    """Perturbation magnitudes for sample_homography (all non-negative)."""

    rotation_deg: float = 0.0
    scale: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    perspective: float = 0.0

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "tx", "ty", "perspective"):
            if getattr(self, name) < 0:
                raise GeometryError(f"bound {name} must be non-negative")


# ---------------------------------------------------------------------------
# warping and ground truth
# ---------------------------------------------------------------------------


def warp_points(points: np.ndarray, h: Homography) -> np.ndarray:
    """Apply a projective transform to [N, 2] points with homogeneous divide."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if not np.isfinite(pts).all():
        raise GeometryError("points must be finite")
    ones = np.ones((len(pts), 1))
    ph = np.concatenate([pts, ones], axis=1) @ h.m.T
    w = ph[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise GeometryError("point maps to infinity (|w| < 1e-12)")
    out = ph[:, :2] / w[:, None]
    return out[0] if squeeze else out


def grid_cell_centers(grid_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Centers of all cells of an (h, w) grid at the given stride, [h, w, 2] xy."""
    h, w = grid_hw
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _sample_map(arr: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Cubic-spline sample of a 2D map at continuous (x, y) positions."""
    xy = np.atleast_2d(xy)
    coords = np.stack([xy[:, 1] - 0.5, xy[:, 0] - 0.5])  # row, col indices
    return ndimage.map_coordinates(arr, coords, order=3, mode="nearest")


def gt_correspondence(pair: SyntheticPair, stride: int):
    """Exact target location for every source cell center at the given stride.

    Returns (targets [h, w, 2], valid [h, w]).  Targets are full-image xy
    coordinates in image_b; valid is false where the target leaves the image
    or (camera mode) fails the 1%-relative occlusion depth check.
    """
    ha, wa = pair.image_a.shape[:2]
    hb, wb = pair.image_b.shape[:2]
    gh, gw = ha // stride, wa // stride
    src = grid_cell_centers((gh, gw), stride).reshape(-1, 2)

    if pair.is_homography:
        tgt = warp_points(src, pair.truth)
        valid = np.ones(len(src), dtype=bool)
    else:
        truth = pair.truth
        if truth.depth_a is None:
            raise GeometryError("camera mode requires a depth map")
        z = _sample_map(truth.depth_a, src)
        kinv = np.linalg.inv(truth.k)
        rays = np.concatenate([src, np.ones((len(src), 1))], axis=1) @ kinv.T
        pts_a = rays * z[:, None]
        pts_b = pts_a @ truth.pose.r.T + truth.pose.t
        zb = pts_b[:, 2]
        valid = zb > 1e-9
        tgt = np.zeros_like(src)
        proj = (pts_b[valid] @ truth.k.T)
        tgt[valid] = proj[:, :2] / proj[:, 2:3]
        if truth.depth_b is not None:
            ok = valid.copy()
            inb = valid & (tgt[:, 0] >= 0) & (tgt[:, 0] < wb) \
                & (tgt[:, 1] >= 0) & (tgt[:, 1] < hb)
            seen = np.full(len(src), np.inf)
            seen[inb] = _sample_map(truth.depth_b, tgt[inb])
            ok &= np.abs(zb - seen) <= 0.01 * np.abs(seen)
            valid = ok

    valid &= (tgt[:, 0] >= 0) & (tgt[:, 0] < wb) & (tgt[:, 1] >= 0) & (tgt[:, 1] < hb)
    return tgt.reshape(gh, gw, 2), valid.reshape(gh, gw)


def plane_homography(pose: RelativePose, k: np.ndarray, normal: np.ndarray,
                     dist: float) -> Homography:
    """Homography induced by the plane {n . X_a = d} between two views."""
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    m = k @ (pose.r + np.outer(pose.t, n) / dist) @ np.linalg.inv(k)
    return Homography(m)


# ---------------------------------------------------------------------------
# homography sampling
# ---------------------------------------------------------------------------


def sample_homography(seed: int, bounds: HomographyBounds,
                      image_shape: tuple[int, int],
                      max_retries: int = 100) -> Homography:
    """Random rotation/scale/translation/perspective warp about the center.

    Resamples (bounded retries) until >= 50% of the stride-8 cell-center grid
    stays inside the image after warping.
    """
    h, w = image_shape
    rng = np.random.default_rng(seed)
    grid = grid_cell_centers((h // 8, w // 8), 8).reshape(-1, 2)
    for _ in range(max_retries):
        theta = math.radians(rng.uniform(-bounds.rotation_deg, bounds.rotation_deg))
        s = 1.0 + rng.uniform(-bounds.scale, bounds.scale)
        tx = rng.uniform(-bounds.tx, bounds.tx)
        ty = rng.uniform(-bounds.ty, bounds.ty)
        g = rng.uniform(-bounds.perspective, bounds.perspective)
        p = rng.uniform(-bounds.perspective, bounds.perspective)

        c, si = math.cos(theta), math.sin(theta)
        lin = np.array([[s * c, -s * si, 0.0],
                        [s * si, s * c, 0.0],
                        [0.0, 0.0, 1.0]])
        persp = np.array([[1.0, 0.0, 0.0],
                          [0.0, 1.0, 0.0],
                          [g, p, 1.0]])
        center = np.array([[1.0, 0.0, w / 2.0],
                           [0.0, 1.0, h / 2.0],
                           [0.0, 0.0, 1.0]])
        trans = np.array([[1.0, 0.0, tx],
                          [0.0, 1.0, ty],
                          [0.0, 0.0, 1.0]])
        m = trans @ center @ lin @ persp @ np.linalg.inv(center)
        if abs(np.linalg.det(m)) < 1e-9:
            continue
        cand = Homography(m)
        try:
            warped = warp_points(grid, cand)
        except GeometryError:
            continue
        inside = (warped[:, 0] >= 0) & (warped[:, 0] < w) \
            & (warped[:, 1] >= 0) & (warped[:, 1] < h)
        if inside.mean() >= 0.5:
            return cand
    raise GeometryError("sample_homography: retry budget exhausted")


# ---------------------------------------------------------------------------
# robust estimation
# ---------------------------------------------------------------------------


def _normalize_points(pts: np.ndarray):
    """Hartley normalization: zero centroid, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < 1e-12:
        raise EstimationFailure("degenerate point set (coincident points)")
    s = math.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, t


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Direct linear transform from >= 4 correspondences."""
    sn, ts = _normalize_points(src)
    dn, td = _normalize_points(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = sn
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -sn * dn[:, 0:1]
    a[0::2, 8] = -dn[:, 0]
    a[1::2, 3:5] = sn
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -sn * dn[:, 1:2]
    a[1::2, 8] = -dn[:, 1]
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-10:
        raise EstimationFailure("degenerate homography sample")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    if abs(m[2, 2]) < 1e-12 or abs(np.linalg.det(m)) < 1e-12:
        raise EstimationFailure("degenerate homography sample")
    return Homography(m)


def estimate_homography_ransac(matches: MatchSet, threshold_px: float = 1.0,
                               iters: int = 2000, seed: int = 0):
    """4-point DLT inside RANSAC with a final least-squares refit on inliers."""
    n = len(matches)
    if n < 4:
        raise EstimationFailure(f"need >= 4 matches, got {n}")
    src = np.stack([matches.xa, matches.ya], axis=1)
    dst = np.stack([matches.xb, matches.yb], axis=1)
    rng = np.random.default_rng(seed)

    best_mask = None
    best_count = 3
    best_err = np.inf
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        try:
            cand = _dlt_homography(src[idx], dst[idx])
            err = np.linalg.norm(warp_points(src, cand) - dst, axis=1)
        except GeometryError:
            continue
        mask = err < threshold_px
        count = int(mask.sum())
        esum = err[mask].sum()
        if count > best_count or (count == best_count and esum < best_err):
            best_mask, best_count, best_err = mask, count, esum
    if best_mask is None:
        raise EstimationFailure("no model reached 4 inliers")

    refit = _dlt_homography(src[best_mask], dst[best_mask])
    err = np.linalg.norm(warp_points(src, refit) - dst, axis=1)
    mask = err < threshold_px
    if mask.sum() < 4:  # refit degraded the model; keep the sample consensus
        mask = best_mask
        refit = _dlt_homography(src[mask], dst[mask])
    return refit, mask


def _eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Normalized 8-point essential/fundamental fit, rank-2 enforced.

    xa, xb are [N, 2] points in normalized camera coordinates obeying
    xb_h^T E xa_h = 0.
    """
    an, ta = _normalize_points(xa)
    bn, tb = _normalize_points(xb)
    a = np.column_stack([
        bn[:, 0] * an[:, 0], bn[:, 0] * an[:, 1], bn[:, 0],
        bn[:, 1] * an[:, 0], bn[:, 1] * an[:, 1], bn[:, 1],
        an[:, 0], an[:, 1], np.ones(len(an)),
    ])
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-12:
        raise EstimationFailure("degenerate correspondences for 8-point")
    e = vt[-1].reshape(3, 3)
    e = tb.T @ e @ ta
    u, s, vt2 = np.linalg.svd(e)
    if s[1] < 1e-12:
        raise EstimationFailure("essential matrix collapsed to rank 1")
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt2


def _sampson_distance(e: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ah = np.concatenate([xa, np.ones((len(xa), 1))], axis=1)
    bh = np.concatenate([xb, np.ones((len(xb), 1))], axis=1)
    ea = ah @ e.T
    etb = bh @ e
    num = np.sum(bh * ea, axis=1) ** 2
    den = ea[:, 0] ** 2 + ea[:, 1] ** 2 + etb[:, 0] ** 2 + etb[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def _triangulate(r: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray):
    """Linear triangulation; returns depths in both cameras [N, 2]."""
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, t.reshape(3, 1)])
    depths = np.zeros((len(xa), 2))
    for i in range(len(xa)):
        a = np.stack([
            xa[i, 0] * p1[2] - p1[0],
            xa[i, 1] * p1[2] - p1[1],
            xb[i, 0] * p2[2] - p2[0],
            xb[i, 1] * p2[2] - p2[1],
        ])
        _, _, vt = np.linalg.svd(a)
        x = vt[-1]
        if abs(x[3]) < 1e-12:
            continue
        x = x[:3] / x[3]
        depths[i, 0] = x[2]
        depths[i, 1] = (r @ x + t)[2]
    return depths


def _decompose_essential(e: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> RelativePose:
    """Pick the (r, t) candidate with the best cheirality support."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    best, best_pos = None, -1
    for r in (u @ w @ vt, u @ w.T @ vt):
        for tc in (t, -t):
            depths = _triangulate(r, tc, xa, xb)
            pos = int(((depths[:, 0] > 0) & (depths[:, 1] > 0)).sum())
            if pos > best_pos:
                best, best_pos = RelativePose(r, tc), pos
    if best is None or best_pos == 0:
        raise EstimationFailure("cheirality check failed for all decompositions")
    return best


def estimate_pose_ransac(matches: MatchSet, k_a: np.ndarray, k_b: np.ndarray,
                         threshold_px: float = 1.0, iters: int = 2000,
                         seed: int = 0):
    """Normalized 8-point essential matrix inside RANSAC + cheirality."""
    n = len(matches)
    if n < 8:
        raise EstimationFailure(f"need >= 8 matches, got {n}")
    k_a = np.asarray(k_a, dtype=np.float64)
    k_b = np.asarray(k_b, dtype=np.float64)
    ah = np.stack([matches.xa, matches.ya, np.ones(n)], axis=1)
    bh = np.stack([matches.xb, matches.yb, np.ones(n)], axis=1)
    xa = (ah @ np.linalg.inv(k_a).T)[:, :2]
    xb = (bh @ np.linalg.inv(k_b).T)[:, :2]
    # pixel threshold mapped to normalized units by the mean focal length
    f_mean = (k_a[0, 0] + k_a[1, 1] + k_b[0, 0] + k_b[1, 1]) / 4.0
    thr = threshold_px / f_mean
    rng = np.random.default_rng(seed)

    best_e, best_mask, best_count, best_err = None, None, 7, np.inf
    for _ in range(iters):
        idx = rng.choice(n, size=8, replace=False)
        try:
            e = _eight_point(xa[idx], xb[idx])
        except GeometryError:
            continue
        err = _sampson_distance(e, xa, xb)
        mask = err < thr
        count = int(mask.sum())
        esum = err[mask].sum()
        if count > best_count or (count == best_count and esum < best_err):
            best_e, best_mask, best_count, best_err = e, mask, count, esum
    if best_e is None:
        raise EstimationFailure("no essential matrix reached 8 inliers")

    try:
        refit = _eight_point(xa[best_mask], xb[best_mask])
        err = _sampson_distance(refit, xa, xb)
        mask = err < thr
        if mask.sum() < 8:
            refit, mask = best_e, best_mask
    except GeometryError:
        refit, mask = best_e, best_mask
    pose = _decompose_essential(refit, xa[mask], xb[mask])
    return pose, mask


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def rotation_angle_deg(r: np.ndarray) -> float:
    """Angle of a rotation matrix in degrees (atan2 form, stable near 0)."""
    sin_vec = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = np.linalg.norm(sin_vec) / 2.0
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.atan2(s, c))


def pose_error(est: RelativePose, gt: RelativePose) -> float:
    """max(rotation angle, translation angle), min over the +-t ambiguity."""
    rot = rotation_angle_deg(est.r @ gt.r.T)
    cross = np.linalg.norm(np.cross(est.t, gt.t))
    trans = math.degrees(math.atan2(cross, abs(float(np.dot(est.t, gt.t)))))
    return max(rot, trans)


def corner_error(est: Homography, gt: Homography, image_shape: tuple[int, int]) -> float:
    """Mean displacement of the four image corners under est vs gt."""
    h, w = image_shape
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    return float(np.linalg.norm(warp_points(corners, est) - warp_points(corners, gt),
                                axis=1).mean())


def auc(errors, threshold: float) -> float:
    """Area under the cumulative error curve up to threshold, normalized.

    Convention (frozen by regression test): sort errors ascending (failures
    encoded as +inf), form the recall polyline through (0, 0) and
    (e_i, i/n) for e_i < threshold, hold recall constant out to the
    threshold, integrate by the trapezoid rule and divide by the threshold.
    """
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise GeometryError("auc of empty error list")
    if np.isnan(e).any():
        raise GeometryError("auc got NaN errors; encode failures as +inf")
    e = np.sort(e)
    recall = np.arange(1, e.size + 1) / e.size
    e = np.concatenate([[0.0], e])
    recall = np.concatenate([[0.0], recall])
    cut = int(np.searchsorted(e, threshold, side="left"))
    x = np.concatenate([e[:cut], [threshold]])
    y = np.concatenate([recall[:cut], [recall[cut - 1]]])
    return float(np.trapezoid(y, x) / threshold)
