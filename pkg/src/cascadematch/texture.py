"""Procedural texture and terrain-scene fields.

Everything here is an analytic function of continuous coordinates, so a
warped view can be rendered by evaluating the same field at the warped
positions — corresponding points are photometrically identical by
construction, with no resampling blur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0xBF58476D1CE4E5B9)
_M4 = np.uint64(0x94D049BB133111EB)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> uniform values in [0, 1)."""
    h = ix.astype(np.uint64) * _M1 ^ iy.astype(np.uint64) * _M2
    h ^= np.uint64((seed * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(30)
    h *= _M3
    h ^= h >> np.uint64(27)
    h *= _M4
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2**64)


def value_noise(x: np.ndarray, y: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Smoothly interpolated lattice noise, evaluable at any real position."""
    fx = np.asarray(x, dtype=np.float64) / cell
    fy = np.asarray(y, dtype=np.float64) / cell
    ix = np.floor(fx).astype(np.int64)
    iy = np.floor(fy).astype(np.int64)
    tx = fx - ix
    ty = fy - iy
    tx = tx * tx * (3.0 - 2.0 * tx)  # smoothstep
    ty = ty * ty * (3.0 - 2.0 * ty)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    top = v00 + (v10 - v00) * tx
    bot = v01 + (v11 - v01) * tx
    return top + (bot - top) * ty


def noise_octaves(x, y, seed: int, cells=(64.0, 32.0, 16.0, 8.0, 4.0),
                  gains=(0.35, 0.25, 0.18, 0.13, 0.09)) -> np.ndarray:
    """Multi-scale value noise, roughly zero-centered."""
    out = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    for i, (cell, gain) in enumerate(zip(cells, gains)):
        out = out + gain * (value_noise(x, y, cell, seed + 101 * i) - 0.5)
    return out


@dataclass
class _Polygon:
    verts: np.ndarray  # [k, 2], counter-clockwise
    delta: float

    def contains(self, x, y):
        inside = np.ones(np.broadcast(np.asarray(x), np.asarray(y)).shape, dtype=bool)
        k = len(self.verts)
        for i in range(k):
            ax, ay = self.verts[i]
            bx, by = self.verts[(i + 1) % k]
            inside &= (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0
        return inside


def _random_polygons(seed: int, extent: float, count: int):
    rng = np.random.default_rng(seed)
    polys = []
    for _ in range(count):
        cx, cy = rng.uniform(-0.1 * extent, 1.1 * extent, size=2)
        radius = rng.uniform(0.04, 0.22) * extent
        k = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        radii = radius * rng.uniform(0.6, 1.0, size=k)
        verts = np.column_stack([cx + radii * np.cos(angles),
                                 cy + radii * np.sin(angles)])
        polys.append(_Polygon(verts, float(rng.uniform(-0.3, 0.3))))
    return polys


class TextureField:
    """Deterministic gray-level field with polygon and noise-octave detail."""

    def __init__(self, seed: int, extent: float = 256.0, n_polygons: int = 14):
        self.seed = seed
        self.polys = _random_polygons(seed ^ 0x5EED, extent, n_polygons)

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        v = 0.5 + noise_octaves(x, y, self.seed)
        for poly in self.polys:
            v = v + poly.delta * poly.contains(x, y)
        return np.clip(v, 0.0, 1.0)


class TerrainScene:
    """Smooth height-field surface Z = g(X, Y) in the first camera's frame.

    Amplitudes and frequencies are kept small enough that every camera ray
    (slope bound well below the ray z-slope) crosses the surface exactly
    once, so there is no occlusion and Newton iteration converges to the
    unique intersection.
    """

    def __init__(self, seed: int, base_depth: float = 6.0, amplitude: float = 0.25,
                 n_waves: int = 3):
        rng = np.random.default_rng(seed)
        self.base = base_depth
        self.amp = amplitude * rng.uniform(0.7, 1.0, size=n_waves)
        self.amp *= amplitude / max(self.amp.sum(), 1e-9)
        self.fx = rng.uniform(0.25, 0.8, size=n_waves)
        self.fy = rng.uniform(0.25, 0.8, size=n_waves)
        self.px = rng.uniform(0, 2 * math.pi, size=n_waves)
        self.py = rng.uniform(0, 2 * math.pi, size=n_waves)

    def height(self, x, y):
        z = np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, self.base)
        for a, fx, fy, px, py in zip(self.amp, self.fx, self.fy, self.px, self.py):
            z = z + a * np.sin(fx * x + px) * np.sin(fy * y + py)
        return z

    def _grad(self, x, y):
        gx = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        gy = np.zeros_like(gx)
        for a, fx, fy, px, py in zip(self.amp, self.fx, self.fy, self.px, self.py):
            gx += a * fx * np.cos(fx * x + px) * np.sin(fy * y + py)
            gy += a * fy * np.sin(fx * x + px) * np.cos(fy * y + py)
        return gx, gy

    def ray_depths(self, origin: np.ndarray, dirs: np.ndarray,
                   iters: int = 40, tol: float = 1e-12) -> np.ndarray:
        """Solve (origin + s*d).z == g(.) per ray; returns s (camera depth).

        dirs are world-frame ray directions scaled so that s equals the
        camera-frame z depth (i.e. d = R_cam_to_world @ K^-1 @ [u, 1]).
        """
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        s = np.full(len(d), (self.base - o[2]))  # d_z ~ 1 by construction
        for _ in range(iters):
            x = o[0] + s * d[:, 0]
            y = o[1] + s * d[:, 1]
            z = o[2] + s * d[:, 2]
            f = z - self.height(x, y)
            gx, gy = self._grad(x, y)
            fp = d[:, 2] - gx * d[:, 0] - gy * d[:, 1]
            step = f / fp
            s = s - step
            if np.abs(step).max() < tol:
                break
        return s
