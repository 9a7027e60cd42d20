"""Synthetic pair rendering, corpus generation and on-disk storage.

A corpus directory holds a manifest.json plus one subdirectory per pair
(two 8-bit grayscale PNGs and a truth.json).  All generation is a pure
function of the corpus seed, so re-running produces byte-identical files.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import asdict

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import (
    CameraTruth,
    GeometryError,
    Homography,
    HomographyBounds,
    RelativePose,
    SyntheticPair,
    grid_cell_centers,
    gt_correspondence,
    sample_homography,
)
from .texture import TerrainScene, TextureField

DEFAULT_BOUNDS = HomographyBounds(rotation_deg=25.0, scale=0.22, tx=20.0,
                                  ty=20.0, perspective=4e-4)


def pad_to_multiple(image: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Reflect-pad bottom/right so both dims divide `multiple`."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw)), mode="reflect")


def _pixel_centers(size: tuple[int, int]) -> np.ndarray:
    return grid_cell_centers(size, 1).reshape(-1, 2)


def _add_noise(img: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma <= 0:
        return np.clip(img, 0.0, 1.0)
    return np.clip(img + rng.normal(scale=sigma, size=img.shape), 0.0, 1.0)


def render_homography_pair(seed: int, size: tuple[int, int] = (256, 256),
                           bounds: HomographyBounds = DEFAULT_BOUNDS,
                           noise_sigma: float = 0.02) -> SyntheticPair:
    """Render both views of one analytic texture related by a random warp."""
    h, w = size
    tex = TextureField(seed, extent=float(max(h, w)))
    centers = _pixel_centers(size)
    image_a = tex(centers[:, 0], centers[:, 1]).reshape(h, w)

    truth = sample_homography(seed + 1, bounds, size)
    inv = truth.inverse()
    ones = np.ones((len(centers), 1))
    back = np.concatenate([centers, ones], axis=1) @ inv.m.T
    back = back[:, :2] / back[:, 2:3]
    image_b = tex(back[:, 0], back[:, 1]).reshape(h, w)

    rng = np.random.default_rng(seed + 2)
    image_a = _add_noise(image_a, noise_sigma, rng)
    image_b = _add_noise(image_b, noise_sigma, rng)
    return SyntheticPair(image_a, image_b, truth, seed=seed)


def render_two_view_pair(seed: int, size: tuple[int, int] = (256, 256),
                         noise_sigma: float = 0.02,
                         max_retries: int = 32) -> SyntheticPair:
    """Render two views of a textured terrain surface with exact depth.

    The world frame equals camera A's frame and the baseline has unit
    length, so the stored unit translation is metric w.r.t. the depths.
    """
    h, w = size
    f = 1.2 * max(h, w)
    k = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    kinv = np.linalg.inv(k)
    centers = _pixel_centers(size)
    rays_a = np.concatenate([centers, np.ones((len(centers), 1))], axis=1) @ kinv.T

    for attempt in range(max_retries):
        rng = np.random.default_rng(seed * 7919 + attempt)
        scene = TerrainScene(seed * 131 + attempt, base_depth=rng.uniform(5.0, 7.0))

        angle = math.radians(rng.uniform(2.0, 7.0))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        kx = np.array([[0, -axis[2], axis[1]],
                       [axis[2], 0, -axis[0]],
                       [-axis[1], axis[0], 0]])
        r = np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx
        t = rng.normal(size=3) * np.array([1.0, 1.0, 0.3])  # mostly sideways
        t /= np.linalg.norm(t)
        pose = RelativePose(r, t)

        depth_a = scene.ray_depths(np.zeros(3), rays_a).reshape(h, w)
        origin_b = -r.T @ t
        rays_b = rays_a @ r  # == (r.T @ ray.T).T
        depth_b = scene.ray_depths(origin_b, rays_b).reshape(h, w)

        truth = CameraTruth(pose, k, depth_a, depth_b)
        pair = SyntheticPair(np.zeros(size), np.zeros(size), truth, seed=seed)
        _, valid = gt_correspondence(pair, stride=8)
        if valid.mean() < 0.5:
            continue

        tex_scale = f / scene.base
        tex = TextureField(seed, extent=float(max(h, w)))

        surf_a = rays_a * depth_a.reshape(-1, 1)
        image_a = tex(surf_a[:, 0] * tex_scale + w / 2.0,
                      surf_a[:, 1] * tex_scale + h / 2.0).reshape(h, w)
        surf_b = origin_b + rays_b * depth_b.reshape(-1, 1)
        image_b = tex(surf_b[:, 0] * tex_scale + w / 2.0,
                      surf_b[:, 1] * tex_scale + h / 2.0).reshape(h, w)

        noise_rng = np.random.default_rng(seed * 7919 + attempt + 10_000)
        pair.image_a = _add_noise(image_a, noise_sigma, noise_rng)
        pair.image_b = _add_noise(image_b, noise_sigma, noise_rng)
        return pair
    raise GeometryError("render_two_view_pair: retry budget exhausted")


def render_user_image_pair(image: np.ndarray, seed: int,
                           bounds: HomographyBounds = DEFAULT_BOUNDS,
                           noise_sigma: float = 0.0) -> SyntheticPair:
    """Warp a user-supplied grayscale image by a sampled homography."""
    h, w = image.shape[:2]
    truth = sample_homography(seed + 1, bounds, (h, w))
    inv = truth.inverse()
    centers = _pixel_centers((h, w))
    ones = np.ones((len(centers), 1))
    back = np.concatenate([centers, ones], axis=1) @ inv.m.T
    back = back[:, :2] / back[:, 2:3]
    coords = np.stack([back[:, 1] - 0.5, back[:, 0] - 0.5])
    image_b = ndimage.map_coordinates(image, coords, order=3,
                                      mode="reflect").reshape(h, w)
    rng = np.random.default_rng(seed + 2)
    return SyntheticPair(_add_noise(image.copy(), noise_sigma, rng),
                         _add_noise(image_b, noise_sigma, rng),
                         truth, seed=seed)


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype=blob["dtype"]).reshape(blob["shape"]).copy()


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_pair(pair: SyntheticPair, pair_dir) -> None:
    os.makedirs(pair_dir, exist_ok=True)
    save_image(pair.image_a, os.path.join(pair_dir, "image_a.png"))
    save_image(pair.image_b, os.path.join(pair_dir, "image_b.png"))
    if pair.is_homography:
        truth = {"mode": "homography", "m": pair.truth.m.tolist(),
                 "seed": pair.seed}
    else:
        ct = pair.truth
        truth = {"mode": "two_view", "k": ct.k.tolist(),
                 "r": ct.pose.r.tolist(), "t": ct.pose.t.tolist(),
                 "depth_a": _encode_array(ct.depth_a),
                 "depth_b": _encode_array(ct.depth_b) if ct.depth_b is not None else None,
                 "seed": pair.seed}
    with open(os.path.join(pair_dir, "truth.json"), "w") as f:
        json.dump(truth, f, sort_keys=True, separators=(",", ":"))


def load_pair(pair_dir) -> SyntheticPair:
    image_a = load_image(os.path.join(pair_dir, "image_a.png"))
    image_b = load_image(os.path.join(pair_dir, "image_b.png"))
    with open(os.path.join(pair_dir, "truth.json")) as f:
        blob = json.load(f)
    if blob["mode"] == "homography":
        truth = Homography(np.array(blob["m"]))
    else:
        depth_b = _decode_array(blob["depth_b"]) if blob.get("depth_b") else None
        truth = CameraTruth(RelativePose(np.array(blob["r"]), np.array(blob["t"])),
                            np.array(blob["k"]), _decode_array(blob["depth_a"]),
                            depth_b)
    return SyntheticPair(image_a, image_b, truth, seed=blob.get("seed", 0))


def generate_corpus(out_dir, n_pairs: int, mode: str = "homography",
                    seed: int = 0, size: tuple[int, int] = (256, 256),
                    bounds: HomographyBounds = DEFAULT_BOUNDS,
                    noise_sigma: float = 0.02, image_dir=None) -> str:
    """Write n_pairs synthetic pairs; fully determined by the seed."""
    if mode not in ("homography", "two_view"):
        raise GeometryError(f"unknown corpus mode {mode!r}")
    os.makedirs(out_dir, exist_ok=True)

    user_images = None
    if image_dir is not None:
        names = sorted(n for n in os.listdir(image_dir)
                       if n.lower().endswith((".png", ".jpg", ".jpeg")))
        if not names:
            raise GeometryError(f"no images found in {image_dir}")
        user_images = [os.path.join(image_dir, n) for n in names]

    manifest = {"version": 1, "mode": mode, "n_pairs": n_pairs, "seed": seed,
                "size": list(size), "noise_sigma": noise_sigma,
                "bounds": asdict(bounds), "source": "user" if user_images else "procedural"}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)

    for i in range(n_pairs):
        pair_seed = seed * 100_003 + i
        if user_images is not None:
            img = load_image(user_images[i % len(user_images)])
            img = _fit_image(img, size)
            pair = render_user_image_pair(img, pair_seed, bounds, noise_sigma)
        elif mode == "homography":
            pair = render_homography_pair(pair_seed, size, bounds, noise_sigma)
        else:
            pair = render_two_view_pair(pair_seed, size, noise_sigma)
        save_pair(pair, os.path.join(out_dir, f"pair_{i:04d}"))
    return out_dir


def _fit_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    pil = Image.fromarray(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8))
    pil = pil.resize((size[1], size[0]), Image.BICUBIC)
    return np.asarray(pil, dtype=np.float64) / 255.0


def corpus_pair_dirs(corpus_dir) -> list[str]:
    names = sorted(n for n in os.listdir(corpus_dir) if n.startswith("pair_"))
    return [os.path.join(corpus_dir, n) for n in names]


def load_corpus_manifest(corpus_dir) -> dict:
    with open(os.path.join(corpus_dir, "manifest.json")) as f:
        return json.load(f)
