"""Deterministic synthetic scenes, modality maps, and masks.

Scenes are 32x32 grayscale images of 1-3 flat shapes (circle, rectangle,
triangle) over a smooth low-frequency background, with analytically
derived segmentation and layer-order depth. Everything is a pure function
of (seed, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rngstream import stream

CLASS_BACKGROUND = 0
CLASS_CIRCLE = 1
CLASS_RECT = 2
CLASS_TRIANGLE = 3
NUM_SEG_CLASSES = 4

MODALITIES = ("edge", "sketch", "segmentation", "depth", "class_label")

EDGE_THRESHOLD = 0.2
SKETCH_SIGMA = 1.0

SPLIT_SEEDS = {
    "train": range(0, 10_000),
    "val": range(10_000, 11_000),
    "test": range(11_000, 12_000),
}


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    background_range: tuple = (0.05, 0.35)
    intensity_range: tuple = (0.55, 1.0)
    min_visible_area: int = 8
    max_retries: int = 50


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # [1,S,S] float32 in [0,1]
    seg: np.ndarray  # [S,S] int64 class ids
    depth: np.ndarray  # [S,S] float32, 0 on background
    class_count_label: int
    seed: int


@dataclass(frozen=True)
class MaskSpec:
    mode: str  # rect | brush | border | half
    ratio: float
    seed: int


class PlacementError(RuntimeError):
    pass


def _smooth_background(rng, size, lo, hi):
    """Bilinear upsample of a coarse random grid: low-frequency noise."""
    coarse = rng.uniform(lo, hi, size=(5, 5))
    xs = np.linspace(0, 4, size)
    i0 = np.clip(xs.astype(int), 0, 3)
    frac = xs - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return cols


def _shape_mask(rng, kind, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == CLASS_CIRCLE:
        r = rng.uniform(3.0, size / 4)
        cx = rng.uniform(r, size - 1 - r)
        cy = rng.uniform(r, size - 1 - r)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == CLASS_RECT:
        w = rng.uniform(4.0, size / 2)
        h = rng.uniform(4.0, size / 2)
        x0 = rng.uniform(0, size - 1 - w)
        y0 = rng.uniform(0, size - 1 - h)
        return (xx >= x0) & (xx <= x0 + w) & (yy >= y0) & (yy <= y0 + h)
    if kind == CLASS_TRIANGLE:
        for _ in range(10):
            pts = rng.uniform(1, size - 2, size=(3, 2))
            area = 0.5 * abs(
                (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
            )
            if area >= 25:
                break
        d = []
        for i in range(3):
            p, q = pts[i], pts[(i + 1) % 3]
            d.append((xx - p[0]) * (q[1] - p[1]) - (yy - p[1]) * (q[0] - p[0]))
        d = np.stack(d)
        return np.all(d >= 0, axis=0) | np.all(d <= 0, axis=0)
    raise ValueError(f"unknown shape kind {kind}")


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    rng = stream(seed, "scene")
    s = cfg.size
    image = _smooth_background(rng, s, *cfg.background_range)
    seg = np.zeros((s, s), dtype=np.int64)
    depth = np.zeros((s, s), dtype=np.float64)
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    for layer in range(n):
        placed = False
        for _ in range(cfg.max_retries):
            kind = int(rng.integers(CLASS_CIRCLE, CLASS_TRIANGLE + 1))
            mask = _shape_mask(rng, kind, s)
            if mask.sum() < cfg.min_visible_area:
                continue
            intensity = rng.uniform(*cfg.intensity_range)
            # nearer shapes are drawn later and get a larger depth value
            image = np.where(mask, intensity, image)
            seg = np.where(mask, kind, seg)
            depth = np.where(mask, (layer + 1) / n, depth)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place shape for seed {seed}")
    return Scene(
        image=image.astype(np.float32)[None],
        seg=seg,
        depth=depth.astype(np.float32),
        class_count_label=n,
        seed=seed,
    )


def sobel_magnitude(image):
    """Gradient magnitude of a [S,S] image, normalized so a unit step ~ 1."""
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 4.0
    ky = kx.T
    padded = np.pad(image.astype(np.float64), 1, mode="edge")
    s = image.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = (win * kx).sum(axis=(2, 3))
    gy = (win * ky).sum(axis=(2, 3))
    return np.sqrt(gx * gx + gy * gy)[:s, :s]


def gaussian_blur(image, sigma):
    radius = 3
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs * xs) / (2 * sigma * sigma))
    kernel /= kernel.sum()
    padded = np.pad(image.astype(np.float64), radius, mode="constant")
    tmp = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, tmp)
    return out


def extract_modality(scene: Scene, modality: str):
    if modality == "edge":
        mag = sobel_magnitude(scene.image[0])
        return (mag > EDGE_THRESHOLD).astype(np.float32)[None]
    if modality == "sketch":
        edge = sobel_magnitude(scene.image[0]) > EDGE_THRESHOLD
        sk = gaussian_blur(edge.astype(np.float64), SKETCH_SIGMA)
        return np.clip(sk, 0.0, 1.0).astype(np.float32)[None]
    if modality == "segmentation":
        onehot = np.zeros((NUM_SEG_CLASSES,) + scene.seg.shape, dtype=np.float32)
        for k in range(NUM_SEG_CLASSES):
            onehot[k] = scene.seg == k
        return onehot
    if modality == "depth":
        return scene.depth[None].astype(np.float32)
    if modality == "class_label":
        return scene.class_count_label
    raise ValueError(f"unknown modality {modality!r}")


def modality_channels(modality: str) -> int:
    return {"edge": 1, "sketch": 1, "segmentation": NUM_SEG_CLASSES, "depth": 1}[modality]


def _rect_mask(rng, ratio, s):
    target = int(round(ratio * s * s))
    if target <= 0:
        return np.zeros((s, s), dtype=np.float32)
    if target >= s * s:
        return np.ones((s, s), dtype=np.float32)
    aspect = rng.uniform(0.5, 2.0)
    h = int(np.clip(round(np.sqrt(target * aspect)), 1, s))
    w = int(np.clip(int(np.ceil(target / h)), 1, s))
    if h * w < target:
        h = int(np.clip(int(np.ceil(target / w)), 1, s))
    y0 = int(rng.integers(0, s - h + 1))
    x0 = int(rng.integers(0, s - w + 1))
    block = np.zeros(h * w, dtype=np.float32)
    block[:target] = 1.0  # trim the block so the realized ratio is exact
    mask = np.zeros((s, s), dtype=np.float32)
    mask[y0 : y0 + h, x0 : x0 + w] = block.reshape(h, w)
    return mask


def _brush_mask(rng, ratio, s):
    target = ratio * s * s
    mask = np.zeros((s, s), dtype=np.float32)
    guard = 0
    while mask.sum() < target and guard < 10_000:
        guard += 1
        y, x = rng.uniform(0, s, size=2)
        thickness = int(rng.integers(1, 4))
        steps = int(rng.integers(4, 12))
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(steps):
            yi, xi = int(y), int(x)
            y0, y1 = max(0, yi - thickness + 1), min(s, yi + thickness)
            x0, x1 = max(0, xi - thickness + 1), min(s, xi + thickness)
            mask[y0:y1, x0:x1] = 1.0
            angle += rng.uniform(-0.6, 0.6)
            y = np.clip(y + 2.0 * np.sin(angle), 0, s - 1)
            x = np.clip(x + 2.0 * np.cos(angle), 0, s - 1)
            if mask.sum() >= target:
                break
    # trim overshoot so the realized ratio is unbiased (keeps the ratio
    # distribution uniform when the requested ratio is uniform)
    excess = int(mask.sum() - round(target))
    if excess > 0:
        flat = mask.reshape(-1)
        painted = np.flatnonzero(flat)
        flat[painted[-excess:]] = 0.0
    return mask


def _border_mask(rng, ratio, s):
    mask = np.zeros((s, s), dtype=np.float32)
    target = int(round(ratio * s * s))
    # grow a frame ring by ring, then single border lines for fine control
    sides = []
    lo, hi = 0, s - 1
    while lo <= hi:
        sides.extend(
            [("top", lo), ("bottom", hi), ("left", lo), ("right", hi)]
        )
        lo += 1
        hi -= 1
    for side, idx in sides:
        if mask.sum() >= target:
            break
        if side == "top":
            mask[idx, :] = 1.0
        elif side == "bottom":
            mask[idx, :] = 1.0
        elif side == "left":
            mask[:, idx] = 1.0
        else:
            mask[:, idx] = 1.0
    return mask


def _half_mask(rng, s):
    side = rng.choice(["left", "right", "top", "bottom"])
    mask = np.zeros((s, s), dtype=np.float32)
    if side == "left":
        mask[:, : s // 2] = 1.0
    elif side == "right":
        mask[:, s // 2 :] = 1.0
    elif side == "top":
        mask[: s // 2, :] = 1.0
    else:
        mask[s // 2 :, :] = 1.0
    return mask


def generate_mask(spec: MaskSpec, size: int):
    """Binary [1,S,S] mask; 1 marks the region to complete."""
    if not 0.0 <= spec.ratio <= 1.0:
        raise ValueError(f"mask ratio {spec.ratio} outside [0,1]")
    rng = stream(spec.seed, "mask", spec.mode)
    if spec.mode == "rect":
        mask = _rect_mask(rng, spec.ratio, size)
    elif spec.mode == "brush":
        mask = _brush_mask(rng, spec.ratio, size)
    elif spec.mode == "border":
        mask = _border_mask(rng, spec.ratio, size)
    elif spec.mode == "half":
        mask = _half_mask(rng, size)
    else:
        raise ValueError(f"unknown mask mode {spec.mode!r}")
    realized = float(mask.mean())
    requested = 0.5 if spec.mode == "half" else spec.ratio
    if requested not in (0.0, 1.0) and abs(realized - requested) > 0.05:
        raise ValueError(
            f"mask mode {spec.mode} realized ratio {realized:.3f} too far from {requested:.3f}"
        )
    return mask[None]


def random_mask(seed: int, size: int):
    """Training/evaluation mask with ratio ~ Uniform(0,1)."""
    rng = stream(seed, "maskproto")
    ratio = float(rng.uniform(0.0, 1.0))
    mode = str(rng.choice(["rect", "brush"]))
    return generate_mask(MaskSpec(mode=mode, ratio=ratio, seed=seed), size)


def split_seeds(split: str):
    if split not in SPLIT_SEEDS:
        raise ValueError(f"unknown split {split!r}")
    return SPLIT_SEEDS[split]
