"""Deterministic synthetic image features and RoI pooling.

Stands in for a frozen pretrained backbone: each grid cell carries the sum
of per-class prototype vectors of the objects covering it, a fixed
positional encoding, and seeded Gaussian noise. Everything is a pure
function of (scene, seed), so features are recomputable in any pipeline
stage without storing them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import Box


@dataclass(frozen=True)
class FeatureMap:
    grid: np.ndarray  # (G_h, G_w, d_f)
    stride: float  # pixels per cell
    image_size: tuple[int, int]  # (width, height)

    @property
    def integral(self) -> np.ndarray:
        """Summed-area table over cells, cached lazily; shape (G_h+1, G_w+1, d_f)."""
        cached = getattr(self, "_integral", None)
        if cached is None:
            gh, gw, d = self.grid.shape
            table = np.zeros((gh + 1, gw + 1, d))
            table[1:, 1:, :] = self.grid.cumsum(axis=0).cumsum(axis=1)
            object.__setattr__(self, "_integral", table)
            cached = table
        return cached


@dataclass(frozen=True)
class FeatureModel:
    """Prototype table + rendering parameters, all derived from one seed."""

    seed: int
    num_classes: int
    feature_dim: int = 16
    stride: float = 8.0
    noise_sigma: float = 0.05
    positional_scale: float = 0.1

    @property
    def prototypes(self) -> np.ndarray:
        cached = getattr(self, "_prototypes", None)
        if cached is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xFEA7]))
            raw = rng.standard_normal((self.num_classes, self.feature_dim))
            protos = raw / np.linalg.norm(raw, axis=1, keepdims=True)
            object.__setattr__(self, "_prototypes", protos)
            cached = protos
        return cached

    def _positional(self, gh: int, gw: int) -> np.ndarray:
        pe = np.zeros((gh, gw, self.feature_dim))
        rows = np.arange(gh)[:, None] / max(gh, 1)
        cols = np.arange(gw)[None, :] / max(gw, 1)
        pe[:, :, 0] = np.sin(2 * np.pi * rows)
        pe[:, :, 1] = np.cos(2 * np.pi * rows)
        pe[:, :, 2] = np.sin(2 * np.pi * cols)
        pe[:, :, 3] = np.cos(2 * np.pi * cols)
        return self.positional_scale * pe

    def render(self, scene, noise_seed: int | None = None) -> FeatureMap:
        """Render a scene's feature map; noise defaults to the scene's own seed.

        A cell is covered by an object when its center falls inside the
        object's box, the same rule roi_pool uses.
        """
        width, height = scene.canvas
        gw = int(round(width / self.stride))
        gh = int(round(height / self.stride))
        grid = self._positional(gh, gw).copy()
        cx = (np.arange(gw) + 0.5) * self.stride
        cy = (np.arange(gh) + 0.5) * self.stride
        for obj in scene.objects:
            b = obj.box
            col = (cx > b.x_min) & (cx < b.x_max)
            row = (cy > b.y_min) & (cy < b.y_max)
            if col.any() and row.any():
                grid[np.ix_(row, col)] += self.prototypes[obj.fine_class]
        if self.noise_sigma > 0:
            seed = scene.seed if noise_seed is None else noise_seed
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, seed, 0x401E]))
            grid += rng.normal(0.0, self.noise_sigma, size=grid.shape)
        return FeatureMap(grid=grid, stride=self.stride, image_size=(width, height))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "stride": self.stride,
            "noise_sigma": self.noise_sigma,
            "positional_scale": self.positional_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureModel":
        return cls(
            seed=int(d["seed"]),
            num_classes=int(d["num_classes"]),
            feature_dim=int(d["feature_dim"]),
            stride=float(d["stride"]),
            noise_sigma=float(d["noise_sigma"]),
            positional_scale=float(d["positional_scale"]),
        )


def _cell_range(fmap: FeatureMap, box: Box) -> tuple[int, int, int, int]:
    """Index range [r0, r1) x [c0, c1) of cells whose centers fall in the box.

    Falls back to the single cell nearest the box center when no center
    is strictly inside.
    """
    gh, gw, _ = fmap.grid.shape
    s = fmap.stride
    # strict interior: center (c+0.5)*s must satisfy x_min < center < x_max,
    # matching the coverage rule used when rendering
    c0 = int(np.floor(box.x_min / s - 0.5)) + 1
    c1 = int(np.ceil(box.x_max / s - 0.5))
    r0 = int(np.floor(box.y_min / s - 0.5)) + 1
    r1 = int(np.ceil(box.y_max / s - 0.5))
    c0, c1 = max(0, c0), min(gw, c1)
    r0, r1 = max(0, r0), min(gh, r1)
    if r0 >= r1 or c0 >= c1:
        bx, by = box.center
        c = int(np.clip(bx / s - 0.5, 0, gw - 1))
        r = int(np.clip(by / s - 0.5, 0, gh - 1))
        return r, r + 1, c, c + 1
    return r0, r1, c0, c1


def roi_pool(fmap: FeatureMap, box: Box) -> np.ndarray:
    """Mean of covered cells ++ (cx, cy, w, h) normalized by image size."""
    r0, r1, c0, c1 = _cell_range(fmap, box)
    pooled = fmap.grid[r0:r1, c0:c1].mean(axis=(0, 1))
    width, height = fmap.image_size
    cx, cy = box.center
    geom = np.array([cx / width, cy / height, box.width / width, box.height / height])
    return np.concatenate([pooled, geom])


def roi_pool_many(fmap: FeatureMap, boxes: list[Box]) -> np.ndarray:
    """Stack of roi_pool results, (len(boxes), d_f + 4)."""
    if not boxes:
        return np.zeros((0, fmap.grid.shape[2] + 4))
    return np.stack([roi_pool(fmap, b) for b in boxes])


def roi_pool_rects(fmap: FeatureMap, rects: np.ndarray) -> np.ndarray:
    """Vectorized mean pooling for many boxes given as an (M, 4) corner array.

    Uses the summed-area table; equivalent to roi_pool's pooled part (the
    geometry columns are appended the same way).
    """
    m = rects.shape[0]
    if m == 0:
        return np.zeros((0, fmap.grid.shape[2] + 4))
    gh, gw, d = fmap.grid.shape
    s = fmap.stride
    c0 = np.floor(rects[:, 0] / s - 0.5).astype(int) + 1
    c1 = np.ceil(rects[:, 2] / s - 0.5).astype(int)
    r0 = np.floor(rects[:, 1] / s - 0.5).astype(int) + 1
    r1 = np.ceil(rects[:, 3] / s - 0.5).astype(int)
    c0, c1 = np.clip(c0, 0, gw), np.clip(c1, 0, gw)
    r0, r1 = np.clip(r0, 0, gh), np.clip(r1, 0, gh)
    empty = (r0 >= r1) | (c0 >= c1)
    if empty.any():
        bx = 0.5 * (rects[empty, 0] + rects[empty, 2])
        by = 0.5 * (rects[empty, 1] + rects[empty, 3])
        cc = np.clip(bx / s - 0.5, 0, gw - 1).astype(int)
        rr = np.clip(by / s - 0.5, 0, gh - 1).astype(int)
        c0[empty], c1[empty] = cc, cc + 1
        r0[empty], r1[empty] = rr, rr + 1
    table = fmap.integral
    sums = (
        table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0]
    )
    counts = ((r1 - r0) * (c1 - c0)).astype(np.float64)
    pooled = sums / counts[:, None]
    width, height = fmap.image_size
    cx = 0.5 * (rects[:, 0] + rects[:, 2]) / width
    cy = 0.5 * (rects[:, 1] + rects[:, 3]) / height
    w = (rects[:, 2] - rects[:, 0]) / width
    h = (rects[:, 3] - rects[:, 1]) / height
    return np.concatenate([pooled, np.stack([cx, cy, w, h], axis=1)], axis=1)
