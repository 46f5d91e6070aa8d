"""Weak (rotation) and strong (resize, box crop, color jitter) point-cloud views.

A view keeps an index back into the original scene so that masks predicted on
one view can be carried onto another point by point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scenes import Scene

SCALE_RANGE = (0.8, 1.2)
CROP_FRACTION = (0.6, 1.0)
JITTER = 0.2
MIN_KEEP_FRACTION = 0.25
MAX_CROP_TRIES = 100


@dataclass
class AugmentedView:
    points: np.ndarray
    kept_index: np.ndarray
    params_applied: dict = field(default_factory=dict)
    superpoint_id: Optional[np.ndarray] = None  # dense ids within the view
    superpoint_kept: Optional[np.ndarray] = None  # original superpoint id of each view superpoint
    n_source: int = 0

    @property
    def n_points(self) -> int:
        return len(self.points)


def _attach_superpoints(view: AugmentedView, scene: Scene) -> AugmentedView:
    orig = scene.superpoint_id[view.kept_index]
    kept = np.unique(orig)
    view.superpoint_kept = kept
    view.n_source = scene.n_points
    view.superpoint_id = np.searchsorted(kept, orig)
    return view


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xA06]))


def weak_augment(scene: Scene, seed: int, angle: Optional[float] = None) -> AugmentedView:
    """Rotate about the vertical axis through the scene's xy centroid."""
    if angle is None:
        angle = float(_rng(seed).uniform(0.0, 2.0 * np.pi))
    pts = scene.points.copy()
    center = pts[:, :2].mean(axis=0)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    # written as a displacement so angle 0 is exactly the identity
    pts[:, :2] += (pts[:, :2] - center) @ (rot - np.eye(2)).T
    view = AugmentedView(pts, np.arange(scene.n_points), {"angle": angle})
    return _attach_superpoints(view, scene)


def strong_augment(
    scene: Scene,
    seed: int,
    scale: Optional[float] = None,
    box: Optional[tuple] = None,
    jitter: Optional[np.ndarray] = None,
) -> AugmentedView:
    """RandomResize, then RandomSizeCrop, then ColorJitter.

    ``scale``, ``box`` (lo, hi corner arrays in scaled coordinates) and
    ``jitter`` (per-channel offsets) override the sampled values.
    """
    rng = _rng(seed + 1)
    if scale is None:
        scale = float(rng.uniform(*SCALE_RANGE))
    xyz = scene.points[:, :3] * scale

    n = scene.n_points
    min_keep = max(1, int(np.ceil(MIN_KEEP_FRACTION * n)))
    if box is None:
        lo_all, hi_all = xyz.min(axis=0), xyz.max(axis=0)
        extent = hi_all - lo_all
        for _ in range(MAX_CROP_TRIES):
            frac = rng.uniform(*CROP_FRACTION, size=3)
            size = extent * frac
            lo = lo_all + rng.uniform(0.0, 1.0, size=3) * (extent - size)
            hi = lo + size
            inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
            if inside.sum() >= min_keep:
                break
        else:
            raise RuntimeError(f"crop failed {MAX_CROP_TRIES} times on scene {scene.scene_id}")
    else:
        lo, hi = (np.asarray(v, dtype=float) for v in box)
        inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
        if not inside.any():
            raise RuntimeError("crop box keeps no points")

    if jitter is None:
        jitter = rng.uniform(-JITTER, JITTER, size=3)
    jitter = np.asarray(jitter, dtype=float)

    kept = np.flatnonzero(inside)
    pts = np.column_stack([xyz[kept], np.clip(scene.points[kept, 3:] + jitter, 0.0, 1.0)])
    params = {"scale": scale, "box_lo": np.asarray(lo), "box_hi": np.asarray(hi), "jitter": jitter}
    return _attach_superpoints(AugmentedView(pts, kept, params), scene)


def restrict_mask(mask, view: AugmentedView) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != view.n_source:
        raise ValueError(f"mask length {len(mask)} does not match source scene size {view.n_source}")
    return mask[view.kept_index]


def identity_view(scene: Scene) -> AugmentedView:
    view = AugmentedView(scene.points, np.arange(scene.n_points), {})
    view.superpoint_id = scene.superpoint_id
    view.superpoint_kept = np.arange(scene.n_superpoints)
    view.n_source = scene.n_points
    return view
