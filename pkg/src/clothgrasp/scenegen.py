"""Synthetic collar scenes: a deformed annulus with labelled edge bands,
a bulged depth surface with fold ridges, and shaded RGB."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scene import (CLASS_INNER_EDGE, CLASS_OTHER_CLOTHING, CLASS_OUTER_EDGE,
                    Scene)


@dataclass
class SceneGenConfig:
    height: int = 128
    width: int = 128
    band_frac: float = 0.06          # outer edge band width, fraction of min extent
    inner_frac: float = 0.55         # hole radius as a fraction of the local outer radius
    radius_frac: float = 0.35        # base outer radius, fraction of min extent
    fold_count_range: tuple = (3, 6)
    fold_amp_range: tuple = (0.04, 0.10)
    max_total_amp: float = 0.18
    plant_flat: bool = False
    flat_span_deg: float = 50.0
    flat_jitter_deg: float = 10.0
    depth_base_mm: float = 800.0
    depth_amp_mm: float = 60.0
    depth_noise_mm: float = 2.0
    background_depth_mm: float = 1400.0
    rgb_noise: float = 0.02
    rgb_radial_shading: float = 0.22   # how strongly colour tracks the bulge
    rgb_ridge_shading: float = 0.9     # how visible the folds are in colour
    invalid_frac: float = 0.0

    def validate(self):
        if self.height % 16 or self.width % 16:
            raise ValueError(f"extents must be divisible by 16, got {self.height}x{self.width}")
        if self.band_frac <= 0:
            raise ValueError("band width fraction must be positive")
        if not 0 < self.inner_frac < 1:
            raise ValueError("inner fraction must lie in (0,1)")
        band_px = self.band_frac * min(self.height, self.width)
        min_annulus = (1 - self.inner_frac) * self.radius_frac * min(self.height, self.width) * (1 - self.max_total_amp)
        if band_px >= min_annulus:
            raise ValueError(
                f"band ({band_px:.1f}px) exceeds the annulus width (~{min_annulus:.1f}px)")


@dataclass
class FlatArcInfo:
    """Planted straight-arc spans, angles about the generator centre
    (atan2 with y pointing down), radians."""
    center_y: float
    center_x: float
    left_start: float
    left_end: float
    right_start: float
    right_end: float

    def contains(self, side: str, angle: float) -> bool:
        start, end = (self.left_start, self.left_end) if side == "left" else (self.right_start, self.right_end)
        mid = (start + end) / 2.0
        half = (end - start) / 2.0
        delta = (angle - mid + math.pi) % (2 * math.pi) - math.pi
        return abs(delta) <= half


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _chord_radius(phi, phi1, r1, phi2, r2):
    # polar form of the straight line through (r1,phi1) and (r2,phi2)
    num = r1 * r2 * np.sin(phi2 - phi1)
    den = r2 * np.sin(phi2 - phi) + r1 * np.sin(phi - phi1)
    return num / den


def gen_scene(config: SceneGenConfig, rng: np.random.Generator):
    """Generate one scene; returns (Scene, FlatArcInfo | None).

    Deterministic for a given rng state: every draw happens in a fixed
    order regardless of configuration values.
    """
    config.validate()
    h, w = config.height, config.width
    mn = min(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    n_folds = int(rng.integers(config.fold_count_range[0], config.fold_count_range[1] + 1))
    modes = rng.integers(2, 7, size=n_folds)
    amps = rng.uniform(config.fold_amp_range[0], config.fold_amp_range[1], size=n_folds)
    phases = rng.uniform(0, 2 * math.pi, size=n_folds)
    if amps.sum() > config.max_total_amp:
        amps *= config.max_total_amp / amps.sum()
    jitter = rng.uniform(-1.0, 1.0, size=2) * math.radians(config.flat_jitter_deg)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)

    r0 = config.radius_frac * mn

    def rho_of(angles):
        out = np.full(np.shape(angles), r0)
        for m, a, p in zip(modes, amps, phases):
            out = out + r0 * a * np.cos(m * angles + p)
        return out

    rho = rho_of(phi)

    info = None
    if config.plant_flat:
        half = math.radians(config.flat_span_deg) / 2.0
        right_mid = jitter[0]
        left_mid = math.pi + jitter[1]
        for mid in (right_mid, left_mid):
            r1 = float(rho_of(np.array(mid - half)))
            r2 = float(rho_of(np.array(mid + half)))
            local = _wrap(phi - mid)
            inside = np.abs(local) <= half
            chord = _chord_radius(local, -half, r1, half, r2)
            rho = np.where(inside, chord, rho)
        info = FlatArcInfo(cy, cx,
                           left_start=left_mid - half, left_end=left_mid + half,
                           right_start=right_mid - half, right_end=right_mid + half)

    garment = r <= rho
    band_px = config.band_frac * mn
    dist_out = ndimage.distance_transform_edt(garment)
    label = np.zeros((h, w), dtype=np.uint8)
    label[garment] = CLASS_INNER_EDGE
    label[garment & (dist_out <= band_px)] = CLASS_OUTER_EDGE
    label[garment & (r <= config.inner_frac * rho)] = CLASS_OTHER_CLOTHING
    present = set(np.unique(label))
    if present != {0, 1, 2, 3}:
        raise ValueError(f"degenerate geometry: classes {sorted(present)} only; "
                         "band probably exceeds the annulus")

    # depth: background plane far, garment bulged toward the camera with
    # fold ridges following the boundary perturbations
    t = np.clip(r / np.maximum(rho, 1e-9), 0.0, 1.0)
    ridge = np.zeros((h, w))
    for m, a, p in zip(modes, amps, phases):
        ridge += a * np.cos(m * phi + p)
    ridge *= np.sin(np.pi * t)  # fades at centre and rim
    depth = np.full((h, w), config.background_depth_mm)
    depth += 40.0 * (yy / max(h - 1, 1) - 0.5)  # gentle background tilt
    bulge = config.depth_amp_mm * (1.0 - t * t) + 3.0 * config.depth_amp_mm * ridge
    depth = np.where(garment, config.depth_base_mm - bulge, depth)
    depth += rng.normal(0.0, config.depth_noise_mm, (h, w))
    depth = np.clip(np.rint(depth), 1, 65535).astype(np.uint16)
    if config.invalid_frac > 0:
        depth[rng.random((h, w)) < config.invalid_frac] = 0

    # rgb: matte garment against a darker backdrop, with shading that
    # tracks the bulge so folds are faintly visible in colour too
    shading = 0.72 + config.rgb_radial_shading * (1.0 - t) + config.rgb_ridge_shading * ridge
    albedo = np.array([0.82, 0.80, 0.76])
    bg = np.array([0.18, 0.22, 0.28])
    rgb = np.empty((3, h, w))
    for c in range(3):
        rgb[c] = np.where(garment, albedo[c] * shading, bg[c] * (1.0 + 0.2 * (yy / max(h - 1, 1) - 0.5)))
    rgb += rng.normal(0.0, config.rgb_noise, (3, h, w))
    rgb = np.clip(rgb, 0.0, 1.0)

    return Scene(rgb=rgb, depth=depth, label=label), info


def gen_scenes(config: SceneGenConfig, count: int, seed: int):
    """Generate count scenes with per-scene child seeds; returns
    (scenes, infos)."""
    root = np.random.SeedSequence(seed)
    scenes, infos = [], []
    for child in root.spawn(count):
        scene, info = gen_scene(config, np.random.default_rng(child))
        scenes.append(scene)
        infos.append(info)
    return scenes, infos
