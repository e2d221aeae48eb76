"""Grasp point and direction selection from a segmentation mask.

Pipeline: trace the outer- and inner-edge regions into ordered contours,
match every outer point to its nearest inner point (these pairs define
direction vectors), score each outer point by a variance-style flatness
of the direction products over a contour window, and pick the flattest
point per image side.  The selected pixel is lifted to the robot frame
through a pinhole camera and the approach direction is fixed at 45
degrees to the robot's +x axis.

Coordinate conventions: pixels are (row, col); contour points live in a
centroid-origin frame with x = col - centroid_col, y = row - centroid_row
(y grows downward, matching image coordinates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scene import (CLASS_INNER_EDGE, CLASS_OUTER_EDGE, CLOTHING_CLASSES,
                    Scene)


class RegionNotFound(ValueError):
    pass


MIN_REGION_PIXELS = 20

# Moore neighborhood in clockwise order, starting north (image y down)
_NEIGHBORS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


@dataclass
class Contour:
    """Closed ordered pixel contour; consecutive entries are 8-neighbors."""
    pixels: np.ndarray      # (N,2) int (row, col)
    points: np.ndarray      # (N,2) float centroid-frame (x, y)
    class_id: int


@dataclass
class DirectionSample:
    outer_index: int
    inner_index: int
    l_eur: float
    k_sin: float
    k_cos: float


@dataclass
class GraspCandidate:
    side: str               # "left" | "right"
    outer_index: int
    pixel: tuple            # (row, col)
    point: tuple            # centroid-frame (x, y)
    k_sin: float
    k_cos: float
    flatness: float


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected component of a boolean mask."""
    labeled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    counts = np.bincount(labeled.ravel())
    counts[0] = 0
    return labeled == counts.argmax()


def moore_trace(component: np.ndarray) -> np.ndarray:
    """Trace the outer boundary of an 8-connected component clockwise.

    Starts at the topmost-then-leftmost pixel; terminates on re-entering
    the start pixel from the initial backtrack direction (Jacob's
    criterion).  Returns (N,2) int (row, col) without repeating the start.
    """
    rows, cols = np.nonzero(component)
    if rows.size == 0:
        raise RegionNotFound("empty component")
    order = np.lexsort((cols, rows))
    start = (int(rows[order[0]]), int(cols[order[0]]))
    if rows.size == 1:
        return np.array([start])

    h, w = component.shape

    def filled(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and component[p]

    contour = [start]
    current = start
    backtrack = (start[0], start[1] - 1)  # west of the start is outside
    first_transition = None
    for _ in range(4 * component.size):
        idx = _NEIGHBORS.index((backtrack[0] - current[0], backtrack[1] - current[1]))
        nxt = None
        for step in range(1, 9):
            d = _NEIGHBORS[(idx + step) % 8]
            cand = (current[0] + d[0], current[1] + d[1])
            if filled(cand):
                nxt = cand
                break
            backtrack = cand
        if nxt is None:
            break  # defensive: isolated pixel is handled above
        if current == start:
            if first_transition is None:
                first_transition = nxt
            elif nxt == first_transition:
                break  # about to repeat the first move from start
        contour.append(nxt)
        current = nxt
    while len(contour) > 1 and contour[-1] == start:
        contour.pop()
    return np.array(contour, dtype=int)


def clothing_centroid(mask: np.ndarray) -> tuple:
    """(row, col) centroid of all clothing-class pixels."""
    sel = np.isin(mask, CLOTHING_CLASSES)
    if not sel.any():
        raise RegionNotFound("no clothing pixels in mask")
    rows, cols = np.nonzero(sel)
    return float(rows.mean()), float(cols.mean())


def extract_edges(mask: np.ndarray):
    """Trace the largest outer- and inner-edge components into contours.

    Contour coordinates are re-expressed relative to the centroid of the
    union of the clothing classes.
    """
    cy, cx = clothing_centroid(mask)
    contours = []
    for class_id, name in ((CLASS_OUTER_EDGE, "outer edge"), (CLASS_INNER_EDGE, "inner edge")):
        comp = largest_component(mask == class_id)
        count = int(comp.sum())
        if count < MIN_REGION_PIXELS:
            raise RegionNotFound(
                f"region not found: {name} (class {class_id}) has {count} pixels "
                f"in its largest component, need >= {MIN_REGION_PIXELS}")
        pixels = moore_trace(comp)
        points = np.stack([pixels[:, 1] - cx, pixels[:, 0] - cy], axis=1)
        contours.append(Contour(pixels=pixels, points=points, class_id=class_id))
    return contours[0], contours[1]


def match_nearest_inner(outer: np.ndarray, inner: np.ndarray):
    """Exact nearest inner point per outer point (ties: lowest inner index).

    outer/inner are (N,2) centroid-frame (x, y).  Coincident pairs
    (zero distance) are skipped; returns (samples, skipped_count).
    """
    if len(outer) == 0 or len(inner) == 0:
        raise RegionNotFound("empty contour")
    d2 = ((outer[:, None, :] - inner[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)  # argmin returns the lowest index on ties
    samples = []
    skipped = 0
    for n, m in enumerate(nearest):
        l2 = d2[n, m]
        if l2 == 0.0:
            skipped += 1
            continue
        l_eur = math.sqrt(l2)
        samples.append(DirectionSample(
            outer_index=n,
            inner_index=int(m),
            l_eur=l_eur,
            k_sin=(outer[n, 1] - inner[m, 1]) / l_eur,
            k_cos=(outer[n, 0] - inner[m, 0]) / l_eur,
        ))
    return samples, skipped


def flatness(samples, index: int, window: int) -> float:
    """Variance-style flatness of direction products around one sample.

    The window holds the point plus its `window` nearest neighbors along
    the ordered contour (ceil(n/2) before, floor(n/2) after, cyclic).  The
    score subtracts the product of the two window means from each
    per-point product, as the formula is printed, rather than using the
    exact variance of the products.
    """
    n = len(samples)
    if window + 1 > n:
        raise ValueError(f"window of {window + 1} points exceeds contour length {n}")
    before = (window + 1) // 2
    idxs = [(index - before + off) % n for off in range(window + 1)]
    ks = np.array([samples[i].k_sin for i in idxs])
    kc = np.array([samples[i].k_cos for i in idxs])
    center = ks.mean() * kc.mean()
    return float(np.mean((ks * kc - center) ** 2))


def flatness_all(samples, window: int) -> np.ndarray:
    return np.array([flatness(samples, i, window) for i in range(len(samples))])


def select_grasp_points(mask: np.ndarray, window: int = 10):
    """Pick the flattest outer-edge point on each side of the centroid.

    Sides split by the sign of the centroid-frame x coordinate (x < 0 is
    left); ties resolve to the lowest contour index.  Returns
    {"left": GraspCandidate, "right": GraspCandidate}.
    """
    outer, inner = extract_edges(mask)
    samples, _ = match_nearest_inner(outer.points, inner.points)
    scores = flatness_all(samples, window)
    chosen = {}
    for side in ("left", "right"):
        best = None
        for i, s in enumerate(samples):
            x = outer.points[s.outer_index, 0]
            if (x < 0) != (side == "left"):
                continue
            if best is None or scores[i] < scores[best]:
                best = i
        if best is None:
            raise RegionNotFound(f"side empty: no outer-edge points with "
                                 f"{'x < 0' if side == 'left' else 'x >= 0'}")
        s = samples[best]
        chosen[side] = GraspCandidate(
            side=side,
            outer_index=s.outer_index,
            pixel=tuple(int(v) for v in outer.pixels[s.outer_index]),
            point=tuple(float(v) for v in outer.points[s.outer_index]),
            k_sin=s.k_sin,
            k_cos=s.k_cos,
            flatness=float(scores[best]),
        )
    return chosen


# ---------------------------------------------------------------------------
# depth sampling and the camera model
# ---------------------------------------------------------------------------

def sample_depth(depth: np.ndarray, pixel) -> float:
    """Mean of the 4-neighborhood one pixel away, skipping invalid (0 mm)."""
    r, c = pixel
    h, w = depth.shape
    if not (1 <= r < h - 1 and 1 <= c < w - 1):
        raise ValueError(f"pixel {pixel} is less than 1 pixel from the border")
    vals = [depth[r - 1, c], depth[r + 1, c], depth[r, c - 1], depth[r, c + 1]]
    valid = [float(v) for v in vals if v != 0]
    if not valid:
        raise ValueError(f"no depth: all four neighbors of {pixel} are invalid")
    return float(np.mean(valid))


@dataclass
class CameraModel:
    """Pinhole intrinsics plus a rigid camera-to-robot transform."""
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray       # (3,3)
    translation: np.ndarray    # (3,) meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("extrinsics must be a 3x3 rotation and a 3-vector")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= 1e-9:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.2e})")


def load_camera(path) -> CameraModel:
    """Parse a key=value camera file: fx, fy, cx, cy and 12 extrinsic
    entries (row-major [R|t]) under the key `extrinsic`."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    missing = {"fx", "fy", "cx", "cy", "extrinsic"} - values.keys()
    if missing:
        raise ValueError(f"{path}: missing camera keys: {sorted(missing)}")
    ext = [float(v) for v in values["extrinsic"].split()]
    if len(ext) != 12:
        raise ValueError(f"{path}: extrinsic needs 12 entries, got {len(ext)}")
    mat = np.array(ext).reshape(3, 4)
    return CameraModel(fx=float(values["fx"]), fy=float(values["fy"]),
                       cx=float(values["cx"]), cy=float(values["cy"]),
                       rotation=mat[:, :3], translation=mat[:, 3])


def to_robot_frame(pixel, depth_mm: float, cam: CameraModel) -> np.ndarray:
    """Back-project a pixel at the given depth and move it to robot frame."""
    if depth_mm <= 0:
        raise ValueError(f"depth must be positive, got {depth_mm}")
    r, c = pixel
    z = depth_mm / 1000.0
    p_cam = np.array([(c - cam.cx) * z / cam.fx, (r - cam.cy) * z / cam.fy, z])
    return cam.rotation @ p_cam + cam.translation


def grasp_direction_45(vec) -> np.ndarray:
    """Keep the y-z orientation of vec, set the angle to +x at exactly 45deg.

    Output = (sqrt(2)/2) * x_hat + (sqrt(2)/2) * normalized y-z projection.
    """
    vec = np.asarray(vec, dtype=np.float64)
    yz = math.hypot(vec[1], vec[2])
    if yz == 0.0:
        raise ValueError("direction undefined: zero y-z projection")
    half = math.sqrt(2.0) / 2.0
    return np.array([half, half * vec[1] / yz, half * vec[2] / yz])


@dataclass
class GraspPose:
    point: np.ndarray       # (3,) meters, robot frame
    direction: np.ndarray   # unit 3-vector, 45 degrees to +x
    side: str


def grasp_pose(candidate: GraspCandidate, scene: Scene, cam: CameraModel) -> GraspPose:
    """Lift a selected pixel to a robot-frame pose.

    The 2-D direction (k_cos, k_sin) is mapped into the camera frame via
    the pinhole Jacobian at the grasp depth, rotated into the robot frame,
    and constrained to the 45-degree rule.
    """
    depth_mm = sample_depth(scene.depth, candidate.pixel)
    point = to_robot_frame(candidate.pixel, depth_mm, cam)
    z = depth_mm / 1000.0
    d_cam = np.array([candidate.k_cos * z / cam.fx, candidate.k_sin * z / cam.fy, 0.0])
    d_rob = cam.rotation @ d_cam
    return GraspPose(point=point, direction=grasp_direction_45(d_rob), side=candidate.side)


# ---------------------------------------------------------------------------
# overlay rendering
# ---------------------------------------------------------------------------

_PALETTE = {
    0: (25, 25, 25),
    1: (140, 30, 30),
    2: (30, 140, 30),
    3: (170, 160, 40),
}
_CONTOUR_COLORS = {CLASS_OUTER_EDGE: (255, 60, 60), CLASS_INNER_EDGE: (60, 255, 60)}


def render_overlay(mask: np.ndarray, contours, candidates) -> np.ndarray:
    """RGB uint8 (H,W,3): dim class regions, bright traced contours, and
    5x5 white crosses on the selected points."""
    h, w = mask.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for cid, color in _PALETTE.items():
        img[mask == cid] = color
    for contour in contours:
        color = _CONTOUR_COLORS.get(contour.class_id, (255, 255, 255))
        img[contour.pixels[:, 0], contour.pixels[:, 1]] = color
    for cand in candidates:
        r, c = cand.pixel
        for off in range(-2, 3):
            if 0 <= r + off < h:
                img[r + off, c] = (255, 255, 255)
            if 0 <= c + off < w:
                img[r, c + off] = (255, 255, 255)
    return img
