import math

import numpy as np
import pytest

from clothgrasp import grasp as gr
from clothgrasp.grasp import (CameraModel, DirectionSample, GraspCandidate,
                              RegionNotFound, extract_edges, flatness,
                              flatness_all, grasp_direction_45, grasp_pose,
                              load_camera, match_nearest_inner, moore_trace,
                              sample_depth, select_grasp_points, to_robot_frame)
from clothgrasp.scene import Scene
from clothgrasp.scenegen import SceneGenConfig, gen_scene

from oracles import variance_of_products_style


def square_ring_mask():
    """Concentric square rings: class 1 outside, 2 inside it, 3 innermost."""
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:28, 4:28] = 1
    mask[8:24, 8:24] = 2
    mask[12:20, 12:20] = 3
    return mask


# ---------------------------------------------------------------------------
# contour extraction
# ---------------------------------------------------------------------------

def test_square_ring_contour_point_counts():
    outer, inner = extract_edges(square_ring_mask())
    # the outer boundary of a filled LxL square has 4(L-1) pixels
    assert len(outer.pixels) == 4 * (24 - 1)
    assert len(inner.pixels) == 4 * (16 - 1)


def test_contours_are_closed_8_neighbor_sequences():
    outer, inner = extract_edges(square_ring_mask())
    for contour in (outer, inner):
        pts = contour.pixels
        for a, b in zip(pts, np.roll(pts, -1, axis=0)):
            assert max(abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1]))) == 1


def test_moore_trace_starts_topmost_leftmost_and_runs_clockwise():
    comp = np.zeros((8, 8), dtype=bool)
    comp[2:5, 3:6] = True  # 3x3 block
    pts = moore_trace(comp)
    assert tuple(pts[0]) == (2, 3)
    # clockwise from the top-left corner of a block heads east first
    assert tuple(pts[1]) == (2, 4)
    assert len(pts) == 8


def test_missing_inner_class_raises():
    mask = square_ring_mask()
    mask[mask == 2] = 3
    with pytest.raises(RegionNotFound, match="inner edge"):
        extract_edges(mask)


def test_fragmented_class_uses_largest_component():
    mask = square_ring_mask()
    # plant a distant small fragment of class 1
    mask[0, 0:8] = 1
    outer, _ = extract_edges(mask)
    assert len(outer.pixels) == 4 * (24 - 1)
    assert outer.pixels[:, 0].min() >= 4


def test_translation_leaves_centroid_frame_contours_unchanged():
    mask = square_ring_mask()
    big = np.zeros((48, 48), dtype=np.uint8)
    big[3:35, 7:39] = mask
    base_outer, base_inner = extract_edges(np.pad(mask, ((0, 16), (0, 16))))
    moved_outer, moved_inner = extract_edges(big)
    assert np.array_equal(base_outer.points, moved_outer.points)
    assert np.array_equal(base_inner.points, moved_inner.points)


# ---------------------------------------------------------------------------
# nearest-inner matching
# ---------------------------------------------------------------------------

def test_three_four_five_fixture():
    samples, skipped = match_nearest_inner(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]]))
    assert skipped == 0
    s = samples[0]
    assert s.l_eur == 5.0
    assert s.k_sin == 0.8
    assert s.k_cos == 0.6


def test_tie_breaks_to_lowest_inner_index():
    outer = np.array([[1.0, 1.0]])
    inner = np.array([[9, 9], [9, -9], [0, 1], [-9, 9], [8, 8], [7, 7], [5, 5], [1, 0]],
                     dtype=np.float64)
    # indices 2 and 7 are both at distance 1
    samples, _ = match_nearest_inner(outer, inner)
    assert samples[0].inner_index == 2


def test_matching_equals_brute_force_oracle():
    rng = np.random.default_rng(31)
    outer = rng.integers(-40, 40, (200, 2)).astype(np.float64)
    inner = rng.integers(-40, 40, (200, 2)).astype(np.float64)
    samples, skipped = match_nearest_inner(outer, inner)
    by_outer = {s.outer_index: s for s in samples}
    n_skip = 0
    for n in range(len(outer)):
        best, best_d2 = None, None
        for m in range(len(inner)):
            d2 = (outer[n, 0] - inner[m, 0]) ** 2 + (outer[n, 1] - inner[m, 1]) ** 2
            if best_d2 is None or d2 < best_d2:
                best, best_d2 = m, d2
        if best_d2 == 0.0:
            n_skip += 1
            assert n not in by_outer
            continue
        s = by_outer[n]
        assert s.inner_index == best
        assert s.l_eur == math.sqrt(best_d2)
        assert s.k_sin == (outer[n, 1] - inner[best, 1]) / s.l_eur
        assert s.k_cos == (outer[n, 0] - inner[best, 0]) / s.l_eur
    assert skipped == n_skip


def test_unit_direction_invariant():
    rng = np.random.default_rng(32)
    outer = rng.integers(-30, 30, (100, 2)).astype(np.float64)
    inner = rng.integers(-30, 30, (80, 2)).astype(np.float64)
    samples, _ = match_nearest_inner(outer, inner)
    for s in samples:
        assert abs(s.k_sin ** 2 + s.k_cos ** 2 - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# flatness
# ---------------------------------------------------------------------------

def _mk_samples(pairs):
    return [DirectionSample(i, 0, 1.0, ks, kc) for i, (ks, kc) in enumerate(pairs)]


def test_flatness_zero_for_constant_direction():
    # straight horizontal outer edge with the inner edge directly below:
    # every direction is vertical, so all products k_sin*k_cos vanish
    samples = _mk_samples([(1.0, 0.0)] * 12)
    assert flatness(samples, 5, 10) == 0.0


def test_flatness_quarter_for_alternating_half_products():
    # products alternate +0.5/-0.5 over an even window and the window mean
    # of k_sin is zero, so the score is exactly 0.25
    samples = _mk_samples([(0.5, 1.0), (-0.5, 1.0)] * 6)
    assert flatness(samples, 4, 7) == 0.25


def test_flatness_matches_direct_oracle_on_annulus_windows():
    cfg = SceneGenConfig(height=64, width=64, band_frac=0.07, inner_frac=0.5,
                         radius_frac=0.38)
    scene, _ = gen_scene(cfg, np.random.default_rng(33))
    outer, inner = extract_edges(scene.label)
    samples, _ = match_nearest_inner(outer.points, inner.points)
    n = 10
    before = (n + 1) // 2
    for idx in range(0, len(samples), 7):
        window_idx = [(idx - before + off) % len(samples) for off in range(n + 1)]
        want = variance_of_products_style([samples[i].k_sin for i in window_idx],
                                          [samples[i].k_cos for i in window_idx])
        assert abs(flatness(samples, idx, n) - want) < 1e-12


def test_flatness_window_must_fit():
    samples = _mk_samples([(1.0, 0.0)] * 5)
    with pytest.raises(ValueError, match="exceeds"):
        flatness(samples, 0, 5)


# ---------------------------------------------------------------------------
# grasp point selection
# ---------------------------------------------------------------------------

def _symmetric_annulus_mask(size=32):
    """Deformed annulus exactly mirror-symmetric about the vertical axis:
    the boundary radius uses cos(2*phi) expressed through dx^2, dy^2."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - (size - 1) / 2
    dx = xx - (size - 1) / 2
    r2 = dx * dx + dy * dy
    r = np.sqrt(r2)
    cos2 = np.where(r2 > 0, (dx * dx - dy * dy) / np.maximum(r2, 1e-12), 0.0)
    rho = 0.38 * size + 1.8 * cos2
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[r <= rho] = 2
    mask[(r <= rho) & (r > rho - 2.5)] = 1
    mask[r <= 0.5 * rho] = 3
    return mask


def test_symmetric_mask_selects_mirrored_candidates():
    mask = _symmetric_annulus_mask(32)
    assert np.array_equal(mask, mask[:, ::-1])  # construction sanity
    chosen = select_grasp_points(mask, window=10)
    left, right = chosen["left"], chosen["right"]
    assert left.point[0] == -right.point[0]
    assert left.point[1] == right.point[1]
    assert left.flatness == right.flatness


def test_planted_flat_arcs_attract_selection():
    cfg = SceneGenConfig(plant_flat=True)
    hits = 0
    for seed in range(6):
        scene, info = gen_scene(cfg, np.random.default_rng(200 + seed))
        chosen = select_grasp_points(scene.label, window=10)
        for side in ("left", "right"):
            cand = chosen[side]
            ang = math.atan2(cand.pixel[0] - info.center_y, cand.pixel[1] - info.center_x)
            hits += info.contains(side, ang)
    assert hits >= 10  # 12 side-selections total; allow one stray


def test_one_sided_mask_reports_empty_side():
    mask = np.zeros((48, 64), dtype=np.uint8)
    mask[8:40, 2:14] = 3  # heavy block pulls the centroid left
    yy, xx = np.mgrid[0:48, 0:64].astype(np.float64)
    r = np.hypot(yy - 24, xx - 48)
    mask[(r <= 12)] = 2
    mask[(r <= 12) & (r > 9)] = 1
    with pytest.raises(RegionNotFound, match="side empty"):
        select_grasp_points(mask, window=10)


def test_selection_is_deterministic():
    cfg = SceneGenConfig(plant_flat=True)
    scene, _ = gen_scene(cfg, np.random.default_rng(300))
    a = select_grasp_points(scene.label, window=10)
    b = select_grasp_points(scene.label, window=10)
    assert a == b


def test_selection_invariant_to_translation_and_uniform_scale():
    # scaling the contour POINT SETS about the centroid leaves every K and
    # therefore every flatness score unchanged
    mask = _symmetric_annulus_mask(32)
    outer, inner = extract_edges(mask)
    samples, _ = match_nearest_inner(outer.points, inner.points)
    scaled_samples, _ = match_nearest_inner(outer.points * 3.0, inner.points * 3.0)
    base = flatness_all(samples, 10)
    scaled = flatness_all(scaled_samples, 10)
    assert np.allclose(base, scaled, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# depth sampling
# ---------------------------------------------------------------------------

def test_depth_four_neighbor_mean():
    depth = np.zeros((5, 5), dtype=np.uint16)
    depth[1, 2], depth[3, 2], depth[2, 1], depth[2, 3] = 500, 502, 498, 500
    assert sample_depth(depth, (2, 2)) == 500.0


def test_depth_skips_invalid_readings():
    depth = np.zeros((5, 5), dtype=np.uint16)
    depth[1, 2], depth[3, 2], depth[2, 1], depth[2, 3] = 500, 0, 500, 500
    assert sample_depth(depth, (2, 2)) == 500.0


def test_depth_constant_field():
    depth = np.full((7, 7), 777, dtype=np.uint16)
    assert sample_depth(depth, (3, 3)) == 777.0


def test_depth_border_and_all_invalid_errors():
    depth = np.full((5, 5), 500, dtype=np.uint16)
    with pytest.raises(ValueError, match="border"):
        sample_depth(depth, (0, 2))
    hole = np.zeros((5, 5), dtype=np.uint16)
    with pytest.raises(ValueError, match="no depth"):
        sample_depth(hole, (2, 2))


# ---------------------------------------------------------------------------
# camera and the 45-degree rule
# ---------------------------------------------------------------------------

def _identity_cam(fx=500.0, fy=500.0, cx=32.0, cy=24.0):
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy,
                       rotation=np.eye(3), translation=np.zeros(3))


def test_backproject_principal_point():
    cam = _identity_cam()
    p = to_robot_frame((int(cam.cy), int(cam.cx)), 1000.0, cam)
    assert np.allclose(p, [0.0, 0.0, 1.0], atol=1e-12)


def test_backproject_unit_tangent():
    cam = _identity_cam(fx=500, fy=500, cx=100, cy=80)
    p = to_robot_frame((80, 100 + 500), 1000.0, cam)
    assert np.allclose(p, [1.0, 0.0, 1.0], atol=1e-12)


def test_backproject_round_trips_through_projection():
    rng = np.random.default_rng(34)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    cam = CameraModel(fx=430.0, fy=415.0, cx=63.5, cy=47.5,
                      rotation=q, translation=rng.standard_normal(3))
    for _ in range(20):
        pixel = (int(rng.integers(1, 95)), int(rng.integers(1, 127)))
        depth = float(rng.uniform(300, 2000))
        p_rob = to_robot_frame(pixel, depth, cam)
        # independent forward projection oracle
        p_cam = cam.rotation.T @ (p_rob - cam.translation)
        u = p_cam[0] / p_cam[2] * cam.fx + cam.cx
        v = p_cam[1] / p_cam[2] * cam.fy + cam.cy
        assert abs(u - pixel[1]) < 1e-9 and abs(v - pixel[0]) < 1e-9
        assert abs(p_cam[2] * 1000 - depth) < 1e-9


def test_rotation_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        CameraModel(fx=1, fy=1, cx=0, cy=0,
                    rotation=np.eye(3) + 1e-6, translation=np.zeros(3))
    with pytest.raises(ValueError, match="positive"):
        CameraModel(fx=-1, fy=1, cx=0, cy=0, rotation=np.eye(3), translation=np.zeros(3))


def test_direction_45_forced_cases():
    half = math.sqrt(2.0) / 2.0
    d = grasp_direction_45([0.0, 1.0, 0.0])
    assert np.allclose(d, [half, half, 0.0], atol=1e-12)
    d = grasp_direction_45([0.3, 0.6, 0.8])
    assert np.allclose(d, [half, half * 0.6, half * 0.8], atol=1e-12)


def test_direction_45_constraint_identity():
    rng = np.random.default_rng(35)
    half = math.sqrt(2.0) / 2.0
    for _ in range(50):
        v = rng.standard_normal(3)
        if math.hypot(v[1], v[2]) < 1e-6:
            continue
        d = grasp_direction_45(v)
        assert abs(d[0] - half) < 1e-12
        assert abs(np.linalg.norm(d) - 1.0) < 1e-12
        assert abs(math.degrees(math.acos(d[0])) - 45.0) < 1e-9


def test_direction_45_rejects_zero_projection():
    with pytest.raises(ValueError, match="undefined"):
        grasp_direction_45([1.0, 0.0, 0.0])


def test_grasp_pose_end_to_end():
    cfg = SceneGenConfig(plant_flat=True)
    scene, _ = gen_scene(cfg, np.random.default_rng(400))
    cam = _identity_cam(cx=(scene.width - 1) / 2, cy=(scene.height - 1) / 2)
    chosen = select_grasp_points(scene.label, window=10)
    for side, cand in chosen.items():
        pose = grasp_pose(cand, scene, cam)
        assert pose.side == side
        assert abs(np.linalg.norm(pose.direction) - 1.0) < 1e-12
        assert abs(pose.direction[0] - math.sqrt(2) / 2) < 1e-12
        assert 0.3 < pose.point[2] < 2.0


# ---------------------------------------------------------------------------
# camera file parsing
# ---------------------------------------------------------------------------

CAMERA_TEXT = """# toy camera
fx = 525.0
fy = 525.0
cx = 63.5
cy = 63.5
extrinsic = 1 0 0 0.1  0 1 0 -0.2  0 0 1 0.05
"""


def test_load_camera_roundtrip(tmp_path):
    path = tmp_path / "camera.txt"
    path.write_text(CAMERA_TEXT)
    cam = load_camera(path)
    assert cam.fx == 525.0 and cam.cy == 63.5
    assert np.array_equal(cam.rotation, np.eye(3))
    assert np.allclose(cam.translation, [0.1, -0.2, 0.05])


def test_load_camera_missing_key(tmp_path):
    path = tmp_path / "camera.txt"
    path.write_text("fx = 500\nfy = 500\ncx = 10\n")
    with pytest.raises(ValueError, match="missing"):
        load_camera(path)


def test_load_camera_bad_extrinsic_count(tmp_path):
    path = tmp_path / "camera.txt"
    path.write_text("fx=1\nfy=1\ncx=0\ncy=0\nextrinsic = 1 2 3\n")
    with pytest.raises(ValueError, match="12"):
        load_camera(path)


# ---------------------------------------------------------------------------
# overlay
# ---------------------------------------------------------------------------

def test_overlay_renders_crosses_and_contours():
    mask = square_ring_mask()
    outer, inner = extract_edges(mask)
    cand = GraspCandidate("left", 0, (16, 5), (-10.0, 0.5), 0.0, 1.0, 0.0)
    img = gr.render_overlay(mask, [outer, inner], [cand])
    assert img.shape == (32, 32, 3)
    assert tuple(img[16, 5]) == (255, 255, 255)
    assert tuple(img[16, 3]) == (255, 255, 255)
    r, c = outer.pixels[0]
    assert tuple(img[r, c]) == (255, 60, 60)
