import numpy as np

from clothgrasp.scene import Scene


def make_ring_scene(size=32, seed=0):
    """Hand-built concentric ring scene, independent of the generator."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - h / 2 + 0.5, xx - w / 2 + 0.5)
    label = np.zeros((h, w), dtype=np.uint8)
    label[r <= 0.45 * size] = 1
    label[r <= 0.36 * size] = 2
    label[r <= 0.22 * size] = 3
    rgb = np.stack([0.2 + 0.2 * label, 0.8 - 0.2 * label, np.full((h, w), 0.5)])
    rgb = np.clip(rgb + 0.02 * rng.standard_normal(rgb.shape), 0, 1)
    depth = (900 - 140 * label.astype(np.float64) + rng.normal(0, 2, (h, w))).astype(np.uint16)
    return Scene(rgb=rgb, depth=depth, label=label)
