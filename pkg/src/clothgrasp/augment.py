"""Adversarial data augmentation: learnable color and geometric transforms
applied consistently to RGB, depth, and labels, trained to maximize the
loss the segmenter minimizes.

The geometric transform is a bounded planar affine map applied by inverse
warping: RGB and depth are resampled bilinearly, labels nearest-neighbor.
Gradients reach the geometric parameters through the differentiable
bilinear resampling; the label path is intentionally non-differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .scene import Scene, net_inputs

ROTATION_LIMIT = math.pi / 6          # +/- 30 degrees
SCALE_LOG_LIMIT = math.log(1.25)      # scales in [0.8, 1.25]
TRANSLATE_LIMIT = 0.10                # +/- 10% of the extent
COLOR_SHIFT_LIMIT = 0.3

PATH_COLOR = 0
PATH_GEOMETRIC = 1
PATH_BOTH = 2
PATH_NAMES = ("color", "geometric", "color+geometric")


# ---------------------------------------------------------------------------
# affine parameters and warping
# ---------------------------------------------------------------------------

@dataclass
class AffineParams:
    """Bounded planar transform: rotate/scale about the image centre, then
    translate; horizontal flip applied first.  Translations are fractions
    of the width/height."""
    rotation: float
    scale_x: float
    scale_y: float
    translate_x: float
    translate_y: float
    flip_horizontal: bool = False

    def within_bounds(self, tol=1e-9):
        return (abs(self.rotation) <= ROTATION_LIMIT + tol
                and math.exp(-SCALE_LOG_LIMIT) - tol <= self.scale_x <= math.exp(SCALE_LOG_LIMIT) + tol
                and math.exp(-SCALE_LOG_LIMIT) - tol <= self.scale_y <= math.exp(SCALE_LOG_LIMIT) + tol
                and abs(self.translate_x) <= TRANSLATE_LIMIT + tol
                and abs(self.translate_y) <= TRANSLATE_LIMIT + tol)


def inverse_matrix(params: AffineParams, height: int, width: int) -> np.ndarray:
    """2x3 matrix B with source = B @ [x, y, 1] for inverse warping.

    Kept operation-for-operation identical to GeoTransformNet.matrix_t so
    the numpy and differentiable paths agree bitwise.
    """
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    # np.cos/np.sin, not math.*: the libm twins can differ in the last ulp
    cth = float(np.cos(params.rotation))
    sth = float(np.sin(params.rotation))
    f = -1.0 if params.flip_horizontal else 1.0
    inv_sx = 1.0 / params.scale_x
    inv_sy = 1.0 / params.scale_y
    g00 = (f * cth) * inv_sx
    g01 = (f * sth) * inv_sx
    g10 = (-sth) * inv_sy
    g11 = cth * inv_sy
    ox = cx + params.translate_x * width
    oy = cy + params.translate_y * height
    b02 = -(g00 * ox + g01 * oy) + cx
    b12 = -(g10 * ox + g11 * oy) + cy
    return np.array([[g00, g01, b02], [g10, g11, b12]])


def sample_affine_uniform(rng: np.random.Generator) -> AffineParams:
    """Draw parameters uniformly within the declared bounds (used by the
    augmentation preview and by property tests)."""
    return AffineParams(
        rotation=rng.uniform(-ROTATION_LIMIT, ROTATION_LIMIT),
        scale_x=math.exp(rng.uniform(-SCALE_LOG_LIMIT, SCALE_LOG_LIMIT)),
        scale_y=math.exp(rng.uniform(-SCALE_LOG_LIMIT, SCALE_LOG_LIMIT)),
        translate_x=rng.uniform(-TRANSLATE_LIMIT, TRANSLATE_LIMIT),
        translate_y=rng.uniform(-TRANSLATE_LIMIT, TRANSLATE_LIMIT),
        flip_horizontal=bool(rng.random() < 0.5),
    )


def warp_label_nearest(label: np.ndarray, mat: np.ndarray, background: int = 0) -> np.ndarray:
    """Nearest-neighbor label warp; out-of-frame pixels become background."""
    h, w = label.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = mat[0, 0] * xs + mat[0, 1] * ys + mat[0, 2]
    sy = mat[1, 0] * xs + mat[1, 1] * ys + mat[1, 2]
    xi = np.floor(sx + 0.5).astype(np.intp)
    yi = np.floor(sy + 0.5).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.full_like(label, background)
    out[inside] = label[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)][inside]
    return out


def geo_apply(params: AffineParams, scene: Scene) -> Scene:
    """Apply one affine transform consistently to RGB, depth, and label.

    RGB and depth resample bilinearly, the label nearest-neighbor.
    Out-of-frame regions become RGB 0, depth 0 (no reading), label
    background.  Depth values stay in millimetres; the planar transform
    never rescales them.
    """
    mat = inverse_matrix(params, scene.height, scene.width)
    rgb = dc.warp_array(scene.rgb, mat)
    depth = dc.warp_array(scene.depth.astype(np.float64)[None], mat)[0]
    depth = np.clip(np.rint(depth), 0, 65535).astype(np.uint16)
    label = warp_label_nearest(scene.label, mat)
    return Scene(rgb=rgb, depth=depth, label=label, camera=scene.camera)


# ---------------------------------------------------------------------------
# the two transform networks
# ---------------------------------------------------------------------------

class ColorTransformNet:
    """Per-pixel residual recolorer: MLP 3->8->3, tanh output scaled to
    +/-0.3, added to the normalized RGB and clamped to [0,1].  Touches
    only RGB, never depth or labels."""

    def __init__(self, rng, zero_final=True, init_scale=0.1):
        self.w1 = Tensor.param(rng.uniform(-init_scale, init_scale, (8, 3)), name="color.w1")
        self.b1 = Tensor.param(np.zeros(8), name="color.b1")
        w2 = np.zeros((3, 8)) if zero_final else rng.uniform(-init_scale, init_scale, (3, 8))
        self.w2 = Tensor.param(w2, name="color.w2")
        self.b2 = Tensor.param(np.zeros(3), name="color.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def apply_t(self, rgb: Tensor) -> Tensor:
        c, h, w = rgb.shape
        flat = dc.reshape(rgb, (3, h * w))
        hid = dc.relu(dc.dense(flat, self.w1, self.b1))
        res = dc.scale(dc.tanh(dc.dense(hid, self.w2, self.b2)), COLOR_SHIFT_LIMIT)
        return dc.clamp01(dc.add(rgb, dc.reshape(res, (3, h, w))))

    def apply_np(self, rgb: np.ndarray) -> np.ndarray:
        flat = rgb.reshape(3, -1)
        hid = np.maximum(self.w1.data @ flat + self.b1.data[:, None], 0.0)
        res = np.tanh(self.w2.data @ hid + self.b2.data[:, None]) * COLOR_SHIFT_LIMIT
        return np.clip(rgb + res.reshape(rgb.shape), 0.0, 1.0)


class GeoTransformNet:
    """Latent-to-affine adversary: MLP 8->16->6 with tanh-bounded outputs.

    Outputs 0..4 map to rotation, log-scales, and translations; slot 5 is
    reserved (the horizontal flip is sampled outside the network with
    probability 1/2).  Bounds hold by construction for every latent.
    """

    LATENT_DIM = 8

    def __init__(self, rng, zero_final=True, init_scale=0.1):
        self.w1 = Tensor.param(rng.uniform(-init_scale, init_scale, (16, 8)), name="geo.w1")
        self.b1 = Tensor.param(np.zeros(16), name="geo.b1")
        w2 = np.zeros((6, 16)) if zero_final else rng.uniform(-init_scale, init_scale, (6, 16))
        self.w2 = Tensor.param(w2, name="geo.w2")
        self.b2 = Tensor.param(np.zeros(6), name="geo.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def _raw_np(self, latent):
        hid = np.maximum(self.w1.data @ latent + self.b1.data, 0.0)
        return self.w2.data @ hid + self.b2.data

    def params_from_latent(self, latent, flip: bool) -> AffineParams:
        t = np.tanh(self._raw_np(np.asarray(latent, dtype=np.float64)))
        return AffineParams(
            rotation=float(t[0] * ROTATION_LIMIT),
            scale_x=float(np.exp(t[1] * SCALE_LOG_LIMIT)),
            scale_y=float(np.exp(t[2] * SCALE_LOG_LIMIT)),
            translate_x=float(t[3] * TRANSLATE_LIMIT),
            translate_y=float(t[4] * TRANSLATE_LIMIT),
            flip_horizontal=bool(flip),
        )

    def matrix_t(self, latent, flip: bool, height: int, width: int) -> Tensor:
        """Differentiable twin of inverse_matrix(params_from_latent(...))."""
        raw = dc.dense(dc.relu(dc.dense(Tensor.const(latent), self.w1, self.b1)), self.w2, self.b2)
        t = dc.tanh(raw)
        rot = dc.scale(dc.element(t, 0), ROTATION_LIMIT)
        sx = dc.exp(dc.scale(dc.element(t, 1), SCALE_LOG_LIMIT))
        sy = dc.exp(dc.scale(dc.element(t, 2), SCALE_LOG_LIMIT))
        cx = (width - 1) / 2.0
        cy = (height - 1) / 2.0
        cth = dc.cos(rot)
        sth = dc.sin(rot)
        f = -1.0 if flip else 1.0
        inv_sx = dc.reciprocal(sx)
        inv_sy = dc.reciprocal(sy)
        g00 = dc.mul(dc.scale(cth, f), inv_sx)
        g01 = dc.mul(dc.scale(sth, f), inv_sx)
        g10 = dc.mul(dc.scale(sth, -1.0), inv_sy)
        g11 = dc.mul(cth, inv_sy)
        ox_t = dc.add_const(dc.scale(dc.element(t, 3), TRANSLATE_LIMIT * width), cx)
        oy_t = dc.add_const(dc.scale(dc.element(t, 4), TRANSLATE_LIMIT * height), cy)
        b02 = dc.add_const(dc.neg(dc.add(dc.mul(g00, ox_t), dc.mul(g01, oy_t))), cx)
        b12 = dc.add_const(dc.neg(dc.add(dc.mul(g10, ox_t), dc.mul(g11, oy_t))), cy)
        return dc.reshape(dc.stack([g00, g01, b02, g10, g11, b12]), (2, 3))


# ---------------------------------------------------------------------------
# path policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathPolicy:
    """Probabilities for (color-only, geometric-only, color-then-geometric)."""
    weights: tuple = (0.25, 0.5, 0.25)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any():
            raise ValueError("path policy needs three non-negative weights")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"path weights must sum to 1, got {w.sum()}")


def sample_path(policy: PathPolicy, rng: np.random.Generator) -> int:
    return int(rng.choice(3, p=np.asarray(policy.weights, dtype=np.float64)))


@dataclass
class SamplePlan:
    path: int
    latent: np.ndarray
    flip: bool
    params: AffineParams | None = None   # filled in when the plan is applied


def draw_plan(policy: PathPolicy, count: int, rng: np.random.Generator) -> list:
    plan = []
    for _ in range(count):
        path = sample_path(policy, rng)
        latent = rng.standard_normal(GeoTransformNet.LATENT_DIM)
        flip = bool(rng.random() < 0.5)
        plan.append(SamplePlan(path, latent, flip))
    return plan


# ---------------------------------------------------------------------------
# applying a plan
# ---------------------------------------------------------------------------

def augment_arrays(rgb, depth, label, plan: SamplePlan, color_net, geo_net):
    """Numpy augmentation of one sample (rgb 3xHxW, depth 1xHxW, label HxW)."""
    h, w = label.shape
    if plan.path in (PATH_COLOR, PATH_BOTH):
        rgb = color_net.apply_np(rgb)
    if plan.path in (PATH_GEOMETRIC, PATH_BOTH):
        params = geo_net.params_from_latent(plan.latent, plan.flip)
        plan.params = params
        mat = inverse_matrix(params, h, w)
        rgb = dc.warp_array(rgb, mat)
        depth = dc.warp_array(depth, mat)
        label = warp_label_nearest(label, mat)
    return rgb, depth, label


def augment_tensors(rgb, depth, label, plan: SamplePlan, color_net, geo_net):
    """Differentiable twin of augment_arrays; returns (rgb_t, depth_t, label)."""
    h, w = label.shape
    rgb_t = Tensor.const(rgb)
    depth_t = Tensor.const(depth)
    if plan.path in (PATH_COLOR, PATH_BOTH):
        rgb_t = color_net.apply_t(rgb_t)
    if plan.path in (PATH_GEOMETRIC, PATH_BOTH):
        mat_t = geo_net.matrix_t(plan.latent, plan.flip, h, w)
        rgb_t = dc.warp_bilinear(rgb_t, mat_t)
        depth_t = dc.warp_bilinear(depth_t, mat_t)
        label = warp_label_nearest(label, mat_t.data)
    return rgb_t, depth_t, label


def augmented_batch_loss(segmenter, color_net, geo_net, scenes, plan, differentiable):
    """Mean segmentation loss over one augmented batch as a single tape."""
    per = []
    for scene, sample_plan in zip(scenes, plan):
        rgb, depth = net_inputs(scene)
        if differentiable:
            rgb_t, depth_t, label = augment_tensors(rgb, depth, scene.label, sample_plan,
                                                    color_net, geo_net)
        else:
            rgb_a, depth_a, label = augment_arrays(rgb, depth, scene.label, sample_plan,
                                                   color_net, geo_net)
            rgb_t, depth_t = Tensor.const(rgb_a), Tensor.const(depth_a)
        logits = segmenter.forward(rgb_t, depth_t)
        per.append(dc.softmax_cross_entropy(logits, label))
    total = per[0]
    for p in per[1:]:
        total = dc.add(total, p)
    return dc.scale(total, 1.0 / len(per))


# ---------------------------------------------------------------------------
# the alternating min-max round
# ---------------------------------------------------------------------------

def theta_step(segmenter, color_net, geo_net, scenes, plan, opt_theta):
    """Descend the segmenter parameters on one augmented batch; returns the
    pre-update loss value."""
    loss = augmented_batch_loss(segmenter, color_net, geo_net, scenes, plan,
                                differentiable=False)
    value = loss.item()
    if not math.isfinite(value):
        raise ValueError("non-finite loss; round aborted before any update")
    opt_theta.zero_grad()
    dc.backward(loss)
    opt_theta.step("minimize")
    return value


def phi_step(segmenter, color_net, geo_net, scenes, plan, opt_phi):
    """Ascend both transform networks on one augmented batch; gradients flow
    through the differentiable resampling. Returns the pre-update loss."""
    loss = augmented_batch_loss(segmenter, color_net, geo_net, scenes, plan,
                                differentiable=True)
    value = loss.item()
    if not math.isfinite(value):
        raise ValueError("non-finite loss; round aborted before any update")
    opt_phi.zero_grad()
    dc.zero_grad([p for p in segmenter.parameters()])
    dc.backward(loss)
    opt_phi.step("maximize")
    return value


def adversarial_round(segmenter, color_net, geo_net, scenes, opt_theta, opt_phi,
                      policy: PathPolicy, rng: np.random.Generator):
    """One alternation: sample paths and descend theta, then re-augment with
    fresh paths and ascend phi.  Returns the two pre-update loss values.
    Deterministic given (rng state, batch, parameters)."""
    plan_a = draw_plan(policy, len(scenes), rng)
    loss_a = theta_step(segmenter, color_net, geo_net, scenes, plan_a, opt_theta)
    plan_b = draw_plan(policy, len(scenes), rng)
    loss_b = phi_step(segmenter, color_net, geo_net, scenes, plan_b, opt_phi)
    return loss_a, loss_b


@dataclass
class AdversarialTrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr_theta: float = 0.05
    lr_phi: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    policy: PathPolicy = field(default_factory=PathPolicy)
    eval_every: int = 1


def train_adversarial(segmenter, color_net, geo_net, scenes, cfg: AdversarialTrainConfig):
    """Alternating adversarial training; returns per-epoch log rows."""
    from .fusion import evaluate_net  # local import to avoid a cycle

    if not scenes:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt_theta = dc.SGDMomentum(segmenter.parameters(), cfg.lr_theta, cfg.momentum)
    opt_phi = dc.SGDMomentum(color_net.parameters() + geo_net.parameters(),
                             cfg.lr_phi, cfg.momentum)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenes[i] for i in order[start:start + cfg.batch_size]]
            loss_a, _ = adversarial_round(segmenter, color_net, geo_net, batch,
                                          opt_theta, opt_phi, cfg.policy, rng)
            losses.append(loss_a)
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "miou": float("nan"), "pa": float("nan")}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            row["miou"], row["pa"] = evaluate_net(segmenter, scenes)
        log.append(row)
    return log
