"""Fractal feature extraction, RGB-D cross fusion, and the small
dual-branch segmentation network built from them.

The fractal slope operator regresses the log response of a bank of
multi-scale convolutions against the log of the scale, per pixel; the
fusion block cross-propagates both modalities through those operators and
gates the result with channel weights derived from global pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .metrics import ConfusionMatrix, compute_metrics
from .scene import NUM_CLASSES, net_inputs

# log2 of the six convolution scales; fixed, never trained
LOG_SCALES = np.log2(np.arange(1, 7, dtype=np.float64))

CHANNEL_PLAN = (8, 16, 32, 64)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d:
    # fan-in scaled init: the flat +/-0.1 default starves the early stages
    # of gradient once four stages compound
    def __init__(self, rng, c_in, c_out, k, bias=True, init_scale=None):
        s = math.sqrt(6.0 / (c_in * k * k)) if init_scale is None else init_scale
        self.w = Tensor.param(rng.uniform(-s, s, (c_out, c_in, k, k)), name="w")
        self.b = Tensor.param(np.zeros(c_out), name="b") if bias else None

    def __call__(self, x):
        y = dc.conv2d(x, self.w)
        return dc.add(y, self.b) if self.b is not None else y

    def named_parameters(self, prefix):
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class Dense:
    def __init__(self, rng, n_in, n_out, init_scale=0.1, zero_init=False):
        w0 = np.zeros((n_out, n_in)) if zero_init else rng.uniform(-init_scale, init_scale, (n_out, n_in))
        self.w = Tensor.param(w0, name="w")
        self.b = Tensor.param(np.zeros(n_out), name="b")

    def __call__(self, x):
        return dc.dense(x, self.w, self.b)

    def named_parameters(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class Mlp:
    """Dense stack with ReLU hidden layers and a linear head."""

    def __init__(self, rng, sizes):
        self.layers = [Dense(rng, sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = dc.relu(layer(x))
        return self.layers[-1](x)

    def named_parameters(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}.{i}"))
        return out


# ---------------------------------------------------------------------------
# fractal slope (per-pixel least squares of log response on log scale)
# ---------------------------------------------------------------------------

def fractal_slope(responses: Tensor, scales=None) -> Tensor:
    """Per-pixel regression slope of log2(relu(r)+1) against the log scales.

    responses is 6×H×W (one channel per convolution scale); result is
    1×H×W.  The denominator is a positive constant, so the output is
    always finite.  The centering/summation structure mirrors the plain
    numpy reductions exactly, which keeps the forced cases (constant,
    equal, doubled log responses) at exactly 0, 1 and 2.
    """
    if responses.ndim != 3 or responses.shape[0] != 6:
        raise ValueError(f"fractal_slope expects 6×H×W responses, got {responses.shape}")
    y = LOG_SCALES if scales is None else np.asarray(scales, dtype=np.float64)
    yc = y - np.add.reduce(y) / 6.0
    den = float(np.add.reduce(yc * yc))
    x = dc.log2shift(responses)
    xc = dc.sub(x, dc.channel_mean(x))
    num = dc.channel_sum(dc.mul(xc, Tensor.const(yc)))
    return dc.div_const(num, den)


class FractalProcess:
    """Three independent per-channel scale banks followed by the slope fit.

    Each input channel owns six learnable single-output convolutions of
    sizes 1..6, initialised to all-ones box filters scaled by 1/k^2 so the
    untrained module behaves like a box-counting slope estimator.
    """

    def __init__(self, rng):
        self.kernels = [
            [Tensor.param(np.full((k, k), 1.0 / (k * k)), name=f"fp{ch}k{k}") for k in range(1, 7)]
            for ch in range(3)
        ]
        del rng  # init is deterministic; rng kept for signature symmetry

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"fractal process expects 3×H×W input, got {x.shape}")
        slopes = []
        for ch in range(3):
            resp = dc.scale_bank(dc.channel_slice(x, ch), self.kernels[ch])
            slopes.append(fractal_slope(resp))
        return dc.concat(slopes, axis=0)

    def scale_responses(self, x: Tensor, ch: int) -> Tensor:
        """Raw 6×H×W bank responses for one channel (exposed for tests)."""
        return dc.scale_bank(dc.channel_slice(x, ch), self.kernels[ch])

    def named_parameters(self, prefix):
        out = []
        for ch in range(3):
            for k in range(1, 7):
                out.append((f"{prefix}.ch{ch}.k{k}", self.kernels[ch][k - 1]))
        return out


class FractalCrossFusion:
    """Two-path fusion of same-shaped RGB and depth feature maps.

    Path one reduces both streams to three channels and cross-propagates
    them through pairs of fractal-process modules; path two derives
    channel weights from globally pooled features.  The gated result is
    restored to the input channel count by a 1×1 convolution.
    """

    def __init__(self, rng, channels, fp_rounds=2, mlp_hidden=None):
        if fp_rounds < 1:
            raise ValueError("need at least one fractal round")
        self.channels = channels
        self.reduce_rgb = Conv2d(rng, channels, 3, 1)
        self.reduce_depth = Conv2d(rng, channels, 3, 1)
        self.rounds = [(FractalProcess(rng), FractalProcess(rng)) for _ in range(fp_rounds)]
        self.mlp = Mlp(rng, [2 * channels, mlp_hidden or channels, 3])
        self.restore = Conv2d(rng, 3, channels, 1)

    def channel_weights(self, rgb_feat: Tensor, depth_feat: Tensor) -> Tensor:
        pooled = dc.concat([dc.gap(rgb_feat), dc.gap(depth_feat)])  # RGB entries first
        return dc.sigmoid(self.mlp(pooled))

    def forward(self, rgb_feat: Tensor, depth_feat: Tensor) -> Tensor:
        if rgb_feat.shape != depth_feat.shape:
            raise ValueError(f"stream shapes differ: {rgb_feat.shape} vs {depth_feat.shape}")
        rgb3 = self.reduce_rgb(rgb_feat)
        dep3 = self.reduce_depth(depth_feat)
        a = self.rounds[0][0].forward(rgb3)
        b = self.rounds[0][1].forward(dep3)
        for fp_a, fp_b in self.rounds[1:]:
            a = fp_a.forward(dc.add(a, dep3))
            b = fp_b.forward(dc.add(b, rgb3))
        fused = dc.add(a, b)
        weights = self.channel_weights(rgb_feat, depth_feat)
        return self.restore(dc.mul(fused, weights))

    def named_parameters(self, prefix):
        out = self.reduce_rgb.named_parameters(f"{prefix}.reduce_rgb")
        out += self.reduce_depth.named_parameters(f"{prefix}.reduce_depth")
        for i, (fp_a, fp_b) in enumerate(self.rounds):
            out += fp_a.named_parameters(f"{prefix}.round{i}.a")
            out += fp_b.named_parameters(f"{prefix}.round{i}.b")
        out += self.mlp.named_parameters(f"{prefix}.mlp")
        out += self.restore.named_parameters(f"{prefix}.restore")
        return out


# ---------------------------------------------------------------------------
# the dual-branch segmentation network
# ---------------------------------------------------------------------------

class Stage:
    """conv3×3 + relu + 2× downsample."""

    def __init__(self, rng, c_in, c_out):
        self.conv = Conv2d(rng, c_in, c_out, 3)

    def __call__(self, x):
        return dc.avgpool2(dc.relu(self.conv(x)))

    def named_parameters(self, prefix):
        return self.conv.named_parameters(f"{prefix}.conv")


class FusionSegNet:
    """Two small four-stage backbones fused per stage, with a light decoder.

    The fusion output of each stage is added back into both branches
    before the next stage; the decoder combines the first (shallow) and
    last (deep) fusion results into full-resolution class logits.
    """

    def __init__(self, seed=0, fp_rounds=2, decoder_width=32):
        rng = np.random.default_rng(seed)
        self.fp_rounds = fp_rounds
        self.decoder_width = decoder_width
        plan = CHANNEL_PLAN
        self.rgb_stages = [Stage(rng, 3 if i == 0 else plan[i - 1], plan[i]) for i in range(4)]
        self.depth_stages = [Stage(rng, 3 if i == 0 else plan[i - 1], plan[i]) for i in range(4)]
        self.fcf = [FractalCrossFusion(rng, plan[i], fp_rounds) for i in range(4)]
        self.dec_deep = Conv2d(rng, plan[3], decoder_width, 1)
        self.dec_conv1 = Conv2d(rng, decoder_width + plan[0], decoder_width, 3)
        self.dec_conv2 = Conv2d(rng, decoder_width, decoder_width, 3)
        self.classifier = Conv2d(rng, decoder_width, NUM_CLASSES, 1)

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise ValueError(f"rgb input must be 3×H×W, got {rgb.shape}")
        if depth.ndim != 3 or depth.shape[0] != 1 or depth.shape[1:] != rgb.shape[1:]:
            raise ValueError(f"depth input must be 1×H×W matching rgb, got {depth.shape}")
        h, w = rgb.shape[1], rgb.shape[2]
        if h % 16 or w % 16:
            raise ValueError(f"spatial extents must be divisible by 16, got {h}x{w}")
        # center the [0,1]-ish inputs so the stem sees signed activations
        r = dc.add_const(rgb, -0.5)
        d0 = dc.add_const(depth, -0.5)
        d = dc.concat([d0, d0, d0], axis=0)
        fused = []
        for i in range(4):
            r = self.rgb_stages[i](r)
            d = self.depth_stages[i](d)
            f = self.fcf[i].forward(r, d)
            fused.append(f)
            if i < 3:
                r = dc.add(r, f)
                d = dc.add(d, f)
        # decoder: 1x1 on the deep fusion, 4x up, join the shallow fusion
        # (pooled to the same grid), two 3x3 refinements, per-pixel head,
        # and a final 4x bilinear upsample back to the input extents
        deep = dc.upsample_bilinear(dc.relu(self.dec_deep(fused[3])), 4)
        shallow = dc.avgpool2(fused[0])
        x = dc.concat([deep, shallow], axis=0)
        x = dc.relu(self.dec_conv1(x))
        x = dc.relu(self.dec_conv2(x))
        return dc.upsample_bilinear(self.classifier(x), 4)

    def named_parameters(self):
        out = []
        for i in range(4):
            out += self.rgb_stages[i].named_parameters(f"rgb{i}")
            out += self.depth_stages[i].named_parameters(f"depth{i}")
            out += self.fcf[i].named_parameters(f"fcf{i}")
        out += self.dec_deep.named_parameters("dec_deep")
        out += self.dec_conv1.named_parameters("dec_conv1")
        out += self.dec_conv2.named_parameters("dec_conv2")
        out += self.classifier.named_parameters("classifier")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def predict(net: FusionSegNet, rgb, depth) -> np.ndarray:
    """Argmax class map for plain numpy inputs."""
    logits = net.forward(Tensor.const(rgb), Tensor.const(depth))
    return logits.data.argmax(axis=0).astype(np.uint8)


def evaluate_net(net: FusionSegNet, scenes, zero_depth=False):
    """(mIoU, PA) of the network over a list of scenes."""
    conf = ConfusionMatrix(NUM_CLASSES)
    for scene in scenes:
        rgb, depth = net_inputs(scene)
        if zero_depth:
            depth = np.zeros_like(depth)
        conf.add(scene.label, predict(net, rgb, depth))
    report = compute_metrics(conf)
    return report.miou, report.pixel_accuracy


# ---------------------------------------------------------------------------
# plain (non-adversarial) training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 1          # epochs between metric evaluations; 0 = never
    target_miou: float | None = None   # stop early once reached
    zero_depth: bool = False     # ablation: feed an all-zero depth map

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0,1)")


def batch_loss(net, scenes, zero_depth=False):
    """Mean cross-entropy over a list of scenes as one tape."""
    per = []
    for scene in scenes:
        rgb, depth = net_inputs(scene)
        if zero_depth:
            depth = np.zeros_like(depth)
        logits = net.forward(Tensor.const(rgb), Tensor.const(depth))
        per.append(dc.softmax_cross_entropy(logits, scene.label))
    total = per[0]
    for p in per[1:]:
        total = dc.add(total, p)
    return dc.scale(total, 1.0 / len(per))


def train_segmentation(net: FusionSegNet, scenes, cfg: TrainConfig):
    """Mini-batch SGD with momentum on the cross-entropy loss.

    Deterministic for a fixed seed.  Returns one log row per epoch with
    keys epoch, loss, miou, pa (metrics are nan on skipped epochs).
    """
    if not scenes:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = dc.SGDMomentum(net.parameters(), cfg.lr, cfg.momentum)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenes[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss = batch_loss(net, batch, cfg.zero_depth)
            dc.backward(loss)
            opt.step("minimize")
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "miou": float("nan"), "pa": float("nan")}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            row["miou"], row["pa"] = evaluate_net(net, scenes, cfg.zero_depth)
        log.append(row)
        if cfg.target_miou is not None and row["miou"] == row["miou"] and row["miou"] >= cfg.target_miou:
            break
    return log
