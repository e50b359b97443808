"""Dense per-pixel action-value models and their contrastive training.

Two heads: a pick model mapping an image to an (H, W) value map, and a
pick-conditioned place model that cross-correlates features cropped around
the pick pixel against feature maps of candidate place views. Lower values
are better everywhere; selection is argmin.

The convolutional machinery is implemented here directly (im2col matmuls
forward, hand-derived adjoints backward); the only outside help is BLAS via
numpy and an FFT for the place correlation. Training minimizes a softmax
cross-entropy over one positive pixel against every other pixel of the
positive view plus all pixels of sampled negative views.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from viewplan.errors import ConfigError, IOFailure, NumericsError

MODEL_MAGIC = b"MIRC"
MODEL_VERSION = 1

# Architecture defaults: smallest stacks that solve the desk-scale tasks.
PICK_PLAN = ((5, 3, 32), (3, 32, 32), (3, 32, 32), (1, 32, 1))
FEAT_PLAN = ((5, 3, 32), (3, 32, 32), (3, 32, 16))
DEFAULT_CROP = 17


# ---------------------------------------------------------------------------
# Convolution stacks (stride 1, same padding)
# ---------------------------------------------------------------------------


@dataclass
class ConvLayer:
    weight: np.ndarray  # (k, k, cin, cout)
    bias: np.ndarray  # (cout,)
    relu: bool


def _conv_cols(x, k):
    """im2col for stride-1 same-padding convolution; returns (H*W, k*k*cin)."""
    if k == 1:
        return x.reshape(-1, x.shape[2])
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # (H, W, cin, k, k)
    h, w = x.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)


def _conv_forward(x, layer: ConvLayer):
    k = layer.weight.shape[0]
    h, w = x.shape[:2]
    cols = _conv_cols(x, k)
    y = cols @ layer.weight.reshape(-1, layer.weight.shape[3]) + layer.bias
    y = y.reshape(h, w, -1)
    if layer.relu:
        y = np.maximum(y, 0.0)
    return y


def _conv_backward(x, y, dy, layer: ConvLayer):
    """Gradients for one layer; x is the cached input, y the cached output."""
    k = layer.weight.shape[0]
    h, w = x.shape[:2]
    if layer.relu:
        dy = dy * (y > 0)
    dyf = dy.reshape(h * w, -1)
    cols = _conv_cols(x, k)
    d_w = (cols.T @ dyf).reshape(layer.weight.shape)
    d_b = dyf.sum(axis=0)
    # dx: correlate dy with the spatially flipped kernel, swapping in/out channels
    w_rot = layer.weight[::-1, ::-1].transpose(0, 1, 3, 2)
    cols_dy = _conv_cols(dy, k)
    dx = (cols_dy @ w_rot.reshape(-1, w_rot.shape[3])).reshape(x.shape)
    return dx, d_w, d_b


@dataclass
class ConvStack:
    """Ordered stride-1 same-padding conv layers; ReLU except the final layer.

    Hidden layers use He-normal initialization; the final layer starts at
    zero so untrained value maps are flat.
    """

    layers: list

    @staticmethod
    def create(plan, rng, final_zero=True) -> "ConvStack":
        layers = []
        for i, (k, cin, cout) in enumerate(plan):
            last = i == len(plan) - 1
            if last and final_zero:
                w = np.zeros((k, k, cin, cout), dtype=np.float32)
            else:
                std = np.sqrt(2.0 / (k * k * cin))
                w = rng.normal(0.0, std, (k, k, cin, cout)).astype(np.float32)
            layers.append(ConvLayer(w, np.zeros(cout, dtype=np.float32), relu=not last))
        return ConvStack(layers)

    @property
    def in_channels(self):
        return self.layers[0].weight.shape[2]

    def receptive_radius(self):
        return sum(layer.weight.shape[0] // 2 for layer in self.layers)

    def forward(self, x, cache=None):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ConfigError(
                f"expected (H, W, {self.in_channels}) input, got {x.shape}"
            )
        for layer in self.layers:
            y = _conv_forward(x, layer)
            if cache is not None:
                cache.append((x, y))
            x = y
        return x

    def backward(self, cache, dy):
        """Backprop through cached activations; returns (dx, grads) where
        grads is a list of (d_weight, d_bias) aligned with layers."""
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            x, y = cache[i]
            dy, d_w, d_b = _conv_backward(x, y, dy, self.layers[i])
            grads[i] = (d_w, d_b)
        return dy, grads

    def params(self):
        for layer in self.layers:
            yield layer


# ---------------------------------------------------------------------------
# Value maps
# ---------------------------------------------------------------------------


def pick_values(net: ConvStack, view) -> np.ndarray:
    """Per-pixel pick action values for one view (lower = better)."""
    out = net.forward(view)
    return out[:, :, 0]


def _fft_correlate_same(stack, kernel):
    """Channel-summed cross-correlation with 'same' zero padding.

    stack is (H, W, C), kernel (c, c, C) with odd c; returns (H, W).
    """
    from scipy.signal import fftconvolve

    flipped = kernel[::-1, ::-1]
    out = fftconvolve(
        stack.transpose(2, 0, 1), flipped.transpose(2, 0, 1), mode="same", axes=(1, 2)
    )
    return out.sum(axis=0)


def extract_crop(feat, pixel, crop):
    """(crop, crop, C) window centered on pixel, zero-padded at borders."""
    h, w = feat.shape[:2]
    r = crop // 2
    u, v = int(pixel[0]), int(pixel[1])
    out = np.zeros((crop, crop, feat.shape[2]), dtype=feat.dtype)
    y0, y1 = max(0, v - r), min(h, v + r + 1)
    x0, x1 = max(0, u - r), min(w, u + r + 1)
    out[(y0 - (v - r)):(y1 - (v - r)), (x0 - (u - r)):(x1 - (u - r))] = feat[y0:y1, x0:x1]
    return out


def scatter_crop(dcrop, shape, pixel):
    """Adjoint of extract_crop: place the crop gradient back into a zero map."""
    crop = dcrop.shape[0]
    h, w = shape[:2]
    r = crop // 2
    u, v = int(pixel[0]), int(pixel[1])
    out = np.zeros(shape, dtype=dcrop.dtype)
    y0, y1 = max(0, v - r), min(h, v + r + 1)
    x0, x1 = max(0, u - r), min(w, u + r + 1)
    out[y0:y1, x0:x1] = dcrop[(y0 - (v - r)):(y1 - (v - r)), (x0 - (u - r)):(x1 - (u - r))]
    return out


def place_values(featnet_scene: ConvStack, featnet_crop: ConvStack, pick_view,
                 pick_pixel, place_view, crop=DEFAULT_CROP) -> np.ndarray:
    """Pick-conditioned place values: correlate features cropped around the
    pick pixel against the place view's feature map, negated so lower wins."""
    crop_feat = extract_crop(featnet_crop.forward(pick_view), pick_pixel, crop)
    scene_feat = featnet_scene.forward(place_view)
    return -_fft_correlate_same(scene_feat, crop_feat)


def _correlate_backward(scene_feat, crop_feat, dmap):
    """Adjoints of the channel-summed same-padding correlation."""
    from scipy.signal import fftconvolve

    c = crop_feat.shape[0]
    r = c // 2
    # d scene[q, ch] = sum_p dmap[p] * crop[q - p + r, ch] -> convolution
    dscene = fftconvolve(
        dmap[None, :, :], crop_feat.transpose(2, 0, 1), mode="same", axes=(1, 2)
    ).transpose(1, 2, 0)
    # d crop[delta, ch] = sum_p dmap[p] * scene[p + delta - r, ch]
    h, w = dmap.shape
    full = fftconvolve(
        scene_feat.transpose(2, 0, 1), dmap[None, ::-1, ::-1], mode="full", axes=(1, 2)
    )
    dcrop = full[:, h - 1 - r : h + r, w - 1 - r : w + r].transpose(1, 2, 0)
    return dscene, np.ascontiguousarray(dcrop)


# ---------------------------------------------------------------------------
# Contrastive loss
# ---------------------------------------------------------------------------


def contrastive_loss(e_pos, e_negs):
    """Softmax cross-entropy of the positive against the negatives.

    loss = -log( e^{-e_pos} / (e^{-e_pos} + sum_j e^{-e_negs[j]}) ), computed
    with max-shift stabilization. Returns (loss, d_e_pos, d_e_negs).
    """
    e_negs = np.asarray(e_negs, dtype=np.float64)
    if e_negs.size < 1:
        raise ConfigError("contrastive loss needs at least one negative")
    all_e = np.concatenate([[float(e_pos)], e_negs.ravel()])
    shift = (-all_e).max()
    ex = np.exp(-all_e - shift)
    z = ex.sum()
    p = ex / z
    loss = -np.log(p[0])
    # dL/dE_pos = 1 - p_pos ; dL/dE_j = -p_j
    return float(loss), float(1.0 - p[0]), (-p[1:]).reshape(e_negs.shape)


def _map_softmax_loss(maps, pos_map_index, pos_pixel):
    """Contrastive loss over concatenated value maps.

    maps is a list of (H, W) arrays; the positive is one pixel of one map and
    every other pixel of every map is a negative. Returns (loss, grad_maps).
    """
    flat = np.concatenate([m.ravel() for m in maps])
    h, w = maps[0].shape
    pos = pos_map_index * h * w + pos_pixel[1] * w + pos_pixel[0]
    neg = -flat
    shift = neg.max()
    ex = np.exp(neg - shift)
    z = ex.sum()
    p = ex / z
    loss = float(-np.log(max(p[pos], 1e-300)))
    g = -p
    g[pos] += 1.0
    grads = []
    off = 0
    for m in maps:
        grads.append(g[off : off + m.size].reshape(m.shape))
        off += m.size
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyperparams:
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    extra_views: int = 3  # negative views sampled per step
    crop: int = DEFAULT_CROP
    seed: int = 0
    own_view_negatives_only: bool = False  # ablation: drop multi-view negatives
    log_every: int = 10


@dataclass
class PolicyModel:
    pick_net: ConvStack
    place_scene_net: ConvStack
    place_crop_net: ConvStack
    crop: int = DEFAULT_CROP
    place_depth_offset: float = 0.0

    def pick_map(self, view):
        return pick_values(self.pick_net, view)

    def place_map(self, pick_view, pick_pixel, place_view):
        return place_values(
            self.place_scene_net, self.place_crop_net, pick_view, pick_pixel,
            place_view, self.crop,
        )


class _Momentum:
    def __init__(self, stacks, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.vel = [
            [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in s.layers]
            for s in stacks
        ]
        self.stacks = stacks

    def step(self, grads_per_stack):
        for s, stack in enumerate(self.stacks):
            grads = grads_per_stack[s]
            if grads is None:
                continue
            for i, layer in enumerate(stack.layers):
                d_w, d_b = grads[i]
                vw, vb = self.vel[s][i]
                vw *= self.momentum
                vw += d_w.astype(np.float32)
                vb *= self.momentum
                vb += d_b.astype(np.float32)
                layer.weight -= self.lr * vw
                layer.bias -= self.lr * vb


def _accumulate(total, grads):
    if total is None:
        return [(dw.copy(), db.copy()) for dw, db in grads]
    for i, (dw, db) in enumerate(grads):
        total[i] = (total[i][0] + dw, total[i][1] + db)
    return total


def train(demos, hyper: TrainHyperparams, log_path=None):
    """Train pick and place models on expert demonstrations.

    Per step and per model: the positive is the annotated pixel of its
    annotated view; negatives are every other pixel of that view plus all
    pixels of up to hyper.extra_views other rendered views of the same scene.
    Returns (PolicyModel, log) where log rows are (step, pick_loss, place_loss).
    """
    if not demos:
        raise ConfigError("training needs at least one demonstration")
    rng = np.random.default_rng(hyper.seed)
    pick_net = ConvStack.create(PICK_PLAN, rng)
    scene_net = ConvStack.create(FEAT_PLAN, rng, final_zero=False)
    crop_net = ConvStack.create(FEAT_PLAN, rng, final_zero=False)
    opt = _Momentum([pick_net, scene_net, crop_net], hyper.lr, hyper.momentum)

    offsets = [d.place_depth_offset for d in demos]
    model = PolicyModel(
        pick_net, scene_net, crop_net, hyper.crop, float(np.mean(offsets))
    )

    log = []
    order = np.arange(len(demos))
    for step in range(hyper.steps):
        if step % len(demos) == 0:
            rng.shuffle(order)
        demo = demos[order[step % len(demos)]]
        n_extra = 0 if hyper.own_view_negatives_only else hyper.extra_views
        pool = list(demo.negatives)
        extra = []
        if n_extra > 0 and pool:
            idx = rng.choice(len(pool), size=min(n_extra, len(pool)), replace=False)
            extra = [pool[i][1] for i in idx]

        # pick model
        views = [demo.pick_image] + extra
        caches = []
        maps = []
        for v in views:
            cache = []
            out = pick_net.forward(v, cache)
            caches.append(cache)
            maps.append(out[:, :, 0])
        pick_loss, dmaps = _map_softmax_loss(maps, 0, demo.pick_pixel)
        total = None
        for cache, dm in zip(caches, dmaps):
            _, grads = pick_net.backward(cache, dm[:, :, None])
            total = _accumulate(total, grads)
        pick_grads = total

        # place model, conditioned on the demo's ground-truth pick
        crop_cache = []
        crop_full = crop_net.forward(demo.pick_image, crop_cache)
        crop_feat = extract_crop(crop_full, demo.pick_pixel, hyper.crop)
        place_views = [demo.place_image] + extra
        scene_caches = []
        scene_feats = []
        maps = []
        for v in place_views:
            cache = []
            feat = scene_net.forward(v, cache)
            scene_caches.append(cache)
            scene_feats.append(feat)
            maps.append(-_fft_correlate_same(feat, crop_feat))
        place_loss, dmaps = _map_softmax_loss(maps, 0, demo.place_pixel)
        scene_total = None
        dcrop_total = np.zeros_like(crop_feat)
        for cache, feat, dm in zip(scene_caches, scene_feats, dmaps):
            dscene, dcrop = _correlate_backward(feat, crop_feat, -dm)
            dcrop_total += dcrop
            _, grads = scene_net.backward(cache, dscene)
            scene_total = _accumulate(scene_total, grads)
        dcrop_full = scatter_crop(dcrop_total, crop_full.shape, demo.pick_pixel)
        _, crop_grads = crop_net.backward(crop_cache, dcrop_full)

        if not (np.isfinite(pick_loss) and np.isfinite(place_loss)):
            raise NumericsError(
                f"non-finite training loss at step {step} "
                f"(pick {pick_loss}, place {place_loss}, demo order {order[step % len(demos)]})"
            )
        opt.step([pick_grads, scene_total, crop_grads])
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            log.append((step, pick_loss, place_loss))

    if log_path is not None:
        write_training_log(log_path, log)
    return model, log


def write_training_log(path, log):
    try:
        with open(path, "w") as f:
            f.write("step,pick_loss,place_loss\n")
            for step, pl, ql in log:
                f.write(f"{step},{pl:.6f},{ql:.6f}\n")
    except OSError as e:
        raise IOFailure(f"cannot write training log {path}: {e}") from e


# ---------------------------------------------------------------------------
# Checkpoint format: magic "MIRC", version u32, crop u32, place offset f64,
# stack count u32, then per stack a layer table (k, cin, cout, relu as u32)
# followed by weights and biases as little-endian f32 in layer order.
# Documented in docs/file-formats.md.
# ---------------------------------------------------------------------------


def save_model(model: PolicyModel, path):
    try:
        with open(path, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<IId", MODEL_VERSION, model.crop, model.place_depth_offset))
            stacks = [model.pick_net, model.place_scene_net, model.place_crop_net]
            f.write(struct.pack("<I", len(stacks)))
            for stack in stacks:
                f.write(struct.pack("<I", len(stack.layers)))
                for layer in stack.layers:
                    k, _, cin, cout = (
                        layer.weight.shape[0],
                        layer.weight.shape[1],
                        layer.weight.shape[2],
                        layer.weight.shape[3],
                    )
                    f.write(struct.pack("<IIII", k, cin, cout, int(layer.relu)))
                for layer in stack.layers:
                    f.write(layer.weight.astype("<f4").tobytes())
                    f.write(layer.bias.astype("<f4").tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write model checkpoint {path}: {e}") from e


def load_model(path) -> PolicyModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read model checkpoint {path}: {e}") from e
    if raw[:4] != MODEL_MAGIC:
        raise ConfigError(f"{path}: not a model checkpoint")
    off = 4
    ver, crop, offset = struct.unpack_from("<IId", raw, off)
    off += struct.calcsize("<IId")
    if ver != MODEL_VERSION:
        raise ConfigError(f"{path}: unsupported version {ver}")
    (n_stacks,) = struct.unpack_from("<I", raw, off)
    off += 4
    stacks = []
    for _ in range(n_stacks):
        (n_layers,) = struct.unpack_from("<I", raw, off)
        off += 4
        table = []
        for _ in range(n_layers):
            k, cin, cout, relu = struct.unpack_from("<IIII", raw, off)
            off += 16
            table.append((k, cin, cout, bool(relu)))
        layers = []
        for k, cin, cout, relu in table:
            n_w = k * k * cin * cout
            w = np.frombuffer(raw, dtype="<f4", count=n_w, offset=off).reshape(k, k, cin, cout)
            off += 4 * n_w
            b = np.frombuffer(raw, dtype="<f4", count=cout, offset=off)
            off += 4 * cout
            layers.append(ConvLayer(w.copy(), b.copy(), relu))
        stacks.append(ConvStack(layers))
    if len(stacks) != 3:
        raise ConfigError(f"{path}: expected 3 stacks, found {len(stacks)}")
    return PolicyModel(stacks[0], stacks[1], stacks[2], crop, offset)
