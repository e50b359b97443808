"""Bounded dense voxel radiance field: query, volume rendering, and fitting.

The field stores raw density and color grids; densities map through softplus
and colors through a sigmoid, so the physical constraints (sigma >= 0,
color in [0,1]^3) hold by construction. Queries interpolate the raw grids
trilinearly and then apply the activations. Fitting minimizes the photometric
loss over sampled rays by plain gradient descent with a cosine-decayed step,
using the analytic gradients of the quadrature in _kernels.fit_batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from viewplan import _kernels
from viewplan.errors import ConfigError, IOFailure, NumericsError
from viewplan.geometry import CameraModel, Projection, Ray
from viewplan.images import psnr

FIELD_MAGIC = b"MIRF"
FIELD_VERSION = 1

# Raw-density initialization: softplus^-1(0.01), a nearly transparent volume.
RAW_DENSITY_INIT = float(np.log(np.expm1(0.01)))


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return np.log(np.expm1(y))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x)))


@dataclass(frozen=True)
class RenderSettings:
    """Ray-march bounds and sample count; colors composite onto background."""

    t_near: float
    t_far: float
    n_samples: int
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (0 <= self.t_near < self.t_far):
            raise ConfigError("need 0 <= t_near < t_far")
        if self.n_samples < 2:
            raise ConfigError("need at least 2 samples per ray")
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        if np.any(bg < 0) or np.any(bg > 1):
            raise ConfigError("background color must lie in [0,1]^3")
        object.__setattr__(self, "background", bg)


@dataclass
class RadianceField:
    """Axis-aligned grid of raw (density, color) values over a bounding box."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    raw_density: np.ndarray  # (nx, ny, nz)
    raw_color: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_min < self.bbox_max):
            raise ConfigError("bbox_min must be strictly below bbox_max")
        if self.raw_density.ndim != 3 or min(self.raw_density.shape) < 2:
            raise ConfigError("need at least 2 grid nodes per axis")
        if self.raw_color.shape != self.raw_density.shape + (3,):
            raise ConfigError("color grid shape must match density grid plus channels")

    @property
    def resolution(self):
        return self.raw_density.shape

    @staticmethod
    def create(bbox_min, bbox_max, resolution, dtype=np.float32) -> "RadianceField":
        nx, ny, nz = resolution
        return RadianceField(
            np.asarray(bbox_min, dtype=np.float64),
            np.asarray(bbox_max, dtype=np.float64),
            np.full((nx, ny, nz), RAW_DENSITY_INIT, dtype=dtype),
            np.zeros((nx, ny, nz, 3), dtype=dtype),
        )

    def _inv_cell(self):
        res = np.asarray(self.resolution, dtype=np.float64)
        return (res - 1.0) / (self.bbox_max - self.bbox_min)


def query(field: RadianceField, x):
    """Density and color at point(s) x; outside the bbox sigma is 0 and the
    color reports a neutral 0.5 gray."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f = (pts - field.bbox_min) * field._inv_cell()
    res = np.asarray(field.resolution)
    inside = np.all((f >= 0) & (f <= res - 1), axis=1)
    fc = np.clip(f, 0, res - 1.0)
    i0 = np.minimum(fc.astype(np.int64), res - 2)
    w = fc - i0
    rawd = np.zeros(len(pts))
    rawc = np.zeros((len(pts), 3))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ww = (
                    (w[:, 0] if dx else 1 - w[:, 0])
                    * (w[:, 1] if dy else 1 - w[:, 1])
                    * (w[:, 2] if dz else 1 - w[:, 2])
                )
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                rawd += ww * field.raw_density[ix, iy, iz]
                rawc += ww[:, None] * field.raw_color[ix, iy, iz]
    sig = softplus(rawd)
    col = sigmoid(rawc)
    sig[~inside] = 0.0
    col[~inside] = 0.5
    if np.asarray(x).ndim == 1:
        return float(sig[0]), col[0]
    return sig, col


def render_rays(field: RadianceField, origins, dirs, settings: RenderSettings,
                term_eps: float = 0.0, w_skip: float = 0.0):
    """Deterministic midpoint-rule rendering of a ray batch.

    Returns (rgb (N,3), transmittance_final (N,), depth (N,), weight_sum (N,)).
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    out_rgb = np.empty((n, 3))
    out_tfin = np.empty(n)
    out_depth = np.empty(n)
    out_wsum = np.empty(n)
    _kernels.render_batch(
        field.raw_density, field.raw_color, field.bbox_min, field._inv_cell(),
        origins, dirs, float(settings.t_near), float(settings.t_far),
        int(settings.n_samples), settings.background, float(term_eps),
        float(w_skip), out_rgb, out_tfin, out_depth, out_wsum,
    )
    return out_rgb, out_tfin, out_depth, out_wsum


def render_ray(field: RadianceField, ray: Ray, settings: RenderSettings):
    """Render one ray; returns (color, transmittance_final, depth)."""
    rgb, tfin, depth, _ = render_rays(field, ray.origin[None], ray.direction[None], settings)
    return rgb[0], float(tfin[0]), float(depth[0])


def render_image(field: RadianceField, cam: CameraModel, settings: RenderSettings,
                 term_eps: float = 0.0, w_skip: float = 0.0):
    """Render the full pixel grid; returns (rgb (H,W,3) float32, depth (H,W))."""
    k = cam.intrinsics
    origins, dirs = cam.pixel_grid_rays()
    rgb, _, depth, _ = render_rays(field, origins, dirs, settings, term_eps, w_skip)
    return (
        rgb.reshape(k.height, k.width, 3).astype(np.float32),
        depth.reshape(k.height, k.width),
    )


@dataclass(frozen=True)
class FitHyperparams:
    steps: int = 2000
    batch_rays: int = 8192
    lr_density: float = 6000.0
    lr_color: float = 1500.0
    lr_final_frac: float = 0.05  # cosine decay floor as a fraction of the base step
    holdout_every: int = 10  # every Nth view is held out for the PSNR report
    seed: int = 0


@dataclass
class FitResult:
    field: RadianceField
    holdout_psnr: float
    loss_history: np.ndarray  # mean squared residual per step


def fit(views, settings: RenderSettings, hyper: FitHyperparams,
        bbox_min, bbox_max, resolution, dtype=np.float32) -> FitResult:
    """Fit a field to posed perspective images by minibatch gradient descent.

    views is a list of (image (H,W,3) in [0,1], CameraModel) pairs; at least
    two distinct perspective poses are required. Views at indices divisible by
    holdout_every are excluded from training and used for the PSNR report.
    """
    if len(views) < 2:
        raise ConfigError("fitting needs at least 2 views")
    for _, cam in views:
        if cam.projection is not Projection.PERSPECTIVE:
            raise ConfigError("training views must use perspective cameras")
    positions = [cam.pose.translation for _, cam in views]
    if all(np.allclose(positions[0], p, atol=1e-9) for p in positions[1:]):
        raise ConfigError("training views must have distinct poses")

    holdout, train = [], []
    for i, pair in enumerate(views):
        if hyper.holdout_every > 0 and i % hyper.holdout_every == 0 and len(views) > 2:
            holdout.append(pair)
        else:
            train.append(pair)
    if not holdout:
        holdout = [views[0]]

    origins_all, dirs_all, targets_all = [], [], []
    for img, cam in train:
        k = cam.intrinsics
        if img.shape[:2] != (k.height, k.width):
            raise ConfigError("image size does not match camera intrinsics")
        o, d = cam.pixel_grid_rays()
        origins_all.append(o)
        dirs_all.append(d)
        targets_all.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    origins_all = np.concatenate(origins_all)
    dirs_all = np.concatenate(dirs_all)
    targets_all = np.concatenate(targets_all)

    fld = RadianceField.create(bbox_min, bbox_max, resolution, dtype=dtype)
    nb = _kernels.GRAD_BLOCKS
    grad_d = np.zeros((nb,) + fld.resolution, dtype=dtype)
    grad_c = np.zeros((nb,) + fld.resolution + (3,), dtype=dtype)
    scratch = np.zeros((nb, settings.n_samples, _kernels._SC))
    loss_out = np.zeros(nb)

    rng = np.random.default_rng(hyper.seed)
    n_rays = origins_all.shape[0]
    losses = np.zeros(hyper.steps, dtype=np.float32)
    for step in range(hyper.steps):
        idx = rng.integers(0, n_rays, size=min(hyper.batch_rays, n_rays))
        o = np.ascontiguousarray(origins_all[idx])
        d = np.ascontiguousarray(dirs_all[idx])
        tgt = np.ascontiguousarray(targets_all[idx])
        grad_d[:] = 0
        grad_c[:] = 0
        _kernels.fit_batch(
            fld.raw_density, fld.raw_color, fld.bbox_min, fld._inv_cell(),
            o, d, tgt, float(settings.t_near), float(settings.t_far),
            int(settings.n_samples), int(rng.integers(0, 2**62)),
            settings.background, grad_d, grad_c, loss_out, scratch,
        )
        batch = len(idx)
        loss = float(loss_out.sum()) / batch
        losses[step] = loss
        if not np.isfinite(loss):
            raise NumericsError(
                f"non-finite photometric loss at step {step} "
                f"(batch {batch}, lr_d {hyper.lr_density}, lr_c {hyper.lr_color})"
            )
        # Cosine-decayed plain gradient descent.
        decay = hyper.lr_final_frac + (1 - hyper.lr_final_frac) * 0.5 * (
            1 + np.cos(np.pi * step / max(1, hyper.steps - 1))
        )
        gd = grad_d.sum(axis=0)
        gc = grad_c.sum(axis=0)
        fld.raw_density -= (dtype(hyper.lr_density * decay / batch)) * gd
        fld.raw_color -= (dtype(hyper.lr_color * decay / batch)) * gc

    mses = []
    for img, cam in holdout:
        rgb, _ = render_image(fld, cam, settings)
        mses.append(np.mean((rgb.astype(np.float64) - img) ** 2))
    holdout_psnr = float(10 * np.log10(1.0 / max(float(np.mean(mses)), 1e-12)))
    return FitResult(fld, holdout_psnr, losses)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "MIRF", version u32, bbox 6 x f64 (min then max),
# resolution 3 x u32, then the raw density grid and the raw color grid as
# little-endian f32 in x-fastest voxel order (color keeps r,g,b contiguous
# per voxel). Documented in docs/file-formats.md.
# ---------------------------------------------------------------------------


def save_field(fld: RadianceField, path):
    nx, ny, nz = fld.resolution
    header = FIELD_MAGIC + struct.pack(
        "<I6d3I", FIELD_VERSION, *fld.bbox_min, *fld.bbox_max, nx, ny, nz
    )
    dens = np.transpose(fld.raw_density.astype("<f4"), (2, 1, 0)).ravel()
    cols = np.transpose(fld.raw_color.astype("<f4"), (2, 1, 0, 3)).ravel()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(dens.tobytes())
            f.write(cols.tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write field checkpoint {path}: {e}") from e


def load_field(path) -> RadianceField:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read field checkpoint {path}: {e}") from e
    if raw[:4] != FIELD_MAGIC:
        raise ConfigError(f"{path}: not a field checkpoint")
    ver, = struct.unpack_from("<I", raw, 4)
    if ver != FIELD_VERSION:
        raise ConfigError(f"{path}: unsupported version {ver}")
    vals = struct.unpack_from("<6d3I", raw, 8)
    bb_lo, bb_hi = np.array(vals[:3]), np.array(vals[3:6])
    nx, ny, nz = vals[6:9]
    off = 4 + 4 + 48 + 12
    n = nx * ny * nz
    dens = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
    cols = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off + 4 * n)
    raw_d = np.ascontiguousarray(np.transpose(dens.reshape(nz, ny, nx), (2, 1, 0)))
    raw_c = np.ascontiguousarray(np.transpose(cols.reshape(nz, ny, nx, 3), (2, 1, 0, 3)))
    return RadianceField(bb_lo, bb_hi, raw_d, raw_c)
