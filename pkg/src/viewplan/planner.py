"""Action selection over imagined views: sample a view set, render it from
the fitted field, score every pixel with the affordance models, argmin, and
convert (view, pixel, depth) into tool poses.

Tie-breaking is fixed everywhere: ascending view index, then row-major pixel
order within a view. Selection equals a naive full scan over the stacked
score maps by construction; the naive scan is kept in tests as the oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from viewplan.errors import ConfigError, DomainError, IOFailure, NumericsError
from viewplan.field import RadianceField, RenderSettings, render_image
from viewplan.geometry import (
    CameraModel,
    Intrinsics,
    Projection,
    RigidPose,
    rotation_x,
    rotation_y,
    rotation_z,
)
from viewplan.images import write_image

# Camera frame for a straight-down view: x east, y south, z down.
R_TOPDOWN = np.diag([1.0, -1.0, -1.0])

# Tool z opposes the view axis, so a top-down view gives an identity tool pose.
TOOL_FLIP = np.diag([1.0, -1.0, -1.0])

POLICY_INTRINSICS = Intrinsics(fx=320.0, fy=320.0, cx=80.0, cy=60.0, width=160, height=120)


@dataclass(frozen=True)
class ViewSet:
    cameras: tuple
    yaw_count: int
    tilt_count: int
    tilt_max: float

    def __len__(self):
        return len(self.cameras)


def _tilt_pairs(tilt_count, tilt_max):
    """Deterministic (tilt_x, tilt_y) grid with tilt_count entries, spread
    uniformly over [-tilt_max, tilt_max] on both axes."""
    if tilt_count == 1:
        return [(0.0, 0.0)]
    a = int(np.floor(np.sqrt(tilt_count)))
    while tilt_count % a != 0:
        a -= 1
    b = tilt_count // a

    def axis_values(n):
        if n == 1:
            return np.array([0.0])
        return np.linspace(-tilt_max, tilt_max, n)

    pairs = []
    for ty in axis_values(b):
        for tx in axis_values(a):
            pairs.append((float(tx), float(ty)))
    return pairs


def view_rotation(yaw, tilt_x, tilt_y):
    return rotation_z(yaw) @ rotation_y(tilt_y) @ rotation_x(tilt_x) @ R_TOPDOWN


def sample_views(yaw_count, tilt_count, tilt_max, center, standoff,
                 intrinsics: Intrinsics = POLICY_INTRINSICS) -> ViewSet:
    """Deterministic grid of orthographic cameras looking into the workspace.

    Yaw is uniform over [-pi, pi); tilt applies the (tilt_x, tilt_y) grid on
    both horizontal axes combined into one rotation. Cameras sit at the given
    standoff from the workspace center along their own view axis.
    """
    if not (0 <= tilt_max <= np.pi / 4 + 1e-12):
        raise ConfigError("tilt range must lie within [0, pi/4]")
    if yaw_count < 1 or tilt_count < 1:
        raise ConfigError("view counts must be at least 1")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    yaws = -np.pi + 2 * np.pi * np.arange(yaw_count) / yaw_count
    for tx, ty in _tilt_pairs(tilt_count, tilt_max):
        for yaw in yaws:
            rot = view_rotation(yaw, tx, ty)
            axis = rot[:, 2]
            pos = center - standoff * axis
            cams.append(
                CameraModel(RigidPose(rot, pos), intrinsics, Projection.ORTHOGRAPHIC)
            )
    return ViewSet(tuple(cams), yaw_count, tilt_count, tilt_max)


def perspective_views(views: ViewSet, intrinsics: Intrinsics | None = None) -> ViewSet:
    """The same camera poses with perspective projection (ablation variant)."""
    if intrinsics is None:
        k = views.cameras[0].intrinsics
        # keep a comparable footprint at the standoff distance
        intrinsics = k
    cams = tuple(
        CameraModel(c.pose, intrinsics, Projection.PERSPECTIVE) for c in views.cameras
    )
    return ViewSet(cams, views.yaw_count, views.tilt_count, views.tilt_max)


def render_views(field: RadianceField, views, settings: RenderSettings,
                 term_eps=1e-5, w_skip=1e-7):
    """Render every view; returns (rgbs (V,H,W,3) float32, depths (V,H,W))."""
    cams = getattr(views, "cameras", views)
    rgbs, depths = [], []
    for cam in cams:
        rgb, depth = render_image(field, cam, settings, term_eps=term_eps, w_skip=w_skip)
        rgbs.append(rgb)
        depths.append(depth)
    return np.stack(rgbs), np.stack(depths)


# ---------------------------------------------------------------------------
# Argmin selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Selection:
    view_index: int
    pixel: tuple  # (u, v)
    value: float


def argmin_over_maps(maps) -> Selection:
    """Global argmin over a stack of (H, W) score maps with the documented
    tie-break: lowest view index first, then row-major pixel order."""
    maps = np.asarray(maps)
    if not np.all(np.isfinite(maps)):
        if np.all(~np.isfinite(maps)):
            raise NumericsError("all action-value maps are non-finite")
        maps = np.where(np.isfinite(maps), maps, np.inf)
    flat = int(np.argmin(maps.reshape(len(maps), -1)))
    # np.argmin returns the first occurrence in C order, which matches the
    # documented tie-break exactly
    v, rest = divmod(flat, maps.shape[1] * maps.shape[2])
    row, col = divmod(rest, maps.shape[2])
    return Selection(v, (col, row), float(maps[v, row, col]))


def ranked_candidates(maps, count):
    """First `count` selections in ascending (value, view, row-major pixel)."""
    maps = np.asarray(maps)
    flat = np.where(np.isfinite(maps), maps, np.inf).ravel()
    count = min(count, flat.size)
    part = np.argpartition(flat, count - 1)[:count]
    part = part[np.lexsort((part, flat[part]))]  # stable: value then flat index
    out = []
    hw = maps.shape[1] * maps.shape[2]
    for idx in part:
        v, rest = divmod(int(idx), hw)
        row, col = divmod(rest, maps.shape[2])
        out.append(Selection(v, (col, row), float(maps[v, row, col])))
    return out


def select_pick(field, views, model, settings, renders=None) -> Selection:
    """Render every view, score pick values, return the global argmin."""
    rgbs = renders[0] if renders is not None else render_views(field, views, settings)[0]
    maps = [model.pick_map(img) for img in rgbs]
    return argmin_over_maps(maps)


def select_place(field, views, model, settings, pick_sel: Selection,
                 renders=None) -> Selection:
    """Transport-conditioned place scoring over all views, same tie-break."""
    rgbs = renders[0] if renders is not None else render_views(field, views, settings)[0]
    pick_img = rgbs[pick_sel.view_index]
    maps = place_maps(model, pick_img, pick_sel.pixel, rgbs)
    return argmin_over_maps(maps)


def place_maps(model, pick_img, pick_pixel, rgbs):
    """Place value maps for many views sharing one conditioning crop."""
    from viewplan.affordance import _fft_correlate_same, extract_crop

    crop_feat = extract_crop(
        model.place_crop_net.forward(pick_img), pick_pixel, model.crop
    )
    return [
        -_fft_correlate_same(model.place_scene_net.forward(img), crop_feat)
        for img in rgbs
    ]


# ---------------------------------------------------------------------------
# From selection to poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraspConvention:
    """Fixed tool frame relative to the winning view, plus the along-axis
    offset between the rendered place surface and the grasp target."""

    tool_rotation: np.ndarray = dc_field(default_factory=lambda: TOOL_FLIP.copy())
    place_depth_offset: float = 0.0


@dataclass(frozen=True)
class PickPlaceAction:
    t_pick: RigidPose
    t_place: RigidPose
    provenance: dict = dc_field(default_factory=dict)


def action_from_selection(view: CameraModel, pixel, depth, settings: RenderSettings,
                          convention: GraspConvention = GraspConvention()) -> RigidPose:
    """Pose for a (view, pixel, depth) selection.

    The position is the orthographic ray origin for the given (possibly
    fractional) pixel coordinate advanced by depth along the view axis; the
    orientation is the view rotation composed with the tool convention.
    Depth at or beyond the render bounds signals an empty-ray selection and
    raises DomainError so the caller can retry the next-best candidate.
    """
    if not (settings.t_near < depth < settings.t_far):
        raise DomainError(f"depth {depth:.4f} outside ({settings.t_near}, {settings.t_far})")
    ray = view.ray(pixel[0], pixel[1])
    pos = ray.origin + depth * ray.direction
    rot = view.pose.rotation @ convention.tool_rotation
    return RigidPose(rot, pos)


def _workspace_ok(pose: RigidPose, lo, hi):
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    span = hi - lo
    return bool(
        np.all(pose.translation >= lo - 0.05 * span)
        and np.all(pose.translation <= hi + 0.05 * span)
    )


@dataclass
class PlannerConfig:
    retries: int = 5
    refine_rounds: int = 0
    refine_span_frac: float = 0.5  # refine offsets as a fraction of grid spacing
    term_eps: float = 1e-5
    w_skip: float = 1e-7
    keep_maps: bool = False  # stash score stacks in the report (for montages)


def _grid_spacing(views: ViewSet):
    yaw = 2 * np.pi / views.yaw_count
    pairs = _tilt_pairs(views.tilt_count, views.tilt_max)
    txs = sorted({p[0] for p in pairs})
    tys = sorted({p[1] for p in pairs})
    tx = min(np.diff(txs)) if len(txs) > 1 else 2 * views.tilt_max
    ty = min(np.diff(tys)) if len(tys) > 1 else 2 * views.tilt_max
    return yaw, float(tx), float(ty)


def _refined_cameras(base_cam: CameraModel, spans, center, standoff):
    """3x3x3 grid of orientation offsets around one view (incumbent included)."""
    dyaw, dtx, dty = spans
    cams = []
    for oy in (-dyaw, 0.0, dyaw):
        for ox in (-dtx, 0.0, dtx):
            for oz in (-dty, 0.0, dty):
                rot = rotation_z(oy) @ rotation_y(oz) @ rotation_x(ox) @ base_cam.pose.rotation
                pos = center - standoff * rot[:, 2]
                cams.append(CameraModel(RigidPose(rot, pos), base_cam.intrinsics,
                                        base_cam.projection))
    return cams


def plan(field: RadianceField, views: ViewSet, model, settings: RenderSettings,
         convention: GraspConvention, workspace_lo, workspace_hi,
         config: PlannerConfig | None = None):
    """Full selection loop; returns (PickPlaceAction, report dict).

    Candidate selections whose depth sits at the render bounds or whose pose
    leaves the expanded workspace are skipped, falling back to the next-best
    value up to config.retries times. Optional refinement rounds re-run the
    search on a small orientation grid around the incumbent winner.
    """
    if config is None:
        config = PlannerConfig()
    center = np.mean([np.asarray(workspace_lo), np.asarray(workspace_hi)], axis=0)
    standoff = float(np.linalg.norm(
        views.cameras[0].pose.translation - center
    )) if len(views.cameras) else 0.55

    cams = list(views.cameras)
    rgbs, depths = render_views(field, cams, settings, config.term_eps, config.w_skip)
    report = {"views": len(cams)}

    def choose(maps, depth_stack, cam_list, offset, kind):
        candidates = ranked_candidates(maps, config.retries + 1)
        for sel in candidates:
            u, v = sel.pixel
            depth = float(depth_stack[sel.view_index][v, u]) - offset
            try:
                pose = action_from_selection(
                    cam_list[sel.view_index], (u + 0.5, v + 0.5), depth, settings, convention
                )
            except DomainError:
                continue
            if not _workspace_ok(pose, workspace_lo, workspace_hi):
                continue
            return sel, pose, depth
        raise DomainError(f"no valid {kind} selection within {config.retries + 1} candidates")

    base_spacing = _grid_spacing(views)

    # --- pick ---
    pick_maps = [model.pick_map(img) for img in rgbs]
    report["pick_view_minima"] = [float(np.min(m)) for m in pick_maps]
    pick_sel, pick_pose, pick_depth = choose(pick_maps, depths, cams, 0.0, "pick")
    pick_img = rgbs[pick_sel.view_index]
    pick_cams = cams
    spans = tuple(s * config.refine_span_frac / 2 for s in base_spacing)
    for _ in range(config.refine_rounds):
        ref_cams = _refined_cameras(pick_cams[pick_sel.view_index], spans, center, standoff)
        ref_rgbs, ref_depths = render_views(field, ref_cams, settings,
                                            config.term_eps, config.w_skip)
        ref_maps = [model.pick_map(img) for img in ref_rgbs]
        pick_sel, pick_pose, pick_depth = choose(ref_maps, ref_depths, ref_cams, 0.0, "pick")
        pick_img = ref_rgbs[pick_sel.view_index]
        pick_cams = ref_cams
        spans = tuple(s * config.refine_span_frac for s in spans)

    # --- place, conditioned on the chosen pick ---
    place_maps_all = place_maps(model, pick_img, pick_sel.pixel, rgbs)
    report["place_view_minima"] = [float(np.min(m)) for m in place_maps_all]
    place_sel, place_pose, place_depth = choose(
        place_maps_all, depths, cams, convention.place_depth_offset, "place"
    )
    place_cams = cams
    spans = tuple(s * config.refine_span_frac / 2 for s in base_spacing)
    for _ in range(config.refine_rounds):
        ref_cams = _refined_cameras(place_cams[place_sel.view_index], spans, center, standoff)
        ref_rgbs, ref_depths = render_views(field, ref_cams, settings,
                                            config.term_eps, config.w_skip)
        ref_maps = place_maps(model, pick_img, pick_sel.pixel, ref_rgbs)
        place_sel, place_pose, place_depth = choose(
            ref_maps, ref_depths, ref_cams, convention.place_depth_offset, "place"
        )
        place_cams = ref_cams
        spans = tuple(s * config.refine_span_frac for s in spans)

    if config.keep_maps:
        report["_pick_maps"] = np.stack(pick_maps)
        report["_place_maps"] = np.stack(place_maps_all)
    action = PickPlaceAction(
        t_pick=pick_pose,
        t_place=place_pose,
        provenance={
            "pick_view": pick_sel.view_index,
            "pick_pixel": list(pick_sel.pixel),
            "pick_depth": pick_depth,
            "pick_value": pick_sel.value,
            "place_view": place_sel.view_index,
            "place_pixel": list(place_sel.pixel),
            "place_depth": place_depth,
            "place_value": place_sel.value,
        },
    )
    report.update(action.provenance)
    report["t_pick_3x4"] = pick_pose.matrix_3x4().tolist()
    report["t_place_3x4"] = place_pose.matrix_3x4().tolist()
    return action, report


def write_report(report, path):
    try:
        Path(path).write_text(json.dumps(report, indent=2))
    except OSError as e:
        raise IOFailure(f"cannot write planner report {path}: {e}") from e


def score_montage(maps, path, cols=None, mark=None):
    """Write a grid montage of score panels (low = bright yellow, high = dark
    blue), optionally marking one (view, pixel) selection in red."""
    maps = np.asarray(maps, dtype=np.float64)
    v, h, w = maps.shape
    lo, hi = maps.min(), maps.max()
    norm = (maps - lo) / (hi - lo) if hi > lo else np.zeros_like(maps)
    heat = np.empty((v, h, w, 3))
    heat[..., 0] = 1.0 - norm  # red falls with score
    heat[..., 1] = 1.0 - 0.8 * norm
    heat[..., 2] = 0.25 + 0.6 * norm
    if mark is not None:
        mv, (mu, mvpx) = mark
        y0, y1 = max(0, mvpx - 2), min(h, mvpx + 3)
        x0, x1 = max(0, mu - 2), min(w, mu + 3)
        heat[mv, y0:y1, x0:x1] = [1.0, 0.0, 0.0]
    if cols is None:
        cols = int(np.ceil(np.sqrt(v)))
    rows = int(np.ceil(v / cols))
    canvas = np.zeros((rows * (h + 2) + 2, cols * (w + 2) + 2, 3))
    for i in range(v):
        r, c = divmod(i, cols)
        y = 2 + r * (h + 2)
        x = 2 + c * (w + 2)
        canvas[y : y + h, x : x + w] = heat[i]
    write_image(path, canvas)
