"""Analytic tabletop scenes: oracle ray tracer, task sampling, a scripted
expert, and kinematic pick-and-place execution.

Scenes are lists of posed primitives (boxes, spheres, slotted plates) on a
table at z = 0, shaded with flat albedo times an ambient plus directional
Lambert term. Task instances are pure functions of (name, regime, seed).
Execution is kinematic: a successful suction grasp rigidly re-attaches the
target by T_place o T_pick^-1; success compares the resulting pose against
the goal under the task's symmetry rules and rejects fixture interpenetration.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from viewplan.errors import ConfigError, DomainError, IOFailure
from viewplan.geometry import (
    CameraModel,
    Intrinsics,
    Projection,
    RigidPose,
    compose,
    rotation_x,
    rotation_y,
    rotation_z,
)
from viewplan.images import read_image, write_image

# Workspace and rendering constants (meters). The table top is the z=0 plane.
WORKSPACE_LO = np.array([-0.28, -0.28, -0.03])
WORKSPACE_HI = np.array([0.28, 0.28, 0.27])
WORKSPACE_CENTER = np.array([0.0, 0.0, 0.08])
SPAWN_HALF = 0.09  # task object centers stay within this square around the origin
DISTRACTOR_HALF = 0.13

LIGHT_DIR = np.array([0.35, 0.25, -1.0]) / np.linalg.norm([0.35, 0.25, -1.0])
AMBIENT = 0.35
BACKGROUND = np.zeros(3)

# Suction grasp model and rearrangement success thresholds.
GRASP_AXIAL_TOL = 0.008  # m along the approach axis
GRASP_NORMAL_TOL_DEG = 30.0
SUCCESS_POS_TOL = 0.010  # m
SUCCESS_ROT_TOL_DEG = 10.0
PENETRATION_TOL = 0.002  # m of allowed overlap with fixtures

_EPS = 1e-9


class ExpertFailure(DomainError):
    """No planner view aligns closely enough with an expert approach axis."""


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    half_extents: tuple

    def bounding_radius(self):
        return float(np.linalg.norm(self.half_extents))


@dataclass(frozen=True)
class Sphere:
    radius: float

    def bounding_radius(self):
        return self.radius


@dataclass(frozen=True)
class SlotPlate:
    """Box with a rectangular through-hole along its local z axis."""

    half_extents: tuple
    hole_half_extents: tuple  # (hx, hy)

    def bounding_radius(self):
        return float(np.linalg.norm(self.half_extents))


def _validate_shape(shape):
    if isinstance(shape, Box):
        if min(shape.half_extents) <= 0:
            raise ConfigError("box half extents must be positive")
    elif isinstance(shape, Sphere):
        if shape.radius <= 0:
            raise ConfigError("sphere radius must be positive")
    elif isinstance(shape, SlotPlate):
        if min(shape.half_extents) <= 0 or min(shape.hole_half_extents) <= 0:
            raise ConfigError("plate dimensions must be positive")
        if (shape.hole_half_extents[0] >= shape.half_extents[0]
                or shape.hole_half_extents[1] >= shape.half_extents[1]):
            raise ConfigError("hole must be smaller than the plate")
    else:
        raise ConfigError(f"unknown shape {shape!r}")


class Role:
    TARGET = "target"
    FIXTURE = "fixture"
    DISTRACTOR = "distractor"


@dataclass(frozen=True)
class SceneObject:
    shape: object
    pose: RigidPose
    albedo: np.ndarray
    role: str = Role.DISTRACTOR

    def __post_init__(self):
        _validate_shape(self.shape)
        a = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(a < 0) or np.any(a > 1):
            raise ConfigError("albedo must lie in [0,1]^3")
        object.__setattr__(self, "albedo", a)


# ---------------------------------------------------------------------------
# Ray-primitive intersection (vectorized over rays, local object frame)
# ---------------------------------------------------------------------------


def _box_intervals(o, d, half):
    """Slab intersection; returns (t_enter, t_exit, axis, sign) of the entry."""
    half = np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    # rays parallel to an axis miss unless the origin lies inside that slab
    parallel = np.abs(d) <= _EPS
    lo = np.where(parallel, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = lo.max(axis=-1)
    t_exit = hi.min(axis=-1)
    axis = lo.argmax(axis=-1)
    rows = np.arange(o.shape[0])
    sign = -np.sign(d[rows, axis])
    sign = np.where(sign == 0, 1.0, sign)
    return t_enter, t_exit, axis, sign


def _intersect_box(o, d, half):
    t_enter, t_exit, axis, sign = _box_intervals(o, d, half)
    hit = (t_exit >= t_enter) & (t_enter > _EPS)
    t = np.where(hit, t_enter, np.inf)
    n = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    n[rows, axis] = sign
    return t, n


def _intersect_sphere(o, d, radius):
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    hit = ok & (t > _EPS)
    t = np.where(hit, t, np.inf)
    p = o + t[:, None] * d
    n = np.where(hit[:, None], p / radius, 0.0)
    return t, n


def _intersect_slot_plate(o, d, half, hole_half):
    a0, a1, axis_a, sign_a = _box_intervals(o, d, half)
    hole = np.array([hole_half[0], hole_half[1], half[2] * 4.0])
    b0, b1, _, _ = _box_intervals(o, d, hole)
    hole_valid = b1 >= b0
    # entry through the outer surface unless that point sits inside the hole void
    entry_outer = a0
    in_void = hole_valid & (b0 - 1e-12 <= a0) & (a0 <= b1 + 1e-12)
    # if the outer entry is inside the void, the material starts where the hole exits
    entry = np.where(in_void, b1, entry_outer)
    hit = (a1 >= a0) & (entry > _EPS) & (entry <= a1 + 1e-12)
    t = np.where(hit, entry, np.inf)
    n = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    n[rows, axis_a] = sign_a
    # hole-wall normals: the surface at the hole exit faces back into the void
    if np.any(in_void):
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        ax = np.argmax(np.abs(p[:, :2]) / np.array(hole_half)[None, :], axis=-1)
        wall_n = np.zeros_like(o)
        wall_n[rows, ax] = -np.sign(p[rows, ax])
        # points exiting through the hole bottom keep the outer-face normal
        through_bottom = np.abs(np.abs(p[:, 2]) - half[2]) < 1e-9
        use_wall = in_void & hit & ~through_bottom
        n = np.where(use_wall[:, None], wall_n, n)
    return t, n


def intersect_object(obj: SceneObject, origins, dirs):
    """Nearest intersection of world-frame rays with one object.

    Returns (t, normals) with t = +inf for misses; normals are world-frame
    outward unit vectors at the hit points.
    """
    inv = obj.pose.inverse()
    o = inv.apply(origins)
    d = dirs @ inv.rotation.T
    if isinstance(obj.shape, Box):
        t, n = _intersect_box(o, d, obj.shape.half_extents)
    elif isinstance(obj.shape, Sphere):
        t, n = _intersect_sphere(o, d, obj.shape.radius)
    else:
        t, n = _intersect_slot_plate(o, d, obj.shape.half_extents, obj.shape.hole_half_extents)
    return t, n @ obj.pose.rotation.T


def trace_rays(objects, origins, dirs):
    """Nearest-hit trace over all objects.

    Returns (rgb, t, hit_mask); rgb already includes the Lambert shading and
    the background for missed rays.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_albedo = np.zeros((n_rays, 3))
    for obj in objects:
        t, n = intersect_object(obj, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], n, best_n)
        best_albedo = np.where(closer[:, None], obj.albedo, best_albedo)
    hit = np.isfinite(best_t)
    lambert = np.maximum(0.0, -(best_n @ LIGHT_DIR))
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    rgb = np.where(hit[:, None], best_albedo * shade[:, None], BACKGROUND)
    return rgb, best_t, hit


def trace_oracle(instance_or_objects, cam: CameraModel, supersample: int = 1):
    """Ground-truth render: analytic nearest-hit shading, supersample^2 rays
    averaged per pixel."""
    objects = getattr(instance_or_objects, "objects", instance_or_objects)
    if supersample < 1:
        raise ConfigError("supersample must be >= 1")
    k = cam.intrinsics
    acc = np.zeros((k.height * k.width, 3))
    for i in range(supersample):
        for j in range(supersample):
            du = (i + 0.5) / supersample
            dv = (j + 0.5) / supersample
            us, vs = np.meshgrid(
                np.arange(k.width) + du, np.arange(k.height) + dv, indexing="xy"
            )
            o, d = cam.rays(us.ravel(), vs.ravel())
            rgb, _, _ = trace_rays(objects, o, d)
            acc += rgb
    acc /= supersample * supersample
    return acc.reshape(k.height, k.width, 3).astype(np.float32)


def trace_depth(objects, origins, dirs):
    _, t, hit = trace_rays(objects, origins, dirs)
    return t, hit


# ---------------------------------------------------------------------------
# Penetration tests (success scoring)
# ---------------------------------------------------------------------------


def _inside_material(shape, p, eps):
    p = np.asarray(p)
    if isinstance(shape, Box):
        return bool(np.all(np.abs(p) <= np.asarray(shape.half_extents) - eps))
    if isinstance(shape, Sphere):
        return bool(np.linalg.norm(p) <= shape.radius - eps)
    if isinstance(shape, SlotPlate):
        h = np.asarray(shape.half_extents)
        if not np.all(np.abs(p) <= h - eps):
            return False
        hx, hy = shape.hole_half_extents
        return abs(p[0]) >= hx + eps or abs(p[1]) >= hy + eps
    return False


def _box_surface_points(half):
    hx, hy, hz = half
    pts = []
    for sx in (-1, 0, 1):
        for sy in (-1, 0, 1):
            for sz in (-1, 0, 1):
                if sx == sy == sz == 0:
                    continue
                pts.append([sx * hx, sy * hy, sz * hz])
    return np.array(pts, dtype=np.float64)


def _target_probe_points(obj: SceneObject):
    if isinstance(obj.shape, Box):
        local = _box_surface_points(obj.shape.half_extents)
    elif isinstance(obj.shape, Sphere):
        r = obj.shape.radius
        local = np.concatenate([np.eye(3) * r, -np.eye(3) * r, np.zeros((1, 3))])
    else:
        local = _box_surface_points(obj.shape.half_extents)
    return obj.pose.apply(local)


def penetrates_fixtures(target: SceneObject, fixtures, eps=PENETRATION_TOL):
    pts = _target_probe_points(target)
    for fx in fixtures:
        local = fx.pose.inverse().apply(pts)
        for p in local:
            if _inside_material(fx.shape, p, eps):
                return True
    return False


# ---------------------------------------------------------------------------
# Task instances
# ---------------------------------------------------------------------------


class Regime:
    IN_DISTRIBUTION = "in_distribution"
    OUT_OF_DISTRIBUTION = "out_of_distribution"


TASK_NAMES = ("block-insertion-lite", "place-red-in-green-lite")

# Proper symmetry rotations of a rectangular box with distinct extents.
BOX_SYMMETRY = (
    np.eye(3),
    rotation_x(np.pi),
    rotation_y(np.pi),
    rotation_z(np.pi),
)


@dataclass(frozen=True)
class TaskInstance:
    task_name: str
    objects: tuple
    target_index: int
    goal_pose: RigidPose
    regime: str
    rng_seed: int
    alt_goal_poses: tuple = ()
    symmetry: tuple = (np.eye(3),)
    yaw_free_goal: bool = False
    place_depth_offset: float = 0.0

    @property
    def target(self) -> SceneObject:
        return self.objects[self.target_index]

    def fixtures(self):
        return [o for o in self.objects if o.role == Role.FIXTURE]


@dataclass(frozen=True)
class Demonstration:
    """Expert-annotated views and pixels plus replay metadata."""

    pick_view: CameraModel
    pick_image: np.ndarray
    pick_pixel: tuple
    place_view: CameraModel
    place_image: np.ndarray
    place_pixel: tuple
    t_pick: RigidPose
    t_place: RigidPose
    place_depth_offset: float
    negatives: tuple = ()  # (CameraModel, image) pairs for contrastive pools


def _rng_for(name: str, regime: str, seed: int):
    tag = zlib.crc32(f"{name}|{regime}".encode())
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def regime_angles(rng, regime):
    """Tilt and spin draw for one object per the evaluation protocol."""
    if regime == Regime.IN_DISTRIBUTION:
        tx = rng.uniform(-np.pi / 6, np.pi / 6)
        ty = rng.uniform(-np.pi / 6, np.pi / 6)
    elif regime == Regime.OUT_OF_DISTRIBUTION:
        tx = rng.choice([-1, 1]) * rng.uniform(np.pi / 6, np.pi / 4)
        ty = rng.choice([-1, 1]) * rng.uniform(np.pi / 6, np.pi / 4)
    else:
        raise ConfigError(f"unknown rotation regime {regime!r}")
    tz = rng.uniform(-np.pi, np.pi)
    return tx, ty, tz


def _regime_rotation(rng, regime):
    tx, ty, tz = regime_angles(rng, regime)
    return rotation_z(tz) @ rotation_y(ty) @ rotation_x(tx)


def _rest_on_table(shape, rotation, xy, clearance=0.002):
    """Translation placing the object's lowest point at the clearance height."""
    if isinstance(shape, Sphere):
        drop = shape.radius
    else:
        corners = _box_surface_points(shape.half_extents) @ rotation.T
        drop = -corners[:, 2].min()
    return np.array([xy[0], xy[1], drop + clearance])


def make_table() -> SceneObject:
    # stays within the field bounding box so captures are representable
    return SceneObject(
        Box((0.28, 0.28, 0.01)),
        RigidPose(np.eye(3), np.array([0.0, 0.0, -0.01])),
        np.array([0.45, 0.45, 0.47]),
        Role.FIXTURE,
    )


# Block-insertion: a 50 x 30 x 24 mm block into a matching through-hole with
# 8 mm lateral clearance. The plate thickness equals the block height so the
# inserted block sits flush.
BLOCK_HALF = (0.025, 0.015, 0.012)
PLATE_HALF = (0.07, 0.05, 0.012)
HOLE_HALF = (0.033, 0.023)
CUBE_HALF = 0.015
PAD_HALF = (0.03, 0.03, 0.004)


def _sample_block_insertion(rng, regime, seed) -> TaskInstance:
    table = make_table()
    for _ in range(200):
        plate_rot = _regime_rotation(rng, regime)
        plate_xy = rng.uniform(-SPAWN_HALF, SPAWN_HALF, 2)
        block_rot = _regime_rotation(rng, regime)
        block_xy = rng.uniform(-SPAWN_HALF, SPAWN_HALF, 2)
        if np.linalg.norm(plate_xy - block_xy) < 0.145:
            continue
        plate = SceneObject(
            SlotPlate(PLATE_HALF, HOLE_HALF),
            RigidPose(plate_rot, _rest_on_table(SlotPlate(PLATE_HALF, HOLE_HALF), plate_rot, plate_xy)),
            np.array([0.55, 0.36, 0.18]),
            Role.FIXTURE,
        )
        block = SceneObject(
            Box(BLOCK_HALF),
            RigidPose(block_rot, _rest_on_table(Box(BLOCK_HALF), block_rot, block_xy)),
            np.array([0.85, 0.10, 0.10]),
            Role.TARGET,
        )
        return TaskInstance(
            task_name="block-insertion-lite",
            objects=(table, plate, block),
            target_index=2,
            goal_pose=plate.pose,
            regime=regime,
            rng_seed=seed,
            symmetry=BOX_SYMMETRY,
            place_depth_offset=2 * BLOCK_HALF[2],
        )
    raise ConfigError("could not sample a block-insertion instance")


def _sample_place_red_in_green(rng, regime, seed) -> TaskInstance:
    table = make_table()
    pad_shape = Box(PAD_HALF)
    cube_shape = Box((CUBE_HALF, CUBE_HALF, CUBE_HALF))
    for _ in range(200):
        n_pads = int(rng.integers(2, 4))
        centers = []
        ok = True
        for _ in range(n_pads + 1):  # pads then cube
            for _try in range(50):
                xy = rng.uniform(-SPAWN_HALF, SPAWN_HALF, 2)
                if all(np.linalg.norm(xy - c) >= 0.095 for c in centers):
                    centers.append(xy)
                    break
            else:
                ok = False
                break
        if not ok:
            continue
        pads = []
        goals = []
        for i in range(n_pads):
            rot = _regime_rotation(rng, regime)
            pose = RigidPose(rot, _rest_on_table(pad_shape, rot, centers[i]))
            pads.append(SceneObject(pad_shape, pose, np.array([0.12, 0.75, 0.20]), Role.FIXTURE))
            offset = np.array([0.0, 0.0, PAD_HALF[2] + CUBE_HALF])
            goals.append(RigidPose(rot, pose.translation + rot @ offset))
        cube_rot = _regime_rotation(rng, regime)
        cube = SceneObject(
            cube_shape,
            RigidPose(cube_rot, _rest_on_table(cube_shape, cube_rot, centers[n_pads])),
            np.array([0.85, 0.10, 0.10]),
            Role.TARGET,
        )
        # distractors: never red or green, kept clear of everything else
        n_dis = int(rng.integers(5, 11))
        distractors = []
        taken = list(centers)
        palette = np.array([
            [0.3, 0.35, 0.75],
            [0.75, 0.7, 0.2],
            [0.5, 0.5, 0.55],
            [0.3, 0.65, 0.75],
        ])
        for _ in range(n_dis):
            for _try in range(60):
                xy = rng.uniform(-DISTRACTOR_HALF, DISTRACTOR_HALF, 2)
                if all(np.linalg.norm(xy - c) >= 0.075 for c in taken):
                    taken.append(xy)
                    break
            else:
                continue
            if rng.random() < 0.5:
                half = rng.uniform(0.008, 0.015, 3)
                shape = Box(tuple(half))
            else:
                shape = Sphere(float(rng.uniform(0.008, 0.015)))
            rot = rotation_z(rng.uniform(-np.pi, np.pi))
            pose = RigidPose(rot, _rest_on_table(shape, rot, xy))
            albedo = palette[int(rng.integers(0, len(palette)))] * rng.uniform(0.8, 1.1)
            distractors.append(SceneObject(shape, pose, np.clip(albedo, 0, 1), Role.DISTRACTOR))
        objects = (table, *pads, cube, *distractors)
        d2 = [np.linalg.norm(centers[n_pads] - centers[i]) for i in range(n_pads)]
        nearest = int(np.argmin(d2))
        return TaskInstance(
            task_name="place-red-in-green-lite",
            objects=objects,
            target_index=1 + n_pads,
            goal_pose=goals[nearest],
            regime=regime,
            rng_seed=seed,
            alt_goal_poses=tuple(g for i, g in enumerate(goals) if i != nearest),
            yaw_free_goal=True,
            place_depth_offset=2 * CUBE_HALF,
        )
    raise ConfigError("could not sample a place-red-in-green instance")


def sample_task(name: str, regime: str, seed: int) -> TaskInstance:
    """Deterministic task instance for (name, regime, seed)."""
    if name not in TASK_NAMES:
        raise ConfigError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    rng = _rng_for(name, regime, seed)
    if name == "block-insertion-lite":
        return _sample_block_insertion(rng, regime, seed)
    return _sample_place_red_in_green(rng, regime, seed)


# ---------------------------------------------------------------------------
# Capture rig: perspective cameras on a circle looking at the workspace
# ---------------------------------------------------------------------------


def capture_rig(n_views=30, radius=0.7, elevation_deg=45.0, intrinsics: Intrinsics | None = None,
                center=WORKSPACE_CENTER):
    """Perspective cameras evenly spaced on a circle, pointing at the center."""
    if intrinsics is None:
        intrinsics = Intrinsics()
    cams = []
    elev = np.deg2rad(elevation_deg)
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        pos = center + radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)]
        )
        fwd = center - pos
        fwd = fwd / np.linalg.norm(fwd)
        down = np.array([0.0, 0.0, -1.0])
        x = np.cross(down, fwd)
        x /= np.linalg.norm(x)
        y = np.cross(fwd, x)
        rot = np.stack([x, y, fwd], axis=1)
        cams.append(CameraModel(RigidPose(rot, pos), intrinsics, Projection.PERSPECTIVE))
    return cams


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------

# Tool convention: the tool z axis opposes the view axis, so a top-down view
# yields an identity tool orientation for a flat grasp.
TOOL_FLIP = np.diag([1.0, -1.0, -1.0])


def approach_axis(pose: RigidPose):
    """Direction the tool travels to reach the pose (into the surface)."""
    return -pose.rotation[:, 2]


def expert_action(instance: TaskInstance):
    """Ground-truth grasp pose (top-center of the target) and its image under
    the required relative transform."""
    target = instance.target
    if isinstance(target.shape, Box):
        top = np.array([0.0, 0.0, target.shape.half_extents[2]])
    elif isinstance(target.shape, Sphere):
        top = np.array([0.0, 0.0, target.shape.radius])
    else:
        raise ConfigError("expert only grasps boxes and spheres")
    t_pick = RigidPose(target.pose.rotation, target.pose.apply(top))
    delta = compose(instance.goal_pose, target.pose.inverse())
    t_place = compose(delta, t_pick)
    return t_pick, t_place


def _best_view(views, axis):
    dots = [float(np.dot(cam.pose.rotation[:, 2], axis)) for cam in views]
    best = int(np.argmax(dots))
    angle = float(np.degrees(np.arccos(np.clip(dots[best], -1, 1))))
    return best, angle


def scripted_expert(instance: TaskInstance, views, max_view_angle_deg=15.0,
                    n_negatives=6, supersample=2, rng=None) -> Demonstration:
    """Annotate one demonstration from ground truth.

    views is the planner's view list (orthographic cameras). The expert picks
    the view best aligned with each pose's approach axis (ties by lowest
    index), projects the pose positions to pixels, and renders the scene from
    the chosen views plus a pool of extra views for contrastive negatives.
    """
    cams = getattr(views, "cameras", views)
    t_pick, t_place = expert_action(instance)
    pick_idx, pick_angle = _best_view(cams, approach_axis(t_pick))
    place_idx, place_angle = _best_view(cams, approach_axis(t_place))
    if pick_angle > max_view_angle_deg or place_angle > max_view_angle_deg:
        raise ExpertFailure(
            f"no view within {max_view_angle_deg} deg of approach "
            f"(pick {pick_angle:.1f}, place {place_angle:.1f})"
        )
    pick_cam = cams[pick_idx]
    place_cam = cams[place_idx]
    pick_uv = pick_cam.project(t_pick.translation)
    place_uv = place_cam.project(t_place.translation)
    pick_pixel = (int(np.floor(pick_uv[0])), int(np.floor(pick_uv[1])))
    place_pixel = (int(np.floor(place_uv[0])), int(np.floor(place_uv[1])))
    k = pick_cam.intrinsics
    for name, (u, v) in (("pick", pick_pixel), ("place", place_pixel)):
        if not (0 <= u < k.width and 0 <= v < k.height):
            raise ExpertFailure(f"{name} pixel {u, v} projects outside the view")
    pick_img = trace_oracle(instance, pick_cam, supersample)
    place_img = (
        pick_img if place_idx == pick_idx else trace_oracle(instance, place_cam, supersample)
    )
    if rng is None:
        rng = np.random.default_rng(instance.rng_seed + 7919)
    negatives = []
    pool = [i for i in range(len(cams)) if i not in (pick_idx, place_idx)]
    if pool and n_negatives > 0:
        chosen = rng.choice(len(pool), size=min(n_negatives, len(pool)), replace=False)
        for i in sorted(int(c) for c in chosen):
            cam = cams[pool[i]]
            negatives.append((cam, trace_oracle(instance, cam, supersample)))
    return Demonstration(
        pick_view=pick_cam,
        pick_image=pick_img,
        pick_pixel=pick_pixel,
        place_view=place_cam,
        place_image=place_img,
        place_pixel=place_pixel,
        t_pick=t_pick,
        t_place=t_place,
        place_depth_offset=instance.place_depth_offset,
        negatives=tuple(negatives),
    )


# ---------------------------------------------------------------------------
# Kinematic execution and success scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PickPlaceAction:
    """Two tool poses plus where they came from."""

    t_pick: RigidPose
    t_place: RigidPose
    provenance: dict = dc_field(default_factory=dict)


def _entry_along(obj: SceneObject, point, direction):
    """Signed distance along direction from point to the object's surface,
    plus the outward normal there; None if the line misses."""
    inv = obj.pose.inverse()
    o = inv.apply(point)[None, :]
    d = (direction @ inv.rotation.T)[None, :]
    if isinstance(obj.shape, Box):
        t0, t1, axis, sign = _box_intervals(o, d, obj.shape.half_extents)
        if t1[0] < t0[0]:
            return None
        n = np.zeros(3)
        n[axis[0]] = sign[0]
        return float(t0[0]), obj.pose.rotation @ n
    if isinstance(obj.shape, Sphere):
        b = float(np.sum(o * d))
        c = float(np.sum(o * o)) - obj.shape.radius ** 2
        disc = b * b - c
        if disc < 0:
            return None
        t = -b - np.sqrt(disc)
        p = (o + t * d)[0]
        return float(t), obj.pose.rotation @ (p / obj.shape.radius)
    return None


def _within_bounds(pose: RigidPose):
    span = WORKSPACE_HI - WORKSPACE_LO
    lo = WORKSPACE_LO - 0.05 * span
    hi = WORKSPACE_HI + 0.05 * span
    return bool(np.all(pose.translation >= lo) and np.all(pose.translation <= hi))


def _orientation_ok(instance: TaskInstance, final: RigidPose, goal: RigidPose):
    rel = goal.rotation.T @ final.rotation
    tol = np.deg2rad(SUCCESS_ROT_TOL_DEG)
    if instance.yaw_free_goal:
        # spin about the goal z axis is free: succeed when the best-aligned
        # body face normal is within tolerance of the goal z axis
        best = -1.0
        for axis in np.vstack([np.eye(3), -np.eye(3)]):
            best = max(best, float((rel @ axis)[2]))
        return np.arccos(np.clip(best, -1, 1)) <= tol
    best = np.inf
    for sym in instance.symmetry:
        m = rel @ sym
        ang = np.arccos(np.clip((np.trace(m) - 1) / 2, -1, 1))
        best = min(best, ang)
    return best <= tol


def _success(instance: TaskInstance, moved: SceneObject):
    fixtures = instance.fixtures()
    for goal in (instance.goal_pose, *instance.alt_goal_poses):
        pos_err = np.linalg.norm(moved.pose.translation - goal.translation)
        if pos_err > SUCCESS_POS_TOL:
            continue
        if not _orientation_ok(instance, moved.pose, goal):
            continue
        if penetrates_fixtures(moved, fixtures):
            return False
        return True
    return False


def execute(instance: TaskInstance, action: PickPlaceAction):
    """Kinematic pick-and-place; returns (new instance, success)."""
    if not (_within_bounds(action.t_pick) and _within_bounds(action.t_place)):
        return instance, False
    target = instance.target
    approach = approach_axis(action.t_pick)
    entry = _entry_along(target, action.t_pick.translation, approach)
    if entry is None:
        return instance, False
    t_surf, normal = entry
    if abs(t_surf) > GRASP_AXIAL_TOL:
        return instance, False
    cos_n = float(np.dot(normal, -approach))
    if cos_n < np.cos(np.deg2rad(GRASP_NORMAL_TOL_DEG)):
        return instance, False
    delta = compose(action.t_place, action.t_pick.inverse())
    moved = dataclasses.replace(target, pose=compose(delta, target.pose))
    objects = list(instance.objects)
    objects[instance.target_index] = moved
    new_instance = dataclasses.replace(instance, objects=tuple(objects))
    return new_instance, _success(new_instance, moved)


# ---------------------------------------------------------------------------
# On-disk formats: scene description JSON and demonstration bundles
# ---------------------------------------------------------------------------


def _shape_to_json(shape):
    if isinstance(shape, Box):
        return {"type": "box", "half_extents": list(shape.half_extents)}
    if isinstance(shape, Sphere):
        return {"type": "sphere", "radius": shape.radius}
    return {
        "type": "slot_plate",
        "half_extents": list(shape.half_extents),
        "hole_half_extents": list(shape.hole_half_extents),
    }


def _shape_from_json(doc):
    if doc["type"] == "box":
        return Box(tuple(doc["half_extents"]))
    if doc["type"] == "sphere":
        return Sphere(doc["radius"])
    if doc["type"] == "slot_plate":
        return SlotPlate(tuple(doc["half_extents"]), tuple(doc["hole_half_extents"]))
    raise ConfigError(f"unknown shape type {doc['type']!r}")


def save_scene(instance: TaskInstance, path):
    doc = {
        "task": instance.task_name,
        "regime": instance.regime,
        "seed": instance.rng_seed,
        "objects": [
            {
                "shape": _shape_to_json(o.shape),
                "pose_3x4": o.pose.matrix_3x4().tolist(),
                "albedo": o.albedo.tolist(),
                "role": o.role,
            }
            for o in instance.objects
        ],
        "target_index": instance.target_index,
        "goal_3x4": instance.goal_pose.matrix_3x4().tolist(),
        "alt_goals_3x4": [g.matrix_3x4().tolist() for g in instance.alt_goal_poses],
        "yaw_free_goal": instance.yaw_free_goal,
        "place_depth_offset": instance.place_depth_offset,
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2))
    except OSError as e:
        raise IOFailure(f"cannot write scene {path}: {e}") from e


def load_scene(path) -> TaskInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise IOFailure(f"cannot read scene {path}: {e}") from e
    objects = tuple(
        SceneObject(
            _shape_from_json(o["shape"]),
            RigidPose.from_matrix_3x4(np.array(o["pose_3x4"])),
            np.array(o["albedo"]),
            o["role"],
        )
        for o in doc["objects"]
    )
    symmetry = BOX_SYMMETRY if doc["task"] == "block-insertion-lite" else (np.eye(3),)
    return TaskInstance(
        task_name=doc["task"],
        objects=objects,
        target_index=doc["target_index"],
        goal_pose=RigidPose.from_matrix_3x4(np.array(doc["goal_3x4"])),
        regime=doc["regime"],
        rng_seed=doc["seed"],
        alt_goal_poses=tuple(
            RigidPose.from_matrix_3x4(np.array(g)) for g in doc.get("alt_goals_3x4", [])
        ),
        symmetry=symmetry,
        yaw_free_goal=doc.get("yaw_free_goal", False),
        place_depth_offset=doc.get("place_depth_offset", 0.0),
    )


def save_demo(demo: Demonstration, directory, image_format="png"):
    """Write one demonstration bundle (images plus JSON index)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = image_format.lstrip(".")
    write_image(directory / f"pick.{ext}", demo.pick_image)
    write_image(directory / f"place.{ext}", demo.place_image)
    k = demo.pick_view.intrinsics
    index = {
        "pick": {
            "file": f"pick.{ext}",
            "pixel": list(demo.pick_pixel),
            "transform_3x4": demo.pick_view.pose.matrix_3x4().tolist(),
        },
        "place": {
            "file": f"place.{ext}",
            "pixel": list(demo.place_pixel),
            "transform_3x4": demo.place_view.pose.matrix_3x4().tolist(),
        },
        "intrinsics": {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
        },
        "projection": demo.pick_view.projection.value,
        "expert_pick_3x4": demo.t_pick.matrix_3x4().tolist(),
        "expert_place_3x4": demo.t_place.matrix_3x4().tolist(),
        "place_depth_offset": demo.place_depth_offset,
        "negatives": [],
    }
    for i, (cam, img) in enumerate(demo.negatives):
        name = f"neg_{i:02d}.{ext}"
        write_image(directory / name, img)
        index["negatives"].append(
            {"file": name, "transform_3x4": cam.pose.matrix_3x4().tolist()}
        )
    try:
        (directory / "index.json").write_text(json.dumps(index, indent=2))
    except OSError as e:
        raise IOFailure(f"cannot write demo index in {directory}: {e}") from e


def load_demo(directory) -> Demonstration:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
    except OSError as e:
        raise IOFailure(f"cannot read demo index in {directory}: {e}") from e
    k = index["intrinsics"]
    intr = Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], int(k["width"]), int(k["height"]))
    proj = Projection(index.get("projection", "orthographic"))

    def cam_of(block):
        return CameraModel(RigidPose.from_matrix_3x4(np.array(block["transform_3x4"])), intr, proj)

    negatives = tuple(
        (cam_of(n), read_image(directory / n["file"])) for n in index.get("negatives", [])
    )
    return Demonstration(
        pick_view=cam_of(index["pick"]),
        pick_image=read_image(directory / index["pick"]["file"]),
        pick_pixel=tuple(index["pick"]["pixel"]),
        place_view=cam_of(index["place"]),
        place_image=read_image(directory / index["place"]["file"]),
        place_pixel=tuple(index["place"]["pixel"]),
        t_pick=RigidPose.from_matrix_3x4(np.array(index["expert_pick_3x4"])),
        t_place=RigidPose.from_matrix_3x4(np.array(index["expert_place_3x4"])),
        place_depth_offset=index.get("place_depth_offset", 0.0),
        negatives=negatives,
    )
