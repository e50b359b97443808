"""End-to-end orchestration: configs, dataset generation, fitting, training,
and evaluation episodes. The CLI is a thin wrapper over these helpers; tests
call them directly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from viewplan import affordance, field as field_mod, planner, scene_sim
from viewplan.errors import ConfigError, IOFailure
from viewplan.field import FitHyperparams, FitResult, RenderSettings
from viewplan.geometry import Intrinsics, read_pose_manifest, write_pose_manifest
from viewplan.images import read_image, write_image
from viewplan.planner import GraspConvention, PlannerConfig, ViewSet
from viewplan.scene_sim import Regime, TaskInstance

VALID_DEMO_COUNTS = (1, 10, 100)


@dataclass
class ViewsConfig:
    yaw_count: int = 6
    tilt_count: int = 6
    tilt_max_deg: float = 45.0
    standoff: float = 0.55


@dataclass
class CaptureConfig:
    n_views: int = 30
    radius: float = 0.7
    elevation_deg: float = 45.0
    image_scale: float = 0.25  # of the 640x480 f=450 reference intrinsics
    supersample: int = 2
    t_near: float = 0.25
    t_far: float = 1.15

    def intrinsics(self) -> Intrinsics:
        return Intrinsics().scaled(self.image_scale)


@dataclass
class FieldConfig:
    resolution: tuple = (64, 64, 64)
    n_samples: int = 48
    steps: int = 1500
    batch_rays: int = 8192
    lr_density: float = 6000.0
    lr_color: float = 1500.0


@dataclass
class PolicyRenderConfig:
    n_samples: int = 64
    span: float = 0.66  # total metric depth range bracketing the workspace

    def settings(self, standoff) -> RenderSettings:
        return RenderSettings(
            t_near=standoff - self.span / 2,
            t_far=standoff + self.span / 2,
            n_samples=self.n_samples,
            background=scene_sim.BACKGROUND,
        )


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    extra_views: int = 3
    crop: int = affordance.DEFAULT_CROP
    negative_pool: int = 6
    seed: int = 0


@dataclass
class EvalConfig:
    runs: int = 50
    base_seed: int = 10000
    retries: int = 5
    refine_rounds: int = 0
    cache_dir: str = ""


@dataclass
class AblationConfig:
    perspective_views: bool = False
    own_view_negatives_only: bool = False


@dataclass
class RunConfig:
    task: str = "block-insertion-lite"
    regime: str = Regime.IN_DISTRIBUTION
    demos: int = 10
    demo_base_seed: int = 1000
    views: ViewsConfig = dc_field(default_factory=ViewsConfig)
    capture: CaptureConfig = dc_field(default_factory=CaptureConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    policy: PolicyRenderConfig = dc_field(default_factory=PolicyRenderConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)
    ablation: AblationConfig = dc_field(default_factory=AblationConfig)
    reproducible: bool = False

    def validate(self):
        if self.task not in scene_sim.TASK_NAMES:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.regime not in (Regime.IN_DISTRIBUTION, Regime.OUT_OF_DISTRIBUTION):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.demos not in VALID_DEMO_COUNTS:
            raise ConfigError(f"demo count must be one of {VALID_DEMO_COUNTS}")
        return self


def _update_dataclass(obj, data: dict):
    for key, value in data.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown config key {key!r} in {type(obj).__name__}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _update_dataclass(current, value)
        elif key == "resolution":
            setattr(obj, key, tuple(int(v) for v in value))
        else:
            setattr(obj, key, type(current)(value) if current is not None else value)
    return obj


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config from JSON plus flag overrides; overrides win."""
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise IOFailure(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        _update_dataclass(cfg, data)
    if overrides:
        _update_dataclass(cfg, overrides)
    return cfg.validate()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _config_hash(*parts) -> str:
    text = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha1(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------


def _perspective_standoff(intr: Intrinsics) -> float:
    """Distance at which a perspective camera's footprint matches the
    orthographic window of the same intrinsics (their ratio is 1 meter by
    construction: ortho half-width (w/2)/fx meters over tan half-angle
    (w/2)/fx)."""
    half_window_m = (intr.width / 2) / intr.fx
    tan_half = (intr.width / 2) / intr.fx
    return half_window_m / tan_half


def _policy_standoff(cfg: RunConfig) -> float:
    if cfg.ablation.perspective_views:
        return _perspective_standoff(planner.POLICY_INTRINSICS)
    return cfg.views.standoff


def build_policy_views(cfg: RunConfig) -> ViewSet:
    """Policy view set; the perspective ablation keeps the same orientations
    but backs the cameras off until the footprint matches the orthographic
    window at the workspace center."""
    v = cfg.views
    views = planner.sample_views(
        v.yaw_count, v.tilt_count, np.deg2rad(v.tilt_max_deg),
        scene_sim.WORKSPACE_CENTER, _policy_standoff(cfg), planner.POLICY_INTRINSICS,
    )
    if cfg.ablation.perspective_views:
        views = planner.perspective_views(views)
    return views


def policy_settings(cfg: RunConfig) -> RenderSettings:
    return cfg.policy.settings(_policy_standoff(cfg))


# ---------------------------------------------------------------------------
# Capture and fit
# ---------------------------------------------------------------------------


def capture_instance(instance: TaskInstance, cap: CaptureConfig):
    """Oracle-traced perspective captures; returns list of (image, camera)."""
    cams = scene_sim.capture_rig(
        cap.n_views, cap.radius, cap.elevation_deg, cap.intrinsics()
    )
    return [(scene_sim.trace_oracle(instance, cam, cap.supersample), cam) for cam in cams]


def capture_settings(cap: CaptureConfig) -> RenderSettings:
    return RenderSettings(cap.t_near, cap.t_far, 48, background=scene_sim.BACKGROUND)


def fit_instance(views, cfg: RunConfig, seed=0) -> FitResult:
    f = cfg.field
    settings = capture_settings(cfg.capture)
    settings = RenderSettings(settings.t_near, settings.t_far, f.n_samples,
                              background=settings.background)
    hyper = FitHyperparams(
        steps=f.steps, batch_rays=f.batch_rays, lr_density=f.lr_density,
        lr_color=f.lr_color, seed=seed,
    )
    return field_mod.fit(
        views, settings, hyper,
        scene_sim.WORKSPACE_LO, scene_sim.WORKSPACE_HI, f.resolution,
    )


def fit_for_instance_cached(instance: TaskInstance, cfg: RunConfig):
    """Fit (or load from cache) the field for one task instance.

    Only the field depends on (instance, capture, field config); policy views
    and models do not enter the key, so ablation variants share cached fits.
    """
    cache_dir = cfg.eval.cache_dir
    key = None
    if cache_dir:
        key = _config_hash(
            instance.task_name, instance.regime, instance.rng_seed,
            dataclasses.asdict(cfg.capture), dataclasses.asdict(cfg.field),
        )
        path = Path(cache_dir) / f"field_{key}.mirf"
        if path.exists():
            return field_mod.load_field(path), None
    captures = capture_instance(instance, cfg.capture)
    result = fit_instance(captures, cfg, seed=instance.rng_seed)
    if cache_dir and key is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        field_mod.save_field(result.field, Path(cache_dir) / f"field_{key}.mirf")
    return result.field, result


# ---------------------------------------------------------------------------
# Dataset generation (captures + demonstrations)
# ---------------------------------------------------------------------------


def generate_demos(cfg: RunConfig, n=None, base_seed=None, with_captures=False,
                   out_dir=None, image_format="png"):
    """Collect n expert demonstrations from the training distribution.

    Instances whose expert fails the view-alignment gate are skipped and the
    seed advances, so the result is deterministic for a given config. Returns
    (demos, seeds, skipped).
    """
    n = cfg.demos if n is None else n
    base_seed = cfg.demo_base_seed if base_seed is None else base_seed
    views = build_policy_views(cfg)
    demos, seeds, skipped = [], [], []
    seed = base_seed
    while len(demos) < n:
        instance = scene_sim.sample_task(cfg.task, Regime.IN_DISTRIBUTION, seed)
        try:
            demo = scene_sim.scripted_expert(
                instance, views.cameras, n_negatives=cfg.train.negative_pool,
                rng=np.random.default_rng(seed + 7919),
            )
        except scene_sim.ExpertFailure:
            skipped.append(seed)
            seed += 1
            continue
        demos.append(demo)
        seeds.append(seed)
        if out_dir is not None:
            scene_dir = Path(out_dir) / f"scene_{seed:05d}"
            scene_dir.mkdir(parents=True, exist_ok=True)
            scene_sim.save_scene(instance, scene_dir / "scene.json")
            scene_sim.save_demo(demo, scene_dir / "demo", image_format)
            if with_captures:
                captures = capture_instance(instance, cfg.capture)
                img_dir = scene_dir / "images"
                img_dir.mkdir(exist_ok=True)
                frames = []
                for i, (img, cam) in enumerate(captures):
                    name = f"images/frame_{i:03d}.{image_format}"
                    write_image(scene_dir / name, img)
                    frames.append((name, cam.pose))
                write_pose_manifest(
                    scene_dir / "transforms.json", frames, cfg.capture.intrinsics()
                )
        seed += 1
    return demos, seeds, skipped


def load_dataset_demos(dataset_dir):
    root = Path(dataset_dir)
    demo_dirs = sorted(root.glob("scene_*/demo"))
    if not demo_dirs:
        raise ConfigError(f"no demonstrations found under {dataset_dir}")
    return [scene_sim.load_demo(d) for d in demo_dirs]


def load_dataset_captures(scene_dir):
    """(image, camera) pairs from a scene directory's manifest."""
    from viewplan.geometry import CameraModel, Projection

    scene_dir = Path(scene_dir)
    frames, intr = read_pose_manifest(scene_dir / "transforms.json")
    out = []
    for name, pose in frames:
        img = read_image(scene_dir / name)
        out.append((img, CameraModel(pose, intr, Projection.PERSPECTIVE)))
    return out


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


def train_policy(cfg: RunConfig, demos, log_path=None):
    hyper = affordance.TrainHyperparams(
        steps=cfg.train.steps, lr=cfg.train.lr, momentum=cfg.train.momentum,
        extra_views=cfg.train.extra_views, crop=cfg.train.crop,
        seed=cfg.train.seed,
        own_view_negatives_only=cfg.ablation.own_view_negatives_only,
    )
    return affordance.train(demos, hyper, log_path=log_path)


def evaluate_instance(instance: TaskInstance, model, cfg: RunConfig, views=None,
                      settings=None):
    """One evaluation episode: capture, fit, plan, execute.

    Returns (success, report)."""
    if views is None:
        views = build_policy_views(cfg)
    if settings is None:
        settings = policy_settings(cfg)
    fld, _ = fit_for_instance_cached(instance, cfg)
    convention = GraspConvention(place_depth_offset=model.place_depth_offset)
    pcfg = PlannerConfig(retries=cfg.eval.retries, refine_rounds=cfg.eval.refine_rounds)
    try:
        action, report = planner.plan(
            fld, views, model, settings, convention,
            scene_sim.WORKSPACE_LO, scene_sim.WORKSPACE_HI, pcfg,
        )
    except Exception as e:  # planner found no usable selection
        return False, {"error": str(e)}
    sim_action = scene_sim.PickPlaceAction(action.t_pick, action.t_place,
                                           dict(action.provenance))
    _, success = scene_sim.execute(instance, sim_action)
    return bool(success), report


def run_eval(cfg: RunConfig, model, out_csv=None, resume=True, progress=None):
    """Evaluate cfg.eval.runs seeded episodes; returns (rate, rows).

    Rows are (seed, task, regime, success). With resume, rows already present
    in out_csv are kept and their seeds skipped.
    """
    views = build_policy_views(cfg)
    settings = policy_settings(cfg)
    done = {}
    if out_csv is not None and resume and Path(out_csv).exists():
        for line in Path(out_csv).read_text().splitlines()[1:]:
            parts = line.split(",")
            if len(parts) == 4 and parts[1] == cfg.task and parts[2] == cfg.regime:
                done[int(parts[0])] = parts[3] == "1"
    rows = []
    for i in range(cfg.eval.runs):
        seed = cfg.eval.base_seed + i
        if seed in done:
            rows.append((seed, cfg.task, cfg.regime, done[seed]))
            continue
        instance = scene_sim.sample_task(cfg.task, cfg.regime, seed)
        success, _ = evaluate_instance(instance, model, cfg, views, settings)
        rows.append((seed, cfg.task, cfg.regime, success))
        if out_csv is not None:
            write_results_csv(out_csv, rows)
        if progress is not None:
            progress(i + 1, cfg.eval.runs, success)
    if out_csv is not None:
        write_results_csv(out_csv, rows)
    rate = float(np.mean([r[3] for r in rows])) if rows else 0.0
    return rate, rows


def write_results_csv(path, rows):
    try:
        with open(path, "w") as f:
            f.write("seed,task,regime,success\n")
            for seed, task, regime, success in rows:
                f.write(f"{seed},{task},{regime},{1 if success else 0}\n")
    except OSError as e:
        raise IOFailure(f"cannot write results {path}: {e}") from e
