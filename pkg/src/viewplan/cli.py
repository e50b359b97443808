"""Operator command line: dataset generation, field fitting, rendering,
policy training, evaluation, and ablations.

Configuration comes from an optional JSON file plus flag overrides (flags
win). Exit codes are stable: 0 success, 2 configuration error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from viewplan import affordance, field as field_mod, pipeline, planner, scene_sim
from viewplan.errors import ConfigError, DomainError, IOFailure, NumericsError
from viewplan.geometry import CameraModel, Projection, RigidPose
from viewplan.images import write_image
from viewplan.scene_sim import Regime

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parse_views(text):
    try:
        yaw, tilt = text.lower().split("x")
        return int(yaw), int(tilt)
    except ValueError as e:
        raise ConfigError(f"--views expects YAWxTILT (e.g. 24x9), got {text!r}") from e


def _load_config(config, **flags):
    overrides = {}
    if flags.get("seed") is not None:
        overrides.setdefault("eval", {})["base_seed"] = flags["seed"]
        overrides.setdefault("train", {})["seed"] = flags["seed"]
    if flags.get("demos") is not None:
        overrides["demos"] = flags["demos"]
    if flags.get("views") is not None:
        yaw, tilt = _parse_views(flags["views"])
        overrides.setdefault("views", {}).update({"yaw_count": yaw, "tilt_count": tilt})
    if flags.get("reproducible"):
        overrides["reproducible"] = True
    if flags.get("task") is not None:
        overrides["task"] = flags["task"]
    if flags.get("regime") is not None:
        overrides["regime"] = flags["regime"]
    if flags.get("runs") is not None:
        overrides.setdefault("eval", {})["runs"] = flags["runs"]
    if flags.get("cache_dir") is not None:
        overrides.setdefault("eval", {})["cache_dir"] = flags["cache_dir"]
    if flags.get("perspective"):
        overrides.setdefault("ablation", {})["perspective_views"] = True
    if flags.get("own_view_negatives"):
        overrides.setdefault("ablation", {})["own_view_negatives_only"] = True
    return pipeline.load_config(config, overrides)


def common_options(f):
    f = click.option("--config", type=click.Path(), default=None,
                     help="JSON config file; flags override it.")(f)
    f = click.option("--seed", type=int, default=None, help="Base seed override.")(f)
    f = click.option("--reproducible", is_flag=True, default=False,
                     help="Deterministic mode (fixed reductions and seeds).")(f)
    f = click.option("--views", default=None,
                     help="View grid as YAWxTILT, e.g. 24x9.")(f)
    f = click.option("--demos", type=int, default=None,
                     help="Demonstration count (1, 10, or 100).")(f)
    return f


@click.group()
def cli():
    """Pick-and-place planning over imagined orthographic views."""


@cli.command("gen-data")
@common_options
@click.option("--out", type=click.Path(), required=True, help="Dataset directory.")
@click.option("--task", default=None)
@click.option("--with-captures/--no-captures", default=True,
              help="Also write the 30 posed capture images per scene.")
@click.option("--image-format", default="png", type=click.Choice(["png", "ppm"]))
def cmd_gen_data(config, seed, reproducible, views, demos, out, task,
                 with_captures, image_format):
    """Write oracle captures, pose manifests, and expert demonstrations."""
    cfg = _load_config(config, seed=None, demos=demos, views=views,
                       reproducible=reproducible, task=task)
    if seed is not None:
        cfg.demo_base_seed = seed
    Path(out).mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    demos_list, seeds, skipped = pipeline.generate_demos(
        cfg, with_captures=with_captures, out_dir=out, image_format=image_format
    )
    meta = {
        "task": cfg.task,
        "demo_seeds": seeds,
        "expert_failures": skipped,
        "config": pipeline.config_to_dict(cfg),
    }
    Path(out, "dataset.json").write_text(json.dumps(meta, indent=2))
    click.echo(
        f"wrote {len(demos_list)} demos ({len(skipped)} expert failures) "
        f"to {out} in {time.time() - t0:.1f}s"
    )


@cli.command("fit")
@common_options
@click.option("--data", type=click.Path(exists=True), required=True,
              help="Scene directory containing transforms.json and images.")
@click.option("--out", type=click.Path(), required=True, help="Field checkpoint path.")
def cmd_fit(config, seed, reproducible, views, demos, data, out):
    """Fit a radiance field to a posed capture set."""
    cfg = _load_config(config, views=views, demos=demos, reproducible=reproducible)
    captures = pipeline.load_dataset_captures(data)
    result = pipeline.fit_instance(captures, cfg, seed=seed or 0)
    field_mod.save_field(result.field, out)
    click.echo(f"held-out PSNR: {result.holdout_psnr:.2f} dB; checkpoint: {out}")


@cli.command("render")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Output image path.")
@click.option("--projection", type=click.Choice(["orthographic", "perspective"]),
              default="orthographic")
@click.option("--yaw-deg", type=float, default=0.0)
@click.option("--tilt-x-deg", type=float, default=0.0)
@click.option("--tilt-y-deg", type=float, default=0.0)
@click.option("--standoff", type=float, default=0.55)
@click.option("--span", type=float, default=0.66, help="Depth range around the standoff.")
@click.option("--samples", type=int, default=64)
@click.option("--depth-out", type=click.Path(), default=None,
              help="Optional grayscale depth image path.")
def cmd_render(checkpoint, out, projection, yaw_deg, tilt_x_deg, tilt_y_deg,
               standoff, span, samples, depth_out):
    """Render a novel view from a field checkpoint (either projection)."""
    fld = field_mod.load_field(checkpoint)
    rot = planner.view_rotation(
        np.deg2rad(yaw_deg), np.deg2rad(tilt_x_deg), np.deg2rad(tilt_y_deg)
    )
    pos = scene_sim.WORKSPACE_CENTER - standoff * rot[:, 2]
    cam = CameraModel(RigidPose(rot, pos), planner.POLICY_INTRINSICS,
                      Projection(projection))
    settings = field_mod.RenderSettings(standoff - span / 2, standoff + span / 2,
                                        samples, background=scene_sim.BACKGROUND)
    rgb, depth = field_mod.render_image(fld, cam, settings)
    write_image(out, rgb)
    if depth_out:
        lo, hi = settings.t_near, settings.t_far
        gray = np.clip((depth - lo) / (hi - lo), 0, 1)
        write_image(depth_out, np.repeat(gray[:, :, None], 3, axis=2))
    click.echo(f"rendered {projection} view to {out}")


@cli.command("train")
@common_options
@click.option("--data", type=click.Path(exists=True), required=True,
              help="Dataset directory from gen-data.")
@click.option("--out", type=click.Path(), required=True, help="Model checkpoint path.")
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Training-loss CSV path.")
@click.option("--perspective", is_flag=True, default=False,
              help="Ablation: perspective policy views.")
@click.option("--own-view-negatives", is_flag=True, default=False,
              help="Ablation: drop multi-view negatives.")
def cmd_train(config, seed, reproducible, views, demos, data, out, log_path,
              perspective, own_view_negatives):
    """Train the pick and place action-value models on demonstrations."""
    cfg = _load_config(config, seed=seed, demos=demos, views=views,
                       reproducible=reproducible, perspective=perspective,
                       own_view_negatives=own_view_negatives)
    demos_list = pipeline.load_dataset_demos(data)
    if len(demos_list) > cfg.demos:
        demos_list = demos_list[: cfg.demos]
    t0 = time.time()
    model, log = pipeline.train_policy(cfg, demos_list, log_path=log_path)
    affordance.save_model(model, out)
    click.echo(
        f"trained on {len(demos_list)} demos in {time.time() - t0:.1f}s; "
        f"final losses pick {log[-1][1]:.3f} place {log[-1][2]:.3f}; model: {out}"
    )


@cli.command("eval")
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Results CSV path.")
@click.option("--task", default=None)
@click.option("--regime", type=click.Choice([Regime.IN_DISTRIBUTION,
                                             Regime.OUT_OF_DISTRIBUTION]), default=None)
@click.option("--runs", type=int, default=None, help="Evaluation episodes (default 50).")
@click.option("--cache-dir", type=click.Path(), default=None,
              help="Cache fitted fields here across runs/variants.")
@click.option("--report-dir", type=click.Path(), default=None,
              help="Write a planner report and score montage for the first episode.")
@click.option("--perspective", is_flag=True, default=False)
@click.option("--own-view-negatives", is_flag=True, default=False)
def cmd_eval(config, seed, reproducible, views, demos, model_path, out, task,
             regime, runs, cache_dir, report_dir, perspective, own_view_negatives):
    """Run seeded evaluation episodes and write a results CSV."""
    cfg = _load_config(config, seed=seed, demos=demos, views=views,
                       reproducible=reproducible, task=task, regime=regime,
                       runs=runs, cache_dir=cache_dir, perspective=perspective,
                       own_view_negatives=own_view_negatives)
    model = affordance.load_model(model_path)
    if report_dir:
        _write_episode_report(cfg, model, report_dir)
    t0 = time.time()

    def progress(i, n, success):
        click.echo(f"  episode {i}/{n}: {'success' if success else 'failure'}")

    rate, rows = pipeline.run_eval(cfg, model, out_csv=out, progress=progress)
    click.echo(
        f"{cfg.task} [{cfg.regime}] success {100 * rate:.0f}% "
        f"over {len(rows)} runs in {time.time() - t0:.1f}s -> {out}"
    )


def _write_episode_report(cfg, model, report_dir):
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    instance = scene_sim.sample_task(cfg.task, cfg.regime, cfg.eval.base_seed)
    views = pipeline.build_policy_views(cfg)
    settings = pipeline.policy_settings(cfg)
    fld, _ = pipeline.fit_for_instance_cached(instance, cfg)
    convention = planner.GraspConvention(place_depth_offset=model.place_depth_offset)
    pcfg = planner.PlannerConfig(retries=cfg.eval.retries,
                                 refine_rounds=cfg.eval.refine_rounds, keep_maps=True)
    action, report = planner.plan(fld, views, model, settings, convention,
                                  scene_sim.WORKSPACE_LO, scene_sim.WORKSPACE_HI, pcfg)
    pick_maps = report.pop("_pick_maps")
    place_maps = report.pop("_place_maps")
    planner.score_montage(pick_maps, report_dir / "pick_scores.png",
                          mark=(report["pick_view"], tuple(report["pick_pixel"])))
    planner.score_montage(place_maps, report_dir / "place_scores.png",
                          mark=(report["place_view"], tuple(report["place_pixel"])))
    planner.write_report(report, report_dir / "report.json")


@cli.command("ablate")
@common_options
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
@click.option("--task", default=None)
@click.option("--runs", type=int, default=None)
@click.option("--cache-dir", type=click.Path(), default=None)
def cmd_ablate(config, seed, reproducible, views, demos, out, task, runs, cache_dir):
    """Train and evaluate the full pipeline against its two ablations."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    variants = (
        ("full", {}),
        ("perspective", {"perspective": True}),
        ("own_view_negatives", {"own_view_negatives": True}),
    )
    table = []
    for name, extra in variants:
        cfg = _load_config(config, seed=seed, demos=demos, views=views,
                           reproducible=reproducible, task=task, runs=runs,
                           cache_dir=cache_dir, **extra)
        demo_dir = out / f"demos_{'persp' if extra.get('perspective') else 'ortho'}"
        if not demo_dir.exists():
            pipeline.generate_demos(cfg, out_dir=demo_dir, with_captures=False)
        demos_list = pipeline.load_dataset_demos(demo_dir)[: cfg.demos]
        model_path = out / f"model_{name}.mirc"
        if model_path.exists():
            model = affordance.load_model(model_path)
        else:
            model, _ = pipeline.train_policy(cfg, demos_list,
                                             log_path=out / f"train_{name}.csv")
            affordance.save_model(model, model_path)
        rate, rows = pipeline.run_eval(cfg, model, out_csv=out / f"results_{name}.csv")
        table.append((name, cfg.task, cfg.regime, cfg.demos, rate))
        click.echo(f"  {name}: {100 * rate:.0f}%")
    with open(out / "ablation.csv", "w") as f:
        f.write("variant,task,regime,demos,success_rate\n")
        for name, t, r, d, rate in table:
            f.write(f"{name},{t},{r},{d},{rate:.4f}\n")
    click.echo(f"ablation table -> {out / 'ablation.csv'}")


def main(argv=None):
    try:
        cli(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"usage error: {e}", err=True)
        return EXIT_CONFIG
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_CONFIG
    except (ConfigError, DomainError) as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    except NumericsError as e:
        click.echo(f"numerical failure: {e}", err=True)
        return EXIT_NUMERIC
    except IOFailure as e:
        click.echo(f"i/o error: {e}", err=True)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
