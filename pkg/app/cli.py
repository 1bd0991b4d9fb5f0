# app/cli.py
"""
Command line entry point: python -m app.cli {run,simulate,evaluate,inspect-config}.

Pipeline flags are generated from PipelineConfig (``--knot-interval`` ...) and
scenario flags from ScenarioSpec; a JSON ``--config`` / ``--spec`` file sits
between the defaults and the flags. Exit codes follow OdometryError.exit_code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import BaseModel, ValidationError

from app.adapters.streams import text_io
from app.core.config import PipelineConfig, load_pipeline_config, settings
from app.core.errors import ConfigError, OdometryError, StreamGapError
from app.models.schemas import ScenarioSpec
from app.services.evaluation_service import evaluate
from app.services.odometry_service import run_odometry
from app.services.simulation_service import generate_scenario

logger = logging.getLogger(__name__)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_model_flags(parser: argparse.ArgumentParser, model: type[BaseModel], group_title: str) -> None:
    """One optional flag per model field; unset flags stay None so they do not override files."""
    group = parser.add_argument_group(group_title)
    for name, info in model.model_fields.items():
        annotation = info.annotation
        origin = typing.get_origin(annotation)
        kwargs: dict[str, Any] = {"dest": name, "default": None, "help": f"default: {info.default!r}"}
        if annotation is bool:
            kwargs["action"] = argparse.BooleanOptionalAction
        elif origin is typing.Literal:
            choices = typing.get_args(annotation)
            kwargs["choices"] = choices
            kwargs["type"] = type(choices[0])
        elif origin is tuple:
            kwargs["nargs"] = len(typing.get_args(annotation))
            kwargs["type"] = float
            kwargs["metavar"] = ("X", "Y", "Z")
        else:
            kwargs["type"] = annotation
        group.add_argument(_flag(name), **kwargs)


def _overrides(args: argparse.Namespace, model: type[BaseModel]) -> dict[str, Any]:
    return {name: getattr(args, name) for name in model.model_fields if getattr(args, name, None) is not None}


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    return load_pipeline_config(args.config, _overrides(args, PipelineConfig))


def _scenario_spec(args: argparse.Namespace) -> ScenarioSpec:
    data: dict[str, Any] = {}
    if args.spec:
        try:
            data.update(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read scenario file {args.spec}: {e}") from e
    data.update(_overrides(args, ScenarioSpec))
    try:
        spec = ScenarioSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError("; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())) from e
    return spec.noiseless() if args.noiseless else spec


def cmd_run(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    out = Path(args.output_dir)
    scans = text_io.read_radar(args.radar)
    imu = text_io.read_imu(args.imu)
    resume = text_io.load_checkpoint(args.resume) if args.resume else None
    try:
        result = run_odometry(config, scans, imu, resume=resume)
    except StreamGapError as e:
        path = text_io.save_checkpoint(out / "checkpoint.npz", e.checkpoint)
        logger.error("%s; resume with --resume %s", e, path)
        return e.exit_code
    text_io.write_trajectory(out / "trajectory.txt", result.trajectory)
    text_io.write_map_text(out / "map.txt", result.map_arrays)
    text_io.write_map_ply(out / "map.ply", result.map_arrays)
    text_io.write_diagnostics(out / "diagnostics.jsonl", result.diagnostics)
    summary: dict[str, Any] = {
        "knots": result.knots,
        "poses": len(result.trajectory),
        "map_points": len(result.map_arrays),
        "runtime_s": result.runtime_s,
        "knots_per_second": result.knots_per_second,
    }
    if args.ground_truth:
        metrics = evaluate(result.trajectory, text_io.read_trajectory(args.ground_truth), align=not args.no_align)
        summary["metrics"] = metrics.as_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = _scenario_spec(args)
    scenario = generate_scenario(spec)
    out = Path(args.output_dir)
    text_io.write_radar(out / "radar.csv", scenario.scans)
    text_io.write_imu(out / "imu.csv", scenario.imu)
    text_io.write_trajectory(out / "ground_truth.txt", scenario.ground_truth_trajectory())
    (out / "scenario.json").write_text(spec.model_dump_json(indent=2), encoding="utf-8")
    print(
        json.dumps(
            {
                "frames": len(scenario.scans),
                "radar_points": sum(len(s) for s in scenario.scans),
                "imu_samples": len(scenario.imu),
                "output_dir": str(out),
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    est = text_io.read_trajectory(args.estimate)
    gt = text_io.read_trajectory(args.ground_truth)
    metrics = evaluate(est, gt, align=not args.no_align)
    print(json.dumps(metrics.as_dict(), sort_keys=True))
    return 0


def cmd_inspect_config(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    print(config.model_dump_json(indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app.cli", description="Radar-inertial odometry engine")
    parser.add_argument("--log-level", default=settings.log_level)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run odometry on radar/IMU streams")
    run.add_argument("--radar", required=True, help="radar CSV")
    run.add_argument("--imu", required=True, help="IMU CSV")
    run.add_argument("--config", help="pipeline config JSON")
    run.add_argument("--output-dir", default=settings.output_dir)
    run.add_argument("--resume", help="checkpoint written by an aborted run")
    run.add_argument("--ground-truth", help="reference trajectory for evaluation")
    run.add_argument("--no-align", action="store_true")
    add_model_flags(run, PipelineConfig, "pipeline")
    run.set_defaults(handler=cmd_run)

    sim = sub.add_parser("simulate", help="generate a synthetic sequence")
    sim.add_argument("--spec", help="scenario JSON")
    sim.add_argument("--output-dir", default=settings.output_dir)
    sim.add_argument("--noiseless", action="store_true")
    add_model_flags(sim, ScenarioSpec, "scenario")
    sim.set_defaults(handler=cmd_simulate)

    ev = sub.add_parser("evaluate", help="ATE / RPE of an estimate against a reference")
    ev.add_argument("--estimate", required=True)
    ev.add_argument("--ground-truth", required=True)
    ev.add_argument("--no-align", action="store_true")
    ev.set_defaults(handler=cmd_evaluate)

    insp = sub.add_parser("inspect-config", help="print the effective pipeline config")
    insp.add_argument("--config", help="pipeline config JSON")
    add_model_flags(insp, PipelineConfig, "pipeline")
    insp.set_defaults(handler=cmd_inspect_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper())
    try:
        return args.handler(args)
    except OdometryError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
