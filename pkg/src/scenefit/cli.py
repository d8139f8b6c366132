"""Command-line interface: solve, synth, eval, baseline, export.

Exit codes: 0 success, 1 input error (bad usage, unreadable or invalid
files), 2 pipeline failure (no consensus, neglected scenes, failed
thresholds), 3 solver divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .arrange import SceneSpec, arrange_iterative, arrange_scene, \
    baseline_circular, baseline_uniform
from .errors import SceneFitError, SchemaError
from .export import write_obj, write_svg
from .geom import Plane
from .joint import RefineConfig, SceneSolution
from .matching import DEFAULT_NEGLECT_THRESHOLD
from .pnp import RansacConfig
from .synth import SynthConfig, generate_scene, pose_error

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PIPELINE = 2
EXIT_DIVERGED = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # bad flags are input errors (exit 1), not argparse's default exit 2
    def error(self, message):
        raise _UsageError(message)


def _error_record(kind: str, message: str, **extra) -> None:
    record = {"error": {"type": kind, "message": message, **extra}}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _refine_config(args) -> RefineConfig:
    return RefineConfig(
        omega_surface=args.omega_surface,
        omega_collision=args.omega_collision,
        learning_rate=args.lr,
        steps=args.steps,
        optimize_plane=not args.freeze_plane,
    )


def _ransac_config(args) -> RansacConfig:
    return RansacConfig(inlier_threshold_px=args.inlier_threshold, seed=args.seed)


def _load_spec(path: str) -> SceneSpec:
    description, camera, objects, correspondences, descriptor_paths, _ = \
        fileio.read_scene_file(path)
    render_maps = None
    scene_map = None
    if correspondences is None:
        if descriptor_paths is None:
            raise SchemaError(f"{path}: scene file has neither correspondences "
                              "nor descriptor maps")
        scene_path, object_paths = descriptor_paths
        scene_map = fileio.read_descriptor_map(scene_path)
        render_maps = {oid: [fileio.read_descriptor_map(p) for p in paths]
                       for oid, paths in object_paths.items()}
    return SceneSpec(description=description, objects=objects, camera=camera,
                     correspondences=correspondences,
                     render_descriptors=render_maps, scene_descriptors=scene_map)


def cmd_solve(args) -> int:
    if args.iterative:
        manifest = fileio._load_json(args.scene, {
            "type": "object",
            "required": ["version", "steps"],
            "properties": {
                "version": {"const": fileio.FORMAT_VERSION},
                "steps": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
        }, "step manifest")
        base = Path(args.scene).parent
        specs = [_load_spec(str(base / p)) for p in manifest["steps"]]
        solution = arrange_iterative(specs, _refine_config(args), _ransac_config(args),
                                     args.neglect_threshold)
    else:
        spec = _load_spec(args.scene)
        solution = arrange_scene(spec, _refine_config(args), _ransac_config(args),
                                 args.neglect_threshold)
    fileio.write_solution_file(args.output, solution)
    if solution.diverged:
        _error_record("Diverged", "optimization diverged; last finite state written",
                      output=str(args.output))
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_objects=args.objects,
        keypoints_per_object=args.keypoints,
        noise_sigma_px=args.noise,
        outlier_fraction=args.outliers,
        scene_extent=args.extent,
        seed=args.seed,
        place_on_floor=not args.no_floor,
        allow_collisions=args.allow_collisions,
    )
    scene = generate_scene(cfg)
    fileio.write_scene_file(
        args.output,
        description=scene.description,
        camera=scene.camera,
        objects=scene.objects,
        correspondences=scene.correspondences,
    )
    truth_path = args.truth or str(Path(args.output).with_suffix(".truth.json"))
    fileio.write_truth_file(
        truth_path,
        transforms=scene.true_transforms,
        world_transforms=scene.world_transforms,
        camera_from_world=scene.camera_from_world,
        inlier_labels=scene.inlier_labels,
        scene_extent=scene.scene_extent,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    _, _, objects, _, _, embedded_truth = fileio.read_scene_file(args.scene)
    solution = fileio.read_solution_file(args.solution)
    if args.truth:
        truth = fileio.read_truth_file(args.truth)
    elif embedded_truth is not None:
        truth = fileio.truth_from_dict({"version": fileio.FORMAT_VERSION, **embedded_truth})
    else:
        raise SchemaError("no ground truth: pass --truth or embed it in the scene file")

    scene_ids = {o.id for o in objects}
    solved_ids = set(solution.transforms)
    truth_ids = set(truth["transforms"])
    expected = scene_ids & truth_ids
    missing = sorted(expected - solved_ids - set(solution.neglected))
    if missing:
        raise SchemaError(f"solution is missing objects present in the truth: {missing}")

    rows = []
    worst_rot = worst_trans = 0.0
    for oid in sorted(expected & solved_ids):
        rot_deg, trans = pose_error(truth["transforms"][oid], solution.transforms[oid])
        worst_rot = max(worst_rot, rot_deg)
        worst_trans = max(worst_trans, trans)
        rows.append({"id": oid, "rotation_deg": rot_deg, "translation": trans})

    passed = True
    if args.max_rotation_deg is not None:
        passed &= worst_rot <= args.max_rotation_deg
    if args.max_translation is not None:
        passed &= worst_trans <= args.max_translation

    final_loss = list(solution.loss_trace[-1]) if solution.loss_trace else None
    report = {
        "objects": rows,
        "neglected": solution.neglected,
        "worst_rotation_deg": worst_rot,
        "worst_translation": worst_trans,
        "final_loss": final_loss,
        "pass": passed,
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    for row in rows:
        print(f"{row['id']:<16} rotation {row['rotation_deg']:>12.6f} deg   "
              f"translation {row['translation']:>12.6g}")
    if solution.neglected:
        print(f"neglected: {', '.join(solution.neglected)}")
    print(f"worst: rotation {worst_rot:.6f} deg, translation {worst_trans:.6g} -> "
          f"{'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_PIPELINE


def cmd_baseline(args) -> int:
    _, _, objects, _, _, _ = fileio.read_scene_file(args.scene)
    if args.mode == "uniform":
        transforms = baseline_uniform(objects, seed=args.seed)
    else:
        transforms = baseline_circular(objects, radius=args.radius)
    solution = SceneSolution(transforms=transforms,
                             floor=Plane(np.array([0.0, 0.0, 1.0, 0.0])),
                             loss_trace=[])
    fileio.write_solution_file(args.output, solution)
    return EXIT_OK


def cmd_export(args) -> int:
    _, camera, objects, _, _, _ = fileio.read_scene_file(args.scene)
    solution = fileio.read_solution_file(args.solution)
    if args.format == "obj":
        write_obj(args.output, objects, solution, mesh_root=Path(args.scene).parent)
    else:
        write_svg(args.output, objects, solution, camera)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenefit",
                     description="Recover 3D object arrangements from 2D keypoint "
                                 "correspondences against a single layout image.")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve a scene file (or an iterative step manifest)")
    solve.add_argument("scene", help="scene JSON file, or a step manifest with --iterative")
    solve.add_argument("-o", "--output", required=True, help="solution JSON path")
    solve.add_argument("--iterative", action="store_true",
                       help="treat the input as a manifest of per-iteration scene files")
    solve.add_argument("--steps", type=int, default=2000, help="optimizer steps")
    solve.add_argument("--lr", type=float, default=0.001, help="optimizer learning rate")
    solve.add_argument("--omega-surface", type=float, default=1e6,
                       help="weight of the shared-floor penalty")
    solve.add_argument("--omega-collision", type=float, default=1e4,
                       help="weight of the anti-collision penalty")
    solve.add_argument("--inlier-threshold", type=float, default=None,
                       help="RANSAC inlier threshold in pixels (default: 2%% of image diagonal)")
    solve.add_argument("--neglect-threshold", type=float, default=DEFAULT_NEGLECT_THRESHOLD,
                       help="matching score below which an object counts as absent")
    solve.add_argument("--seed", type=int, default=0, help="RANSAC sampling seed")
    solve.add_argument("--freeze-plane", action="store_true",
                       help="keep the floor plane fixed at its initialization")
    solve.set_defaults(func=cmd_solve)

    synth = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    synth.add_argument("-o", "--output", required=True, help="scene JSON path")
    synth.add_argument("--truth", default=None,
                       help="ground-truth sidecar path (default: <output>.truth.json)")
    synth.add_argument("--objects", type=int, default=2)
    synth.add_argument("--keypoints", type=int, default=100)
    synth.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    synth.add_argument("--outliers", type=float, default=0.0, help="outlier fraction in [0, 1)")
    synth.add_argument("--extent", type=float, default=4.0, help="scene extent in scene units")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--no-floor", action="store_true",
                       help="do not constrain true poses to a shared floor")
    synth.add_argument("--allow-collisions", action="store_true")
    synth.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="compare a solution against ground truth")
    ev.add_argument("scene")
    ev.add_argument("solution")
    ev.add_argument("--truth", default=None, help="ground-truth sidecar path")
    ev.add_argument("--max-rotation-deg", type=float, default=None)
    ev.add_argument("--max-translation", type=float, default=None)
    ev.add_argument("--report", default=None, help="write a machine-readable report here")
    ev.set_defaults(func=cmd_eval)

    base = sub.add_parser("baseline", help="heuristic layouts for comparison")
    base.add_argument("scene")
    base.add_argument("-o", "--output", required=True)
    base.add_argument("--mode", choices=["uniform", "circular"], required=True)
    base.add_argument("--seed", type=int, default=0)
    base.add_argument("--radius", type=float, default=2.0)
    base.set_defaults(func=cmd_baseline)

    exp = sub.add_parser("export", help="export a solved scene")
    exp.add_argument("scene")
    exp.add_argument("solution")
    exp.add_argument("--format", choices=["obj", "svg"], required=True)
    exp.add_argument("-o", "--output", required=True)
    exp.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _error_record("UsageError", str(exc))
        return EXIT_INPUT
    try:
        return args.func(args)
    except (SchemaError, FileNotFoundError, ValueError) as exc:
        _error_record(type(exc).__name__, str(exc))
        return EXIT_INPUT
    except SceneFitError as exc:
        _error_record(type(exc).__name__, str(exc))
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
