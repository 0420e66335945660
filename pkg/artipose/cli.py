"""Command-line entry point: gen, estimate, baseline-icp, eval, verify, schemas."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from artipose.cloud import PointCloud, miou
from artipose.config import Settings, settings
from artipose.errors import ArtiposeError, CountMismatch, DegenerateMotion, InvalidFile, VerificationFailed
from artipose.io import (
    dump_features,
    dump_group,
    joint_out,
    part_bbox_centers,
    part_pose_out,
    pose_fields,
    read_cloud,
    read_dataset,
    read_json,
    read_model,
    record_transforms,
    write_dataset,
    write_json,
)
from artipose.kinematics import ArticulatedModel, Joint, articulate_joint, estimate_joint_from_motion, unify_axes
from artipose.rotgroup import get_group
from artipose.schemas import SCHEMAS, DatasetManifest, EstimateOut, GroundTruthOut, IcpOut, PoseRecord
from artipose.se3 import RigidTransform, compose
from artipose.services import synthdata
from artipose.services.estimator import EstimatorConfig, default_stack, estimate, feedback_features
from artipose.services.evaluation import aggregate, calibrate_residual, evaluate_record, write_csv
from artipose.services.icp_baseline import oracle_icp
from artipose.verify import run_suite

logger = logging.getLogger("artipose.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VERIFY = 4

DEFAULT_NOISE = 0.02


def _seed(args: argparse.Namespace, config: Settings = settings) -> int:
    # APC_SEED from the environment or .env wins over --seed
    if "SEED" in config.model_fields_set:
        return config.SEED
    return args.seed if args.seed is not None else config.SEED


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise FileNotFoundError(f"not a directory: {path}")
    return path


def _ground_truth(model: ArticulatedModel, sample: synthdata.Sample, index: int) -> GroundTruthOut:
    return GroundTruthOut(
        **pose_fields(model, sample.gt_pose, sample.transforms, sample.cloud.labels),
        sample_index=index,
        state_index=sample.state_index,
        rot_index=sample.rot_index,
        view=None if sample.view is None else [float(v) for v in sample.view],
        visible=None if sample.visible is None else [int(v) for v in sample.visible],
    )


def cmd_gen(args: argparse.Namespace) -> int:
    seed = _seed(args)
    template = synthdata.make_template(args.kind, symmetric=args.symmetric, step=args.step)
    n_states, n_rots = synthdata.PRESETS[args.preset] if args.preset else (args.states, args.rots)
    samples = synthdata.generate(template, n_states, n_rots, seed=seed, jobs=args.jobs)
    model = samples[0].model

    prepared = []
    for s in samples:
        if args.partial:
            view = synthdata.camera_view(template, s, resolution=args.resolution, cone_deg=args.cone)
            s = synthdata.render_partial(s, view, seed=seed)
        if args.noise:
            s = synthdata.add_noise(s, args.noise, seed=seed)
        prepared.append(s)

    manifest = DatasetManifest(
        template=args.kind,
        kind=args.kind,
        states=n_states,
        rots=n_rots,
        seed=seed,
        limits={j.child: list(j.limits) for j in model.joints},
        partial=args.partial,
        noise=args.noise or 0.0,
        symmetric=args.symmetric,
        step=args.step,
    )
    write_dataset(args.out, manifest, model, [(s.cloud, _ground_truth(model, s, i)) for i, s in enumerate(prepared)])
    logger.info("gen done kind=%s samples=%d out=%s", args.kind, len(prepared), args.out)
    return EXIT_OK


def _estimator_config(args: argparse.Namespace, partial: bool) -> EstimatorConfig:
    d_mode = args.d_mode or ("uni" if partial else None)
    return EstimatorConfig.from_settings(
        group=args.group,
        iterations=args.iterations,
        hypothesis_iterations=args.hypothesis_iterations,
        step_init=args.step_init,
        step_decay=args.step_decay,
        revolute_grid=args.revolute_grid,
        prismatic_grid=args.prismatic_grid,
        feedback_rounds=args.feedback_rounds,
        d_mode=d_mode,
        lam=args.lam,
        top_k=args.top_k,
        restart_rounds=args.restart_rounds,
        seed=_seed(args),
        pre_align=args.pre_align or None,
        base_translation=args.base_translation or None,
        refine_assembly=args.refine_assembly or None,
        jobs=args.jobs,
    )


def _inputs(args: argparse.Namespace) -> tuple[ArticulatedModel, list[tuple[str, PointCloud, GroundTruthOut | None]], DatasetManifest | None]:
    if args.data:
        manifest, model, samples = read_dataset(_require_dir(Path(args.data)))
        return model, [(f"sample_{gt.sample_index:05d}", cloud, gt) for cloud, gt in samples], manifest
    if not (args.cloud and args.model):
        raise InvalidFile("either --data or both --cloud and --model are required")
    model = read_model(args.model)
    return model, [(Path(args.cloud).stem, read_cloud(args.cloud), None)], None


def _metrics(out: Path, dataset: str, reports: list) -> None:
    if reports:
        write_csv(out / "metrics.csv", aggregate(reports, dataset))


def cmd_estimate(args: argparse.Namespace) -> int:
    model, inputs, manifest = _inputs(args)
    if args.unify_axes:
        model = model.with_joints(unify_axes(model.joints))
    cfg = _estimator_config(args, partial=bool(manifest and manifest.partial))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack = default_stack(cfg.seed) if cfg.feedback_rounds else None

    reports = []
    for stem, cloud, gt in inputs:
        X = PointCloud(cloud.points)
        est = estimate(X, model, cfg)
        score = None
        if cloud.labels is not None:
            score = miou(est.segmentation, cloud.labels, model.num_parts)
        record = EstimateOut(
            **pose_fields(est.model, est.pose, est.per_part, est.segmentation),
            group=cfg.group,
            g0=est.g0,
            L_rec=est.report.L_rec,
            L_reg=est.report.L_reg,
            total=est.report.total,
            per_g_loss=list(est.report.per_g_loss),
            chamfer_l1=est.chamfer_l1,
            miou=score,
        )
        if gt is not None:
            report = evaluate_record(record, gt)
            reports.append(report)
            record = record.model_copy(
                update={"metrics": {"R_err": [p.R_err for p in report.per_part], "T_err": [p.T_err for p in report.per_part]}}
            )
        write_json(out / f"{stem}.estimate.json", record)
        if stack is not None:
            features, _ = feedback_features(X, est, stack, cfg.feedback_rounds, cfg.group, seed=cfg.seed, jobs=cfg.jobs)
            dump_features(out / f"{stem}.features.bin", features)

    _metrics(out, manifest.template if manifest else "single", reports)
    logger.info("estimate done samples=%d out=%s", len(inputs), out)
    return EXIT_OK


def _object_placement(model: ArticulatedModel, per_part: list[RigidTransform], k: int) -> RigidTransform:
    """The object-space placement implied by one part's pose: P_k ∘ T(-p_k)."""
    return compose(per_part[k], RigidTransform.pure_translation(-model.assembly[k]))


def icp_joints(model: ArticulatedModel, per_part: list[RigidTransform]) -> list[Joint]:
    """Camera-space joints recovered from the relative motion of each child against its parent."""
    joints = []
    for j in model.joints:
        parent = _object_placement(model, per_part, j.parent)
        child = _object_placement(model, per_part, j.child)
        try:
            axis, pivot = estimate_joint_from_motion(parent, child, j.kind)
        except DegenerateMotion:
            joints.append(articulate_joint(j, parent))
            continue
        joints.append(Joint(j.kind, axis, pivot, j.parent, j.child, j.limits))
    return joints


def cmd_icp(args: argparse.Namespace) -> int:
    manifest, model, samples = read_dataset(_require_dir(Path(args.data)))
    templates = [PointCloud.concat(model.parts)]
    for extra in args.templates or []:
        templates.append(PointCloud.concat(read_model(extra).parts))
    group = get_group(args.group)
    partial = manifest.partial if args.partial is None else args.partial
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)

    reports, table = [], []
    for cloud, gt in samples:
        stem = f"sample_{gt.sample_index:05d}"
        result = oracle_icp(templates, cloud, group, partial=partial, max_iter=args.max_iter, seed=seed, jobs=args.jobs)
        per_part = result.transforms
        base = _object_placement(model, per_part, model.tree.root)
        joints = icp_joints(model, per_part)
        record = IcpOut(
            base_quaternion=base.quaternion().tolist(),
            base_translation=base.translation.tolist(),
            per_part=[part_pose_out(T) for T in per_part],
            joints=[joint_out(j) for j in joints],
            part_bbox_centers=part_bbox_centers([templates[ti].part(k) for k, ti in enumerate(result.templates_used)]),
            labels=[int(v) for v in result.labels],
            inlier_rmse=[r.inlier_rmse for r in result.parts],
            hypothesis_rmse=result.hypothesis_rmse,
            converged=[r.converged for r in result.parts],
            miou=miou(result.labels, cloud.labels, model.num_parts),
        )
        write_json(out / f"{stem}.icp.json", record)
        reports.append(evaluate_record(record, gt))
        for k, rmse in enumerate(result.hypothesis_rmse):
            table.extend((gt.sample_index, k, h, value) for h, value in enumerate(rmse))

    with (out / "hypotheses.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "part_id", "hypothesis", "inlier_rmse"])
        writer.writerows(table)
    _metrics(out, manifest.template, reports)
    logger.info("baseline-icp done samples=%d group=%s partial=%s", len(samples), group.kind.value, partial)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if len(args.pred) != len(args.gt):
        raise CountMismatch("--pred and --gt need the same number of files", details={"pred": len(args.pred), "gt": len(args.gt)})
    residuals = None
    if args.calibrate:
        canon = [record_transforms(read_json(p, PoseRecord)) for p in args.calibrate]
        residuals = calibrate_residual(canon, diameter=args.diameter, seed=_seed(args))
    reports = [
        evaluate_record(read_json(p, PoseRecord), read_json(g, PoseRecord), residuals)
        for p, g in zip(args.pred, args.gt)
    ]
    rows = aggregate(reports, args.dataset)
    if args.out:
        write_csv(args.out, rows)
    print(json.dumps([row.model_dump() for row in rows], indent=2))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    tol = args.tol if args.tol is not None else settings.VERIFY_TOL
    dtype = np.float32 if (args.precision or settings.PRECISION) == "float32" else np.float64
    if args.dump_group:
        dump_group(args.dump_group, get_group(args.group))
    summary = run_suite(args.group, tol, seed=_seed(args), jobs=args.jobs, dtype=dtype)
    print(summary.model_dump_json(indent=2))
    if args.out:
        write_json(args.out, summary)
    if not summary.passed:
        raise VerificationFailed(
            "property suite failed",
            details={"failed": [c.name for c in summary.checks if not c.passed]},
        )
    return EXIT_OK


def cmd_schemas(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, schema in SCHEMAS.items():
        (out / f"{name}.schema.json").write_text(json.dumps(schema.model_json_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=settings.JOBS, help="worker threads; results do not depend on it")
    common.add_argument("--seed", type=int, default=None, help="random seed (APC_SEED overrides)")
    common.add_argument("--precision", choices=["float64", "float32"], default=None)

    parser = argparse.ArgumentParser(prog="artipose", description="Articulated object pose estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic articulated dataset")
    gen.add_argument("--kind", choices=sorted(synthdata.TEMPLATES), required=True)
    gen.add_argument("--states", type=int, default=10)
    gen.add_argument("--rots", type=int, default=3)
    gen.add_argument("--preset", choices=sorted(synthdata.PRESETS), default=None)
    gen.add_argument("--partial", action="store_true")
    gen.add_argument("--noise", type=float, nargs="?", const=DEFAULT_NOISE, default=None)
    gen.add_argument("--symmetric", action="store_true")
    gen.add_argument("--step", type=float, default=0.025, help="surface lattice step before normalisation")
    gen.add_argument("--resolution", type=int, default=32)
    gen.add_argument("--cone", type=float, default=40.0, help="view cone half-angle in degrees")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen)

    est = sub.add_parser("estimate", parents=[common], help="estimate articulated poses")
    est.add_argument("--data", help="dataset directory written by gen")
    est.add_argument("--cloud", help="single point-cloud file")
    est.add_argument("--model", help="model directory or manifest")
    est.add_argument("--out", required=True)
    est.add_argument("--group", choices=["tetrahedral", "octahedral", "icosahedral"], default=None)
    est.add_argument("--iterations", type=int, default=None)
    est.add_argument("--hypothesis-iterations", type=int, default=None)
    est.add_argument("--step-init", type=float, default=None)
    est.add_argument("--step-decay", type=float, default=None)
    est.add_argument("--revolute-grid", type=int, default=None)
    est.add_argument("--prismatic-grid", type=int, default=None)
    est.add_argument("--feedback-rounds", type=int, default=None)
    est.add_argument("--d-mode", choices=["uni", "bi"], default=None)
    est.add_argument("--lam", type=float, default=None)
    est.add_argument("--top-k", type=int, default=None)
    est.add_argument("--restart-rounds", type=int, default=None)
    est.add_argument("--pre-align", action="store_true")
    est.add_argument("--base-translation", action="store_true")
    est.add_argument("--refine-assembly", action="store_true")
    est.add_argument("--unify-axes", action="store_true")
    est.set_defaults(handler=cmd_estimate)

    icp = sub.add_parser("baseline-icp", parents=[common], help="oracle ICP baseline")
    icp.add_argument("--data", required=True)
    icp.add_argument("--out", required=True)
    icp.add_argument("--group", choices=["tetrahedral", "octahedral", "icosahedral"], default="icosahedral")
    icp.add_argument("--partial", action=argparse.BooleanOptionalAction, default=None)
    icp.add_argument("--templates", nargs="*", help="extra model directories used as templates")
    icp.add_argument("--max-iter", type=int, default=50)
    icp.set_defaults(handler=cmd_icp)

    ev = sub.add_parser("eval", parents=[common], help="score prediction records against ground truth")
    ev.add_argument("--pred", nargs="+", required=True)
    ev.add_argument("--gt", nargs="+", required=True)
    ev.add_argument("--calibrate", nargs="+", help="prediction records made on canonical inputs")
    ev.add_argument("--diameter", type=float, default=1.0)
    ev.add_argument("--dataset", default="dataset")
    ev.add_argument("--out", help="metrics CSV path")
    ev.set_defaults(handler=cmd_eval)

    ver = sub.add_parser("verify", parents=[common], help="run the property suite")
    ver.add_argument("--group", choices=["tetrahedral", "octahedral", "icosahedral"], default="octahedral")
    ver.add_argument("--tol", type=float, default=None)
    ver.add_argument("--out", help="summary JSON path")
    ver.add_argument("--dump-group", help="write the group table (index, w x y z per element) to this path")
    ver.set_defaults(handler=cmd_verify)

    sch = sub.add_parser("schemas", help="write JSON Schemas of every output record")
    sch.add_argument("--out", required=True)
    sch.set_defaults(handler=cmd_schemas)
    return parser


def _fail(exc: Exception, code: int) -> int:
    if isinstance(exc, ArtiposeError):
        payload = exc.payload()
    else:
        kind = "io_error" if isinstance(exc, OSError) else "invalid_argument"
        payload = {"code": kind, "message": str(exc), "details": None}
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
        force=True,
    )
    if getattr(args, "precision", None):
        settings.PRECISION = args.precision
        settings.dtype = np.float32 if args.precision == "float32" else np.float64

    try:
        return args.handler(args)
    except VerificationFailed as exc:
        logger.error("verification failed details=%s", exc.details)
        return _fail(exc, EXIT_VERIFY)
    except InvalidFile as exc:
        logger.error("invalid input file: %s", exc.message)
        return _fail(exc, EXIT_IO)
    except OSError as exc:
        logger.error("i/o failure: %s", exc)
        return _fail(exc, EXIT_IO)
    except ArtiposeError as exc:
        logger.error("%s: %s", exc.code, exc.message)
        return _fail(exc, EXIT_ERROR)
    except ValueError as exc:
        logger.error("invalid argument: %s", exc)
        return _fail(exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
