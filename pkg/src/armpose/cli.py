"""Command line front end.

Subcommands cover the full loop: gen (synthetic datasets), train-gim (the
keypoint-to-distance regressor), estimate (geometric initialization),
refine (silhouette refinement), eval (metrics reports), and render
(diagnostic overlays). Options may come from a JSON config file via
--config; explicit flags win over the file, which wins over defaults.

Exit codes: 0 success, 2 configuration or missing-input errors, 3 I/O
failures, 4 training divergence, 5 inconsistent or unusable data.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ._io import atomic_write_text
from .datagen import (
    DatasetFormatError,
    SamplerConfig,
    SceneGenerationError,
    build_scene,
    load_scene_mask,
    read_dataset,
    write_dataset,
)
from .distgeo import (
    AlignmentDegenerateError,
    TrainConfig,
    TrainingDivergedError,
    edm_from_configuration,
    gram_from_edm,
    init_regressor,
    keypoint_features,
    load_regressor,
    mlp_forward,
    points_from_gram,
    save_regressor,
    train_gim,
)
from .kinematics import builtin_chain, joint_points, load_chain, forward_kinematics
from .distgeo import align_points, configuration_from_points
from .metrics import EvalRecord, add_metric, build_report, mae_config, write_report_csv, write_report_json
from .poseinit import (
    InsufficientCorrespondencesError,
    PnpDegenerateError,
    ScaleUndefinedError,
    initial_estimate,
)
from .refine import Estimate, RefinerConfig, refine
from .silhouette import (
    RenderSettings,
    default_link_meshes,
    draw_segment,
    render_chain_silhouette,
    write_pgm,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_DATA = 5

BUILTIN_CHAINS = ("panda7", "planar2")


class CliError(Exception):
    """Error with a dedicated process exit code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# option plumbing

GEN_DEFAULTS = {
    "chain": "panda7",
    "count": 20,
    "seed": 0,
    "noise_std": math.sqrt(30.0),
    "distance": [1.8, 3.0],
    "elevation": [0.05, 0.45],
    "azimuth": [-math.pi, math.pi],
    "image_size": [224, 224],
    "focal": 260.0,
    "samples_per_link": 600,
    "splat_radius": 2,
    "workers": 0,
}

TRAIN_DEFAULTS = {
    "steps": 2000,
    "batch_size": 32,
    "learning_rate": 1e-3,
    "warmup_steps": 100,
    "hidden": [160, 160],
    "dropout": 0.1,
    "seed": 0,
}

ESTIMATE_DEFAULTS = {
    "oracle_edm": False,
    "freeze_dropout": False,
    "workers": 0,
}

REFINE_DEFAULTS = {
    "iterations": 3,
    "evals_per_iteration": 250,
    "step_theta": 0.05,
    "step_rot": 0.02,
    "step_scale": 0.02,
    "objective": "iou",
    "samples_per_link": 600,
    "splat_radius": 2,
    "render_seed": 0,
    "workers": 0,
}

EVAL_DEFAULTS = {
    "threshold": 0.1,
}

RENDER_DEFAULTS = {
    "samples_per_link": 600,
    "splat_radius": 2,
    "render_seed": 0,
}


def _merge_options(args, defaults):
    """Overlay defaults < config file < explicit flags onto args, in place."""
    from_file = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise CliError(EXIT_CONFIG, f"config file not found: {args.config}")
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                from_file = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config file {args.config} is not valid JSON: {exc}")
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config keys: {', '.join(unknown)}")
    for key, fallback in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, from_file.get(key, fallback))
    return args


def _resolve_chain(spec):
    if spec in BUILTIN_CHAINS:
        return builtin_chain(spec)
    if not os.path.exists(spec):
        raise CliError(
            EXIT_CONFIG,
            f"chain {spec!r} is neither a built-in ({', '.join(BUILTIN_CHAINS)}) nor a file",
        )
    return load_chain(spec)


def _require_file(path, what):
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"{what} not found: {path}")
    return path


def _require_dataset(path):
    _require_file(path, "dataset directory")
    return read_dataset(path)


def _workers(value):
    count = int(value)
    return count if count >= 1 else (os.cpu_count() or 1)


def _parallel_map(fn, payloads, workers):
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as pool:
        return list(pool.map(fn, payloads))


def _load_estimates(path):
    """estimates.jsonl -> ordered list of (index, Estimate or None, error)."""
    _require_file(path, "estimates file")
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                index = int(obj["index"])
                if "error" in obj:
                    rows.append((index, None, str(obj["error"])))
                else:
                    rows.append((index, Estimate.from_json(obj), None))
            except (ValueError, KeyError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: bad estimate record: {exc}") from exc
    if not rows:
        raise DatasetFormatError(f"{path}: no estimate records")
    return rows


def _write_estimates(path, rows):
    lines = []
    for index, est, error in rows:
        if est is None:
            lines.append(json.dumps({"index": index, "error": error}))
        else:
            lines.append(json.dumps({"index": index, **est.to_json()}))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gen


def _gen_worker(payload):
    chain, cfg, seed, index, meshes, settings = payload
    try:
        scene, mask = build_scene(chain, cfg, seed, index, meshes, settings)
        return index, scene, mask, None
    except SceneGenerationError as exc:
        return index, None, None, str(exc)


def cmd_gen(args):
    _merge_options(args, GEN_DEFAULTS)
    chain = _resolve_chain(args.chain)
    if args.count < 1:
        raise CliError(EXIT_CONFIG, "--count must be at least 1")
    cfg = SamplerConfig(
        distance=tuple(args.distance),
        elevation=tuple(args.elevation),
        azimuth=tuple(args.azimuth),
        image_width=int(args.image_size[0]),
        image_height=int(args.image_size[1]),
        focal=float(args.focal),
        noise_std=float(args.noise_std),
    )
    settings = RenderSettings(
        samples_per_link=int(args.samples_per_link), splat_radius=int(args.splat_radius)
    )
    meshes = default_link_meshes(chain)
    payloads = [
        (chain, cfg, args.seed, index, meshes, settings) for index in range(args.count)
    ]
    results = _parallel_map(_gen_worker, payloads, _workers(args.workers))
    scenes, masks = [], []
    for index, scene, mask, error in sorted(results, key=lambda r: r[0]):
        if error is not None:
            print(f"warning: {error}", file=sys.stderr)
            continue
        scenes.append(scene)
        masks.append(mask)
    if not scenes:
        raise SceneGenerationError("every scene failed to sample")
    write_dataset(args.out, chain, cfg, scenes, masks)
    print(f"wrote {len(scenes)} scenes to {args.out}")


# ---------------------------------------------------------------------------
# train-gim


def cmd_train_gim(args):
    _merge_options(args, TRAIN_DEFAULTS)
    chain, k, _, scenes = _require_dataset(args.data)
    dataset = [
        (
            keypoint_features(scene.keypoints, k.width, k.height),
            edm_from_configuration(chain, scene.theta),
        )
        for scene in scenes
    ]
    input_dim = 2 * (chain.dof + 1)
    output_dim = chain.dof * (2 * chain.dof - 1)
    start_step = 0
    adam_state = None
    if args.resume:
        _require_file(args.resume, "resume checkpoint")
        net, adam_state = load_regressor(args.resume)
        if adam_state is None:
            raise CliError(EXIT_CONFIG, f"{args.resume} has no trainer state to resume from")
        start_step = adam_state.step
        if net.layer_dims[0] != input_dim:
            raise CliError(EXIT_CONFIG, "resumed regressor does not match this dataset's chain")
    else:
        net = init_regressor(
            input_dim,
            output_dim,
            hidden=tuple(int(h) for h in args.hidden),
            dropout_rate=float(args.dropout),
            seed=int(args.seed),
        )
    cfg = TrainConfig(
        steps=int(args.steps),
        batch_size=int(args.batch_size),
        learning_rate=float(args.learning_rate),
        warmup_steps=int(args.warmup_steps),
        seed=int(args.seed),
        start_step=start_step,
    )
    if cfg.start_step >= cfg.steps:
        raise CliError(EXIT_CONFIG, f"checkpoint already at step {start_step}, nothing to do")
    net, trace, adam_state = train_gim(net, dataset, cfg, adam_state)
    save_regressor(net, args.out, trainer_state=adam_state)
    if args.trace:
        rows = "\n".join(f"{step},{loss!r}" for step, loss in trace)
        atomic_write_text(args.trace, "step,loss\n" + rows + "\n")
    print(f"trained {cfg.steps - cfg.start_step} steps, final loss {trace[-1][1]:.6g}, saved {args.out}")


# ---------------------------------------------------------------------------
# estimate


def _estimate_scene(payload):
    chain, k, scene, net, oracle, freeze = payload
    try:
        if oracle:
            d = edm_from_configuration(chain, scene.theta)
            targets = joint_points(chain, scene.theta).stacked()
        else:
            feats = keypoint_features(scene.keypoints, k.width, k.height)
            rng = None if freeze else np.random.default_rng()
            d = mlp_forward(net, feats, dropout_active=not freeze, rng=rng)
            targets = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cloud = points_from_gram(gram_from_edm(d))
            aligned = align_points(cloud, chain, targets)
            theta0 = configuration_from_points(chain, aligned)
        est = initial_estimate(scene.keypoints, theta0, chain, k)
        return scene.index, est, None
    except (
        InsufficientCorrespondencesError,
        ScaleUndefinedError,
        PnpDegenerateError,
        AlignmentDegenerateError,
        ValueError,
    ) as exc:
        return scene.index, None, f"{type(exc).__name__}: {exc}"


def cmd_estimate(args):
    _merge_options(args, ESTIMATE_DEFAULTS)
    chain, k, _, scenes = _require_dataset(args.data)
    net = None
    if not args.oracle_edm:
        if not args.net:
            raise CliError(EXIT_CONFIG, "estimate needs --net unless --oracle-edm is set")
        net, _ = load_regressor(_require_file(args.net, "regressor file"))
        if net.layer_dims[0] != 2 * (chain.dof + 1):
            raise CliError(EXIT_CONFIG, "regressor input width does not match this chain")
        if net.matrix_size != 2 * chain.dof:
            raise CliError(EXIT_CONFIG, "regressor output width does not match this chain")
    payloads = [
        (chain, k, scene, net, bool(args.oracle_edm), bool(args.freeze_dropout))
        for scene in scenes
    ]
    results = _parallel_map(_estimate_scene, payloads, _workers(args.workers))
    rows = sorted(results, key=lambda r: r[0])
    good = sum(1 for _, est, _ in rows if est is not None)
    for index, est, error in rows:
        if est is None:
            print(f"warning: scene {index}: {error}", file=sys.stderr)
    if good == 0:
        raise DatasetFormatError("no scene produced an estimate")
    _write_estimates(args.out, rows)
    print(f"estimated {good}/{len(rows)} scenes, wrote {args.out}")


# ---------------------------------------------------------------------------
# refine


def _scene_truth(scene, k):
    """Ground-truth Estimate for a generated scene; lets traces carry ADD."""
    t = scene.pose.translation
    pix = np.array([k.fx * t[0] / t[2] + k.cx, k.fy * t[1] / t[2] + k.cy])
    return Estimate(scene.theta, scene.pose.rotation, float(t[2]), pix, provenance="truth")


def _refine_worker(payload):
    chain, k, data_dir, scene, est, meshes, cfg, settings = payload
    try:
        observed = load_scene_mask(data_dir, scene)
        truth = _scene_truth(scene, k)
        refined, trace = refine(est, observed, chain, meshes, k, cfg, settings, ground_truth=truth)
        return scene.index, refined, trace, None
    except (ValueError, OSError) as exc:
        return scene.index, None, None, f"{type(exc).__name__}: {exc}"


def cmd_refine(args):
    _merge_options(args, REFINE_DEFAULTS)
    chain, k, _, scenes = _require_dataset(args.data)
    by_index = {scene.index: scene for scene in scenes}
    estimates = _load_estimates(args.estimates)
    cfg = RefinerConfig(
        iterations=int(args.iterations),
        inner_evals_per_iteration=int(args.evals_per_iteration),
        step_theta=float(args.step_theta),
        step_rot=float(args.step_rot),
        step_scale=float(args.step_scale),
        objective=str(args.objective),
    )
    if cfg.objective != "iou":
        raise CliError(EXIT_CONFIG, "only the iou objective is available from the command line")
    settings = RenderSettings(
        samples_per_link=int(args.samples_per_link),
        splat_radius=int(args.splat_radius),
        seed=int(args.render_seed),
    )
    meshes = default_link_meshes(chain)
    payloads = []
    passthrough = []
    for index, est, error in estimates:
        if index not in by_index:
            raise DatasetFormatError(f"estimate references scene {index}, not in the dataset")
        if est is None:
            passthrough.append((index, None, error))
            continue
        payloads.append((chain, k, args.data, by_index[index], est, meshes, cfg, settings))
    if not payloads:
        raise DatasetFormatError("no usable estimates to refine")
    results = _parallel_map(_refine_worker, payloads, _workers(args.workers))
    rows = list(passthrough)
    traces = {}
    for index, refined, trace, error in results:
        if refined is None:
            print(f"warning: scene {index}: {error}", file=sys.stderr)
            rows.append((index, None, error))
        else:
            rows.append((index, refined, None))
            traces[index] = trace
    rows.sort(key=lambda r: r[0])
    if not traces:
        raise DatasetFormatError("refinement failed on every scene")
    _write_estimates(args.out, rows)
    if args.trace_dir:
        os.makedirs(args.trace_dir, exist_ok=True)
        for index, trace in sorted(traces.items()):
            lines = ["iteration,evals,objective,add"]
            lines += [
                f"{r['iteration']},{r['evaluations']},{r['objective']!r},{r['point_error']!r}"
                for r in trace
            ]
            atomic_write_text(
                os.path.join(args.trace_dir, f"trace_{index:05d}.csv"), "\n".join(lines) + "\n"
            )
    print(f"refined {len(traces)}/{len(rows)} scenes, wrote {args.out}")


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    _merge_options(args, EVAL_DEFAULTS)
    chain, k, _, scenes = _require_dataset(args.data)
    by_index = {scene.index: scene for scene in scenes}
    records = []
    for index, est, _error in _load_estimates(args.estimates):
        if index not in by_index:
            raise DatasetFormatError(f"estimate references scene {index}, not in the dataset")
        if est is None:
            continue
        scene = by_index[index]
        records.append(
            EvalRecord(
                scene_index=index,
                add=add_metric(scene.pose, scene.theta, est.pose(k), est.theta, chain),
                mae_deg=mae_config(scene.theta, est.theta),
            )
        )
    if not records:
        raise DatasetFormatError("no scene has a usable estimate to evaluate")
    report = build_report(records, add_threshold=float(args.threshold))
    write_report_json(report, args.out)
    if args.csv:
        write_report_csv(report, args.csv)
    agg = report["aggregate"]
    print(
        f"evaluated {len(records)} scenes: mean ADD {agg['mean_add']:.4f}, "
        f"median ADD {agg['median_add']:.4f}, AUC {agg['auc']:.2f}, MAE {agg['mae_deg']:.2f} deg"
    )


# ---------------------------------------------------------------------------
# render


def cmd_render(args):
    _merge_options(args, RENDER_DEFAULTS)
    chain, k, _, scenes = _require_dataset(args.data)
    by_index = {scene.index: scene for scene in scenes}
    if args.scene not in by_index:
        raise DatasetFormatError(f"scene {args.scene} is not in the dataset")
    scene = by_index[args.scene]
    theta, pose = scene.theta, scene.pose
    if args.estimates:
        match = [est for index, est, _ in _load_estimates(args.estimates) if index == args.scene]
        if not match or match[0] is None:
            raise DatasetFormatError(f"estimates file has no usable entry for scene {args.scene}")
        theta, pose = match[0].theta, match[0].pose(k)
    settings = RenderSettings(
        samples_per_link=int(args.samples_per_link),
        splat_radius=int(args.splat_radius),
        seed=int(args.render_seed),
    )
    meshes = default_link_meshes(chain)
    observed = load_scene_mask(args.data, scene)
    model = render_chain_silhouette(chain, theta, meshes, pose, k, settings)
    overlay = np.zeros((k.height, k.width), dtype=np.uint8)
    overlay[observed] = 128
    overlay[model] = 255
    write_pgm(args.out, overlay)
    if args.skeleton:
        frames = forward_kinematics(chain, theta)
        points = np.vstack(
            [chain.base_frame.translation[None, :], [f.translation for f in frames]]
        )
        cam = pose.apply(points)
        image = np.zeros((k.height, k.width), dtype=np.uint8)
        for a, b in zip(range(len(points) - 1), range(1, len(points))):
            if cam[a, 2] <= 1e-6 or cam[b, 2] <= 1e-6:
                continue
            pa = np.floor(k.project(cam[a]) + 0.5).astype(int)
            pb = np.floor(k.project(cam[b]) + 0.5).astype(int)
            draw_segment(image, pa, pb)
        write_pgm(args.skeleton, image)
    print(f"wrote {args.out}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="armpose",
        description="Estimate robot arm pose and configuration from keypoints and silhouettes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--chain", help="built-in chain name or chain JSON path")
    p.add_argument("--count", type=int, help="number of scenes")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--noise-std", type=float, dest="noise_std", help="keypoint noise in pixels")
    p.add_argument("--distance", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--elevation", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--azimuth", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--image-size", type=int, nargs=2, dest="image_size", metavar=("W", "H"))
    p.add_argument("--focal", type=float)
    p.add_argument("--samples-per-link", type=int, dest="samples_per_link")
    p.add_argument("--splat-radius", type=int, dest="splat_radius")
    p.add_argument("--workers", type=int, help="process count, 0 = all cores")
    p.add_argument("--config", help="JSON file with option defaults")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-gim", help="train the keypoint-to-distance regressor")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output regressor JSON")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--hidden", type=int, nargs=2, metavar=("H1", "H2"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="regressor JSON with trainer state to continue from")
    p.add_argument("--trace", help="write per-step losses to this CSV")
    p.add_argument("--config", help="JSON file with option defaults")
    p.set_defaults(func=cmd_train_gim)

    p = sub.add_parser("estimate", help="geometric initialization for every scene")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output estimates JSONL")
    p.add_argument("--net", help="trained regressor JSON")
    p.add_argument(
        "--oracle-edm",
        action="store_true",
        default=None,
        dest="oracle_edm",
        help="use ground-truth distances and alignment anchors instead of the regressor",
    )
    p.add_argument(
        "--freeze-dropout",
        action="store_true",
        default=None,
        dest="freeze_dropout",
        help="disable inference-time dropout for deterministic output",
    )
    p.add_argument("--workers", type=int, help="process count, 0 = all cores")
    p.add_argument("--config", help="JSON file with option defaults")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("refine", help="silhouette refinement of existing estimates")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--estimates", required=True, help="estimates JSONL to refine")
    p.add_argument("--out", required=True, help="output refined JSONL")
    p.add_argument("--iterations", type=int)
    p.add_argument("--evals-per-iteration", type=int, dest="evals_per_iteration")
    p.add_argument("--step-theta", type=float, dest="step_theta")
    p.add_argument("--step-rot", type=float, dest="step_rot")
    p.add_argument("--step-scale", type=float, dest="step_scale")
    p.add_argument("--objective", choices=["iou"])
    p.add_argument("--samples-per-link", type=int, dest="samples_per_link")
    p.add_argument("--splat-radius", type=int, dest="splat_radius")
    p.add_argument("--render-seed", type=int, dest="render_seed")
    p.add_argument("--trace-dir", dest="trace_dir", help="write per-scene objective traces here")
    p.add_argument("--workers", type=int, help="process count, 0 = all cores")
    p.add_argument("--config", help="JSON file with option defaults")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="score estimates against ground truth")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--estimates", required=True, help="estimates JSONL to score")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--csv", help="also write the per-scene table as CSV")
    p.add_argument("--threshold", type=float, help="ADD threshold for the area-under-curve score")
    p.add_argument("--config", help="JSON file with option defaults")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="overlay and skeleton images for one scene")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--scene", type=int, required=True, help="scene index")
    p.add_argument("--out", required=True, help="output overlay PGM")
    p.add_argument("--skeleton", help="also write a projected-skeleton PGM")
    p.add_argument("--estimates", help="render this estimates file instead of ground truth")
    p.add_argument("--samples-per-link", type=int, dest="samples_per_link")
    p.add_argument("--splat-radius", type=int, dest="splat_radius")
    p.add_argument("--render-seed", type=int, dest="render_seed")
    p.add_argument("--config", help="JSON file with option defaults")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DatasetFormatError, SceneGenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
