"""``mmstn`` command-line tool.

Exit codes: 0 success, 1 rejected input, 2 numerical or solver failure.
Every command stages its files and publishes them only on success.
Options may also come from ``--config FILE`` (``key = value`` lines named
after the long options); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from mmstn import io, report
from mmstn.errors import InputError, NumericalError, SolverError
from mmstn.fit import (
    FitConfig,
    Objective,
    SceneDistribution,
    fit_params,
    generate_scenes,
    landmark_rmse,
    shaded_rendering,
    trace_columns,
)
from mmstn.flatten import TriangleMesh, flatten_mesh, planar_deviation
from mmstn.gradcheck import DEFAULT_TOLERANCE, grad_check_all
from mmstn.model import load_model, make_synthetic_model, model_to_bytes
from mmstn.sampler import mask_sample


@dataclass
class CommandResult:
    code: int
    summary: str
    paths: list = field(default_factory=list)


def bundled(name: str) -> Path:
    """Path of a file shipped in the package data directory."""
    return Path(str(resources.files("mmstn") / "data" / name))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"config line {lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _config_defaults(sub: argparse.ArgumentParser, values: dict) -> dict:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise InputError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise InputError(f"config key {key!r} needs a boolean")
            defaults[key] = raw.lower() in ("true", "1", "yes")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [raw.split()] if action.nargs == 2 else raw.split()
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise InputError(f"config key {key!r}: {exc}") from exc
    return defaults


# commands -------------------------------------------------------------


def cmd_gen_model(args) -> CommandResult:
    model = make_synthetic_model(args.seed, args.grid_height, args.grid_width, args.modes, nose=args.nose)
    out = Path(args.out)
    io.atomic_write_bytes(out, model_to_bytes(model))
    kind = "nose" if args.nose else "convex"
    summary = (
        f"{kind} model: N = {model.num_vertices} vertices ({model.grid_height}x{model.grid_width}), "
        f"D = {model.num_modes} modes, L = {model.num_landmarks} landmarks -> {out}"
    )
    return CommandResult(0, summary, [out])


def cmd_flatten(args) -> CommandResult:
    vertices, faces = io.read_obj(args.mesh)
    boundary, line = io.read_sidecar(args.sidecar)
    mesh = TriangleMesh(vertices, faces, boundary, line)
    fields = [vertices]
    modes = args.mode
    if modes is None and Path(args.mesh) == bundled("half_face.obj"):
        modes = [str(bundled(f"half_face_mode{k}.obj")) for k in range(1, 5)]
    for path in modes or []:
        mode_vertices, mode_faces = io.read_obj(path)
        if mode_vertices.shape != vertices.shape or not np.array_equal(mode_faces, faces):
            raise InputError(f"mode mesh {path} does not share the base mesh topology")
        fields.append(mode_vertices)
    model, rep, (full, emb, image) = flatten_mesh(mesh, fields, args.grid_height, args.grid_width, args.weights)
    lines = [
        f"embedded {rep['vertices']} vertices, {rep['faces']} faces ({args.weights} weights)",
        f"flipped triangles: {rep['flipped_full']}",
    ]
    if np.ptp(vertices[:, 2]) == 0:
        dev = planar_deviation(full, emb)
        verdict = "uv equals xy" if dev <= 1e-9 else "uv differs from xy"
        lines.append(f"planar mesh: max |uv - xy| = {dev:.3e} ({verdict} within 1e-9)")
    with io.ArtifactWriter(args.out) as w:
        io.atomic_write_bytes(w.path("model.mmstn"), model_to_bytes(model))
        mean = image.grid[0]
        for c, name in enumerate("xyz"):
            ch = mean[..., c]
            span = np.ptp(ch)
            io.write_png(w.path(f"mean_{name}.png"), (ch - ch.min()) / span if span > 0 else np.zeros_like(ch), bits=16)
        io.write_csv(
            w.path("embedding.csv"),
            [{"vertex": i, "u": float(u), "v": float(v)} for i, (u, v) in enumerate(emb.uv)],
            ["vertex", "u", "v"],
        )
        paths = w.commit()
    lines.append(f"model: N = {model.num_vertices}, D = {model.num_modes} -> {Path(args.out) / 'model.mmstn'}")
    return CommandResult(0, "\n".join(lines), paths)


def cmd_gradcheck(args) -> CommandResult:
    if args.probes < 1:
        raise InputError("probes must be at least 1")
    rep = grad_check_all(args.seed, args.probes, args.tolerance)
    paths = []
    if args.out:
        with io.ArtifactWriter(args.out) as w:
            io.write_csv(w.path("gradcheck.csv"), rep.rows(), ["op", "probes", "max_rel_error", "ok"])
            io.atomic_write_text(w.path("exclusions.txt"), "".join(e + "\n" for e in rep.exclusions))
            report.gradcheck_chart(w.path("gradcheck.png"), rep.rows(), rep.tolerance)
            paths = w.commit()
    return CommandResult(0 if rep.passed else 2, rep.table(), paths)


def _fit_config(args) -> FitConfig:
    return FitConfig(
        max_iterations=args.max_iterations,
        step_size=args.step_size,
        beta1=args.beta1,
        beta2=args.beta2,
        tolerance=args.tolerance,
        window=args.window,
        init=args.init,
        pose_warmup=args.pose_warmup,
        weights={
            "landmark": args.landmark_weight,
            "symmetry": args.symmetry_weight,
            "multiview": args.multiview_weight,
            "prior": args.prior_weight,
        },
    )


def cmd_fit(args) -> CommandResult:
    for name in ("image", "landmarks", "model", "out"):
        if getattr(args, name) is None:
            raise InputError(f"--{name} is required")
    config = _fit_config(args)
    model = load_model(args.model)
    image = io.read_image(args.image)
    landmarks = io.read_landmarks(args.landmarks, model.num_landmarks)
    theta, trace = fit_params(image, landmarks, model, config)

    objective = Objective(model, image, landmarks, config.weights)
    grid, _, sampled, mask = objective.sampled(theta)
    output = mask_sample(sampled, mask)
    hh, ww = model.grid_height, model.grid_width
    rmse = landmark_rmse(theta, model, landmarks)
    final = trace[-1]
    best = min(row["total"] for row in trace)
    with io.ArtifactWriter(args.out) as w:
        io.write_params(w.path("theta.txt"), theta)
        io.write_csv(w.path("trace.csv"), trace, trace_columns(model.num_modes))
        io.write_png(w.path("sampled.png"), io.flat_to_image(sampled, hh, ww))
        io.write_mask_png(w.path("mask.png"), mask.reshape(hh, ww))
        io.write_png(w.path("output.png"), io.flat_to_image(output, hh, ww))
        rendering = shaded_rendering(model, theta, image.shape[:2])
        io.write_png(w.path("rendering.png"), rendering)
        predicted = grid[:, model.landmark_indices].T
        report.fit_panel(
            w.path("panel.png"),
            image,
            rendering,
            io.flat_to_image(sampled, hh, ww),
            mask.reshape(hh, ww).astype(float),
            io.flat_to_image(output, hh, ww),
            landmarks.points[landmarks.confidences > 0],
            predicted[landmarks.confidences > 0],
        )
        report.trace_plot(w.path("trace.png"), trace)
        paths = w.commit()
    summary = (
        f"iterations: {int(final['iteration'])}  best loss: {best:.6g}\n"
        f"landmark RMSE: {rmse:.4f} px\n"
        f"|alpha|: {float(np.linalg.norm(theta.alpha)):.4g}"
    )
    return CommandResult(0, summary, paths)


def average_flat_images(images, masks):
    """Mask-weighted mean sum_k M_k V_k / max(1, sum_k M_k) and the visibility count.

    Accumulated as a running mean, so repeated or disjointly masked inputs
    come back bit for bit.
    """
    if not images or len(images) != len(masks):
        raise InputError("need at least one image and one mask per image")
    shape = images[0].shape
    mean = np.zeros(shape)
    count = np.zeros(shape[:2])
    for V, M in zip(images, masks):
        if V.shape != shape or M.shape != shape[:2]:
            raise InputError(f"image/mask dims {V.shape}/{M.shape} differ from {shape}")
        count += M
        weight = np.divide(M, count, out=np.zeros_like(count), where=count > 0)
        mean += weight[:, :, None] * (V - mean)
    return mean, count


def cmd_average(args) -> CommandResult:
    if not args.pair:
        raise InputError("give at least one --pair IMAGE MASK")
    images, masks = [], []
    for image_path, mask_path in args.pair:
        images.append(io.read_image(image_path))
        m = io.read_image(mask_path)
        masks.append((m.mean(axis=2) > 0.5).astype(np.float64))
    mean, count = average_flat_images(images, masks)
    with io.ArtifactWriter(args.out) as w:
        io.write_png(w.path("mean.png"), mean)
        io.write_mask_png(w.path("coverage.png"), count > 0)
        report.coverage_map(w.path("coverage_map.png"), count, mean)
        paths = w.commit()
    unseen = int(np.sum(count == 0))
    summary = f"averaged {len(images)} images; {unseen} of {count.size} pixels never visible (black, flagged in coverage.png)"
    return CommandResult(0, summary, paths)


def cmd_synth_data(args) -> CommandResult:
    if args.model is None or args.out is None:
        raise InputError("--model and --out are required")
    if args.count < 1:
        raise InputError("count must be at least 1")
    model = load_model(args.model)
    dist = SceneDistribution(
        max_pitch=args.max_pitch,
        max_yaw=args.max_yaw,
        max_roll=args.max_roll,
        alpha_std=args.alpha_std,
        shift_fraction=args.shift_fraction,
    )
    dims = (args.image_height, args.image_width)
    scenes = generate_scenes(model, args.count, args.seed, dims, args.noise, dist, args.threads)
    rows = []
    with io.ArtifactWriter(args.out) as w:
        for k, scene in enumerate(scenes):
            d = f"scene_{k:04d}"
            io.write_png(w.path(f"{d}/image.png"), scene.image)
            io.write_landmarks(w.path(f"{d}/landmarks.txt"), scene.landmarks)
            io.write_params(w.path(f"{d}/theta.txt"), scene.true_theta)
            vec = scene.true_theta.to_vector()
            rows.append({"scene": d, "texture_seed": scene.texture_seed, **dict(zip(trace_columns(model.num_modes)[6:], map(float, vec)))})
        io.write_csv(w.path("scenes.csv"), rows)
        paths = w.commit()
    return CommandResult(0, f"wrote {len(scenes)} scenes ({dims[0]}x{dims[1]}, noise {args.noise} px) to {args.out}", paths)


# parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; command-line flags take precedence")
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")

    parser = _Parser(prog="mmstn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", parents=[common], help="write a synthetic morphable model")
    p.add_argument("--grid-height", type=int, default=64)
    p.add_argument("--grid-width", type=int, default=64)
    p.add_argument("--modes", type=int, default=10)
    p.add_argument("--nose", action="store_true", help="add the non-convex nose bump")
    p.add_argument("--out", default="model.mmstn")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("flatten", parents=[common], help="flatten a mesh into a geometry-image model")
    p.add_argument("--mesh", default=str(bundled("half_face.obj")))
    p.add_argument("--sidecar", default=str(bundled("half_face.sidecar")))
    p.add_argument("--mode", action="append", help="OBJ of one mode's displacement field (repeatable); the bundled mesh brings its own")
    p.add_argument("--weights", choices=["uniform", "cotangentClamped"], default="uniform")
    p.add_argument("--grid-height", type=int, default=64)
    p.add_argument("--grid-width", type=int, default=64)
    p.add_argument("--out", default="flattened")
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--out", help="directory for the CSV table and chart")
    p.set_defaults(func=cmd_gradcheck)

    d = FitConfig()
    p = sub.add_parser("fit", parents=[common], help="fit pose and shape to one image")
    p.add_argument("--image")
    p.add_argument("--landmarks")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--max-iterations", type=int, default=d.max_iterations)
    p.add_argument("--step-size", type=float, default=d.step_size)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--tolerance", type=float, default=d.tolerance)
    p.add_argument("--window", type=int, default=d.window)
    p.add_argument("--pose-warmup", type=int, default=d.pose_warmup)
    p.add_argument("--init", choices=["zeros", "landmarkBox"], default=d.init)
    for name, value in d.weights.items():
        p.add_argument(f"--{name}-weight", type=float, default=value)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("average", parents=[common], help="mask-weighted mean of flattened images")
    p.add_argument("--pair", nargs=2, action="append", metavar=("IMAGE", "MASK"))
    p.add_argument("--out", default="average")
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("synth-data", parents=[common], help="render seeded synthetic scenes")
    dist = SceneDistribution()
    p.add_argument("--model")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.0, help="landmark noise std in pixels")
    p.add_argument("--image-height", type=int, default=128)
    p.add_argument("--image-width", type=int, default=128)
    p.add_argument("--max-pitch", type=float, default=dist.max_pitch)
    p.add_argument("--max-yaw", type=float, default=dist.max_yaw)
    p.add_argument("--max-roll", type=float, default=dist.max_roll)
    p.add_argument("--alpha-std", type=float, default=dist.alpha_std)
    p.add_argument("--shift-fraction", type=float, default=dist.shift_fraction)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_data)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_config_defaults(sub, read_config(args.config)))
        args = parser.parse_args(argv)
    return args


def run(argv=None) -> CommandResult:
    """Parse and execute; exceptions become exit codes."""
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        if args.threads < 1:
            raise InputError("threads must be at least 1")
        return args.func(args)
    except (InputError, OSError) as exc:
        return CommandResult(1, f"error: {exc}")
    except (NumericalError, SolverError) as exc:
        return CommandResult(2, f"numerical failure: {exc}")


def main(argv=None) -> int:
    result = run(argv)
    stream = sys.stdout if result.code == 0 else sys.stderr
    print(result.summary, file=stream)
    return result.code


if __name__ == "__main__":
    sys.exit(main())
