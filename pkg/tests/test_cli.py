import re

import numpy as np
import pytest

from mmstn.cli import average_flat_images, main, run
from mmstn.flatten import planar_square_mesh
from mmstn.io import format_obj, format_sidecar, read_image, read_landmarks, read_params, write_mask_png, write_png
from mmstn.model import load_model
from mmstn.transform import grid_generate


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def nose_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "nose.mmstn"
    assert run(["gen-model", "--nose", "--out", str(path)]).code == 0
    return path


@pytest.fixture(scope="module")
def scenes_dir(tmp_path_factory, nose_file):
    out = tmp_path_factory.mktemp("data") / "scenes"
    assert run(["synth-data", "--model", str(nose_file), "--count", "3", "--seed", "7", "--out", str(out)]).code == 0
    return out


def test_gen_model_defaults(tmp_path):
    result = run(["gen-model", "--out", str(tmp_path / "m.mmstn")])
    assert result.code == 0
    model = load_model(tmp_path / "m.mmstn")
    assert model.num_vertices == 4096 and model.num_modes == 10
    assert "N = 4096" in result.summary


def test_gen_model_large_grid(tmp_path):
    assert run(["gen-model", "--grid-height", "224", "--grid-width", "224", "--out", str(tmp_path / "m")]).code == 0
    assert load_model(tmp_path / "m").num_vertices == 50176


def test_gen_model_rejects_tiny_grid(tmp_path):
    result = run(["gen-model", "--grid-height", "4", "--out", str(tmp_path / "m")])
    assert result.code == 1
    assert not (tmp_path / "m").exists()


def test_gen_model_is_reproducible(tmp_path):
    run(["gen-model", "--seed", "3", "--out", str(tmp_path / "a")])
    run(["gen-model", "--seed", "3", "--threads", "4", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_flatten_bundled_mesh(tmp_path):
    result = run(["flatten", "--grid-height", "32", "--grid-width", "32", "--out", str(tmp_path / "f")])
    assert result.code == 0
    assert "flipped triangles: 0" in result.summary
    assert load_model(tmp_path / "f" / "model.mmstn").num_modes == 4
    assert read_image(tmp_path / "f" / "mean_z.png").shape == (32, 32, 1)


def test_flatten_planar_square(tmp_path):
    mesh = planar_square_mesh(9)
    (tmp_path / "sq.obj").write_text(format_obj(mesh.vertices, mesh.faces))
    (tmp_path / "sq.side").write_text(format_sidecar(mesh.boundary, mesh.symmetry_line))
    result = run(["flatten", "--mesh", str(tmp_path / "sq.obj"), "--sidecar", str(tmp_path / "sq.side"), "--out", str(tmp_path / "f")])
    assert result.code == 0
    assert "uv equals xy within 1e-9" in result.summary


def test_flatten_rejects_non_disk(tmp_path):
    (tmp_path / "two.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 5 0 0\nv 6 0 0\nv 5 1 0\nf 1 2 3\nf 4 5 6\n")
    (tmp_path / "two.side").write_text("boundary: 1 2 3\nsymmetry: 1 2\n")
    result = run(["flatten", "--mesh", str(tmp_path / "two.obj"), "--sidecar", str(tmp_path / "two.side"), "--out", str(tmp_path / "f")])
    assert result.code == 1
    assert not (tmp_path / "f").exists()


def test_gradcheck_command(tmp_path):
    assert run(["gradcheck", "--probes", "0"]).code == 1
    a = run(["gradcheck", "--probes", "2", "--out", str(tmp_path / "a")])
    b = run(["gradcheck", "--probes", "2", "--out", str(tmp_path / "b")])
    assert a.code == 0 and a.summary == b.summary
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert run(["gradcheck", "--probes", "1", "--tolerance", "1e-30"]).code == 2


def test_synth_data_outputs(scenes_dir, nose_file):
    dirs = sorted(p.name for p in scenes_dir.iterdir() if p.is_dir())
    assert dirs == ["scene_0000", "scene_0001", "scene_0002"]
    model = load_model(nose_file)
    theta = read_params(scenes_dir / "scene_0001" / "theta.txt")
    marks = read_landmarks(scenes_dir / "scene_0001" / "landmarks.txt", model.num_landmarks)
    np.testing.assert_array_equal(marks.points, grid_generate(model, theta, vertices=model.landmark_indices).T)


def test_synth_data_reproducible_across_threads(tmp_path, scenes_dir, nose_file):
    out = tmp_path / "again"
    assert run(["synth-data", "--model", str(nose_file), "--count", "3", "--seed", "7", "--threads", "3", "--out", str(out)]).code == 0
    assert tree_bytes(out) == tree_bytes(scenes_dir)


def test_synth_data_out_of_frame(tmp_path, nose_file):
    result = run(["synth-data", "--model", str(nose_file), "--count", "4", "--shift-fraction", "0.6", "--out", str(tmp_path / "s")])
    assert result.code == 1
    assert re.search(r"scene \d+", result.summary)
    assert not (tmp_path / "s").exists()


def fit_args(scenes_dir, nose_file, out, *extra):
    scene = scenes_dir / "scene_0000"
    return [
        "fit", "--image", str(scene / "image.png"), "--landmarks", str(scene / "landmarks.txt"),
        "--model", str(nose_file), "--out", str(out), *extra,
    ]


LANDMARK_FLAGS = ["--symmetry-weight", "0", "--multiview-weight", "0", "--prior-weight", "0", "--step-size", "0.02", "--max-iterations", "5000"]


def test_fit_recovers_scene(tmp_path, scenes_dir, nose_file):
    result = run(fit_args(scenes_dir, nose_file, tmp_path / "a", *LANDMARK_FLAGS))
    assert result.code == 0
    rmse = float(re.search(r"landmark RMSE: ([\d.]+)", result.summary).group(1))
    assert rmse < 0.5
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"theta.txt", "trace.csv", "sampled.png", "mask.png", "output.png", "rendering.png", "panel.png", "trace.png"} <= names


def test_fit_is_idempotent(tmp_path, scenes_dir, nose_file):
    flags = ["--max-iterations", "20"]
    assert run(fit_args(scenes_dir, nose_file, tmp_path / "a", *flags)).code == 0
    assert run(fit_args(scenes_dir, nose_file, tmp_path / "b", *flags)).code == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_fit_prior_dominance(tmp_path, scenes_dir, nose_file):
    result = run(fit_args(scenes_dir, nose_file, tmp_path / "p", "--landmark-weight", "0", "--prior-weight", "1e6",
                          "--symmetry-weight", "0", "--multiview-weight", "0", "--max-iterations", "200"))
    assert result.code == 0
    assert float(re.search(r"\|alpha\|: (\S+)", result.summary).group(1)) < 1e-3


def test_fit_missing_landmarks(tmp_path, scenes_dir, nose_file):
    args = fit_args(scenes_dir, nose_file, tmp_path / "x")
    args[args.index("--landmarks") + 1] = str(tmp_path / "missing.txt")
    assert run(args).code == 1
    assert not (tmp_path / "x").exists()


def test_config_file_and_precedence(tmp_path, scenes_dir, nose_file):
    cfg = tmp_path / "fit.cfg"
    cfg.write_text("max-iterations = 0\nsymmetry_weight = 0\nmultiview-weight = 0\n")
    result = run(fit_args(scenes_dir, nose_file, tmp_path / "c", "--config", str(cfg)))
    assert result.code == 0 and "iterations: 0" in result.summary
    result = run(fit_args(scenes_dir, nose_file, tmp_path / "d", "--config", str(cfg), "--max-iterations", "3"))
    assert "iterations: 3" in result.summary
    cfg.write_text("colour = red\n")
    assert run(fit_args(scenes_dir, nose_file, tmp_path / "e", "--config", str(cfg))).code == 1


def test_average_properties(rng):
    A, B = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    full = np.ones((6, 5))
    out, count = average_flat_images([A], [full])
    np.testing.assert_array_equal(out, A)
    left = np.zeros((6, 5))
    left[:, :2] = 1
    out, count = average_flat_images([A, B], [left, 1 - left])
    np.testing.assert_array_equal(out[:, :2], A[:, :2])
    np.testing.assert_array_equal(out[:, 2:], B[:, 2:])
    out, _ = average_flat_images([A] * 7, [full] * 7)
    np.testing.assert_array_equal(out, A)
    out, count = average_flat_images([A], [np.zeros((6, 5))])
    assert not out.any() and not count.any()


def test_average_command(tmp_path, rng):
    image = np.round(rng.random((8, 8, 3)) * 255) / 255
    write_png(tmp_path / "v.png", image)
    mask = np.ones((8, 8), dtype=bool)
    mask[0, 0] = False
    write_mask_png(tmp_path / "m.png", mask)
    pair = ["--pair", str(tmp_path / "v.png"), str(tmp_path / "m.png")]
    result = run(["average", *pair * 4, "--out", str(tmp_path / "avg")])
    assert result.code == 0 and "1 of 64 pixels never visible" in result.summary
    mean = read_image(tmp_path / "avg" / "mean.png")
    np.testing.assert_array_equal(mean[mask], image[mask])
    assert not mean[0, 0].any()
    write_png(tmp_path / "small.png", image[:4])
    bad = ["average", *pair, "--pair", str(tmp_path / "small.png"), str(tmp_path / "m.png"), "--out", str(tmp_path / "bad")]
    assert run(bad).code == 1


def test_main_exit_codes(capsys, tmp_path):
    assert main(["gen-model", "--modes", "0", "--out", str(tmp_path / "m")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["no-such-command"]) == 1


def test_average_matches_formula(rng):
    images = [rng.random((5, 4, 3)) for _ in range(6)]
    masks = [rng.integers(0, 2, (5, 4)).astype(float) for _ in range(6)]
    out, count = average_flat_images(images, masks)
    total = sum(V * M[:, :, None] for V, M in zip(images, masks))
    np.testing.assert_allclose(out, total / np.maximum(1, sum(masks))[:, :, None], rtol=1e-14, atol=1e-15)
    np.testing.assert_array_equal(count, sum(masks))
