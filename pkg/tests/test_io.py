import numpy as np
import pytest

from mmstn.errors import InputError
from mmstn.io import (
    ArtifactWriter,
    atomic_write_text,
    encode_png,
    format_csv,
    format_obj,
    format_params,
    format_sidecar,
    parse_landmarks,
    parse_obj,
    parse_params,
    parse_sidecar,
    read_csv,
    read_image,
    read_landmarks,
    write_csv,
    write_landmarks,
    write_mask_png,
    write_png,
    write_ppm,
)
from mmstn.losses import LandmarkSet
from mmstn.transform import PoseShapeParams


def test_png_round_trip_8bit(tmp_path, rng):
    image = np.round(rng.random((5, 7, 3)) * 255) / 255
    write_png(tmp_path / "a.png", image)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), image)


def test_png_round_trip_16bit(tmp_path, rng):
    image = np.round(rng.random((6, 4)) * 65535) / 65535
    write_png(tmp_path / "a.png", image, bits=16)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png")[:, :, 0], image)
    with pytest.raises(InputError):
        encode_png(rng.random((3, 3, 3)), bits=16)


def test_ppm_and_mask(tmp_path):
    image = np.zeros((2, 3, 3))
    image[0, 1] = [1.0, 0.0, 1.0]
    write_ppm(tmp_path / "a.ppm", image)
    np.testing.assert_array_equal(read_image(tmp_path / "a.ppm"), image)
    write_mask_png(tmp_path / "m.png", [[1, 0], [0, 1]])
    np.testing.assert_array_equal(read_image(tmp_path / "m.png")[:, :, 0], [[1, 0], [0, 1]])


def test_png_clips_and_is_deterministic(rng):
    image = rng.normal(0.5, 1.0, (8, 8, 3))
    assert encode_png(image) == encode_png(image.copy())


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_text("not an image")
    with pytest.raises(InputError):
        read_image(tmp_path / "x.png")


def test_landmarks_round_trip_and_missing(tmp_path):
    marks = LandmarkSet([[1.25, 2.5], [3.0, 4.0], [0.1, 0.2]], [1.0, 0.0, 0.5])
    write_landmarks(tmp_path / "l.txt", marks)
    back = read_landmarks(tmp_path / "l.txt", 3)
    np.testing.assert_array_equal(back.points, marks.points)
    np.testing.assert_array_equal(back.confidences, marks.confidences)
    partial = parse_landmarks("2 5 6\n", 4)
    np.testing.assert_array_equal(partial.confidences, [0, 0, 1, 0])


@pytest.mark.parametrize("text", ["0 1\n", "7 1 2\n", "0 a 2\n", "0 nan 2\n", "0 1 2 -1\n"])
def test_landmark_parse_errors(text):
    with pytest.raises(InputError):
        parse_landmarks(text, 3)


def test_params_round_trip_exact(rng):
    theta = PoseShapeParams(rng.standard_normal(3), rng.standard_normal(2) * 50, 0.1 + 1e-17, rng.standard_normal(10))
    back = parse_params(format_params(theta))
    np.testing.assert_array_equal(back.to_vector(), theta.to_vector())
    with pytest.raises(InputError):
        parse_params("r = 1 2\nt = 1 2\nlog_scale = 0\nalpha =\n")
    with pytest.raises(InputError):
        parse_params("r = 1 2 3\n")


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": 1e-20}]
    write_csv(tmp_path / "x.csv", rows)
    back = read_csv(tmp_path / "x.csv")
    assert [float(r["b"]) for r in back] == [0.1, 1e-20]
    assert format_csv(rows, ["b"]).splitlines()[0] == "b"


def test_obj_and_sidecar_round_trip():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0.5], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    v, f = parse_obj(format_obj(verts, faces))
    np.testing.assert_array_equal(v, verts)
    np.testing.assert_array_equal(f, faces)
    _, quad = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    np.testing.assert_array_equal(quad, faces)
    b, s = parse_sidecar(format_sidecar([0, 1, 2, 3], [0, 3]))
    np.testing.assert_array_equal(b, [0, 1, 2, 3])
    np.testing.assert_array_equal(s, [0, 3])


@pytest.mark.parametrize("text", ["v 0 0\nf 1 2 3\n", "v 0 0 0\nf 1 2 5\n", "# empty\n"])
def test_obj_errors(text):
    with pytest.raises(InputError):
        parse_obj(text)


def test_sidecar_errors():
    with pytest.raises(InputError):
        parse_sidecar("boundary: 1 2 3\n")
    with pytest.raises(InputError):
        parse_sidecar("edges: 1 2\nboundary: 1\nsymmetry: 1 2\n")


def test_artifact_writer_commits_or_discards(tmp_path):
    out = tmp_path / "out"
    with ArtifactWriter(out) as w:
        atomic_write_text(w.path("a.txt"), "x")
        w.commit()
    assert (out / "a.txt").read_text() == "x"
    with pytest.raises(RuntimeError):
        with ArtifactWriter(tmp_path / "never") as w:
            atomic_write_text(w.path("b.txt"), "y")
            raise RuntimeError("boom")
    assert not (tmp_path / "never").exists()
    assert not list(tmp_path.glob(".mmstn-stage-*"))
