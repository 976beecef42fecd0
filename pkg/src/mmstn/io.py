"""File formats: images, landmarks, parameter text, OBJ meshes, CSV traces.

All writers go through temp-file-then-rename so a failed command never
leaves a half-written artifact behind.
"""

from __future__ import annotations

import csv
import io
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from mmstn.errors import InputError
from mmstn.losses import LandmarkSet
from mmstn.transform import PoseShapeParams


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class ArtifactWriter:
    """Stage files in a hidden directory and move them into place on commit.

    Used as a context manager; if the block raises, nothing is published.
    """

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self._stage = Path(tempfile.mkdtemp(dir=self.out_dir.parent, prefix=".mmstn-stage-"))
        self._names: list[str] = []
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = self._stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self._names:
            self._names.append(name)
        return p

    def commit(self) -> list[Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name in self._names:
            final = self.out_dir / name
            final.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self._stage / name, final)
            self.written.append(final)
        self.discard()
        return self.written

    def discard(self) -> None:
        shutil.rmtree(self._stage, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.discard()
        return False


# images ---------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read PNG or PPM as an HxWxC float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "1":
                arr = np.asarray(im, dtype=np.float64)
            else:
                if mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _quantize(image, levels):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    return np.round(np.clip(image, 0.0, 1.0) * levels)


def _encode(im: Image.Image, fmt: str) -> bytes:
    buf = io.BytesIO()
    im.save(buf, format=fmt)
    return buf.getvalue()


def encode_png(image, bits: int = 8) -> bytes:
    if bits == 8:
        return _encode(Image.fromarray(_quantize(image, 255).astype(np.uint8)), "PNG")
    if bits == 16:
        q = _quantize(image, 65535)
        if q.ndim != 2:
            raise InputError("16-bit PNG output is grayscale only")
        return _encode(Image.fromarray(q.astype(np.uint16)), "PNG")
    raise InputError(f"unsupported bit depth {bits}")


def write_png(path, image, bits: int = 8) -> None:
    atomic_write_bytes(path, encode_png(image, bits))


def write_mask_png(path, mask) -> None:
    mask = np.asarray(mask).astype(bool)
    atomic_write_bytes(path, _encode(Image.fromarray(mask), "PNG"))


def write_ppm(path, image) -> None:
    q = _quantize(image, 255).astype(np.uint8)
    if q.ndim == 2:
        q = np.repeat(q[:, :, None], 3, axis=2)
    atomic_write_bytes(path, _encode(Image.fromarray(q), "PPM"))


def flat_to_image(values, grid_height: int, grid_width: int) -> np.ndarray:
    """Reshape NxC per-vertex values to an H'xW'xC image."""
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    return values.reshape(grid_height, grid_width, -1)


# landmarks ------------------------------------------------------------


def format_landmarks(landmarks: LandmarkSet) -> str:
    lines = ["# index x y confidence"]
    for i, ((x, y), c) in enumerate(zip(landmarks.points, landmarks.confidences)):
        lines.append(f"{i} {float(x)!r} {float(y)!r} {float(c)!r}")
    return "\n".join(lines) + "\n"


def parse_landmarks(text: str, num_landmarks: int) -> LandmarkSet:
    """Records are ``index x y [confidence]``; absent indices get confidence 0."""
    points = np.zeros((num_landmarks, 2))
    conf = np.zeros(num_landmarks)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise InputError(f"landmark line {lineno}: expected 'index x y [confidence]'")
        try:
            idx = int(fields[0])
            vals = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise InputError(f"landmark line {lineno}: {exc}") from exc
        if not 0 <= idx < num_landmarks:
            raise InputError(f"landmark line {lineno}: index {idx} out of range")
        points[idx] = vals[:2]
        conf[idx] = vals[2] if len(vals) == 3 else 1.0
    if not np.all(np.isfinite(points)):
        raise InputError("landmark coordinates must be finite")
    return LandmarkSet(points, conf)


def read_landmarks(path, num_landmarks: int) -> LandmarkSet:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read landmarks {path}: {exc}") from exc
    return parse_landmarks(text, num_landmarks)


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    atomic_write_text(path, format_landmarks(landmarks))


# pose/shape parameters ------------------------------------------------


def format_params(theta: PoseShapeParams) -> str:
    def join(v):
        return " ".join(repr(float(x)) for x in np.atleast_1d(v))

    return (
        f"r = {join(theta.r)}\n"
        f"t = {join(theta.t)}\n"
        f"log_scale = {theta.log_scale!r}\n"
        f"alpha = {join(theta.alpha)}\n"
    )


def parse_params(text: str) -> PoseShapeParams:
    fields = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"bad parameter line: {line!r}")
        try:
            fields[key.strip()] = np.array([float(v) for v in value.split()])
        except ValueError as exc:
            raise InputError(f"bad parameter value: {line!r}") from exc
    missing = {"r", "t", "log_scale", "alpha"} - set(fields)
    if missing:
        raise InputError(f"parameter file lacks {sorted(missing)}")
    if fields["r"].size != 3 or fields["t"].size != 2 or fields["log_scale"].size != 1:
        raise InputError("parameter file has wrong r/t/log_scale sizes")
    return PoseShapeParams(fields["r"], fields["t"], fields["log_scale"][0], fields["alpha"])


def read_params(path) -> PoseShapeParams:
    try:
        return parse_params(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read parameters {path}: {exc}") from exc


def write_params(path, theta: PoseShapeParams) -> None:
    atomic_write_text(path, format_params(theta))


# CSV ------------------------------------------------------------------


def format_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    atomic_write_text(path, format_csv(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# OBJ meshes -----------------------------------------------------------


def parse_obj(text: str):
    """Return (vertices Mx3, faces Fx3); polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split("#", 1)[0].split()
        if not fields:
            continue
        if fields[0] == "v":
            if len(fields) < 4:
                raise InputError(f"OBJ line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(v) for v in fields[1:4]])
            except ValueError as exc:
                raise InputError(f"OBJ line {lineno}: {exc}") from exc
        elif fields[0] == "f":
            if len(fields) < 4:
                raise InputError(f"OBJ line {lineno}: face needs 3 vertices")
            idx = []
            for tok in fields[1:]:
                try:
                    k = int(tok.split("/")[0])
                except ValueError as exc:
                    raise InputError(f"OBJ line {lineno}: {exc}") from exc
                k = k - 1 if k > 0 else len(verts) + k
                if not 0 <= k < len(verts):
                    raise InputError(f"OBJ line {lineno}: vertex index out of range")
                idx.append(k)
            faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1))
    if not verts or not faces:
        raise InputError("OBJ has no vertices or no faces")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.intp)


def format_obj(vertices, faces) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    return "\n".join(lines) + "\n"


def read_obj(path):
    try:
        return parse_obj(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read mesh {path}: {exc}") from exc


def write_obj(path, vertices, faces) -> None:
    atomic_write_text(path, format_obj(vertices, faces))


def parse_sidecar(text: str):
    """Return (boundary loop, symmetry line) as 0-based index arrays.

    The file holds ``boundary: i j ...`` and ``symmetry: i j ...`` with
    1-based vertex indices.
    """
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep or key.strip() not in ("boundary", "symmetry"):
            raise InputError(f"bad sidecar line: {line!r}")
        try:
            out[key.strip()] = np.array([int(v) - 1 for v in value.split()], dtype=np.intp)
        except ValueError as exc:
            raise InputError(f"bad sidecar indices: {line!r}") from exc
    if "boundary" not in out or "symmetry" not in out:
        raise InputError("sidecar needs both 'boundary:' and 'symmetry:' lines")
    return out["boundary"], out["symmetry"]


def format_sidecar(boundary, symmetry_line) -> str:
    def join(v):
        return " ".join(str(int(i) + 1) for i in v)

    return f"boundary: {join(boundary)}\nsymmetry: {join(symmetry_line)}\n"


def read_sidecar(path):
    try:
        return parse_sidecar(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read sidecar {path}: {exc}") from exc
