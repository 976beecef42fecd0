"""Synthetic scenes and direct gradient-based fitting of pose and shape."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mmstn.errors import InputError, NumericalError
from mmstn.losses import (
    DEFAULT_WEIGHTS,
    LandmarkSet,
    multiview_loss,
    prior_loss,
    reflect_params,
    reflection_signs,
    symmetry_loss,
)
from mmstn.model import MorphableModel, synthesize_shape
from mmstn.raster import render, zbuffer_visibility
from mmstn.sampler import bilinear_backward, bilinear_sample, compute_occlusion, flip_image, vertex_normals
from mmstn.transform import (
    PoseShapeParams,
    axis_angle_backward,
    axis_angle_to_matrix,
    euler_to_matrix,
    exp_scale,
    grid_generate,
    grid_generate_vjp,
    matrix_to_axis_angle,
    posed_shape,
    rotate_points,
)

LOSS_NAMES = ("landmark", "symmetry", "multiview", "prior")
INIT_MODES = ("zeros", "landmarkBox")


@dataclass
class FitConfig:
    max_iterations: int = 3000
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    tolerance: float = 1e-9
    window: int = 200
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    init: str = "landmarkBox"
    pose_warmup: int = 1000  # initial iterations with slowed shape coefficients
    shape_step_ratio: float = 0.1  # shape step multiplier during the warm-up

    def __post_init__(self):
        if not self.step_size > 0:
            raise InputError("step size must be positive")
        if not self.tolerance > 0:
            raise InputError("tolerance must be positive")
        if self.max_iterations < 0 or self.window < 1 or self.pose_warmup < 0:
            raise InputError("max_iterations must be >= 0 and window >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("decay rates must lie in [0, 1)")
        if self.init not in INIT_MODES:
            raise InputError(f"init must be one of {INIT_MODES}")
        unknown = set(self.weights) - set(LOSS_NAMES)
        if unknown:
            raise InputError(f"unknown loss weights {sorted(unknown)}")
        self.weights = {k: float(self.weights.get(k, 0.0)) for k in LOSS_NAMES}
        if any(w < 0 for w in self.weights.values()):
            raise InputError("loss weights must be non-negative")


class Adam:
    """Adaptive-moment steps with bias correction on a list of arrays (in place)."""

    def __init__(self, step_size=1e-2, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.count = 0
        self._m = None
        self._v = None

    def step(self, params, grads, multipliers=None):
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.count += 1
        c1 = 1 - self.beta1**self.count
        c2 = 1 - self.beta2**self.count
        for k, (p, g) in enumerate(zip(params, grads)):
            m, v = self._m[k], self._v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            lr = self.step_size * (1.0 if multipliers is None else multipliers[k])
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


# scenes ---------------------------------------------------------------


@dataclass
class SyntheticScene:
    image: np.ndarray
    true_theta: PoseShapeParams
    landmarks: LandmarkSet
    model: MorphableModel
    texture_seed: int = 0


@dataclass
class SceneDistribution:
    """Ranges for random scene poses; angles in degrees."""

    max_pitch: float = 20.0
    max_yaw: float = 30.0
    max_roll: float = 15.0
    alpha_std: float = 0.5
    scale_range: tuple = (0.85, 1.0)
    shift_fraction: float = 0.05


def normalized_uv(model: MorphableModel) -> np.ndarray:
    """Grid coordinates mapped to [0, 1]^2 (u across columns, v down rows)."""
    uv = model.uv_coords - 1.0
    return uv / np.array([max(model.grid_width - 1, 1), max(model.grid_height - 1, 1)])


def procedural_texture(u, v, seed: int) -> np.ndarray:
    """Smooth RGB pattern on [0,1]^2, mirror-symmetric under u -> 1 - u."""
    rng = np.random.default_rng([seed, 101])
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = u - 0.5
    out = np.broadcast_to(rng.uniform(0.35, 0.65, 3), u.shape + (3,)).copy()
    for _ in range(5):
        du, dv = rng.uniform(0.0, 0.35), rng.uniform(0.15, 0.85)
        sigma = rng.uniform(0.05, 0.12)
        amp = rng.uniform(-0.25, 0.25, 3)
        bump = np.exp(-((d - du) ** 2 + (v - dv) ** 2) / (2 * sigma**2))
        bump = bump + np.exp(-((d + du) ** 2 + (v - dv) ** 2) / (2 * sigma**2))
        out += bump[..., None] * amp
    for _ in range(2):
        p, q = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(-0.08, 0.08, 3)
        out += (np.cos(2 * np.pi * p * d) * np.sin(2 * np.pi * q * v + phase))[..., None] * amp
    return np.clip(out, 0.02, 0.98)


def background_pattern(image_dims, seed: int) -> np.ndarray:
    """Smooth background, mirror-symmetric about the vertical centre line."""
    h, w = image_dims
    rng = np.random.default_rng([seed, 202])
    rows, cols = np.meshgrid(np.arange(1, h + 1), np.arange(1, w + 1), indexing="ij")
    x = cols - (w + 1) / 2
    out = np.empty((h, w, 3))
    for ch in range(3):
        px, py = rng.uniform(12, 40, 2)
        phase = rng.uniform(0, 2 * np.pi)
        out[:, :, ch] = (
            rng.uniform(0.15, 0.3) + 0.1 * np.cos(2 * np.pi * x / px) * np.sin(2 * np.pi * rows / py + phase)
        )
    return out


def check_in_frame(grid, image_dims) -> None:
    h, w = image_dims
    x, y = grid
    if x.min() < 1 or x.max() > w or y.min() < 1 or y.max() > h:
        raise InputError(
            f"shape leaves the {h}x{w} image: x in [{x.min():.2f}, {x.max():.2f}], y in [{y.min():.2f}, {y.max():.2f}]"
        )


def render_synthetic_scene(
    model: MorphableModel,
    theta: PoseShapeParams,
    texture_seed: int,
    image_dims=(128, 128),
    landmark_noise_std: float = 0.0,
) -> SyntheticScene:
    """Render a textured shape over a background; landmarks from the true grid."""
    h, w = image_dims
    if landmark_noise_std < 0:
        raise InputError("landmark noise std must be non-negative")
    grid = grid_generate(model, theta)
    check_in_frame(grid, image_dims)
    posed = posed_shape(model, theta)
    faces = model.faces()
    uv_img, coverage = render(grid, posed[2], faces, normalized_uv(model), (h, w), np.zeros((h, w, 2)))
    texture = procedural_texture(uv_img[..., 0], uv_img[..., 1], texture_seed)
    image = np.where(coverage[..., None], texture, background_pattern(image_dims, texture_seed))

    idx = model.landmark_indices
    points = grid_generate(model, theta, vertices=idx).T.copy()
    if landmark_noise_std > 0:
        rng = np.random.default_rng([texture_seed, 303])
        points += rng.normal(0.0, landmark_noise_std, points.shape)
    visible = zbuffer_visibility(posed, faces)[idx]
    landmarks = LandmarkSet(points, visible.astype(np.float64))
    return SyntheticScene(image, theta.copy(), landmarks, model, texture_seed)


def shaded_rendering(model: MorphableModel, theta: PoseShapeParams, image_dims) -> np.ndarray:
    """Grey-shaded HxW rendering of the posed shape, lit from the viewer."""
    h, w = image_dims
    posed = posed_shape(model, theta)
    normals = rotate_points(axis_angle_to_matrix(theta.r), vertex_normals(synthesize_shape(model, theta.alpha), model.faces()))
    length = np.sqrt(np.sum(normals**2, axis=0))
    shade = np.clip(normals[2] / np.where(length > 0, length, 1.0), 0.0, 1.0)
    out, _ = render(grid_generate(model, theta), posed[2], model.faces(), shade[:, None], (h, w), np.zeros((h, w, 1)))
    return out[:, :, 0]


def sample_scene_params(
    model: MorphableModel, rng: np.random.Generator, image_dims=(128, 128), dist: SceneDistribution | None = None
) -> PoseShapeParams:
    dist = dist or SceneDistribution()
    h, w = image_dims
    pitch, yaw, roll = np.deg2rad([dist.max_pitch, dist.max_yaw, dist.max_roll]) * rng.uniform(-1, 1, 3)
    r = matrix_to_axis_angle(euler_to_matrix(pitch, yaw, roll))
    mean = model.mean_shape.reshape(-1, 3)
    extent = 2 * np.abs(mean[:, :2]).max()
    s = 0.65 * min(h, w) / extent * rng.uniform(*dist.scale_range)
    t = np.array([(w + 1) / 2, (h + 1) / 2]) + dist.shift_fraction * np.array([w, h]) * rng.uniform(-1, 1, 2)
    alpha = dist.alpha_std * rng.standard_normal(model.num_modes)
    return PoseShapeParams(r, t, np.log(s), alpha)


def generate_scenes(
    model: MorphableModel,
    count: int,
    seed: int,
    image_dims=(128, 128),
    landmark_noise_std: float = 0.0,
    dist: SceneDistribution | None = None,
    threads: int = 1,
) -> list[SyntheticScene]:
    """Seeded batch of scenes; scene k depends only on (seed, k)."""

    def one(k):
        theta = sample_scene_params(model, np.random.default_rng([seed, k]), image_dims, dist)
        try:
            return render_synthetic_scene(model, theta, seed * 100003 + k, image_dims, landmark_noise_std)
        except InputError as exc:
            raise InputError(f"scene {k}: {exc}") from exc

    return parallel_map(one, range(count), threads)


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def flip_scene(scene: SyntheticScene) -> SyntheticScene:
    """The horizontally mirrored scene with its reflected ground truth.

    Landmarks are the exact (noiseless) projections under the reflected
    parameters; a mirrored landmark set is not a relabelling of the
    original one when the grid has no centre column.
    """
    model = scene.model
    w = scene.image.shape[1]
    theta = reflect_params(scene.true_theta, w, model.symmetry_sign)
    idx = model.landmark_indices
    points = grid_generate(model, theta, vertices=idx).T.copy()
    visible = zbuffer_visibility(posed_shape(model, theta), model.faces())[idx]
    return SyntheticScene(
        flip_image(scene.image), theta, LandmarkSet(points, visible.astype(np.float64)), model, scene.texture_seed
    )


# fitting --------------------------------------------------------------


def init_from_landmarks(landmarks: LandmarkSet, model: MorphableModel) -> PoseShapeParams:
    """Scale and translation aligning the mean-shape landmarks with the targets."""
    if len(landmarks) != model.num_landmarks:
        raise InputError(f"model has {model.num_landmarks} landmarks, got {len(landmarks)}")
    ok = landmarks.confidences > 0
    if ok.sum() < 2:
        raise InputError("at least two confident landmarks are needed")
    target = landmarks.points[ok]
    ref = model.mean_shape.reshape(-1, 3)[model.landmark_indices[ok], :2]

    def diag(p):
        return float(np.hypot(*(p.max(axis=0) - p.min(axis=0))))

    d_ref, d_target = diag(ref), diag(target)
    if d_ref == 0 or d_target == 0:
        raise InputError("confident landmarks are coincident")
    s = d_target / d_ref
    t = target.mean(axis=0) - s * ref.mean(axis=0)
    return PoseShapeParams(np.zeros(3), t, np.log(s), np.zeros(model.num_modes))


class _LandmarkTerm:
    """Landmark loss and dL/dtheta on the landmark vertices only.

    Performs the same elementwise arithmetic as ``grid_generate`` on a
    vertex subset, so landmarks produced by it are reproduced exactly.
    """

    def __init__(self, model: MorphableModel, landmarks: LandmarkSet):
        if len(landmarks) != model.num_landmarks:
            raise InputError(f"model has {model.num_landmarks} landmarks, got {len(landmarks)}")
        rows = (3 * model.landmark_indices[:, None] + np.arange(3)).ravel()
        self.mu = model.mean_shape[rows]
        self.basis = model.basis[rows]
        self.modes = [self.basis[:, k] for k in range(model.num_modes)]
        self.target = landmarks.points.T
        self.conf = landmarks.confidences

    def __call__(self, vec):
        r, t, log_scale, alpha = vec[0:3], vec[3:5], vec[5], vec[6:]
        x = self.mu.copy()
        for k, col in enumerate(self.modes):
            x += col * alpha[k]
        X = x.reshape(-1, 3).T
        R = axis_angle_to_matrix(r)
        # rows 0 and 1 of rotate_points, same operation order
        Y = np.stack([R[i, 0] * X[0] + R[i, 1] * X[1] + R[i, 2] * X[2] for i in range(2)])
        s = exp_scale(log_scale)
        diff = (s * Y + t[:, None]) - self.target
        value = float(np.sum(self.conf * np.sum(diff**2, axis=0)))

        g = 2.0 * self.conf * diff
        gY = s * g
        grad = np.empty(len(vec))
        grad[3:5] = g.sum(axis=1)
        grad[5] = float(np.sum(g * Y)) * s
        grad_R = np.zeros((3, 3))
        grad_R[:2] = np.sum(gY[:, None, :] * X[None, :, :], axis=2)
        grad_X = R[:2].T @ gY
        grad[0:3] = axis_angle_backward(r, grad_R, R)
        grad[6:] = np.sum(self.basis * grad_X.T.reshape(-1, 1), axis=0)
        return value, grad


class Objective:
    """Weighted total loss over theta for one image, with its gradient."""

    def __init__(self, model: MorphableModel, image, landmarks: LandmarkSet | None, weights: dict):
        self.model = model
        self.weights = {k: float(weights.get(k, 0.0)) for k in LOSS_NAMES}
        self.image = None if image is None else np.asarray(image, dtype=np.float64)
        if self.image is not None and self.image.ndim == 2:
            self.image = self.image[:, :, None]
        self.landmarks = landmarks
        if self.weights["landmark"] > 0 and landmarks is None:
            raise InputError("landmark loss needs landmarks")
        if (self.weights["symmetry"] > 0 or self.weights["multiview"] > 0) and self.image is None:
            raise InputError("image losses need an image")
        self.flipped = None if self.image is None else flip_image(self.image)
        self._landmark = _LandmarkTerm(model, landmarks) if self.weights["landmark"] > 0 else None

    def sampled(self, theta: PoseShapeParams, flipped: bool = False):
        """Grid, backward, sample and mask for theta on the (flipped) image."""
        grid, back = grid_generate_vjp(self.model, theta)
        mask = compute_occlusion(self.model, axis_angle_to_matrix(theta.r), theta.alpha)
        image = self.flipped if flipped else self.image
        return grid, back, bilinear_sample(image, grid), mask

    def __call__(self, theta):
        """Return (total, per-component values, dL/dtheta as a vector).

        ``theta`` is a PoseShapeParams or its vector form.
        """
        model, w = self.model, self.weights
        vec = theta.to_vector() if isinstance(theta, PoseShapeParams) else np.asarray(theta, dtype=np.float64)
        grad = np.zeros(6 + model.num_modes)
        parts = dict.fromkeys(LOSS_NAMES, 0.0)

        if w["landmark"] > 0:
            parts["landmark"], g = self._landmark(vec)
            grad += w["landmark"] * g


        if w["symmetry"] > 0 or w["multiview"] > 0:
            theta = PoseShapeParams.from_vector(vec)
            grid, back, V, M = self.sampled(theta)
            gV = np.zeros_like(V)
            if w["symmetry"] > 0:
                sl = symmetry_loss(V, M, model.sym_index)
                parts["symmetry"] = sl.value
                gV += w["symmetry"] * sl.grads["sampled"]
            if w["multiview"] > 0:
                width = self.image.shape[1]
                theta_b = reflect_params(theta, width, model.symmetry_sign)
                grid_b, back_b, V_b, M_b = self.sampled(theta_b, flipped=True)
                ml = multiview_loss(V, M, V_b, M_b)
                parts["multiview"] = ml.value
                gV += w["multiview"] * ml.grads["sampled_a"]
                g_grid_b = bilinear_backward(self.flipped, grid_b, w["multiview"] * ml.grads["sampled_b"])[1]
                grad += back_b(g_grid_b).to_vector() * reflection_signs(model.symmetry_sign)
            grad += back(bilinear_backward(self.image, grid, gV)[1]).to_vector()

        if w["prior"] > 0:
            pl = prior_loss(vec[6:])
            parts["prior"] = pl.value
            grad[6:] += w["prior"] * pl.grads["alpha"]

        total = sum(w[k] * parts[k] for k in LOSS_NAMES)
        return total, parts, grad


def trace_columns(num_modes: int) -> list[str]:
    names = ["r1", "r2", "r3", "tx", "ty", "log_scale"] + [f"alpha{k}" for k in range(num_modes)]
    return ["iteration", "total", *LOSS_NAMES, *names]


def fit_params(
    image,
    landmarks: LandmarkSet | None,
    model: MorphableModel,
    config: FitConfig | None = None,
    init: PoseShapeParams | None = None,
):
    """Minimise the weighted loss over theta; returns (best theta, trace rows).

    Stops after ``max_iterations`` steps or once the running minimum of the
    loss has fallen by a relative amount below ``tolerance`` over the last
    ``window`` iterations. Trace rows are dicts keyed by ``trace_columns``.
    """
    config = config or FitConfig()
    objective = Objective(model, image, landmarks, config.weights)
    if init is not None:
        theta = init.copy()
    elif config.init == "landmarkBox":
        if landmarks is None:
            raise InputError("landmarkBox initialisation needs landmarks")
        theta = init_from_landmarks(landmarks, model)
    else:
        theta = PoseShapeParams.zeros(model.num_modes)

    vec = theta.to_vector()
    adam = Adam(config.step_size, config.beta1, config.beta2, config.epsilon)
    warm = [np.ones_like(vec)]
    warm[0][6:] = config.shape_step_ratio
    records = []
    best_value, best_vec = np.inf, vec.copy()
    running_best = []
    for it in range(config.max_iterations + 1):
        total, parts, grad = objective(vec)
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise NumericalError(f"non-finite loss or gradient at iteration {it}", iteration=it)
        records.append((total, *(parts[k] for k in LOSS_NAMES), *vec))
        if total < best_value:
            best_value, best_vec = total, vec.copy()
        running_best.append(best_value)
        if it >= config.window:
            before = running_best[it - config.window]
            if before <= 0 or (before - best_value) < config.tolerance * before:
                break
        if it == config.max_iterations:
            break
        adam.step([vec], [grad], warm if it < config.pose_warmup else None)
    columns = trace_columns(model.num_modes)
    trace = [dict(zip(columns, (i, *map(float, rec)))) for i, rec in enumerate(records)]
    return PoseShapeParams.from_vector(best_vec), trace


def landmark_rmse(theta: PoseShapeParams, model: MorphableModel, landmarks: LandmarkSet) -> float:
    """Root-mean-square pixel error over confident landmarks."""
    ok = landmarks.confidences > 0
    pts = grid_generate(model, theta, vertices=model.landmark_indices).T
    d2 = np.sum((pts - landmarks.points) ** 2, axis=1)[ok]
    return float(np.sqrt(d2.mean())) if d2.size else 0.0
