"""A small fully-connected localiser trained end to end through the stack.

Image -> 32x32 grayscale -> MLP -> theta -> grid generator -> sampler ->
losses. Gradients with respect to theta come from ``fit.Objective`` and are
pushed through the network by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mmstn.errors import InputError, NumericalError
from mmstn.fit import Adam, FitConfig, Objective, SyntheticScene, init_from_landmarks, landmark_rmse
from mmstn.transform import PoseShapeParams

INPUT_SIZE = 32
HIDDEN = (256, 64)


def downsample_gray(image, size: int = INPUT_SIZE) -> np.ndarray:
    """Channel mean, then block averaging to size x size (dims must divide)."""
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=2) if image.ndim == 3 else image
    h, w = gray.shape
    if h % size or w % size:
        raise InputError(f"image dims {h}x{w} are not multiples of {size}")
    return gray.reshape(size, h // size, size, w // size).mean(axis=(1, 3))


@dataclass
class LocaliserParams:
    weights: list  # [W1, W2, W3], each (out, in)
    biases: list
    offset: np.ndarray  # theta at zero network output
    output_scale: np.ndarray
    input_mean: np.ndarray
    input_std: np.ndarray

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> LocaliserParams:
        return LocaliserParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.offset.copy(),
            self.output_scale.copy(),
            self.input_mean.copy(),
            self.input_std.copy(),
        )

    def features(self, image) -> np.ndarray:
        return (downsample_gray(image).ravel() - self.input_mean) / self.input_std


@dataclass
class LocaliserConfig:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 2000
    batch_size: int = 8
    layer_lr: tuple = (1.0, 1.0, 1.0)  # per-layer step multipliers
    output_gain: float = 1e-2
    translation_scale: float = 32.0
    divergence_factor: float = 1e3
    weights: dict = field(default_factory=lambda: {"landmark": 1.0, "symmetry": 0.01, "multiview": 0.0, "prior": 0.01})

    def __post_init__(self):
        if self.step_size < 0:
            raise InputError("step size must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise InputError("steps must be >= 0 and batch size >= 1")
        if len(self.layer_lr) != 3:
            raise InputError("need one step multiplier per layer")
        FitConfig(weights=self.weights)  # validates the loss weights


def init_localiser(
    num_modes: int, offset: PoseShapeParams, seed: int, config: LocaliserConfig, inputs=None
) -> LocaliserParams:
    """Random network; ``inputs`` (K x 1024 raw pixels) sets the input standardisation."""
    rng = np.random.default_rng(seed)
    sizes = [INPUT_SIZE * INPUT_SIZE, *HIDDEN, 6 + num_modes]
    weights, biases = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / n_in)
        if k == len(sizes) - 2:
            std = config.output_gain / np.sqrt(n_in)
        weights.append(rng.normal(0.0, std, (n_out, n_in)))
        biases.append(np.zeros(n_out))
    scale = np.ones(6 + num_modes)
    scale[3:5] = config.translation_scale
    scale[5] = 0.1
    if inputs is None:
        mean, std = np.full(sizes[0], 0.5), np.full(sizes[0], 0.25)
    else:
        inputs = np.asarray(inputs, dtype=np.float64)
        mean, std = inputs.mean(axis=0), inputs.std(axis=0) + 1e-3
    return LocaliserParams(weights, biases, offset.to_vector(), scale, mean, std)


def forward(params: LocaliserParams, x):
    """Return (theta vector, cache) for one flattened input."""
    acts = [x]
    h = x
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = W @ h + b
        h = np.maximum(z, 0.0) if k < len(params.weights) - 1 else z
        acts.append(h)
    return params.offset + params.output_scale * h, acts


def backward(params: LocaliserParams, acts, grad_theta):
    """Gradients of the loss for every weight and bias, given dL/dtheta."""
    g = grad_theta * params.output_scale
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        gw[k] = np.outer(g, acts[k])
        gb[k] = g.copy()
        if k > 0:
            g = (params.weights[k].T @ g) * (acts[k] > 0)
    return gw, gb


def predict(params: LocaliserParams, image) -> PoseShapeParams:
    return PoseShapeParams.from_vector(forward(params, params.features(image))[0])


def scene_loss(params: LocaliserParams, scene: SyntheticScene, weights: dict):
    """Loss of one scene at the localiser's prediction and its weight gradients."""
    theta, acts = forward(params, params.features(scene.image))
    total, parts, grad = Objective(scene.model, scene.image, scene.landmarks, weights)(theta)
    gw, gb = backward(params, acts, grad)
    return total, parts, gw, gb


def train_toy_localiser(
    scenes: list[SyntheticScene], config: LocaliserConfig | None = None, seed: int = 0, min_scenes: int = 10
):
    """Train on ``scenes``; returns (params, history of per-step mean losses).

    Minibatches cycle through the scenes in a seeded order; per-scene
    gradients are summed in a fixed order, so results do not depend on
    thread counts.
    """
    config = config or LocaliserConfig()
    if len(scenes) < min_scenes:
        raise InputError(f"need at least {min_scenes} scenes, got {len(scenes)}")
    model = scenes[0].model
    inits = [init_from_landmarks(s.landmarks, model).to_vector() for s in scenes]
    offset = PoseShapeParams.from_vector(np.mean(inits, axis=0))
    raw = [downsample_gray(s.image).ravel() for s in scenes]
    params = init_localiser(model.num_modes, offset, seed, config, raw)
    objectives = [Objective(model, s.image, s.landmarks, config.weights) for s in scenes]
    inputs = [(x - params.input_mean) / params.input_std for x in raw]

    adam = Adam(config.step_size, config.beta1, config.beta2, config.epsilon)
    n_layers = len(params.weights)
    multipliers = [np.full(p.shape, config.layer_lr[k % n_layers]) for k, p in enumerate(params.arrays())]
    rng = np.random.default_rng([seed, 1])
    order = np.array([], dtype=np.intp)
    history = []
    initial = None
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(scenes))])
        batch, order = order[: config.batch_size], order[config.batch_size :]
        gw = [np.zeros_like(w) for w in params.weights]
        gb = [np.zeros_like(b) for b in params.biases]
        total = 0.0
        for i in batch:
            theta, acts = forward(params, inputs[i])
            value, _, grad = objectives[i](theta)
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise NumericalError(f"non-finite loss at step {step} (scene {i})", iteration=step)
            sw, sb = backward(params, acts, grad)
            for k in range(n_layers):
                gw[k] += sw[k]
                gb[k] += sb[k]
            total += value
        m = len(batch)
        total /= m
        history.append(total)
        if initial is None:
            initial = max(total, np.finfo(float).tiny)
        elif total > config.divergence_factor * initial:
            raise NumericalError(
                f"training diverged at step {step}: loss {total:.4g} vs initial {initial:.4g}", iteration=step
            )
        adam.step(params.arrays(), [g / m for g in (*gw, *gb)], multipliers)
    return params, history


def localiser_landmark_error(params: LocaliserParams, scene: SyntheticScene) -> float:
    return landmark_rmse(predict(params, scene.image), scene.model, scene.landmarks)
