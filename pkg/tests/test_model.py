import numpy as np
import pytest

from conftest import central_difference, max_rel_error
from mmstn.errors import InputError
from mmstn.model import (
    MorphableModel,
    basis_symmetry_sign,
    load_model,
    make_synthetic_model,
    mirror_positions,
    model_from_bytes,
    model_to_bytes,
    save_model,
    shape_backward,
    synthesize_shape,
    whiten_basis,
)


def test_zero_coefficients_give_mean(small_model):
    X = synthesize_shape(small_model, np.zeros(small_model.num_modes))
    np.testing.assert_array_equal(X, small_model.mean_shape.reshape(-1, 3).T)


def test_unit_coefficient_adds_first_column(small_model):
    e1 = np.eye(small_model.num_modes)[0]
    X = synthesize_shape(small_model, e1)
    expected = (small_model.mean_shape + small_model.basis[:, 0]).reshape(-1, 3).T
    np.testing.assert_array_equal(X, expected)


def test_vertex_column_matches_stacked_index(small_model, rng):
    alpha = rng.standard_normal(small_model.num_modes)
    x = small_model.basis @ alpha + small_model.mean_shape
    X = synthesize_shape(small_model, alpha)
    j = 37
    np.testing.assert_allclose(X[:, j], x[3 * j : 3 * j + 3], rtol=0, atol=1e-12)


def test_linearity(small_model, rng):
    a, d = rng.standard_normal((2, small_model.num_modes))
    diff = synthesize_shape(small_model, a + d) - synthesize_shape(small_model, a)
    np.testing.assert_allclose(diff, (small_model.basis @ d).reshape(-1, 3).T, atol=1e-12)


def test_affine_combination(small_model, rng):
    a1, a2 = rng.standard_normal((2, small_model.num_modes))
    p, q = 0.7, -1.9
    S = lambda a: synthesize_shape(small_model, a)  # noqa: E731
    lhs = S(p * a1 + q * a2)
    rhs = p * S(a1) + q * S(a2) + (1 - p - q) * S(np.zeros_like(a1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_subset_synthesis_is_bitwise_identical(model, rng):
    alpha = rng.standard_normal(model.num_modes)
    full = synthesize_shape(model, alpha)
    idx = model.landmark_indices
    np.testing.assert_array_equal(synthesize_shape(model, alpha, vertices=idx), full[:, idx])


def test_alpha_length_checked(small_model):
    with pytest.raises(InputError):
        synthesize_shape(small_model, np.zeros(small_model.num_modes + 1))


def test_backward_zero_and_selector(small_model):
    D = small_model.num_modes
    np.testing.assert_array_equal(shape_backward(small_model, np.zeros((3, small_model.num_vertices))), np.zeros(D))
    G = np.zeros((3, small_model.num_vertices))
    i, j, g = 2, 11, 3.5
    G[i, j] = g
    np.testing.assert_allclose(shape_backward(small_model, G), g * small_model.basis[3 * j + i], rtol=1e-15)


def test_backward_shape_checked(small_model):
    with pytest.raises(InputError):
        shape_backward(small_model, np.zeros((2, small_model.num_vertices)))


def test_backward_matches_finite_differences(small_model, rng):
    G = rng.standard_normal((3, small_model.num_vertices))
    alpha = rng.standard_normal(small_model.num_modes)
    num = central_difference(lambda a: float(np.sum(G * synthesize_shape(small_model, a))), alpha)
    assert max_rel_error(shape_backward(small_model, G), num) < 1e-7


def test_adjointness(small_model, rng):
    alpha, delta = rng.standard_normal((2, small_model.num_modes))
    G = rng.standard_normal((3, small_model.num_vertices))
    lhs = np.sum(G * (synthesize_shape(small_model, alpha + delta) - synthesize_shape(small_model, alpha)))
    rhs = shape_backward(small_model, G) @ delta
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_whiten_identity_and_single_column(small_model):
    D = small_model.num_modes
    same = whiten_basis(small_model, np.ones(D))
    np.testing.assert_array_equal(same.basis, small_model.basis)
    std = np.ones(D)
    std[0] = 2.0
    w = whiten_basis(small_model, std)
    np.testing.assert_array_equal(w.basis[:, 0], 2 * small_model.basis[:, 0])
    np.testing.assert_array_equal(w.basis[:, 1:], small_model.basis[:, 1:])


def test_whiten_reproduces_scaled_coefficients(small_model, rng):
    std = rng.uniform(0.2, 3.0, small_model.num_modes)
    alpha = rng.standard_normal(small_model.num_modes)
    w = whiten_basis(small_model, std)
    np.testing.assert_allclose(synthesize_shape(w, alpha), synthesize_shape(small_model, std * alpha), atol=1e-12)


def test_whiten_preserves_span(small_model, rng):
    w = whiten_basis(small_model, rng.uniform(0.5, 2.0, small_model.num_modes))
    r = np.linalg.matrix_rank
    assert r(np.hstack([small_model.basis, w.basis])) == r(small_model.basis) == small_model.num_modes


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_whiten_rejects_non_positive(small_model, bad):
    std = np.ones(small_model.num_modes)
    std[1] = bad
    with pytest.raises(InputError):
        whiten_basis(small_model, std)


def test_synthetic_model_is_deterministic():
    a = make_synthetic_model(seed=5, grid_height=20, grid_width=18, num_modes=6)
    b = make_synthetic_model(seed=5, grid_height=20, grid_width=18, num_modes=6)
    assert model_to_bytes(a) == model_to_bytes(b)


def test_synthetic_model_invariants(model):
    assert model.num_vertices == 64 * 64
    assert np.linalg.matrix_rank(model.basis) == model.num_modes
    sym = model.sym_index
    np.testing.assert_array_equal(sym[sym], np.arange(model.num_vertices))
    rows, cols = np.divmod(np.arange(model.num_vertices), model.grid_width)
    np.testing.assert_array_equal(sym, rows * model.grid_width + (model.grid_width - 1 - cols))
    mean = model.mean_shape.reshape(-1, 3).T
    assert np.abs(mirror_positions(mean, sym) - mean).max() <= 1e-9
    S = np.zeros((model.num_vertices, model.num_landmarks))
    S[model.landmark_indices, np.arange(model.num_landmarks)] = 1
    np.testing.assert_array_equal(S.T @ S, np.eye(model.num_landmarks))


def test_symmetry_signs_are_recorded(model):
    np.testing.assert_array_equal(basis_symmetry_sign(model.basis, model.sym_index), model.symmetry_sign)
    assert set(model.symmetry_sign.tolist()) == {-1, 1}


def test_modes_are_free_of_similarity_motion(model):
    pts = model.mean_shape.reshape(-1, 3)
    n = len(pts)
    gens = [np.tile(e, n) for e in np.eye(3)]
    gens += [np.cross(e, pts).ravel() for e in np.eye(3)]
    gens.append((pts - pts.mean(axis=0)).ravel())
    G = np.stack(gens, axis=1)
    assert np.abs(G.T @ model.basis).max() < 1e-8 * np.abs(G).max() * np.abs(model.basis).max() * n


@pytest.mark.parametrize("kwargs", [{"grid_height": 4}, {"grid_width": 7}, {"num_modes": 0}])
def test_synthetic_model_rejects_degenerate_sizes(kwargs):
    with pytest.raises(InputError):
        make_synthetic_model(**kwargs)


def test_container_round_trip_is_bit_exact(small_model, tmp_path):
    path = tmp_path / "m.mmstn"
    save_model(small_model, path)
    back = load_model(path)
    for name in ("mean_shape", "basis", "uv_coords", "sym_index", "landmark_indices", "symmetry_sign"):
        a, b = getattr(small_model, name), getattr(back, name)
        assert a.tobytes() == b.tobytes(), name
    assert model_to_bytes(back) == path.read_bytes()


def test_container_rejects_corruption(small_model):
    data = model_to_bytes(small_model)
    with pytest.raises(InputError):
        model_from_bytes(b"XX" + data[2:])
    with pytest.raises(InputError):
        model_from_bytes(data[:-8])
    with pytest.raises(InputError):
        model_from_bytes(data + b"\0")


def test_model_validation(small_model):
    bad_sym = small_model.sym_index.copy()
    bad_sym[[0, 1]] = bad_sym[[1, 0]]
    with pytest.raises(InputError):
        MorphableModel(**{**vars(small_model), "sym_index": bad_sym})
    lm = small_model.landmark_indices.copy()
    lm[1] = lm[0]
    with pytest.raises(InputError):
        MorphableModel(**{**vars(small_model), "landmark_indices": lm})
