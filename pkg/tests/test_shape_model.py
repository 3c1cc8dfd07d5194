import numpy as np
import pytest

from aamtl.exceptions import DegenerateInputError
from aamtl.geometry import (SimilarityTransform, as_points, global_similarity_basis,
                            procrustes_align, rotate90, similarity_tangent)
from aamtl.numeric import orthonormalize, span_distance
from aamtl.shape_model import params_to_shape, shape_to_params, train_shape_model


def random_similarity(rng):
    return SimilarityTransform(float(rng.uniform(0.5, 2)), float(rng.uniform(-3, 3)),
                               tuple(rng.uniform(-30, 30, 2)))


def exact_directions(rng, base, k=2):
    """Directions whose span stays closed under Procrustes alignment.

    Each is orthogonal to the similarity tangent at ``base`` and to the 90
    degree rotations of the others, so alignment recovers ``base + D c`` up
    to scale exactly and the aligned set has rank ``k`` after removing pose.
    """
    cols = list(similarity_tangent(base).T)
    out = []
    for _ in range(k):
        Q = orthonormalize(np.column_stack(cols))
        d = rng.standard_normal(base.size)
        d -= Q @ (Q.T @ d)
        d /= np.linalg.norm(d)
        out.append(d)
        cols += [d, rotate90(d)]
    return np.column_stack(out)


def two_factor_set(rng, sds=(1.0, 1.0), n=10, v=12):
    base = rng.standard_normal(2 * v) * 10
    D = exact_directions(rng, base) * 3
    shapes = []
    for _ in range(n):
        c = rng.standard_normal(2) * np.asarray(sds)
        shapes.append(random_similarity(rng).apply(base + D @ c))
    return shapes


def test_similarity_family_has_no_local_components(rng):
    base = rng.standard_normal(16)
    shapes = [random_similarity(rng).apply(base) for _ in range(20)]
    m = train_shape_model(shapes, 1.0)
    assert m.n_local == 0
    al = procrustes_align(shapes)
    for s in al.shapes.T:
        assert np.abs(m.to_shape(m.to_params(s)) - s).max() <= 1e-6
    # image-frame shapes reconstruct too: the global columns absorb pose
    for s in shapes:
        assert np.abs(m.to_shape(m.to_params(s)) - s).max() <= 1e-6


def test_two_factor_rank(rng):
    shapes = two_factor_set(rng)
    m = train_shape_model(shapes, 1.0)
    assert m.n_local == 2
    np.testing.assert_allclose(m.basis.T @ m.basis, np.eye(6), atol=1e-10)
    for s in procrustes_align(shapes).shapes.T:
        assert np.abs(params_to_shape(m, shape_to_params(m, s)) - s).max() <= 1e-6


def test_variance_fraction_keeps_dominant_factor(rng):
    m = train_shape_model(two_factor_set(rng, sds=(np.sqrt(10), 1.0), n=40), 0.5)
    assert m.n_local == 1


def test_model_invariants(rng):
    m = train_shape_model(two_factor_set(rng, n=12), 1.0)
    assert span_distance(m.global_basis, global_similarity_basis(m.mean)) < 1e-10
    assert np.all(np.diff(m.eigenvalues) <= 0)
    assert np.all(m.eigenvalues > 0)
    np.testing.assert_allclose(m.global_basis.T @ m.local_basis, 0, atol=1e-10)


def test_needs_two_shapes(rng):
    with pytest.raises(DegenerateInputError):
        train_shape_model([rng.standard_normal(10)])


def test_similarity_gauge_first_order(rng):
    m = train_shape_model(two_factor_set(rng, n=12), 1.0)
    eps = 1e-4
    s = m.mean
    p0 = m.to_params(s)
    c = as_points(s).mean(axis=0)
    for T in (SimilarityTransform(1 + eps), SimilarityTransform(1.0, eps),
              SimilarityTransform(1.0, 0.0, (eps, -eps))):
        moved = (as_points(T.apply(s)) - T.matrix @ c + c + np.asarray(T.translation)).reshape(-1)
        dp = m.to_params(moved) - p0
        assert np.abs(dp[4:]).max() < 1e-6
        assert np.abs(dp[:4]).max() > 1e-6 * eps


def test_translation_changes_only_global_params(rng):
    m = train_shape_model(two_factor_set(rng, n=12), 1.0)
    s = procrustes_align(two_factor_set(rng, n=3)).shapes[:, 0]
    moved = (as_points(s) + [0.3, -0.2]).reshape(-1)
    dp = m.to_params(moved) - m.to_params(s)
    assert np.abs(dp[4:]).max() < 1e-12
