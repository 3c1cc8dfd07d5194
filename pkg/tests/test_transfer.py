import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aamtl.aam import AamModel, Label, train_aam
from aamtl.appearance_model import AppearanceModel, build_reference_frame
from aamtl.exceptions import DegenerateInputError, DimensionError
from aamtl.geometry import procrustes_align
from aamtl.numeric import orthonormalize, pca, span_distance
from aamtl.shape_model import train_shape_model
from aamtl.synth import direction_in_frame
from aamtl.transfer import (Ordering, TransferConfig, baseline_st, baseline_sut,
                            pick_columns, projected_variance, select_subspace, transfer,
                            transfer_appearance, transfer_shape, warp_appearance_basis)

from oracles import (captured_variance, cov_eig, exact_directions, in_span_cos2,
                     random_similarity, random_transfer_instance, weighted_cos2_variance)


# projected variance -------------------------------------------------------------

def test_orthogonal_column_has_zero_variance(rng):
    X = np.vstack([rng.standard_normal((2, 5)), np.zeros((1, 5))])
    pv = projected_variance(np.array([[0.0], [0.0], [1.0]]), X, X.mean(axis=1))
    assert pv.sigma2[0] == 0.0


def test_target_pca_basis_gives_target_eigenvalues(rng):
    X = rng.standard_normal((8, 6))
    r = pca(X)
    pv = projected_variance(r.basis, X, r.mean)
    np.testing.assert_allclose(pv.sigma2, r.eigenvalues, rtol=0, atol=1e-10)


def test_matches_weighted_cos2_oracle(rng):
    S = np.linalg.qr(rng.standard_normal((8, 4)))[0]
    X = rng.standard_normal((8, 5))
    lam, V = cov_eig(X)
    pv = projected_variance(S, X, X.mean(axis=1))
    oracle = weighted_cos2_variance(S, lam, V)
    np.testing.assert_allclose(pv.sigma2, oracle, rtol=1e-10, atol=1e-14)


def test_needs_two_target_samples(rng):
    with pytest.raises(DegenerateInputError):
        projected_variance(np.eye(3)[:, :1], np.ones((3, 1)), np.ones(3))


def test_ties_keep_source_order():
    X = np.array([[1.0, -1.0], [1.0, -1.0], [0.0, 0.0]])
    S = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    pv = projected_variance(S, X, X.mean(axis=1))
    assert pv.sigma2[1] == pv.sigma2[2]
    assert list(pv.order) == [1, 2, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sigma2_bounds_and_determinism(seed):
    rng = np.random.default_rng(seed)
    S, X, mu = random_transfer_instance(rng)
    pv = projected_variance(S, X, mu)
    total = np.sum((X - mu[:, None]) ** 2) / (X.shape[1] - 1)
    assert np.all(pv.sigma2 >= -1e-10)
    assert np.all(pv.sigma2 <= total + 1e-10)
    assert np.all(np.diff(pv.sigma2[pv.order]) <= 0)
    pv2 = projected_variance(S.copy(), X.copy(), mu.copy())
    np.testing.assert_array_equal(pv.order, pv2.order)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_target_variance_prefix_dominates(seed):
    rng = np.random.default_rng(seed)
    S, X, mu = random_transfer_instance(rng)
    pv = projected_variance(S, X, mu)
    for d in range(S.shape[1] + 1):
        a = pv.captured(pick_columns(S, X, mu, d, Ordering.TARGET_VARIANCE))
        b = pv.captured(pick_columns(S, X, mu, d, Ordering.SOURCE_EIGENVALUE))
        assert a >= b - 1e-12 * max(abs(b), 1)


# subspace selection ----------------------------------------------------------------

def test_d_zero_keeps_target_span(rng):
    T = np.linalg.qr(rng.standard_normal((9, 3)))[0]
    S = np.linalg.qr(rng.standard_normal((9, 4)))[0]
    X = rng.standard_normal((9, 5))
    B = select_subspace(T, S, X, X.mean(axis=1), 0)
    assert B.shape == (9, 3)
    assert span_distance(B, T) < 1e-12


def test_full_d_span_is_order_independent(rng):
    T = np.linalg.qr(rng.standard_normal((9, 3)))[0]
    S = np.linalg.qr(rng.standard_normal((9, 4)))[0]
    X = rng.standard_normal((9, 5))
    a = select_subspace(T, S, X, X.mean(axis=1), 4, Ordering.TARGET_VARIANCE)
    b = select_subspace(T, S, X, X.mean(axis=1), 4, Ordering.SOURCE_EIGENVALUE)
    assert a.shape[1] == b.shape[1] == np.linalg.matrix_rank(np.column_stack([T, S]))
    assert span_distance(a, b) < 1e-10


def adversarial_case():
    """Target varies along u = e3; source v1 = e1 (large eigenvalue), v2 = u (small)."""
    u = np.array([0.0, 0.0, 1.0])
    X = np.column_stack([u * c for c in (-2.0, -1.0, 0.0, 1.0, 2.0)])
    S = np.column_stack([[1.0, 0.0, 0.0], u])
    T = np.zeros((3, 0))
    return T, S, X


def test_adversarial_orderings():
    T, S, X = adversarial_case()
    mu = X.mean(axis=1)
    assert list(pick_columns(S, X, mu, 1, Ordering.TARGET_VARIANCE)) == [1]
    assert list(pick_columns(S, X, mu, 1, Ordering.SOURCE_EIGENVALUE)) == [0]
    total = np.sum((X - mu[:, None]) ** 2) / 4  # hand value: (4+1+0+1+4)/4 = 2.5
    assert total == 2.5
    tv = select_subspace(T, S, X, mu, 1, Ordering.TARGET_VARIANCE)
    se = select_subspace(T, S, X, mu, 1, Ordering.SOURCE_EIGENVALUE)
    assert captured_variance(tv, X).sum() / total == pytest.approx(1.0)
    assert captured_variance(se, X).sum() / total == pytest.approx(0.0)


def test_d_out_of_range(rng):
    with pytest.raises(ValueError):
        select_subspace(np.eye(4)[:, :1], np.eye(4)[:, 1:3], rng.standard_normal((4, 3)),
                        np.zeros(4), 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 4))
def test_target_columns_preserved(seed, d):
    rng = np.random.default_rng(seed)
    T = np.linalg.qr(rng.standard_normal((10, 3)))[0]
    S = np.linalg.qr(rng.standard_normal((10, 4)))[0]
    X = rng.standard_normal((10, 4))
    B = select_subspace(T, S, X, X.mean(axis=1), d)
    np.testing.assert_allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)
    assert np.abs(T - B @ (B.T @ T)).max() <= 1e-8


# shape transfer -------------------------------------------------------------------

def planted_shapes(rng):
    base = rng.standard_normal(24) * 10
    g1, g2, f, h = exact_directions(rng, base, 4).T
    src = [random_similarity(rng).apply(base + 5 * a * g1 + 4 * b * g2 + 1.0 * c * f)
           for a, b, c in rng.standard_normal((60, 3))]
    tgt = [random_similarity(rng).apply(base + 3 * a * h + 0.5 * c * f)
           for a, c in rng.standard_normal((5, 2))]
    return base, f, src, tgt


def test_transfer_shape_recovers_planted_factor(rng):
    base, f, src, tgt = planted_shapes(rng)
    source = train_shape_model(src, 1.0)
    target = train_shape_model(tgt, 0.95)
    al = procrustes_align(tgt)
    f_t = direction_in_frame(f, base, target.mean)
    assert in_span_cos2(f_t, target.basis) < 0.5
    out = transfer_shape(target, source, al, 1)
    assert in_span_cos2(f_t, out.basis) >= 0.99
    np.testing.assert_allclose(out.mean, target.mean)
    assert span_distance(out.basis[:, :4], target.basis[:, :4]) < 1e-12


def test_transfer_shape_same_model_d0(rng):
    _, _, src, _ = planted_shapes(rng)
    m = train_shape_model(src, 1.0)
    out = transfer_shape(m, m, procrustes_align(src), 0)
    assert span_distance(out.basis, m.basis) < 1e-10


def test_transfer_shape_dimension_mismatch(rng):
    a = train_shape_model([rng.standard_normal(10) for _ in range(4)])
    b = train_shape_model([rng.standard_normal(12) for _ in range(4)])
    with pytest.raises(DimensionError):
        transfer_shape(a, b, procrustes_align([rng.standard_normal(10) for _ in range(3)]), 0)


# appearance transfer ------------------------------------------------------------

FACEISH = np.array([0, 0, 10, -1, 20, 0, 21, 12, 10, 24, -1, 12, 10, 9], dtype=float)


def _app_model(frame, basis, mean=None):
    mean = np.zeros(frame.n_pixels) if mean is None else mean
    return AppearanceModel(frame=frame, mean=mean, basis=basis, eigenvalues=np.ones(basis.shape[1]))


def test_identical_frames_warp_is_identity(rng):
    fr = build_reference_frame(FACEISH, 30)
    B = np.linalg.qr(rng.standard_normal((fr.n_pixels, 3)))[0]
    W = warp_appearance_basis(_app_model(fr, B), fr)
    np.testing.assert_allclose(W, B, atol=1e-12)
    T = np.linalg.qr(rng.standard_normal((fr.n_pixels, 2)))[0]
    A = rng.standard_normal((fr.n_pixels, 4))
    tm = _app_model(fr, T)
    out = transfer_appearance(tm, _app_model(fr, B), A, 2)
    ref = select_subspace(T, B, A, tm.mean, 2)
    assert span_distance(out.basis, ref) < 1e-10
    assert span_distance(transfer_appearance(tm, _app_model(fr, B), A, 0).basis, T) < 1e-12


def test_planted_appearance_factor_survives_warp(rng):
    src_fr = build_reference_frame(FACEISH, 40)
    bent = FACEISH + rng.normal(0, 0.6, FACEISH.size)
    tgt_fr = build_reference_frame(bent, 40, triangles=src_fr.mesh.triangles)

    def blob_in(frame, k):
        ys, xs = np.mgrid[0:frame.raster_shape[0], 0:frame.raster_shape[1]]
        c = frame.mesh.points[k]
        return np.exp(-((xs - c[0]) ** 2 + (ys - c[1]) ** 2) / (2 * 6.0**2))

    # the same face-anchored pattern painted in both frames
    f_src = blob_in(src_fr, 6)[src_fr.mask]
    f_tgt = blob_in(tgt_fr, 6)[tgt_fr.mask]
    others = [blob_in(src_fr, k)[src_fr.mask] for k in (0, 3)]
    S = orthonormalize(np.column_stack(others + [f_src]))
    T = orthonormalize(blob_in(tgt_fr, 1)[tgt_fr.mask][:, None])
    A = np.column_stack([c * f_tgt + e * T[:, 0] for c, e in rng.standard_normal((5, 2))])
    out = transfer_appearance(_app_model(tgt_fr, T), _app_model(src_fr, S), A, 1)
    assert in_span_cos2(f_tgt, out.basis) >= 0.95


# baselines --------------------------------------------------------------------------

def test_sut_union_with_itself_same_span(small_dataset):
    a = train_aam(small_dataset.images, small_dataset.shapes, 1.0, 1.0, 60.0)
    imgs, shapes = small_dataset.images, list(small_dataset.shapes)
    b = baseline_sut(imgs, shapes, imgs, shapes, 1.0, 1.0, 60.0)
    assert b.label is Label.SUT
    assert span_distance(a.shape.basis, b.shape.basis) < 1e-6
    assert span_distance(a.appearance.basis, b.appearance.basis) < 1e-6


def test_sut_spans_both_directions(rng):
    base = rng.standard_normal(16) * 10
    dx, dy = exact_directions(rng, base, 2).T
    src = [base + c * dx for c in rng.standard_normal(6) * 3]
    tgt = [base + c * dy for c in rng.standard_normal(6) * 3]
    m = train_shape_model(src + tgt, 1.0)
    al = procrustes_align(src + tgt)
    for d in (dx, dy):
        assert in_span_cos2(direction_in_frame(d, base, al.mean), m.basis) > 0.99


def test_st_contains_both_and_equals_full_transfer(planted, planted_models):
    src, tgt = planted_models
    st_model = baseline_st(tgt, src, planted.target.images, planted.target.shapes)
    assert st_model.label is Label.ST
    B = st_model.shape.basis
    assert np.abs(tgt.shape.basis - B @ (B.T @ tgt.shape.basis)).max() < 1e-8
    for ordering in Ordering:
        cfg = TransferConfig(src.shape.n_local, src.appearance.n_components, ordering)
        full = transfer(tgt, src, planted.target.images, planted.target.shapes, cfg)
        assert span_distance(full.shape.basis, st_model.shape.basis) <= 1e-8
        assert span_distance(full.appearance.basis, st_model.appearance.basis) <= 1e-8
    Psi = st_model.appearance.basis
    warped = warp_appearance_basis(src.appearance, tgt.appearance.frame)
    assert np.abs(warped - Psi @ (Psi.T @ warped)).max() < 1e-8


def test_st_of_model_with_itself(small_model):
    st_model = baseline_st(small_model, small_model)
    assert span_distance(st_model.shape.basis, small_model.shape.basis) < 1e-8
    assert span_distance(st_model.appearance.basis, small_model.appearance.basis) < 1e-8


def test_transfer_report_sorted(planted, planted_models):
    src, tgt = planted_models
    _, rep = transfer(tgt, src, planted.target.images, planted.target.shapes,
                      TransferConfig(1, 2), return_report=True)
    d = rep.to_dict()
    s = d["shape"]["sigma2_descending"]
    assert s == sorted(s, reverse=True)
    assert len(d["shape"]["selected"]) == 1


def test_transfer_v_mismatch(small_model, planted_models):
    src, _ = planted_models
    other = AamModel(shape=src.shape, appearance=src.appearance, label=Label.SOURCE)
    assert other.n_vertices == src.n_vertices
    with pytest.raises(DimensionError):
        AamModel(shape=small_model.shape,
                 appearance=_app_model(build_reference_frame(FACEISH, 20), np.zeros((1, 0))))
