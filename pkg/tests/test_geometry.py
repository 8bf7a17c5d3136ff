from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_affine, random_shape
from mixalign.errors import DegenerateShape, InvalidArg, SingularTransform
from mixalign.geometry import (
    AffineTransform,
    alignment_error,
    alignment_residuals,
    apply_to_shape,
    canonical_normalize,
    compose,
    fit_affine,
    fit_transform,
    invert,
    rms_radius,
    warp_image,
    whiten,
)


def _rotation(deg):
    th = np.deg2rad(deg)
    return AffineTransform(np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]), np.zeros(2))


def _dense_residual(src, dst):
    """Independent oracle: solve the 6-parameter problem as one dense least-squares system."""
    p = len(src)
    A = np.zeros((2 * p, 6))
    A[0::2, 0:2] = src
    A[0::2, 2] = 1
    A[1::2, 3:5] = src
    A[1::2, 5] = 1
    theta, *_ = np.linalg.lstsq(A, dst.reshape(-1), rcond=None)
    r = A @ theta - dst.reshape(-1)
    return float(r @ r), theta


class TestFitAffine:
    def test_identity_case(self, rng):
        s = random_shape(rng)
        t = fit_affine(s, s)
        assert t.allclose(AffineTransform.identity(), atol=1e-9)
        assert np.sum((t(s) - s) ** 2) < 1e-18

    def test_recovers_rotation(self, rng):
        s = random_shape(rng, p=5)
        r30 = _rotation(30)
        t = fit_affine(s, r30(s))
        assert t.allclose(r30, atol=1e-9)
        assert np.sum((t(s) - r30(s)) ** 2) < 1e-18

    def test_collinear_raises(self):
        s = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [5.0, 5.0]])
        with pytest.raises(DegenerateShape):
            fit_affine(s, s)

    def test_coincident_raises(self):
        with pytest.raises(DegenerateShape):
            fit_affine(np.ones((4, 2)), np.zeros((4, 2)))

    def test_matches_dense_oracle(self, rng):
        for _ in range(20):
            src, dst = random_shape(rng, p=9), random_shape(rng, p=9)
            t = fit_affine(src, dst)
            resid, theta = _dense_residual(src, dst)
            assert np.allclose(t.matrix.reshape(-1), theta, atol=1e-9)
            assert np.sum((t(src) - dst) ** 2) == pytest.approx(resid, rel=1e-9)

    def test_optimal_against_random_candidates(self, rng):
        src, dst = random_shape(rng, p=8), random_shape(rng, p=8)
        t = fit_affine(src, dst)
        best = np.sum((t(src) - dst) ** 2)
        for _ in range(1000):
            cand = AffineTransform(t.linear + rng.normal(scale=0.05, size=(2, 2)),
                                   t.translation + rng.normal(scale=2.0, size=2))
            assert np.sum((cand(src) - dst) ** 2) >= best - 1e-9

    def test_fit_transform_identity_class(self, rng):
        s = random_shape(rng)
        assert fit_transform(s, s + 3, "identity").allclose(AffineTransform.identity())
        with pytest.raises(InvalidArg):
            fit_transform(s, s, "similarity")


class TestApplyComposeInvert:
    def test_identity_apply(self, rng):
        s = random_shape(rng)
        assert np.array_equal(apply_to_shape(AffineTransform.identity(), s), s)

    def test_translation(self):
        t = AffineTransform(np.eye(2), [3.0, -2.0])
        assert np.array_equal(apply_to_shape(t, np.array([[1.0, 1.0], [0, 0], [2, 5]]))[0], [4.0, -1.0])

    def test_compose_is_sequential(self, rng):
        for _ in range(10):
            t1, t2, s = random_affine(rng), random_affine(rng), random_shape(rng)
            assert np.allclose(compose(t2, t1)(s), t2(t1(s)), atol=1e-9)
            assert np.allclose((t2 @ t1)(s), t2(t1(s)), atol=1e-9)

    def test_invert_examples(self):
        assert invert(AffineTransform.identity()).allclose(AffineTransform.identity())
        assert invert(AffineTransform(2 * np.eye(2), [0, 0])).allclose(AffineTransform(0.5 * np.eye(2), [0, 0]))

    def test_round_trip(self, rng):
        for _ in range(20):
            t, s = random_affine(rng), random_shape(rng)
            assert np.allclose(apply_to_shape(invert(t), apply_to_shape(t, s)), s, atol=1e-7)
            assert compose(invert(t), t).allclose(AffineTransform.identity(), atol=1e-9)

    def test_singular(self):
        with pytest.raises(SingularTransform):
            invert(AffineTransform(np.array([[1.0, 2.0], [2.0, 4.0]]), [0, 0]))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArg):
            AffineTransform(np.array([[np.nan, 0], [0, 1]]), [0, 0])


class TestWarpImage:
    def test_identity_is_pixel_identical(self, rng):
        img = rng.random((17, 23))
        assert np.array_equal(warp_image(AffineTransform.identity(), img), img)

    def test_integer_translation(self, rng):
        img = rng.random((10, 12))
        out = warp_image(AffineTransform(np.eye(2), [5.0, 0.0]), img)
        assert np.array_equal(out[:, 5:], img[:, :-5])
        assert np.all(out[:, :5] == 0)

    def test_round_trip_smooth_gradient(self, rng):
        h, w = 80, 90
        yy, xx = np.mgrid[0:h, 0:w]
        img = 0.2 + 0.6 * (xx / w) * 0.7 + 0.3 * (yy / h) * 0.5
        t = AffineTransform(_rotation(7).linear * 1.05, [3.0, -2.0])
        back = warp_image(invert(t), warp_image(t, img))
        border = int(np.ceil(np.max(np.abs(t.translation)))) + 2 + 6
        inner = (slice(border, h - border), slice(border, w - border))
        assert np.max(np.abs(back[inner] - img[inner])) < 0.02

    def test_output_size(self, rng):
        out = warp_image(AffineTransform.identity(), rng.random((5, 6)), out_w=9, out_h=4)
        assert out.shape == (4, 9)
        assert np.all(out[:, 6:] == 0)

    def test_singular_warp(self, rng):
        with pytest.raises(SingularTransform):
            warp_image(AffineTransform(np.zeros((2, 2)), [0, 0]), rng.random((4, 4)))


class TestAlignmentError:
    def test_affine_image_is_zero(self, rng):
        proto = random_shape(rng)
        assert alignment_error(random_affine(rng)(proto), proto) <= 1e-12

    def test_moved_point_positive(self, rng):
        proto = random_shape(rng)
        s = proto.copy()
        s[2] += [5.0, -3.0]
        assert alignment_error(s, proto) > 0

    def test_matches_dense_oracle(self, rng):
        for _ in range(10):
            s, proto = random_shape(rng, p=11), random_shape(rng, p=11)
            resid, _ = _dense_residual(s, proto)
            assert alignment_error(s, proto) == pytest.approx(resid / 11, rel=1e-9)

    def test_batched_residuals_match(self, rng):
        shapes = np.stack([random_shape(rng, p=6) for _ in range(5)])
        protos = np.stack([random_shape(rng, p=6) for _ in range(3)])
        R = alignment_residuals(shapes, protos)
        for n in range(5):
            for l in range(3):
                assert R[n, l] / 6 == pytest.approx(alignment_error(shapes[n], protos[l]), rel=1e-9, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s, proto = random_shape(rng, p=8), random_shape(rng, p=8)
        a = random_affine(rng)
        assert alignment_error(a(s), proto) == pytest.approx(alignment_error(s, proto), rel=1e-9, abs=1e-9)

    def test_degenerate_propagates(self, rng):
        with pytest.raises(DegenerateShape):
            alignment_error(np.zeros((5, 2)), random_shape(rng, p=5))


class TestCanonicalNormalize:
    def test_single_shape(self, rng):
        (n,), mean = canonical_normalize([random_shape(rng)])
        assert np.allclose(n.mean(axis=0), 0, atol=1e-12)
        assert rms_radius(n) == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(mean, n)

    def test_similarity_copies_coincide(self, rng):
        s = random_shape(rng)
        out, _ = canonical_normalize([s, 3.5 * s + [10, -4]])
        assert np.allclose(out[0], out[1], atol=1e-12)

    def test_mean_is_average(self, rng):
        shapes = [random_shape(rng) for _ in range(6)]
        out, mean = canonical_normalize(shapes)
        assert np.allclose(mean, sum(out) / 6, atol=1e-14)

    def test_idempotent(self, rng):
        out, _ = canonical_normalize([random_shape(rng) for _ in range(4)])
        again, _ = canonical_normalize(out)
        assert np.allclose(again, out, atol=1e-12)

    def test_zero_radius(self):
        with pytest.raises(DegenerateShape):
            canonical_normalize([np.ones((4, 2))])

    def test_empty(self):
        with pytest.raises(InvalidArg):
            canonical_normalize([])


class TestWhiten:
    def test_affine_images_agree_up_to_orthogonal(self, rng):
        s = random_shape(rng, p=9)
        w1, w2 = whiten(s), whiten(random_affine(rng)(s))
        q, *_ = np.linalg.lstsq(w1, w2, rcond=None)
        assert np.allclose(q.T @ q, np.eye(2), atol=1e-9)
        assert np.allclose(w1 @ q, w2, atol=1e-9)
