import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import lloyd_reference
from promptpix import autodiff as ad
from promptpix.autodiff import ShapeError, Tensor
from promptpix.images import ImageRGB, PixelFeatures, build_xylab
from promptpix.superpixel import (
    Association,
    Centers,
    InvalidCountError,
    association_from_q,
    grid_shape,
    hard_assign,
    init_centers,
    iterate,
    soft_assign,
    superpixelate,
    update_centers,
)

RNG = np.random.default_rng(99)


def random_feats(h, w, seed=0, pos_scale=1.0):
    rng = np.random.default_rng(seed)
    img = ImageRGB(h, w, rng.integers(0, 256, (h, w, 3)).astype(np.uint8))
    return build_xylab(img, pos_scale)


def blob_image(seed, h=8, w=8):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
    rad = rng.uniform(1.5, 3.0)
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2) <= rad ** 2
    img = rng.uniform(0.2, 0.4) + mask * rng.uniform(0.3, 0.45) + rng.normal(0, 0.04, (h, w))
    gray = (np.clip(img, 0, 1) * 255).astype(np.uint8)
    return ImageRGB(h, w, np.repeat(gray[:, :, None], 3, axis=2))


# ---------------------------------------------------------------------------
# init_centers
# ---------------------------------------------------------------------------

def test_init_single_center_is_global_mean():
    feats = random_feats(4, 4, seed=1)
    centers = init_centers(feats, 1)
    np.testing.assert_allclose(centers.S.data, feats.features.data.mean(axis=0, keepdims=True))


def test_init_m_equals_n_gives_pixel_features():
    feats = random_feats(3, 4, seed=2)
    centers = init_centers(feats, 12)
    np.testing.assert_allclose(centers.S.data, feats.features.data)


def test_init_4x4_uniform_m4_cell_centroids():
    feats = build_xylab(ImageRGB(4, 4, np.full((4, 4, 3), 200, np.uint8)))
    centers = init_centers(feats, 4)
    f = feats.features.data.reshape(4, 4, 5)
    expect = np.array([
        f[0:2, 0:2].reshape(-1, 5).mean(axis=0),
        f[0:2, 2:4].reshape(-1, 5).mean(axis=0),
        f[2:4, 0:2].reshape(-1, 5).mean(axis=0),
        f[2:4, 2:4].reshape(-1, 5).mean(axis=0),
    ])
    np.testing.assert_allclose(centers.S.data, expect, atol=1e-12)


def test_init_count_errors():
    feats = random_feats(2, 2)
    with pytest.raises(InvalidCountError):
        init_centers(feats, 5)
    with pytest.raises(InvalidCountError):
        init_centers(feats, 0)


def test_init_rejects_untileable_count():
    # 5 = 5x1 or 1x5 cannot tile a 3x3 image without empty cells
    with pytest.raises(InvalidCountError):
        init_centers(random_feats(3, 3), 5)


def test_grid_shape_prefers_image_aspect():
    assert grid_shape(4, 8, 8) == (2, 2)
    assert grid_shape(4, 16, 4) == (4, 1)
    assert grid_shape(6, 4, 6) == (2, 3)


# ---------------------------------------------------------------------------
# soft_assign
# ---------------------------------------------------------------------------

def test_q_is_one_at_a_center():
    feats = random_feats(3, 3, seed=5)
    centers = Centers(Tensor(feats.features.data[[4]].copy()))
    assoc = soft_assign(feats, centers)
    assert assoc.Q.data[4, 0] == 1.0  # exp(-0) exactly


def test_single_pixel_single_superpixel():
    feats = random_feats(1, 1)
    assoc = soft_assign(feats, init_centers(feats, 1))
    np.testing.assert_array_equal(assoc.Qhat.data, [[1.0]])


def test_two_symmetric_pixels_share_one_center():
    f = PixelFeatures(Tensor(np.array([[0.0, 0, 0, 0, 0], [1.0, 0, 0, 0, 0]])), 1.0, 1, 2)
    assoc = soft_assign(f, Centers(Tensor([[0.5, 0, 0, 0, 0]])))
    np.testing.assert_allclose(assoc.Qhat.data, [[0.5], [0.5]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3, 4, 6, 9]))
def test_qhat_columns_sum_to_one(seed, m):
    feats = random_feats(3, 3, seed=seed)
    assoc = soft_assign(feats, init_centers(feats, m), temp=1.0)
    np.testing.assert_allclose(assoc.Qhat.data.sum(axis=0), 1.0, atol=1e-9)
    assert (assoc.Q.data > 0).all() and (assoc.Q.data <= 1).all()


def test_soft_assign_rejects_bad_temp():
    feats = random_feats(2, 2)
    with pytest.raises(ValueError):
        soft_assign(feats, init_centers(feats, 1), temp=0.0)


# ---------------------------------------------------------------------------
# update_centers
# ---------------------------------------------------------------------------

def test_update_identical_pixels_returns_common_feature():
    common = np.tile([0.3, 0.4, 0.5, 0.1, 0.2], (6, 1))
    feats = PixelFeatures(Tensor(common), 1.0, 2, 3)
    assoc = association_from_q(Tensor(np.full((6, 2), 0.5)))
    centers = update_centers(assoc, feats)
    np.testing.assert_allclose(centers.S.data, np.tile(common[0], (2, 1)))


def test_update_one_hot_gives_plain_means():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(6, 5))
    feats = PixelFeatures(Tensor(f), 1.0, 2, 3)
    q = np.zeros((6, 2))
    q[:3, 0] = 1.0
    q[3:, 1] = 1.0
    centers = update_centers(association_from_q(Tensor(q)), feats)
    np.testing.assert_allclose(centers.S.data[0], f[:3].mean(axis=0))
    np.testing.assert_allclose(centers.S.data[1], f[3:].mean(axis=0))


def test_update_matches_explicit_loop():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(6, 5))
    q = rng.uniform(0.1, 1.0, (6, 2))
    feats = PixelFeatures(Tensor(f), 1.0, 2, 3)
    assoc = association_from_q(Tensor(q))
    centers = update_centers(assoc, feats)
    qhat = q / q.sum(axis=0)
    expect = np.zeros((2, 5))
    for i in range(2):
        for p in range(6):
            expect[i] += qhat[p, i] * f[p]
    np.testing.assert_allclose(centers.S.data, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# iterate
# ---------------------------------------------------------------------------

def test_iterate_uniform_image_single_center_fixed_point():
    feats = build_xylab(ImageRGB(4, 4, np.full((4, 4, 3), 90, np.uint8)))
    init = init_centers(feats, 1)
    _, centers = iterate(feats, 1, iters=1)
    np.testing.assert_allclose(centers.S.data, init.S.data, atol=1e-12)


def test_iterate_separates_two_color_blobs():
    # left half dark, right half bright: position and color agree
    img = np.zeros((8, 8, 3), np.uint8)
    img[:, 4:] = 230
    img[:, :4] = 40
    feats = build_xylab(ImageRGB(8, 8, img))
    _, centers = iterate(feats, 2, iters=5)
    labels = hard_assign(feats, centers).labels.reshape(8, 8)
    # brute-force reference: Lloyd to convergence from the same init
    _, ref = lloyd_reference(feats.features.data, init_centers(feats, 2).S.data, 50)
    assert (labels == ref.reshape(8, 8)).all()
    left, right = labels[:, :4], labels[:, 4:]
    assert len(np.unique(left)) == 1 and len(np.unique(right)) == 1
    assert left[0, 0] != right[0, 0]


def test_sharp_limit_matches_lloyd_reference():
    agree = total = 0
    for k in range(20):
        feats = build_xylab(blob_image(7000 + k))
        init = init_centers(feats, 4)
        _, centers = iterate(feats, 4, iters=5, temp=1e-3)
        soft_labels = hard_assign(feats, centers).labels
        ref_centers, _ = lloyd_reference(feats.features.data, init.S.data, 5)
        ref_labels = hard_assign(feats, Centers(Tensor(ref_centers))).labels
        agree += int((soft_labels == ref_labels).sum())
        total += soft_labels.size
    assert agree / total >= 0.95


def test_convex_hull_on_every_iteration():
    feats = random_feats(6, 6, seed=17)
    lo = feats.features.data.min(axis=0) - 1e-12
    hi = feats.features.data.max(axis=0) + 1e-12
    centers = init_centers(feats, 4)
    for _ in range(5):
        assoc = soft_assign(feats, centers)
        centers = update_centers(assoc, feats)
        assert (centers.S.data >= lo).all() and (centers.S.data <= hi).all()


def test_iterate_requires_positive_iters():
    feats = random_feats(2, 2)
    with pytest.raises(ValueError):
        iterate(feats, 1, iters=0)


# ---------------------------------------------------------------------------
# hard_assign
# ---------------------------------------------------------------------------

def test_hard_assign_pixel_at_center():
    feats = random_feats(3, 3, seed=20)
    centers = Centers(Tensor(np.vstack([
        feats.features.data.mean(axis=0) + 5.0,
        feats.features.data.mean(axis=0) + 7.0,
        feats.features.data.mean(axis=0) + 9.0,
        feats.features.data[4].copy(),
    ])))
    assert hard_assign(feats, centers).labels[4] == 3


def test_hard_assign_tie_breaks_to_lowest_index():
    f = PixelFeatures(Tensor(np.zeros((1, 5))), 1.0, 1, 1)
    centers = Centers(Tensor(np.vstack([np.full(5, 9.0), np.ones(5), np.ones(5)])))
    # centers 1 and 2 are equidistant; lowest index wins
    assert hard_assign(f, centers).labels[0] == 1


def test_hard_assign_matches_exhaustive_scan():
    feats = random_feats(10, 10, seed=21)
    _, centers = iterate(feats, 4, iters=3)
    labels = hard_assign(feats, centers).labels
    f, s = feats.features.data, centers.S.data
    for p in range(100):
        best_i, best_d = 0, np.inf
        for i in range(4):
            d = float(((f[p] - s[i]) ** 2).sum())
            if d < best_d:
                best_i, best_d = i, d
        assert labels[p] == best_i


# ---------------------------------------------------------------------------
# superpixelate
# ---------------------------------------------------------------------------

def test_superpixelate_single_cluster_is_global_smear():
    rng = np.random.default_rng(30)
    q = Tensor(rng.uniform(0.2, 1.0, (5, 1)))
    assoc = association_from_q(q)
    x = Tensor(rng.normal(size=(5, 3)))
    out = superpixelate(assoc, x)
    pooled = (assoc.Qhat.data * x.data).sum(axis=0)
    np.testing.assert_allclose(out.data, np.tile(pooled, (5, 1)))


def test_superpixelate_one_hot_is_piecewise_constant():
    rng = np.random.default_rng(31)
    q = np.zeros((6, 2))
    q[:2, 0] = 1.0
    q[2:, 1] = 1.0
    assoc = association_from_q(Tensor(q))
    x = Tensor(rng.normal(size=(6, 4)))
    out = superpixelate(assoc, x).data
    np.testing.assert_allclose(out[0], out[1])
    np.testing.assert_allclose(out[2], out[3])
    np.testing.assert_allclose(out[0], x.data[:2].mean(axis=0))
    np.testing.assert_allclose(out[2], x.data[2:].mean(axis=0))


def test_superpixelate_matches_explicit_double_loop():
    rng = np.random.default_rng(32)
    q = rng.uniform(0.1, 1.0, (6, 2))
    x = rng.normal(size=(6, 3))
    out = superpixelate(association_from_q(Tensor(q)), Tensor(x)).data
    qhat = q / q.sum(axis=0)
    r = q / q.sum(axis=1, keepdims=True)
    expect = np.zeros((6, 3))
    for p in range(6):
        for i in range(2):
            pooled = np.zeros(3)
            for qq in range(6):
                pooled += qhat[qq, i] * x[qq]
            expect[p] += r[p, i] * pooled
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_superpixelate_row_count_mismatch():
    assoc = association_from_q(Tensor(np.full((4, 2), 0.5)))
    with pytest.raises(ShapeError):
        superpixelate(assoc, Tensor(np.zeros((5, 3))))


# ---------------------------------------------------------------------------
# differentiability
# ---------------------------------------------------------------------------

def test_gradient_through_superpixelate_wrt_x():
    rng = np.random.default_rng(33)
    feats = random_feats(4, 4, seed=33)
    assoc, _ = iterate(feats, 4, iters=2)
    err = ad.grad_check(
        lambda t: ad.sum_all(ad.powf(superpixelate(assoc, t), 2.0)),
        Tensor(rng.normal(size=(16, 3))))
    assert err <= 1e-5


def test_gradient_through_whole_pipeline_wrt_feats():
    feats = random_feats(4, 4, seed=34)

    def fn(t):
        pf = PixelFeatures(t, 1.0, 4, 4)
        assoc, _ = iterate(pf, 2, iters=2)
        return ad.sum_all(ad.powf(superpixelate(assoc, t), 2.0))

    assert ad.grad_check(fn, feats.features) <= 1e-5


def test_gradient_of_soft_assign_and_update_wrt_centers():
    feats = random_feats(3, 3, seed=35)
    init = init_centers(feats, 2)

    def fn(t):
        assoc = soft_assign(feats, Centers(t), temp=0.7)
        new = update_centers(assoc, feats)
        return ad.sum_all(ad.powf(new.S, 2.0))

    assert ad.grad_check(fn, init.S) <= 1e-5
