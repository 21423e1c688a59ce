import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diveseg.evaluation import (
    COCO_THRESHOLDS,
    GroundTruth,
    ScoredMask,
    mask_ap,
    mask_iou,
    pca_components,
    pca_visualize,
)

from oracles import brute_force_ap, pixel_iou


def box(shape, r0, r1, c0, c1):
    m = np.zeros(shape, bool)
    m[r0:r1, c0:c1] = True
    return m


# --- IoU


def test_iou_cases():
    a = box((3, 3), 0, 2, 0, 2)
    b = box((3, 3), 0, 2, 1, 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, box((3, 3), 2, 3, 2, 3)) == 0.0
    assert mask_iou(a, b) == pytest.approx(2 / 6) == pixel_iou(a, b)


def test_iou_errors():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 3)))


# --- hand-computed AP scenarios


def test_perfect_ranked_first():
    gt = box((8, 8), 0, 4, 0, 4)
    preds = [[ScoredMask(gt, 0, 0.9), ScoredMask(box((8, 8), 5, 8, 5, 8), 0, 0.8)]]
    report = mask_ap(preds, [GroundTruth(gt[None], np.array([0]))], thresholds=(0.5,))
    assert report.AP50 == 1.0


def test_false_positive_between_hits():
    # flags TP, FP, TP with 2 GT: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
    # recall points 0.00..0.50 (51) see 1.0; 0.51..1.00 (50) see 2/3.
    g1, g2 = box((10, 10), 0, 3, 0, 3), box((10, 10), 5, 9, 5, 9)
    preds = [[ScoredMask(g1, 0, 0.9), ScoredMask(box((10, 10), 0, 2, 6, 9), 0, 0.8), ScoredMask(g2, 0, 0.7)]]
    gts = [GroundTruth(np.stack([g1, g2]), np.array([0, 0]))]
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert mask_ap(preds, gts, thresholds=(0.5,)).AP50 == pytest.approx(expected, abs=1e-6)


def three_image_scenario():
    shape = (10, 10)
    a = box(shape, 0, 4, 0, 4)
    b = box(shape, 0, 2, 0, 5)  # 10 pixels
    c = box(shape, 5, 9, 5, 9)
    partial_b = box(shape, 0, 2, 0, 2)  # 4 of b's pixels, IoU 0.4
    preds = [
        [ScoredMask(a, 0, 0.95), ScoredMask(a, 0, 0.5)],  # duplicate is a false positive
        [ScoredMask(partial_b, 0, 0.9)],
        [ScoredMask(c, 0, 0.6)],
    ]
    gts = [GroundTruth(m[None], np.array([0])) for m in (a, b, c)]
    return preds, gts


def test_three_image_scenario():
    # score order: a(TP) b'(FP) c(TP) a-dup(FP); 3 GT.
    # recall 1/3 with precision 1 covers points 0.00..0.33 (34);
    # recall 2/3 with best precision 2/3 covers 0.34..0.66 (33); the rest is 0.
    preds, gts = three_image_scenario()
    report = mask_ap(preds, gts, thresholds=(0.5, 0.3))
    assert report.per_threshold[0.5] == pytest.approx((34 + 33 * 2 / 3) / 101, abs=1e-6)
    # at 0.3 the partial mask counts: flags 1,1,1,0 reach recall 1 at precision 1
    assert report.per_threshold[0.3] == pytest.approx(1.0, abs=1e-6)


def test_gt_as_predictions_is_perfect(rng):
    preds, gts = [], []
    for _ in range(3):
        masks = np.stack([box((16, 16), r, r + 4, r, r + 5) for r in (0, 5, 10)])
        labels = rng.integers(0, 3, size=3)
        gts.append(GroundTruth(masks, labels))
        preds.append([ScoredMask(m, int(l), 1.0) for m, l in zip(masks, labels)])
    report = mask_ap(preds, gts)
    assert report.mAP == report.AP50 == report.AP75 == 1.0
    assert all(row["mAP"] == 1.0 for row in report.per_class.values())


def test_score_out_of_range():
    gt = box((4, 4), 0, 2, 0, 2)
    with pytest.raises(ValueError):
        mask_ap([[ScoredMask(gt, 0, 1.2)]], [GroundTruth(gt[None], np.array([0]))])


def test_classes_without_gt_are_excluded():
    gt = box((4, 4), 0, 2, 0, 2)
    preds = [[ScoredMask(gt, 0, 0.9), ScoredMask(gt, 5, 0.9)]]
    report = mask_ap(preds, [GroundTruth(gt[None], np.array([0]))])
    assert list(report.per_class) == [0] and report.mAP == 1.0


# --- properties


@st.composite
def scenes(draw):
    n_img = draw(st.integers(1, 3))
    preds, gts = [], []
    for _ in range(n_img):
        n_gt = draw(st.integers(0, 4))
        gmasks, glabels = [], []
        for _ in range(n_gt):
            m = np.array(draw(st.lists(st.booleans(), min_size=36, max_size=36))).reshape(6, 6)
            m[draw(st.integers(0, 5)), draw(st.integers(0, 5))] = True
            gmasks.append(m)
            glabels.append(draw(st.integers(0, 1)))
        gts.append(GroundTruth(np.array(gmasks, bool).reshape(-1, 6, 6), np.array(glabels, int)))
        p = []
        for _ in range(draw(st.integers(0, 4))):
            m = np.array(draw(st.lists(st.booleans(), min_size=36, max_size=36))).reshape(6, 6)
            score = draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9, 1.0]))
            p.append(ScoredMask(m, draw(st.integers(0, 1)), score))
        preds.append(p)
    if not any(len(g.labels) for g in gts):
        gts[0] = GroundTruth(np.ones((1, 6, 6), bool), np.array([0]))
    return preds, gts


def as_tuples(preds, gts):
    return (
        [[(p.mask, p.label, p.score) for p in ps] for ps in preds],
        [list(zip(g.masks, g.labels.tolist())) for g in gts],
    )


@settings(max_examples=60, deadline=None)
@given(scenes())
def test_matches_brute_force_evaluator(scene):
    preds, gts = scene
    report = mask_ap(preds, gts, thresholds=COCO_THRESHOLDS)
    tp, tg = as_tuples(preds, gts)
    for cls, row in report.per_class.items():
        brute = [brute_force_ap(tp, tg, t, cls) for t in COCO_THRESHOLDS]
        assert abs(row["mAP"] - float(np.mean(brute))) <= 1e-12
        assert abs(row["AP50"] - brute[0]) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(scenes())
def test_monotone_rescaling_leaves_ap_unchanged(scene):
    preds, gts = scene
    base = mask_ap(preds, gts)
    for f in (lambda s: 0.5 * s, lambda s: s**3, lambda s: 0.2 + 0.7 * s):
        rescaled = [[ScoredMask(p.mask, p.label, f(p.score)) for p in ps] for ps in preds]
        assert mask_ap(rescaled, gts).as_dict() == base.as_dict()


@settings(max_examples=40, deadline=None)
@given(scenes())
def test_lowest_zero_iou_prediction_never_helps(scene):
    preds, gts = scene
    base = mask_ap(preds, gts)
    extended = [list(ps) for ps in preds]
    g = gts[0]
    covered = g.masks.any(0) if len(g.masks) else np.zeros((6, 6), bool)
    empty_spot = ~covered
    if not empty_spot.any():
        return  # no zero-IoU mask exists for this image
    for cls in (0, 1):
        extended[0].append(ScoredMask(empty_spot, cls, 0.0))
    worse = mask_ap(extended, gts)
    assert worse.mAP <= base.mAP
    for cls in base.per_class:
        assert worse.per_class[cls]["mAP"] <= base.per_class[cls]["mAP"]


@settings(max_examples=40, deadline=None)
@given(scenes())
def test_ap_non_increasing_in_threshold(scene):
    report = mask_ap(*scene)
    values = [report.per_threshold[t] for t in COCO_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))
    assert all(0 <= v <= 1 for v in values)


# --- PCA


def test_rank_one_tokens():
    rng = np.random.default_rng(0)
    tokens = np.outer(rng.normal(size=16), rng.normal(size=12)) + 3.0
    proj, _, ratio = pca_components(tokens)
    assert ratio[0] == pytest.approx(1.0, abs=1e-9)
    assert np.max(np.abs(proj[:, 1:])) <= 1e-9
    out = pca_visualize(tokens, 32)
    assert out.rgb.shape == (32, 32, 3) and out.foreground.shape == (32, 32)


def test_sign_flipped_tokens_split_evenly():
    rng = np.random.default_rng(1)
    half = rng.normal(size=(8, 10))
    tokens = np.concatenate([half, -half])
    out = pca_visualize(tokens, 4, grid=(4, 4))
    fg = out.components[:, 0] > 0
    assert fg.sum() == 8
    assert np.array_equal(fg[:8], ~fg[8:])
    flipped = pca_visualize(tokens, 4, grid=(4, 4), invert=True)
    assert np.array_equal(flipped.foreground, ~out.foreground)


def test_top3_residual_matches_svd_oracle():
    rng = np.random.default_rng(2)
    tokens = rng.normal(size=(64, 192))
    proj, axes, ratio = pca_components(tokens)
    centered = tokens - tokens.mean(0)
    residual = np.linalg.norm(centered - proj @ axes.T) ** 2
    s = np.linalg.svd(centered, compute_uv=False)
    assert abs(residual - np.sum(s[3:] ** 2)) <= 1e-5 * max(1.0, residual)
    np.testing.assert_allclose(ratio, s[:3] ** 2 / np.sum(s**2), atol=1e-9)


def test_rgb_range_and_black_background():
    rng = np.random.default_rng(3)
    out = pca_visualize(rng.normal(size=(64, 20)), 64)
    assert out.rgb.min() >= 0 and out.rgb.max() <= 1
    assert np.all(out.rgb[~out.foreground] == 0)
    assert out.foreground.any() and (~out.foreground).any()


def test_too_few_tokens():
    with pytest.raises(ValueError):
        pca_components(np.ones((2, 5)))
