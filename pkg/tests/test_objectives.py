import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box as shapely_box

from xfm import autodiff as ad
from xfm.autodiff import ShapeError, Tensor
from xfm.encoders import TokenSequence
from xfm.masking import MaskedText
from xfm.objectives import (
    BoundingBox,
    LossBundle,
    bbp_loss,
    giou,
    imlm_loss,
    itc_loss,
    itm_loss,
    itm_loss_from_logits,
    mim_loss,
    mlm_loss,
    sample_negatives,
    similarity_matrix,
    total_loss,
)


def plan_at(positions, original):
    original = np.atleast_2d(original)
    return MaskedText(original, original.copy(), np.array(positions, dtype=np.int64).reshape(-1, 2),
                      np.zeros_like(original, dtype=bool))


# --- mlm / imlm ----------------------------------------------------------------------


def test_mlm_empty_plan_is_zero():
    assert mlm_loss(Tensor(np.zeros((1, 5, 11))), plan_at([], np.zeros(5, int))).item() == 0.0


def test_mlm_uniform_logits_is_ln_vocab():
    loss = mlm_loss(Tensor(np.zeros((1, 5, 11))), plan_at([[0, 2]], [1, 4, 7, 3, 0]))
    assert abs(loss.item() - math.log(11)) < 1e-9


def test_mlm_near_delta_is_zero():
    logits = np.zeros((1, 4, 11))
    logits[0, 1, 6] = 1e6
    assert mlm_loss(Tensor(logits), plan_at([[0, 1]], [1, 6, 2, 2])).item() < 1e-6


def test_mlm_averages_over_positions(rng):
    logits = rng.normal(size=(2, 6, 9))
    original = rng.integers(0, 9, size=(2, 6))
    pos = [[0, 1], [1, 3], [1, 5]]
    got = mlm_loss(Tensor(logits), plan_at(pos, original)).item()
    expected = np.mean([np.log(np.exp(logits[b, t]).sum()) - logits[b, t, original[b, t]] for b, t in pos])
    assert abs(got - expected) < 1e-12


def test_imlm_shares_kernel(rng):
    logits = Tensor(rng.normal(size=(2, 5, 11)))
    plan = plan_at([[0, 1], [1, 4]], rng.integers(0, 11, size=(2, 5)))
    assert imlm_loss(logits, plan).item() == mlm_loss(logits, plan).item()
    assert imlm_loss(logits, plan_at([], np.zeros((2, 5), int))).item() == 0.0


def test_mlm_position_beyond_logits_rejected():
    with pytest.raises((IndexError, ShapeError)):
        mlm_loss(Tensor(np.zeros((1, 3, 4))), plan_at([[0, 5]], np.zeros(6, int)))


# --- itc -------------------------------------------------------------------------------


def test_itc_single_pair_is_zero():
    assert itc_loss(Tensor(np.array([[3.7]]))).item() == 0.0


def test_itc_closed_form():
    sim = Tensor(np.array([[math.log(3), 0.0], [0.0, math.log(3)]]))
    assert abs(itc_loss(sim).item() - (-math.log(0.75))) < 1e-12
    assert abs(itc_loss(sim).item() - 0.28768) < 1e-5


def test_itc_permutation_invariant(rng):
    s = rng.normal(size=(6, 6))
    perm = rng.permutation(6)
    a = itc_loss(Tensor(s)).item()
    b = itc_loss(Tensor(s[perm][:, perm])).item()
    assert abs(a - b) < 1e-12


def test_itc_monotone_in_diagonal():
    for seed in range(50):
        s = np.random.default_rng(seed).normal(size=(5, 5))
        assert itc_loss(Tensor(s + 0.3 * np.eye(5))).item() < itc_loss(Tensor(s)).item()


def test_itc_rejects_non_square():
    with pytest.raises(ShapeError):
        itc_loss(Tensor(np.zeros((2, 3))))


def test_similarity_temperature(rng):
    img = rng.normal(size=(3, 4))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    txt = rng.normal(size=(3, 4))
    txt /= np.linalg.norm(txt, axis=1, keepdims=True)
    scale = Tensor(np.array(math.log(1 / 0.07)))
    np.testing.assert_allclose(similarity_matrix(Tensor(img), Tensor(txt), scale).data, img @ txt.T / 0.07, rtol=1e-12)
    # clamp: tau never falls below 1e-3
    big = Tensor(np.array(50.0))
    np.testing.assert_allclose(similarity_matrix(Tensor(img), Tensor(txt), big).data, img @ txt.T / 1e-3, rtol=1e-12)


# --- itm ---------------------------------------------------------------------------------


def test_itm_perfect_discrimination():
    eps = 1e-9
    assert itm_loss([1 - eps], [eps], [eps]).item() < 1e-8


def test_itm_half_probabilities():
    assert abs(itm_loss([0.5, 0.5], [0.5, 0.5], [0.5, 0.5]).item() - 3 * math.log(2)) < 1e-12


def test_itm_negative_roles_symmetric():
    a = itm_loss([0.7], [0.2], [0.2]).item()
    b = itm_loss([0.7], [0.2], [0.2]).item()
    c = itm_loss([0.6, 0.8], [0.1, 0.3], [0.3, 0.1]).item()
    d = itm_loss([0.6, 0.8], [0.3, 0.1], [0.1, 0.3]).item()
    assert a == b and abs(c - d) < 1e-12


def test_itm_clamps_and_reports():
    diag = {}
    loss = itm_loss([0.0], [1.0], [0.5], diag)
    assert np.isfinite(loss.item()) and diag["itm_clamped"] == 2


def test_itm_from_logits_matches_probabilities(rng):
    logits = [rng.normal(size=(4, 2)) for _ in range(3)]
    probs = [np.exp(l[:, 1]) / np.exp(l).sum(1) for l in logits]
    a = itm_loss_from_logits(*(Tensor(l) for l in logits)).item()
    b = itm_loss(*probs).item()
    assert abs(a - b) < 1e-12


# --- negatives ------------------------------------------------------------------------------


def test_negatives_batch_of_two_forced(rng):
    img, txt = sample_negatives(2, rng)
    assert img.tolist() == [1, 0] and txt.tolist() == [1, 0]


def test_negatives_batch_of_one_skipped(rng):
    assert sample_negatives(1, rng) is None


def test_negatives_uniform_and_exclusive():
    rng = np.random.default_rng(0)
    counts = np.zeros((2, 8, 8))
    for _ in range(10_000):
        img, txt = sample_negatives(8, rng)
        assert np.all(img != np.arange(8)) and np.all(txt != np.arange(8))
        counts[0, np.arange(8), img] += 1
        counts[1, np.arange(8), txt] += 1
    freq = counts / 10_000
    off = ~np.eye(8, dtype=bool)
    assert np.all(np.abs(freq[:, off] - 1 / 7) < 0.02)
    assert np.all(freq[:, ~off] == 0)


def test_hard_negatives_prefer_similar_and_exclude_self(rng):
    sim = np.zeros((4, 4))
    sim[0, 3] = sim[3, 0] = 20.0
    for _ in range(50):
        img, txt = sample_negatives(4, rng, sim, hard=True)
        assert np.all(img != np.arange(4)) and np.all(txt != np.arange(4))
        assert txt[0] == 3 and img[3] == 0


# --- giou / bbp ------------------------------------------------------------------------------


def _shapely_giou(a, b):
    def poly(cx, cy, w, h):
        return shapely_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    pa, pb = poly(*a), poly(*b)
    union = pa.union(pb).area
    inter = pa.intersection(pb).area
    xs = [pa.bounds[0], pa.bounds[2], pb.bounds[0], pb.bounds[2]]
    ys = [pa.bounds[1], pa.bounds[3], pb.bounds[1], pb.bounds[3]]
    enclose = (max(xs) - min(xs)) * (max(ys) - min(ys))
    return inter / union - (enclose - union) / enclose


def test_giou_identical():
    b = BoundingBox(0.3, 0.6, 0.2, 0.4)
    assert abs(giou(b, b).item() - 1.0) < 1e-15


def test_giou_nested():
    assert abs(giou(BoundingBox(0.5, 0.5, 0.2, 0.2), BoundingBox(0.5, 0.5, 0.4, 0.4)).item() - 0.25) < 1e-12


def test_giou_disjoint():
    assert abs(giou(BoundingBox(0.2, 0.2, 0.2, 0.2), BoundingBox(0.8, 0.8, 0.2, 0.2)).item() + 0.875) < 1e-12


def test_giou_matches_shapely_and_range():
    rng = np.random.default_rng(0)
    n = 100_000
    a = np.column_stack([rng.uniform(0, 1, (n, 2)), rng.uniform(0.01, 1, (n, 2))])
    b = np.column_stack([rng.uniform(0, 1, (n, 2)), rng.uniform(0.01, 1, (n, 2))])
    g = giou(Tensor(a), Tensor(b)).data
    assert np.all(g >= -1) and np.all(g <= 1)
    for i in range(0, n, 1000):
        assert abs(g[i] - _shapely_giou(a[i], b[i])) < 1e-12


def test_giou_zero_area_rejected():
    with pytest.raises(ValueError):
        giou(np.array([0.5, 0.5, 0.0, 0.2]), np.array([0.5, 0.5, 0.2, 0.2]))


@pytest.mark.parametrize("args", [(1.2, 0.5, 0.1, 0.1), (0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 1.5)])
def test_bounding_box_validation(args):
    with pytest.raises(ValueError):
        BoundingBox(*args)


def test_bbp_perfect_is_zero():
    t = BoundingBox(0.4, 0.4, 0.3, 0.2)
    assert abs(bbp_loss(Tensor(t.as_array()), t).item()) < 1e-15


def test_bbp_documented_pairs():
    assert abs(bbp_loss(Tensor([0.5, 0.5, 0.4, 0.4]), BoundingBox(0.5, 0.5, 0.2, 0.2)).item() - 1.15) < 1e-9
    assert abs(bbp_loss(Tensor([0.8, 0.8, 0.2, 0.2]), BoundingBox(0.2, 0.2, 0.2, 0.2)).item() - 3.075) < 1e-9


def test_bbp_skips_unboxed_items():
    pred = Tensor(np.array([[0.5, 0.5, 0.4, 0.4], [0.1, 0.1, 0.1, 0.1]]))
    truth = np.array([[0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.1, 0.1]])
    assert abs(bbp_loss(pred, truth, np.array([True, False])).item() - 1.15) < 1e-9
    assert bbp_loss(pred, truth, np.array([False, False])) is None


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=8, max_size=8))
def test_bbp_non_negative(v):
    pred = np.array(v[:4])
    truth = np.array(v[4:])
    assert bbp_loss(Tensor(pred), truth).item() >= -1e-12


# --- mim ---------------------------------------------------------------------------------------


def test_mim_zero_when_equal(rng):
    x = rng.normal(size=(2, 5, 3))
    assert mim_loss(Tensor(x), Tensor(x), rng.random((2, 4)) < 0.5).item() == 0.0


def test_mim_documented_value():
    pred = np.zeros((1, 3, 2))
    target = np.zeros((1, 3, 2))
    pred[0, 2] = [0.3, -0.4]
    masks = np.array([[False, True]])
    assert abs(mim_loss(Tensor(pred), Tensor(target), masks).item() - 0.0625) < 1e-15


def test_mim_quadratic_homogeneity(rng):
    pred, target = rng.normal(size=(3, 9, 4)), rng.normal(size=(3, 9, 4))
    m = rng.random((3, 8)) < 0.4
    a = mim_loss(Tensor(pred), Tensor(target), m).item()
    b = mim_loss(Tensor(target + 2 * (pred - target)), Tensor(target), m).item()
    assert abs(b - 4 * a) < 1e-12


def test_mim_ignores_unmasked_positions(rng):
    pred, target = rng.normal(size=(2, 9, 4)), rng.normal(size=(2, 9, 4))
    m = rng.random((2, 8)) < 0.4
    a = mim_loss(Tensor(pred), Tensor(target), m).item()
    free = np.concatenate([np.zeros((2, 1), bool), ~m], axis=1)
    pred[free] += 5.0
    target[free] -= 3.0
    assert abs(mim_loss(Tensor(pred), Tensor(target), m).item() - a) < 1e-14


def test_mim_plan_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        mim_loss(Tensor(np.zeros((1, 5, 2))), Tensor(np.zeros((1, 5, 2))), np.zeros((1, 5), bool))


# --- total ---------------------------------------------------------------------------------------


def test_total_singleton_and_sum():
    b = LossBundle(itc=Tensor(np.array(0.7)))
    assert total_loss(b).item() == 0.7
    ones = LossBundle(**{k: Tensor(np.array(1.0)) for k in ("mlm", "itc", "itm", "imlm", "bbp", "mim")})
    assert total_loss(ones).item() == 6.0 and ones.total.item() == 6.0


def test_total_empty_rejected():
    with pytest.raises(ValueError):
        total_loss(LossBundle())


def test_total_gradient_is_sum_of_component_gradients(rng):
    w0 = rng.normal(size=(4, 3))
    x = rng.normal(size=(5, 4))

    def components(w):
        h = ad.matmul(Tensor(x), w)
        return LossBundle(
            mlm=ad.cross_entropy(h, np.array([0, 1, 2, 0, 1])),
            itc=itc_loss(ad.take(h, slice(0, 3))),
            mim=ad.mean(ad.squared_error(h, 0.5)),
        )

    w = Tensor(w0, requires_grad=True)
    total_loss(components(w)).backward()
    total_grad = w.grad.copy()
    summed = np.zeros_like(w0)
    for name in ("mlm", "itc", "mim"):
        w = Tensor(w0, requires_grad=True)
        getattr(components(w), name).backward()
        summed += w.grad
    np.testing.assert_allclose(total_grad, summed, rtol=1e-12, atol=1e-15)
