"""The six pre-training losses and their unweighted sum."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import MaskedText

PROB_FLOOR = 1e-12
LOSS_NAMES = ("mlm", "itc", "itm", "imlm", "bbp", "mim")


@dataclass
class LossBundle:
    mlm: Tensor | None = None
    itc: Tensor | None = None
    itm: Tensor | None = None
    imlm: Tensor | None = None
    bbp: Tensor | None = None
    mim: Tensor | None = None
    total: Tensor | None = None

    def present(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in LOSS_NAMES if getattr(self, name) is not None}

    def as_floats(self) -> dict[str, float | None]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = None if v is None else v.item()
        return out


def total_loss(bundle: LossBundle) -> Tensor:
    parts = list(bundle.present().values())
    if not parts:
        raise ValueError("total_loss: bundle has no components")
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    bundle.total = total
    return total


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def mlm_loss(logits: Tensor, plan: MaskedText) -> Tensor:
    """Mean cross-entropy of the original tokens at the masked positions.

    ``logits`` is (..., L, V) with leading axes matching ``plan.original``.
    """
    if plan.empty:
        return _zero(logits)
    lead = logits.shape[:-1]
    if lead != plan.original.shape:
        raise ad.ShapeError(f"mlm_loss: logits {logits.shape} do not cover plan of shape {plan.original.shape}")
    pos = plan.positions
    if np.any(pos >= np.asarray(lead)):
        raise IndexError("mlm_loss: masked position beyond logits length")
    rows = ad.take(logits, tuple(pos.T))
    return ad.cross_entropy(rows, plan.targets())


# the image-conditioned variant scores fused logits with the same kernel
imlm_loss = mlm_loss


def similarity_matrix(image_emb: Tensor, text_emb: Tensor, logit_scale: Tensor) -> Tensor:
    """(B_img, B_txt) cosine similarities of unit vectors divided by the temperature.

    The temperature is ``exp(-logit_scale)`` clamped to [1e-3, 100].
    """
    inv_tau = ad.exp(ad.clamp(logit_scale, float(np.log(1 / 100.0)), float(np.log(1 / 1e-3))))
    return ad.mul(ad.matmul(image_emb, ad.transpose(text_emb)), inv_tau)


def itc_loss(sim: Tensor) -> Tensor:
    """Symmetric in-batch contrastive loss; rows are image->text, columns text->image."""
    if sim.data.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ad.ShapeError(f"itc_loss: similarity matrix must be square, got {sim.shape}")
    target = np.arange(sim.shape[0])
    i2t = ad.cross_entropy(sim, target)
    t2i = ad.cross_entropy(ad.transpose(sim), target)
    return ad.scale(ad.add(i2t, t2i), 0.5)


def itm_loss(p_pos, p_img_neg, p_txt_neg, diagnostics: dict | None = None) -> Tensor:
    """Mean over the batch of -ln p(I,T) - ln(1 - p(I~,T)) - ln(1 - p(I,T~)).

    Probabilities are clamped to [1e-12, 1 - 1e-12]; the number of clamped
    entries is written to ``diagnostics["itm_clamped"]`` when given.
    """
    ps = [p if isinstance(p, Tensor) else Tensor(np.atleast_1d(np.asarray(p, dtype=np.float64))) for p in
          (p_pos, p_img_neg, p_txt_neg)]
    clamped = sum(int(np.sum((p.data < PROB_FLOOR) | (p.data > 1 - PROB_FLOOR))) for p in ps)
    if diagnostics is not None:
        diagnostics["itm_clamped"] = diagnostics.get("itm_clamped", 0) + clamped
    pos, neg_i, neg_t = (ad.clamp(p, PROB_FLOOR, 1 - PROB_FLOOR) for p in ps)
    per_item = ad.neg(
        ad.add(ad.add(ad.log(pos), ad.log(ad.sub(1.0, neg_i))), ad.log(ad.sub(1.0, neg_t)))
    )
    return ad.mean(per_item)


def itm_loss_from_logits(pos: Tensor, img_neg: Tensor, txt_neg: Tensor) -> Tensor:
    """Same quantity as :func:`itm_loss` computed from two-way head logits.

    Column 1 of each (B, 2) logit matrix is the "matched" class. Working in
    log space avoids the probability clamp.
    """
    b = pos.shape[0]
    match = np.ones(b, dtype=np.int64)
    other = np.zeros(b, dtype=np.int64)
    terms = [ad.cross_entropy(pos, match), ad.cross_entropy(img_neg, other), ad.cross_entropy(txt_neg, other)]
    return ad.add(ad.add(terms[0], terms[1]), terms[2])


def sample_negatives(
    batch: int,
    rng: np.random.Generator,
    sim: np.ndarray | None = None,
    hard: bool = False,
) -> tuple[np.ndarray, np.ndarray] | None:
    """For each item i draw j != i for the image-negative and the text-negative role.

    Uniform over the other items by default. With ``hard`` and a similarity
    matrix (rows image, columns text), negatives are drawn with probability
    proportional to softmax similarity over the off-diagonal entries. Returns
    None when the batch has a single item.
    """
    if batch < 2:
        return None
    if not hard or sim is None:
        img = (np.arange(batch) + rng.integers(1, batch, size=batch)) % batch
        txt = (np.arange(batch) + rng.integers(1, batch, size=batch)) % batch
        return img, txt

    def draw(weights):
        w = np.exp(weights - weights.max(axis=1, keepdims=True))
        np.fill_diagonal(w, 0.0)
        w /= w.sum(axis=1, keepdims=True)
        return np.array([rng.choice(batch, p=row) for row in w])

    # text i's image negative ranks images by column i; image i's text negative by row i
    img = draw(np.asarray(sim).T)
    txt = draw(np.asarray(sim))
    return img, txt


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside the unit square")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def _box_tensor(b) -> Tensor:
    if isinstance(b, Tensor):
        return b
    if isinstance(b, BoundingBox):
        return Tensor(b.as_array())
    return Tensor(np.asarray(b, dtype=np.float64))


def giou(a, b) -> Tensor:
    """Generalized IoU of (cx, cy, w, h) boxes along the last axis."""
    a, b = _box_tensor(a), _box_tensor(b)
    for t in (a, b):
        if t.shape[-1] != 4:
            raise ad.ShapeError(f"giou: boxes need 4 coordinates, got shape {t.shape}")
        if np.any(t.data[..., 2:] <= 0):
            raise ValueError("giou: zero-area box")

    def corners(t):
        c = ad.take(t, (..., slice(0, 2)))
        half = ad.scale(ad.take(t, (..., slice(2, 4))), 0.5)
        return ad.sub(c, half), ad.add(c, half)

    def area(lo, hi):
        wh = ad.sub(hi, lo)
        return ad.mul(ad.take(wh, (..., 0)), ad.take(wh, (..., 1)))

    a_lo, a_hi = corners(a)
    b_lo, b_hi = corners(b)
    inter_wh = ad.relu(ad.sub(ad.minimum(a_hi, b_hi), ad.maximum(a_lo, b_lo)))
    inter = ad.mul(ad.take(inter_wh, (..., 0)), ad.take(inter_wh, (..., 1)))
    union = ad.sub(ad.add(area(a_lo, a_hi), area(b_lo, b_hi)), inter)
    enclose = area(ad.minimum(a_lo, b_lo), ad.maximum(a_hi, b_hi))
    iou = ad.div(inter, union)
    return ad.sub(iou, ad.div(ad.sub(enclose, union), enclose))


def bbp_loss(pred: Tensor, truth, has_box: np.ndarray | None = None) -> Tensor | None:
    """Mean over boxed items of (1 - GIoU(truth, pred)) + ||truth - pred||_1.

    Returns None when no item in the batch carries a box.
    """
    pred = _box_tensor(pred)
    truth = np.atleast_2d(truth.as_array() if isinstance(truth, BoundingBox) else np.asarray(truth, dtype=np.float64))
    if pred.data.ndim == 1:
        pred = ad.reshape(pred, (1, 4))
    if has_box is None:
        has_box = np.ones(truth.shape[0], dtype=bool)
    rows = np.flatnonzero(has_box)
    if rows.size == 0:
        return None
    p = ad.take(pred, rows)
    t = Tensor(truth[rows].astype(pred.dtype))
    l1 = ad.sum_(ad.abs_(ad.sub(t, p)), axis=-1)
    per_item = ad.add(ad.sub(1.0, giou(t, p)), l1)
    return ad.mean(per_item)


# ---------------------------------------------------------------------------
# masked image modeling


def mim_loss(pred: Tensor, target: Tensor, masks: np.ndarray) -> Tensor:
    """Feature regression at the masked patches and [CLS].

    ``pred`` and ``target`` are (B, 1 + P, D) with [CLS] at position 0 and
    ``masks`` is a (B, P) boolean matrix. Squared error is averaged over the
    feature dimension, then over the selected positions of each image, then
    over images. ``target`` should already be detached.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    b, n, d = pred.shape
    if target.shape != pred.shape:
        raise ad.ShapeError(f"mim_loss: pred {pred.shape} vs target {target.shape}")
    if masks.shape != (b, n - 1):
        raise ValueError(f"mim_loss: mask plan {masks.shape} does not match ({b}, {n - 1}) patches")
    chosen = np.concatenate([np.ones((b, 1), dtype=bool), masks], axis=1)
    weights = chosen / chosen.sum(axis=1, keepdims=True) / b
    per_pos = ad.mean(ad.squared_error(pred, target), axis=-1)
    return ad.sum_(ad.mul(per_pos, Tensor(weights.astype(pred.dtype))))
