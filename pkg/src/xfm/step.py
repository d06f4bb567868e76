"""One tri-stream forward pass: text batch -> MLM, image batch -> MIM, pair batch
-> ITC, ITM, IMLM, BBP and pair-stream MIM, with stop-gradient routing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .data import TriBatch, Vocabulary
from .encoders import XFM, EncoderConfig, FeatureSequence
from .gradflow import GradFlowConfig, compute_mim_targets, route_language_features
from .masking import MaskedText, block_masks, mask_text


@dataclass
class StepPlan:
    """All randomness a step consumes, drawn before the forward pass."""

    text_mask: MaskedText | None = None
    pair_text_mask: MaskedText | None = None
    image_masks: np.ndarray | None = None  # (B_img, P) bool
    pair_image_masks: np.ndarray | None = None  # (B_pair, P) bool
    negative_seed: int = 0
    hard_negatives: bool = False


def plan_step(
    batch: TriBatch,
    rng: np.random.Generator,
    cfg: EncoderConfig,
    mlm_rate: float = 0.15,
    mim_ratio: float = 0.4,
    hard_negatives: bool = False,
) -> StepPlan:
    vocab = Vocabulary.build()
    words = vocab.word_ids[vocab.word_ids < cfg.vocab_size]
    grid = cfg.grid_side
    plan = StepPlan(hard_negatives=hard_negatives)
    if batch.text is not None:
        plan.text_mask = mask_text(batch.text, mlm_rate, rng, vocab.mask_id, words)
    if batch.images is not None:
        plan.image_masks = block_masks(len(batch.images), grid, grid, mim_ratio, rng)
    if batch.pairs is not None:
        plan.pair_text_mask = mask_text(batch.pairs.tokens, mlm_rate, rng, vocab.mask_id, words)
        plan.pair_image_masks = block_masks(len(batch.pairs), grid, grid, mim_ratio, rng)
    plan.negative_seed = int(rng.integers(2**31))
    return plan


def _select(seq: FeatureSequence, rows: np.ndarray) -> FeatureSequence:
    pad = None if seq.pad_mask is None else seq.pad_mask[rows]
    return FeatureSequence(ad.take(seq.values, rows), seq.kind, pad)


@dataclass
class StepInfo:
    itm_skipped: bool = False
    negatives: tuple[np.ndarray, np.ndarray] | None = None
    diagnostics: dict = field(default_factory=dict)
    itm_logits: np.ndarray | None = None
    bbp_pred: np.ndarray | None = None


def compute_losses(
    model: XFM,
    batch: TriBatch,
    plan: StepPlan,
    flow: GradFlowConfig,
    target_encoder: XFM | None = None,
    only: set[str] | None = None,
) -> tuple[obj.LossBundle, StepInfo]:
    """Forward every stream and return the loss bundle with its total.

    ``target_encoder`` replaces the live vision encoder as the source of MIM
    targets (used to check that detached live targets carry no gradient).
    ``only`` restricts the pass to a subset of objectives.
    """
    bundle = obj.LossBundle()
    info = StepInfo()
    want = set(obj.LOSS_NAMES) if only is None else set(only)

    def targets_for(images, live: FeatureSequence | None):
        if target_encoder is not None:
            return target_encoder.encode_image(images).detach()
        return compute_mim_targets(model, images, live)

    mim_terms = []

    if "mlm" in want and batch.text is not None and plan.text_mask is not None:
        feats = model.encode_text(plan.text_mask.tokens())
        bundle.mlm = obj.mlm_loss(model.mlm_head(feats.values), plan.text_mask)

    if batch.pairs is not None and want & {"itc", "itm", "imlm", "bbp", "mim"}:
        pairs = batch.pairs
        b = len(pairs)
        image = model.encode_image(pairs.images)
        text = model.encode_text(pairs.tokens)

        img_emb = model.project_for_itc(image, "vision")
        txt_emb = model.project_for_itc(route_language_features(text, "itc", flow), "text")
        sim = obj.similarity_matrix(img_emb, txt_emb, model.logit_scale)
        bundle.itc = obj.itc_loss(sim)

        rng = np.random.default_rng(plan.negative_seed)
        negatives = obj.sample_negatives(b, rng, sim.data, hard=plan.hard_negatives)
        info.negatives = negatives
        info.itm_skipped = negatives is None
        text_rows, image_rows = [np.arange(b)], [np.arange(b)]
        if negatives is not None:
            img_neg, txt_neg = negatives
            text_rows += [np.arange(b), txt_neg]
            image_rows += [img_neg, np.arange(b)]
        text_rows, image_rows = np.concatenate(text_rows), np.concatenate(image_rows)

        if "itm" not in want:
            text_rows, image_rows = np.arange(b), np.arange(b)

        # ITM and BBP share one detach decision, so one fusion pass serves both
        if want & {"itm", "bbp"}:
            itm_text = route_language_features(text, "itm", flow)
            fused = model.fuse(_select(itm_text, text_rows), _select(image, image_rows))
            cls = fused.cls()
            if negatives is not None and "itm" in want:
                logits = model.itm_head(cls)
                info.itm_logits = logits.data
                bundle.itm = obj.itm_loss_from_logits(
                    ad.take(logits, slice(0, b)), ad.take(logits, slice(b, 2 * b)), ad.take(logits, slice(2 * b, 3 * b))
                )
            if "bbp" in want:
                pred_box = ad.sigmoid(model.bbp_head(ad.take(cls, slice(0, b))))
                info.bbp_pred = pred_box.data
                bundle.bbp = obj.bbp_loss(pred_box, pairs.boxes, pairs.has_box)

        if "imlm" in want and plan.pair_text_mask is not None:
            masked = model.encode_text(plan.pair_text_mask.tokens())
            fused_m = model.fuse(route_language_features(masked, "imlm", flow), image)
            bundle.imlm = obj.imlm_loss(model.imlm_head(fused_m.values), plan.pair_text_mask)

        if "mim" in want and flow.mim_enabled and plan.pair_image_masks is not None:
            pred = model.encode_image(pairs.images, plan.pair_image_masks)
            target = targets_for(pairs.images, image)
            mim_terms.append(obj.mim_loss(pred.values, target.values, plan.pair_image_masks))

    if "mim" in want and flow.mim_enabled and batch.images is not None and plan.image_masks is not None:
        pred = model.encode_image(batch.images, plan.image_masks)
        target = targets_for(batch.images, None)
        mim_terms.append(obj.mim_loss(pred.values, target.values, plan.image_masks))

    if mim_terms:
        mim = mim_terms[0]
        for t in mim_terms[1:]:
            mim = ad.add(mim, t)
        bundle.mim = mim

    if bundle.present():
        obj.total_loss(bundle)
    return bundle, info
