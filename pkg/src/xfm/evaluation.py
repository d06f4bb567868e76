"""Two-stage retrieval, frozen-backbone linear probing and the report writer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PairBatch, ShapeWorld, ShapeWorldSpec, materialize, pair_batch, schedule_batches
from .encoders import XFM, FeatureSequence
from .gradflow import GradFlowConfig, verify_stop_gradient
from .trainer import OptimizerState, adamw_step, load_checkpoint

CHUNK = 256


@dataclass
class RetrievalReport:
    text_r1: float
    text_r5: float
    image_r1: float
    image_r5: float
    pool: int
    k: int
    # (query side, query index, candidate index) pairs scored by the fusion encoder
    scored: list[tuple[str, int, int]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("scored")
        return d


def _encode_pool(model: XFM, pairs: PairBatch):
    image = model.encode_image(pairs.images)
    text = model.encode_text(pairs.tokens)
    img_emb = model.project_for_itc(image, "vision").data
    txt_emb = model.project_for_itc(text, "text").data
    return image, text, img_emb, txt_emb


def _select(seq: FeatureSequence, rows) -> FeatureSequence:
    pad = None if seq.pad_mask is None else seq.pad_mask[rows]
    return FeatureSequence(ad.detach(ad.take(seq.values, rows)), seq.kind, pad)


def itm_match_prob(model: XFM, image: FeatureSequence, text: FeatureSequence, img_idx, txt_idx) -> np.ndarray:
    """p(match) for each (image, text) index pair, batched through the fusion encoder."""
    img_idx, txt_idx = np.asarray(img_idx), np.asarray(txt_idx)
    out = []
    for s in range(0, len(img_idx), CHUNK):
        fused = model.fuse(_select(text, txt_idx[s : s + CHUNK]), _select(image, img_idx[s : s + CHUNK]))
        probs = ad.softmax(model.itm_head(fused.cls()), axis=-1).data
        out.append(probs[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def rerank(stage1: np.ndarray, k: int, score_fn) -> np.ndarray:
    """Re-order the top-``k`` of each stage-1 ranking by ``score_fn``; the rest keep their place.

    ``stage1`` is (queries, candidates) similarity. ``score_fn(q, cands)``
    returns scores for candidates of query ``q``. Ties keep stage-1 order.
    """
    order = np.argsort(-stage1, axis=1, kind="stable")
    out = order.copy()
    for q in range(order.shape[0]):
        top = order[q, :k]
        scores = np.asarray(score_fn(q, top))
        out[q, :k] = top[np.argsort(-scores, kind="stable")]
    return out


def _recall(ranking: np.ndarray, at: int) -> float:
    truth = np.arange(ranking.shape[0])[:, None]
    return float(np.mean((ranking[:, :at] == truth).any(axis=1)))


def retrieval_eval(model: XFM, pairs: PairBatch, k: int = 16, itm_prob=None) -> RetrievalReport:
    """Rank by ITC cosine similarity, then re-rank the top ``k`` by ITM match probability.

    ``itm_prob(img_idx, txt_idx)`` may replace the model's match head.
    """
    n = len(pairs)
    if k < 1:
        raise ValueError(f"re-rank depth k must be >= 1, got {k}")
    if n < 1:
        raise ValueError("retrieval pool is empty")
    k = min(k, n)
    image, text, img_emb, txt_emb = _encode_pool(model, pairs)
    sim = img_emb @ txt_emb.T
    if itm_prob is None:
        def itm_prob(ii, tt):
            return itm_match_prob(model, image, text, ii, tt)

    scored: list[tuple[str, int, int]] = []
    order_t = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    order_i = np.argsort(-sim.T, axis=1, kind="stable")[:, :k]
    # score every needed pair in one batched pass
    ii = np.concatenate([np.repeat(np.arange(n), k), order_i.reshape(-1)])
    tt = np.concatenate([order_t.reshape(-1), np.repeat(np.arange(n), k)])
    probs = itm_prob(ii, tt)
    p_text = probs[: n * k].reshape(n, k)
    p_image = probs[n * k :].reshape(n, k)

    def text_scores(q, cands):
        assert np.array_equal(cands, order_t[q]), "re-rank saw a candidate outside stage-1 top-k"
        scored.extend(("image", q, int(c)) for c in cands)
        return p_text[q]

    def image_scores(q, cands):
        assert np.array_equal(cands, order_i[q]), "re-rank saw a candidate outside stage-1 top-k"
        scored.extend(("text", q, int(c)) for c in cands)
        return p_image[q]

    text_rank = rerank(sim, k, text_scores)  # image query -> texts
    image_rank = rerank(sim.T, k, image_scores)  # text query -> images
    at5 = min(5, n)
    return RetrievalReport(
        _recall(text_rank, 1), _recall(text_rank, at5), _recall(image_rank, 1), _recall(image_rank, at5), n, k, scored
    )


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeReport:
    accuracy: float
    train_accuracy: float
    classes: int
    train_size: int
    eval_size: int
    backbone_grad_free: bool


def vision_cls_features(model: XFM, images: np.ndarray) -> np.ndarray:
    feats = []
    for s in range(0, len(images), CHUNK):
        feats.append(model.encode_image(images[s : s + CHUNK]).cls().data)
    return np.concatenate(feats).astype(np.float64)


def linear_probe(
    model: XFM,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
    epochs: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> ProbeReport:
    """Fit a linear softmax classifier on frozen vision [CLS] features.

    The backbone sees a detached feature tensor, and every backbone gradient
    slot is checked to stay empty after each backward pass.
    """
    train_labels = np.asarray(train_labels)
    classes = np.unique(train_labels)
    if len(classes) < 2:
        raise ValueError("linear_probe needs at least two classes")
    if eval_images is None:
        eval_images, eval_labels = train_images, train_labels
    n_cls = int(max(train_labels.max(), np.max(eval_labels)) + 1)
    model.zero_grad()
    feats = Tensor(vision_cls_features(model, train_images))
    mu, sd = feats.data.mean(axis=0), feats.data.std(axis=0) + 1e-6
    x = Tensor((feats.data - mu) / sd)
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 0.01, size=(x.shape[1], n_cls)), requires_grad=True)
    b = Tensor(np.zeros(n_cls), requires_grad=True)
    state = OptimizerState(weight_decay=0.0, beta2=0.999)
    backbone = model.parameters()
    grad_free = True
    for _ in range(epochs):
        w.grad = b.grad = None
        loss = ad.cross_entropy(ad.add(ad.matmul(x, w), b), train_labels)
        loss.backward()
        grad_free &= all(p.grad is None for p in backbone)
        adamw_step({"w": w.data, "b": b.data}, {"w": w.grad, "b": b.grad}, state, lr)
    if not grad_free:
        raise AssertionError("linear probe leaked gradient into the frozen backbone")

    def accuracy(images, labels):
        z = (vision_cls_features(model, images) - mu) / sd
        return float(np.mean(np.argmax(z @ w.data + b.data, axis=1) == np.asarray(labels)))

    return ProbeReport(
        accuracy(eval_images, eval_labels),
        accuracy(train_images, train_labels),
        n_cls,
        len(train_images),
        len(eval_images),
        grad_free,
    )


# ---------------------------------------------------------------------------
# reports


def held_out_pairs(world: ShapeWorld, count: int, stream: str = "eval", start: int = 0) -> PairBatch:
    gen = world.generate_eval_pair if stream == "eval" else world.generate_probe_pair
    return pair_batch([gen(start + i) for i in range(count)], world.spec.max_text_len)


def gradcheck_report(model: XFM, seeds: int = 2, coords: int = 4) -> dict:
    from .gradcheck import objective_gradcheck

    return objective_gradcheck(model.config, seeds=range(seeds), coords_per_objective=coords, base_model=model)


def emit_reports(run_dir, pool: int = 64, k: int = 16, out_dir=None, checkpoint=None) -> tuple[bool, dict]:
    """Write retrieval.json, probe.json, stopgrad.json and gradcheck.json.

    Returns (all invariant suites passed, {file name: payload}).
    """
    run_dir = Path(run_dir)
    ckpt_dir = Path(checkpoint) if checkpoint is not None else run_dir / "checkpoint"
    if not (ckpt_dir / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt_dir}")
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(ckpt_dir)
    model = ckpt.build_model(np.float64)
    variant = ckpt.extra.get("variant", "all")
    world = ShapeWorld(ShapeWorldSpec(model.config.image_side, model.config.max_text_len, 0))

    pairs = held_out_pairs(world, pool)
    retrieval = retrieval_eval(model, pairs, k).to_dict()

    probe_train = held_out_pairs(world, 256, "probe")
    probe_eval = held_out_pairs(world, 256, "probe", start=256)
    probe = asdict(linear_probe(model, probe_train.images, probe_train.labels, probe_eval.images, probe_eval.labels))

    # all three streams, so MLM and image-stream MIM are checked as well
    sg_batch = materialize(world, schedule_batches(0, {"text": 4, "image": 4, "pair": 4}))
    stopgrad = verify_stop_gradient(model, sg_batch, GradFlowConfig.parse(variant)).to_dict()
    grad = gradcheck_report(model)

    payloads = {
        "retrieval.json": retrieval,
        "probe.json": probe,
        "stopgrad.json": stopgrad,
        "gradcheck.json": grad,
    }
    for name, payload in payloads.items():
        (out_dir / name).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    ok = stopgrad["passed"] and grad["passed"] and probe["backbone_grad_free"]
    return ok, payloads
