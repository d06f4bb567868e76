"""Language, vision and fusion transformers plus the task heads around them.

All three encoders use pre-norm residual blocks (``x + f(LN(x))``) and a final
layer norm, with learned absolute position embeddings. The fusion encoder puts
a cross-attention sub-layer between self-attention and the feed-forward block;
its queries come from the text stream, its keys and values from every vision
position including [CLS].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    text_layers: int = 2
    vision_layers: int = 2
    fusion_layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    vocab_size: int = 64
    max_text_len: int = 16
    image_side: int = 32
    patch_side: int = 4
    channels: int = 3
    projection_dim: int = 32

    def __post_init__(self):
        if min(self.text_layers, self.vision_layers, self.fusion_layers) < 1:
            raise ValueError("encoder layer counts must be >= 1")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.hidden_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class TokenSequence:
    """A padded batch of token ids. Position 0 of every row is the start token."""

    ids: np.ndarray
    pad_mask: np.ndarray  # True at padding positions

    def __post_init__(self):
        self.ids = np.atleast_2d(np.asarray(self.ids, dtype=np.int64))
        self.pad_mask = np.atleast_2d(np.asarray(self.pad_mask, dtype=bool))
        if self.ids.shape != self.pad_mask.shape:
            raise ValueError(f"ids {self.ids.shape} and pad_mask {self.pad_mask.shape} differ")

    @classmethod
    def from_lists(cls, rows: list[list[int]], length: int | None = None, pad_id: int = 0) -> "TokenSequence":
        length = length or max(len(r) for r in rows)
        ids = np.full((len(rows), length), pad_id, dtype=np.int64)
        pad = np.ones((len(rows), length), dtype=bool)
        for i, r in enumerate(rows):
            if len(r) > length:
                raise ValueError(f"row {i} has {len(r)} tokens, limit {length}")
            ids[i, : len(r)] = r
            pad[i, : len(r)] = False
        return cls(ids, pad)

    def __len__(self) -> int:
        return self.ids.shape[0]

    def eligible(self) -> np.ndarray:
        """Positions that may be masked: not padding and not the start token."""
        ok = ~self.pad_mask
        ok[:, 0] = False
        return ok

    def select(self, rows) -> "TokenSequence":
        rows = np.asarray(rows)
        return TokenSequence(self.ids[rows], self.pad_mask[rows])

    def with_ids(self, ids: np.ndarray) -> "TokenSequence":
        return TokenSequence(ids, self.pad_mask.copy())


@dataclass
class FeatureSequence:
    values: Tensor  # (batch, length, hidden)
    kind: str  # text | vision | fused
    pad_mask: np.ndarray | None = None
    attentions: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def shape(self):
        return self.values.shape

    def cls(self) -> Tensor:
        return ad.take(self.values, (slice(None), 0))

    def detach(self) -> "FeatureSequence":
        return FeatureSequence(ad.detach(self.values), self.kind, self.pad_mask, self.attentions)


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter container; parameters are attribute ``Tensor``s."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _const(shape, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype, bias: bool = True):
        self.weight = _param(rng, (d_in, d_out), dtype)
        if bias:
            self.bias = _const((d_out,), 0.0, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(f"linear: input width {x.shape[-1]} != weight rows {self.weight.shape[0]}")
        y = ad.matmul(x, self.weight)
        if hasattr(self, "bias"):
            y = ad.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype):
        self.gamma = _const((dim,), 1.0, dtype)
        self.beta = _const((dim,), 0.0, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def key_bias(pad_mask: np.ndarray | None, batch: int, length: int, dtype) -> np.ndarray | None:
    """Additive attention bias of shape (batch, 1, 1, length) that hides padding."""
    if pad_mask is None or not pad_mask.any():
        return None
    return np.where(pad_mask, NEG_INF, 0.0).astype(dtype).reshape(batch, 1, 1, length)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype):
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return ad.transpose(ad.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, context: Tensor, bias: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
        b, n, d = x.shape
        if context.shape[-1] != d:
            raise ad.ShapeError(f"attention: query width {d} != context width {context.shape[-1]}")
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        if bias is not None:
            scores = ad.add(scores, Tensor(bias))
        probs = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return self.out(ctx), probs.data


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Self-attention block followed by a feed-forward block."""

    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.ln_attn = LayerNorm(cfg.hidden_dim, dtype)
        self.attn = Attention(cfg.hidden_dim, cfg.heads, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.hidden_dim, dtype)
        self.ffn = FeedForward(cfg.hidden_dim, cfg.mlp_dim, rng, dtype)

    def __call__(self, x: Tensor, bias) -> tuple[Tensor, dict]:
        h = self.ln_attn(x)
        a, probs = self.attn(h, h, bias)
        x = ad.add(x, a)
        x = ad.add(x, self.ffn(self.ln_ffn(x)))
        return x, {"self": probs}


class FusionLayer(Module):
    """Self-attention, then cross-attention into the image, then feed-forward."""

    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.ln_attn = LayerNorm(cfg.hidden_dim, dtype)
        self.attn = Attention(cfg.hidden_dim, cfg.heads, rng, dtype)
        self.ln_cross = LayerNorm(cfg.hidden_dim, dtype)
        self.cross = Attention(cfg.hidden_dim, cfg.heads, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.hidden_dim, dtype)
        self.ffn = FeedForward(cfg.hidden_dim, cfg.mlp_dim, rng, dtype)

    def __call__(self, x: Tensor, image: Tensor, bias) -> tuple[Tensor, dict]:
        h = self.ln_attn(x)
        a, self_probs = self.attn(h, h, bias)
        x = ad.add(x, a)
        c, cross_probs = self.cross(self.ln_cross(x), image, None)
        x = ad.add(x, c)
        x = ad.add(x, self.ffn(self.ln_ffn(x)))
        return x, {"self": self_probs, "cross": cross_probs}


# ---------------------------------------------------------------------------
# encoders


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self._cfg = cfg
        self.token_embed = _param(rng, (cfg.vocab_size, cfg.hidden_dim), dtype)
        self.pos_embed = _param(rng, (cfg.max_text_len, cfg.hidden_dim), dtype)
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.text_layers)]
        self.ln_final = LayerNorm(cfg.hidden_dim, dtype)

    def __call__(self, tokens: TokenSequence) -> FeatureSequence:
        ids = tokens.ids
        b, n = ids.shape
        if n > self._cfg.max_text_len:
            raise ValueError(f"text length {n} exceeds max_text_len {self._cfg.max_text_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self._cfg.vocab_size):
            raise ValueError(f"token id out of vocabulary [0, {self._cfg.vocab_size})")
        x = ad.add(ad.embedding(self.token_embed, ids), ad.take(self.pos_embed, slice(0, n)))
        bias = key_bias(tokens.pad_mask, b, n, x.dtype)
        maps = []
        for layer in self.layers:
            x, probs = layer(x, bias)
            maps.append(probs)
        return FeatureSequence(self.ln_final(x), "text", tokens.pad_mask, maps)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S, C) pixels -> (B, (S/patch)^2, patch*patch*C), row-major over the grid."""
    b, h, w, c = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch * patch * c)


def _mask_matrix(mask, batch: int, num_patches: int) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, (list, tuple)):
        rows = [np.asarray(m.mask if hasattr(m, "mask") else m, dtype=bool).reshape(-1) for m in mask]
        mask = np.stack(rows)
    elif hasattr(mask, "mask"):
        mask = np.broadcast_to(np.asarray(mask.mask, dtype=bool).reshape(1, -1), (batch, num_patches))
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, mask.shape[0]))
    if mask.shape != (batch, num_patches):
        raise ValueError(f"mask plan shape {mask.shape} does not match ({batch}, {num_patches}) patches")
    return mask


class VisionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self._cfg = cfg
        patch_dim = cfg.patch_side**2 * cfg.channels
        self.patch_embed = Linear(patch_dim, cfg.hidden_dim, rng, dtype)
        self.cls_token = _param(rng, (1, 1, cfg.hidden_dim), dtype)
        self.mask_token = _param(rng, (1, 1, cfg.hidden_dim), dtype)
        self.pos_embed = _param(rng, (cfg.num_patches + 1, cfg.hidden_dim), dtype)
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.vision_layers)]
        self.ln_final = LayerNorm(cfg.hidden_dim, dtype)

    def __call__(self, images: np.ndarray, mask=None) -> FeatureSequence:
        cfg = self._cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (cfg.image_side, cfg.image_side, cfg.channels):
            raise ValueError(
                f"image geometry {images.shape[1:]} != ({cfg.image_side}, {cfg.image_side}, {cfg.channels})"
            )
        b = images.shape[0]
        dtype = self.pos_embed.dtype
        x = self.patch_embed(Tensor(patchify(images.astype(dtype, copy=False), cfg.patch_side)))
        m = _mask_matrix(mask, b, cfg.num_patches)
        if m is not None and m.any():
            keep = Tensor((~m)[..., None].astype(dtype))
            hide = Tensor(m[..., None].astype(dtype))
            x = ad.add(ad.mul(x, keep), ad.mul(self.mask_token, hide))
        cls = ad.mul(self.cls_token, Tensor(np.ones((b, 1, 1), dtype=dtype)))
        x = ad.add(ad.concat([cls, x], axis=1), self.pos_embed)
        maps = []
        for layer in self.layers:
            x, probs = layer(x, None)
            maps.append(probs)
        return FeatureSequence(self.ln_final(x), "vision", None, maps)


class FusionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.layers = [FusionLayer(cfg, rng, dtype) for _ in range(cfg.fusion_layers)]
        self.ln_final = LayerNorm(cfg.hidden_dim, dtype)

    def __call__(self, text: FeatureSequence, image: FeatureSequence) -> FeatureSequence:
        x, img = text.values, image.values
        if x.shape[-1] != img.shape[-1]:
            raise ad.ShapeError(f"fuse: text width {x.shape[-1]} != image width {img.shape[-1]}")
        if x.shape[0] != img.shape[0]:
            raise ad.ShapeError(f"fuse: text batch {x.shape[0]} != image batch {img.shape[0]}")
        b, n, _ = x.shape
        bias = key_bias(text.pad_mask, b, n, x.dtype)
        maps = []
        for layer in self.layers:
            x, probs = layer(x, img, bias)
            maps.append(probs)
        return FeatureSequence(self.ln_final(x), "fused", text.pad_mask, maps)


def l2_normalize(x: Tensor) -> Tensor:
    sq = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    if np.any(sq.data == 0):
        raise ValueError("l2_normalize: zero vector cannot be normalized")
    return ad.mul(x, ad.power(sq, -0.5))


class XFM(Module):
    """The three encoders together with projection and task heads."""

    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0, dtype=np.float64):
        cfg = cfg or EncoderConfig()
        self._cfg = cfg
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.text_encoder = TextEncoder(cfg, rng, dtype)
        self.vision_encoder = VisionEncoder(cfg, rng, dtype)
        self.fusion_encoder = FusionEncoder(cfg, rng, dtype)
        self.text_proj = Linear(cfg.hidden_dim, cfg.projection_dim, rng, dtype)
        self.vision_proj = Linear(cfg.hidden_dim, cfg.projection_dim, rng, dtype)
        # CLIP-style log inverse temperature
        self.logit_scale = _const((), math.log(1 / 0.07), dtype)
        self.mlm_head = Linear(cfg.hidden_dim, cfg.vocab_size, rng, dtype)
        self.imlm_head = Linear(cfg.hidden_dim, cfg.vocab_size, rng, dtype)
        self.itm_head = Linear(cfg.hidden_dim, 2, rng, dtype)
        self.bbp_head = Linear(cfg.hidden_dim, 4, rng, dtype)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    @property
    def dtype(self):
        return self._dtype

    def encode_text(self, tokens: TokenSequence) -> FeatureSequence:
        return self.text_encoder(tokens)

    def encode_image(self, images, mask=None) -> FeatureSequence:
        return self.vision_encoder(images, mask)

    def fuse(self, text: FeatureSequence, image: FeatureSequence) -> FeatureSequence:
        return self.fusion_encoder(text, image)

    def project_for_itc(self, features: FeatureSequence, side: str) -> Tensor:
        return project_for_itc(features, self.text_proj if side == "text" else self.vision_proj)

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"language": [], "vision": [], "fusion": [], "heads": []}
        for name, p in self.named_parameters():
            if name.startswith("text_encoder."):
                groups["language"].append((name, p))
            elif name.startswith("vision_encoder."):
                groups["vision"].append((name, p))
            elif name.startswith("fusion_encoder."):
                groups["fusion"].append((name, p))
            else:
                groups["heads"].append((name, p))
        return groups


def project_for_itc(features: FeatureSequence, proj: Linear) -> Tensor:
    """Start/[CLS] vector -> linear map -> unit L2 norm, shape (batch, projection_dim)."""
    if features.values.shape[1] == 0:
        raise ValueError("project_for_itc: empty feature sequence")
    return l2_normalize(proj(features.cls()))
