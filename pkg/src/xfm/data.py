"""Deterministic shape-world corpus: captions, images and boxed image-text pairs.

Every sample is a pure function of ``(global seed, stream, sample seed)``;
the three streams draw from independent generators so equal sample seeds in
different streams give unrelated samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import TokenSequence

PAD, CLS, MASK = "[PAD]", "[CLS]", "[MASK]"
SPECIALS = (PAD, CLS, MASK)

COLORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "purple": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
SHAPES = ("circle", "square", "triangle")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
FILLERS = ("a", "the", "at", "in", "is", "there", "and", "with", "image", "shows")

PAIR_TEMPLATES = (
    "a {color} {shape} at the {row} {col}",
    "the {color} {shape} is at the {row} {col}",
    "there is a {color} {shape} in the {row} {col}",
)
CLAUSE_TEMPLATES = (
    "a {color} {shape} at the {row} {col}",
    "a {color} {shape} in the {row} {col}",
)

STREAMS = {"text": 1, "image": 2, "pair": 3, "eval": 4, "probe": 5}


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls) -> "Vocabulary":
        words = list(SPECIALS) + list(FILLERS) + list(COLORS) + list(SHAPES) + list(ROWS) + list(COLS)
        return cls(words)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def word_ids(self) -> np.ndarray:
        return np.arange(len(SPECIALS), len(self.words))

    def encode(self, caption: str) -> list[int]:
        return [self.cls_id] + [self.index[w] for w in caption.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if self.words[i] not in SPECIALS)


@dataclass
class SceneObject:
    shape: str
    color: str
    row: int
    col: int
    box: tuple[float, float, float, float]  # cx, cy, w, h normalized

    @property
    def cell(self) -> str:
        return f"{ROWS[self.row]} {COLS[self.col]}"


@dataclass
class ImageTextPairSample:
    image: np.ndarray  # (side, side, 3) float32 in [-1, 1]
    tokens: list[int]
    caption: str
    box: tuple[float, float, float, float] | None
    seed: int
    obj: SceneObject | None = None

    @property
    def label(self) -> int:
        """shape x color class index."""
        return SHAPES.index(self.obj.shape) * len(COLORS) + list(COLORS).index(self.obj.color)


@dataclass
class TextSample:
    tokens: list[int]
    caption: str
    seed: int


@dataclass
class ImageSample:
    image: np.ndarray
    objects: list[SceneObject]
    seed: int


@dataclass(frozen=True)
class ShapeWorldSpec:
    image_side: int = 32
    max_text_len: int = 16
    global_seed: int = 0


def _cell_bounds(side: int, k: int) -> tuple[int, int]:
    return k * side // 3, (k + 1) * side // 3


def shape_pixels(shape: str, size: int) -> np.ndarray:
    """Boolean footprint of a shape inside a size x size square, integer rasterization."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        # pixel centers (2x+1, 2y+1) against a circle centered at (size, size) in doubled units
        return (2 * xx + 1 - size) ** 2 + (2 * yy + 1 - size) ** 2 <= size * size
    if shape == "triangle":
        widths = np.arange(size) + 1
        left = (size - widths) // 2
        return (xx >= left[:, None]) & (xx < (left + widths)[:, None])
    raise ValueError(f"unknown shape {shape!r}")


class ShapeWorld:
    def __init__(self, spec: ShapeWorldSpec | None = None):
        self.spec = spec or ShapeWorldSpec()
        self.vocab = Vocabulary.build()

    def rng(self, stream: str, seed: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.global_seed, STREAMS[stream], int(seed)])

    # rendering -----------------------------------------------------------

    def _place(self, canvas: np.ndarray, rng, shape: str, color: str, row: int, col: int) -> SceneObject:
        side = canvas.shape[0]
        y0, y1 = _cell_bounds(side, row)
        x0, x1 = _cell_bounds(side, col)
        cell = min(y1 - y0, x1 - x0)
        size = int(rng.integers(max(4, cell // 2), cell + 1))
        top = y0 + int(rng.integers(0, y1 - y0 - size + 1))
        left = x0 + int(rng.integers(0, x1 - x0 - size + 1))
        foot = shape_pixels(shape, size)
        region = canvas[top : top + size, left : left + size]
        region[foot] = COLORS[color]
        ys, xs = np.nonzero(foot)
        ty0, ty1 = top + ys.min(), top + ys.max() + 1
        tx0, tx1 = left + xs.min(), left + xs.max() + 1
        box = ((tx0 + tx1) / (2 * side), (ty0 + ty1) / (2 * side), (tx1 - tx0) / side, (ty1 - ty0) / side)
        return SceneObject(shape, color, row, col, box)

    def _blank(self) -> np.ndarray:
        return np.zeros((self.spec.image_side, self.spec.image_side, 3), dtype=np.float32)

    def _random_object(self, rng):
        return (
            SHAPES[int(rng.integers(len(SHAPES)))],
            list(COLORS)[int(rng.integers(len(COLORS)))],
        )

    def generate_pair(self, seed: int) -> ImageTextPairSample:
        rng = self.rng("pair", seed)
        return self._pair_from(rng, seed)

    def _pair_from(self, rng, seed: int) -> ImageTextPairSample:
        canvas = self._blank()
        shape, color = self._random_object(rng)
        row, col = int(rng.integers(3)), int(rng.integers(3))
        obj = self._place(canvas, rng, shape, color, row, col)
        template = PAIR_TEMPLATES[int(rng.integers(len(PAIR_TEMPLATES)))]
        caption = template.format(color=color, shape=shape, row=ROWS[row], col=COLS[col])
        return ImageTextPairSample(canvas, self.vocab.encode(caption), caption, obj.box, int(seed), obj)

    def generate_eval_pair(self, seed: int) -> ImageTextPairSample:
        return self._pair_from(self.rng("eval", seed), seed)

    def generate_probe_pair(self, seed: int) -> ImageTextPairSample:
        return self._pair_from(self.rng("probe", seed), seed)

    def generate_text(self, seed: int) -> TextSample:
        rng = self.rng("text", seed)
        clauses = []
        for _ in range(int(rng.integers(1, 3))):
            shape, color = self._random_object(rng)
            template = CLAUSE_TEMPLATES[int(rng.integers(len(CLAUSE_TEMPLATES)))]
            clauses.append(
                template.format(color=color, shape=shape, row=ROWS[int(rng.integers(3))], col=COLS[int(rng.integers(3))])
            )
        caption = " and ".join(clauses)
        while len(caption.split()) + 1 > self.spec.max_text_len:
            clauses.pop()
            caption = " and ".join(clauses)
        return TextSample(self.vocab.encode(caption), caption, int(seed))

    def generate_image(self, seed: int) -> ImageSample:
        rng = self.rng("image", seed)
        canvas = self._blank()
        count = int(rng.integers(1, 4))
        cells = rng.choice(9, size=count, replace=False)
        objects = []
        for c in cells:
            shape, color = self._random_object(rng)
            objects.append(self._place(canvas, rng, shape, color, int(c) // 3, int(c) % 3))
        return ImageSample(canvas, objects, int(seed))


def caption_matches(sample: ImageTextPairSample) -> bool:
    """Rule-based check that the caption names the rendered object's color, shape and cell."""
    words = sample.caption.split()
    color = [w for w in words if w in COLORS]
    shape = [w for w in words if w in SHAPES]
    row = [w for w in words if w in ROWS]
    col = [w for w in words if w in COLS]
    obj = sample.obj
    return (
        color == [obj.color]
        and shape == [obj.shape]
        and row == [ROWS[obj.row]]
        and col == [COLS[obj.col]]
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class PairBatch:
    images: np.ndarray  # (B, S, S, 3)
    tokens: TokenSequence
    boxes: np.ndarray  # (B, 4); rows without a box are zero
    has_box: np.ndarray  # (B,) bool
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class TriBatch:
    text: TokenSequence | None
    images: np.ndarray | None
    pairs: PairBatch | None
    step: int = 0


@dataclass(frozen=True)
class BatchSpec:
    modality: str  # text | image | pair
    seeds: tuple[int, ...]
    step: int


DEFAULT_SIZES = {"text": 32, "image": 12, "pair": 12}
PAPER_SIZES = {"text": 8192, "image": 3072, "pair": 3072}


def schedule_batches(
    step: int,
    sizes: dict[str, int] | None = None,
    corpus: dict[str, int] | None = None,
    allow_empty: bool = False,
) -> dict[str, BatchSpec]:
    """Sample seeds for each stream at ``step``.

    Streaming mode gives step t the seed range [t * size, (t + 1) * size), so
    no sample repeats. With ``corpus`` (a fixed per-stream corpus size) every
    step cycles over the same seeds 0 .. corpus - 1.
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    out = {}
    for modality in ("text", "image", "pair"):
        n = int(sizes.get(modality, 0))
        if n < 1 and not allow_empty:
            raise ValueError(f"batch size for {modality} must be >= 1 (pass allow_empty to disable a stream)")
        if n < 1:
            continue
        if corpus is not None and modality in corpus:
            pool = int(corpus[modality])
            start = (step * n) % pool
            seeds = tuple((start + i) % pool for i in range(min(n, pool)))
        else:
            seeds = tuple(range(step * n, (step + 1) * n))
        out[modality] = BatchSpec(modality, seeds, step)
    return out


def pair_batch(samples: list[ImageTextPairSample], max_len: int) -> PairBatch:
    images = np.stack([s.image for s in samples])
    tokens = TokenSequence.from_lists([s.tokens for s in samples], length=max_len)
    boxes = np.array([s.box if s.box is not None else (0.0, 0.0, 0.0, 0.0) for s in samples], dtype=np.float64)
    has_box = np.array([s.box is not None for s in samples])
    labels = np.array([s.label if s.obj is not None else -1 for s in samples])
    return PairBatch(images, tokens, boxes, has_box, labels)


def materialize(world: ShapeWorld, specs: dict[str, BatchSpec]) -> TriBatch:
    max_len = world.spec.max_text_len
    text = images = pairs = None
    step = 0
    if "text" in specs:
        step = specs["text"].step
        text = TokenSequence.from_lists([world.generate_text(s).tokens for s in specs["text"].seeds], length=max_len)
    if "image" in specs:
        step = specs["image"].step
        images = np.stack([world.generate_image(s).image for s in specs["image"].seeds])
    if "pair" in specs:
        step = specs["pair"].step
        pairs = pair_batch([world.generate_pair(s) for s in specs["pair"].seeds], max_len)
    return TriBatch(text, images, pairs, step)


# ---------------------------------------------------------------------------
# on-disk corpus


def _write_image(path: Path, image: np.ndarray) -> None:
    image.astype("<f4").tofile(path.with_suffix(".f32"))
    path.with_suffix(".json").write_text(json.dumps({"side": int(image.shape[0]), "channels": int(image.shape[2])}))


def read_image(path: Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
    return flat.reshape(meta["side"], meta["side"], meta["channels"])


def write_corpus(world: ShapeWorld, out: Path, counts: dict[str, int]) -> None:
    """Materialize the first ``counts[stream]`` samples of each stream under ``out``.

    Layout: ``text/records.jsonl``, ``image/NNNNNN.{f32,json}``,
    ``pair/records.jsonl`` plus ``pair/NNNNNN.{f32,json}``. Images are raw
    little-endian float32 planes in (side, side, channels) order.
    """
    out = Path(out)
    for d in ("text", "image", "pair"):
        (out / d).mkdir(parents=True, exist_ok=True)
    with open(out / "text" / "records.jsonl", "w") as fh:
        for s in range(counts.get("text", 0)):
            t = world.generate_text(s)
            fh.write(json.dumps({"tokens": t.tokens, "caption": t.caption, "seed": t.seed}) + "\n")
    for s in range(counts.get("image", 0)):
        _write_image(out / "image" / f"{s:06d}", world.generate_image(s).image)
    with open(out / "pair" / "records.jsonl", "w") as fh:
        for s in range(counts.get("pair", 0)):
            p = world.generate_pair(s)
            _write_image(out / "pair" / f"{s:06d}", p.image)
            rec = {"tokens": p.tokens, "caption": p.caption, "seed": p.seed}
            if p.box is not None:
                rec["box"] = list(p.box)
            fh.write(json.dumps(rec) + "\n")

