"""AdamW with a warmup/linear-decay schedule, the tri-stream training loop and
the on-disk checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .data import DEFAULT_SIZES, PAPER_SIZES, ShapeWorld, ShapeWorldSpec, materialize, schedule_batches
from .encoders import XFM, EncoderConfig
from .gradflow import GradFlowConfig
from .objectives import LOSS_NAMES
from .step import compute_losses, plan_step

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "xfm-checkpoint-v1"


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def decays(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay applies to matrices and embedding tables, not to biases, norms or scalars."""
    return len(shape) >= 2


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    decay_mask: dict[str, bool] | None = None,
) -> bool:
    """In-place bias-corrected Adam update with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)

    Parameters whose gradient is None are treated as receiving zero gradient.
    If any gradient is non-finite the whole step is skipped and False returned.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            state.skipped += 1
            log.warning("skipping optimizer step %d: non-finite gradient in %s", state.step + 1, name)
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = state.weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        if wd:
            update = update + wd * p
        p -= lr * update
    return True


@dataclass(frozen=True)
class LrSchedule:
    peak: float = 1e-3
    warmup: int = 100
    total: int = 2000


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear ramp 0 -> peak over [0, warmup], then linear decay to 0 at ``total``."""
    if step < 0 or step > sched.total:
        raise ValueError(f"step {step} outside [0, {sched.total}]")
    if step <= sched.warmup:
        return sched.peak * step / sched.warmup if sched.warmup else sched.peak
    return sched.peak * (sched.total - step) / (sched.total - sched.warmup)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: EncoderConfig
    step: int
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    def build_model(self, dtype=np.float64) -> XFM:
        model = XFM(self.config, seed=0, dtype=dtype)
        model.load_state_dict(self.tensors)
        return model


def save_checkpoint(path, model: XFM, step: int, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``tensors.bin`` (little-endian float32) atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    index, offset = [], 0
    with open(tmp / "tensors.bin", "wb") as fh:
        for name, p in model.named_parameters():
            blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            fh.write(blob)
            index.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "step": int(step),
        "dtype": "<f4",
        "total_bytes": offset,
        "tensors": index,
        "extra": extra or {},
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    old = path.with_name(path.name + ".old")
    if path.exists():
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, model: XFM | None = None) -> Checkpoint:
    """Read a checkpoint; if ``model`` is given, validate against it and load into it."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    config = EncoderConfig.from_dict(manifest["config"])
    raw = (path / "tensors.bin").read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise CheckpointError(f"tensor blob has {len(raw)} bytes, manifest expects {manifest['total_bytes']}")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 4 * count:
            raise CheckpointError(f"tensor {entry['name']}: {entry['nbytes']} bytes for shape {shape}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    ckpt = Checkpoint(config, manifest["step"], tensors, manifest.get("extra", {}))
    if model is not None:
        expected = dict(model.named_parameters())
        for name, p in expected.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if tensors[name].shape != p.shape:
                raise CheckpointError(f"tensor {name}: checkpoint shape {tensors[name].shape} != model {p.shape}")
        unknown = set(tensors) - set(expected)
        if unknown:
            raise CheckpointError(f"checkpoint has unknown tensor {sorted(unknown)[0]}")
        model.load_state_dict(tensors)
    return ckpt


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    variant: str = "all"
    seed: int = 0
    steps: int = 2000
    warmup: int = 100
    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98  # 0.999 is the other common choice; both are selectable
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    corpus: dict | None = None  # fixed per-stream corpus sizes, None = streaming
    allow_empty_streams: bool = False
    mlm_rate: float = 0.15
    mim_ratio: float = 0.4
    hard_negatives: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = PRESETS[preset]() if preset else cls()
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict({**base.encoder.to_dict(), **d["encoder"]})
        return replace(base, **d)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup, self.steps)


def paper_preset() -> RunConfig:
    """Schedule and batch sizes quoted for the full-scale run (not desk-runnable)."""
    return RunConfig(steps=200_000, warmup=2500, peak_lr=1e-4, batch_sizes=dict(PAPER_SIZES))


def overfit_preset() -> RunConfig:
    return RunConfig(
        batch_sizes={"text": 16, "image": 8, "pair": 8},
        corpus={"text": 16, "image": 8, "pair": 8},
    )


PRESETS = {"desk": RunConfig, "paper": paper_preset, "overfit": overfit_preset}


@dataclass
class TrainResult:
    model: XFM
    metrics: list[dict]
    status: str  # ok | aborted
    out_dir: Path | None = None


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0x5EED, int(step)])


def metrics_record(step: int, lr: float, losses: dict) -> dict:
    rec = {"step": step, "lr": lr}
    for name in LOSS_NAMES + ("total",):
        rec[name] = losses.get(name)
    return rec


def train(cfg: RunConfig, out_dir=None, world: ShapeWorld | None = None) -> TrainResult:
    """Run ``cfg.steps`` tri-stream steps; write metrics.jsonl and checkpoint/ under ``out_dir``."""
    dtype = np.dtype(cfg.dtype)
    flow = GradFlowConfig.parse(cfg.variant)
    world = world or ShapeWorld(ShapeWorldSpec(cfg.encoder.image_side, cfg.encoder.max_text_len, cfg.seed))
    model = XFM(cfg.encoder, seed=cfg.seed, dtype=dtype)
    state = OptimizerState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    sched = cfg.schedule()
    decay_mask = {name: decays(name, p.shape) for name, p in model.named_parameters()}
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        metrics_fh = open(out / "metrics.jsonl", "w")
    metrics, status = [], "ok"
    try:
        for step in range(1, cfg.steps + 1):
            specs = schedule_batches(step - 1, cfg.batch_sizes, cfg.corpus, cfg.allow_empty_streams)
            batch = materialize(world, specs)
            plan = plan_step(batch, _step_rng(cfg.seed, step), cfg.encoder, cfg.mlm_rate, cfg.mim_ratio, cfg.hard_negatives)
            try:
                bundle, _ = compute_losses(model, batch, plan, flow)
            except NonFiniteError as err:
                log.error("step %d: non-finite forward pass (%s); aborting", step, err)
                status = "aborted"
                break
            lr = lr_at(step, sched)
            model.zero_grad()
            bundle.total.backward()
            params = {n: p.data for n, p in model.named_parameters()}
            grads = {n: p.grad for n, p in model.named_parameters()}
            adamw_step(params, grads, state, lr, decay_mask)
            rec = metrics_record(step, lr, bundle.as_floats())
            metrics.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
                save_checkpoint(out / "checkpoint", model, step, {"variant": flow.variant.value})
        if out is not None and status == "ok":
            save_checkpoint(out / "checkpoint", model, len(metrics), {"variant": flow.variant.value})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.zero_grad()
    return TrainResult(model, metrics, status, out)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([values.mean()]) if len(values) else values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def trapezoid_area(sched: LrSchedule) -> float:
    return 0.5 * sched.peak * sched.total


def isfinite_metrics(rec: dict) -> bool:
    return all(v is None or math.isfinite(v) for k, v in rec.items() if k not in ("step",))
