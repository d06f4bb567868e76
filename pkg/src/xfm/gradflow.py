"""Stop-gradient routing between the language and fusion encoders, detached
self-targets for masked image modeling, and the ablation switchboard."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .encoders import XFM, FeatureSequence

OBJECTIVES = ("mlm", "itc", "itm", "imlm", "bbp", "mim")


class Variant(str, enum.Enum):
    ALL = "all"
    S_MLM = "s-mlm"
    S_ITM = "s-itm"
    WOSTOP = "wostop"
    WOMIM = "womim"


@dataclass(frozen=True)
class GradFlowConfig:
    variant: Variant = Variant.ALL

    @classmethod
    def parse(cls, name: str | Variant) -> "GradFlowConfig":
        if isinstance(name, Variant):
            return cls(name)
        key = name.strip().lower().replace("_", "-")
        try:
            return cls(Variant(key))
        except ValueError:
            raise ValueError(f"unknown variant {name!r}; expected one of {[v.value for v in Variant]}") from None

    @property
    def detach_for_imlm(self) -> bool:
        return self.variant in (Variant.ALL, Variant.S_MLM, Variant.WOMIM)

    @property
    def detach_for_itm_bbp(self) -> bool:
        return self.variant in (Variant.ALL, Variant.S_ITM, Variant.WOMIM)

    @property
    def mim_enabled(self) -> bool:
        return self.variant is not Variant.WOMIM

    def detaches(self, objective: str) -> bool:
        if objective == "imlm":
            return self.detach_for_imlm
        if objective in ("itm", "bbp"):
            return self.detach_for_itm_bbp
        return False


def route_language_features(text: FeatureSequence, objective: str, config: GradFlowConfig) -> FeatureSequence:
    """Hand text features to the fusion encoder, severing the trace where configured.

    ITC (and MLM) always keep the live features.
    """
    if config.detaches(objective):
        return text.detach()
    return text


def compute_mim_targets(model: XFM, images, features: FeatureSequence | None = None) -> FeatureSequence:
    """Unmasked features from the live vision encoder, detached.

    ``features`` may carry an already computed unmasked forward pass of the
    same images, which is reused instead of encoding again.
    """
    if features is None:
        features = model.encode_image(images)
    return features.detach()


@dataclass
class StopGradReport:
    variant: str
    # objective -> group -> max |grad|
    max_abs_grad: dict[str, dict[str, float]] = field(default_factory=dict)
    expected_zero: dict[str, list[str]] = field(default_factory=dict)
    expected_nonzero: dict[str, list[str]] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "passed": self.passed,
            "max_abs_grad": self.max_abs_grad,
            "expected_zero": self.expected_zero,
            "expected_nonzero": self.expected_nonzero,
            "failures": self.failures,
        }


def expected_pattern(config: GradFlowConfig) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
    """(must be exactly zero, must be non-zero) parameter groups per objective."""
    zero: dict[str, list[str]] = {}
    nonzero: dict[str, list[str]] = {"mlm": ["language"], "itc": ["language", "vision"]}
    for obj in ("itm", "imlm", "bbp"):
        if config.detaches(obj):
            zero[obj] = ["language"]
            nonzero[obj] = ["vision"]
        else:
            nonzero[obj] = ["language", "vision"]
    if config.mim_enabled:
        zero["mim"] = ["language"]
        nonzero["mim"] = ["vision"]
    return zero, nonzero


def verify_stop_gradient(model: XFM, batch, config: GradFlowConfig, plan=None, seed: int = 0) -> StopGradReport:
    """Backpropagate each objective on its own and check the zero pattern.

    Zeros must be exact; "non-zero" means some element of the group has
    |g| > 0. Parameter gradients are cleared before and after.
    """
    from .step import compute_losses, plan_step

    if batch.pairs is None or len(batch.pairs) < 2 or not batch.pairs.has_box.any():
        raise ValueError("verify_stop_gradient needs a pair batch with B >= 2 and at least one box")
    if plan is None:
        plan = plan_step(batch, np.random.default_rng(seed), model.config)
    bundle, _ = compute_losses(model, batch, plan, config)
    zero, nonzero = expected_pattern(config)
    report = StopGradReport(config.variant.value, expected_zero=zero, expected_nonzero=nonzero)
    groups = model.param_groups()
    for obj, loss in bundle.present().items():
        model.zero_grad()
        loss.backward()
        row = {}
        for gname, params in groups.items():
            row[gname] = max((float(np.abs(p.grad).max()) if p.grad is not None else 0.0) for _, p in params)
        report.max_abs_grad[obj] = row
        for gname in zero.get(obj, []):
            if row[gname] != 0.0:
                report.failures.append(f"{obj}: {gname} gradient should be exactly zero, max |g| = {row[gname]!r}")
        for gname in nonzero.get(obj, []):
            if not row[gname] > 0.0:
                report.failures.append(f"{obj}: {gname} gradient should be non-zero")
    for obj in set(zero) | set(nonzero):
        if obj not in bundle.present():
            report.failures.append(f"{obj}: objective missing from the loss bundle")
    if not config.mim_enabled and bundle.mim is not None:
        report.failures.append("mim: present although the variant disables it")
    model.zero_grad()
    return report
