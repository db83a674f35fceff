"""Auxiliary-supervision regimes and the optimizer/scheduler pair.

A regime decides which encoder stage (if any) carries the auxiliary loss at a
given epoch.  The switched regime moves the tap once, at
``floor(switch_fraction * total_epochs)``; with the defaults (stage 2 to
stage 1 at fraction 0.5 over 120 epochs) the tap sits at stage 2 for epochs
0..59 and at stage 1 for epochs 60..119.  The switch changes loss wiring
only; it must never touch parameters or optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Array, Tensor


@dataclass(frozen=True)
class Regime:
    """Auxiliary-loss plan: ``normal``, ``single`` (fixed tap), or ``switched``."""

    kind: str
    stage: int | None = None
    from_stage: int | None = None
    to_stage: int | None = None
    switch_fraction: float = 0.5

    KINDS = ("normal", "single", "switched")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"regime kind must be one of {self.KINDS}, got {self.kind!r}")
        if self.kind == "single" and (self.stage is None or self.stage < 1):
            raise ValueError("single regime needs a positive stage")
        if self.kind == "switched":
            if self.from_stage is None or self.to_stage is None:
                raise ValueError("switched regime needs from_stage and to_stage")
            if self.from_stage < 1 or self.to_stage < 1:
                raise ValueError("switched regime stages must be positive")
            if not 0.0 < self.switch_fraction < 1.0:
                raise ValueError("switch_fraction must lie strictly inside (0, 1)")

    @classmethod
    def normal(cls) -> "Regime":
        return cls(kind="normal")

    @classmethod
    def single(cls, stage: int = 2) -> "Regime":
        return cls(kind="single", stage=stage)

    @classmethod
    def switched(cls, from_stage: int = 2, to_stage: int = 1, fraction: float = 0.5) -> "Regime":
        return cls(kind="switched", from_stage=from_stage, to_stage=to_stage,
                   switch_fraction=fraction)

    @classmethod
    def parse(cls, text: str) -> "Regime":
        """Parse ``normal``, ``single[:stage]`` or ``switched[:from:to[:fraction]]``."""
        parts = text.strip().lower().split(":")
        kind = parts[0]
        if kind == "normal":
            if len(parts) > 1:
                raise ValueError(f"normal regime takes no arguments: {text!r}")
            return cls.normal()
        if kind == "single":
            if len(parts) > 2:
                raise ValueError(f"bad single regime spec: {text!r}")
            return cls.single(int(parts[1]) if len(parts) == 2 else 2)
        if kind == "switched":
            if len(parts) > 4:
                raise ValueError(f"bad switched regime spec: {text!r}")
            from_stage = int(parts[1]) if len(parts) >= 2 else 2
            to_stage = int(parts[2]) if len(parts) >= 3 else 1
            fraction = float(parts[3]) if len(parts) == 4 else 0.5
            return cls.switched(from_stage, to_stage, fraction)
        raise ValueError(f"unknown regime {text!r}")

    def spec_string(self) -> str:
        if self.kind == "normal":
            return "normal"
        if self.kind == "single":
            return f"single:{self.stage}"
        return f"switched:{self.from_stage}:{self.to_stage}:{self.switch_fraction:g}"


def aux_stage_for_epoch(regime: Regime, epoch: int, total_epochs: int) -> int | None:
    """Stage carrying the auxiliary loss at ``epoch``, or ``None``."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if regime.kind == "normal":
        return None
    if regime.kind == "single":
        return regime.stage
    switch_epoch = int(np.floor(regime.switch_fraction * total_epochs))
    return regime.from_stage if epoch < switch_epoch else regime.to_stage


@dataclass
class OptState:
    """Adam moments plus the plateau-scheduler bookkeeping, in parameter order."""

    names: list[str]
    m: list[Array]
    v: list[Array]
    step_count: int = 0
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # Plateau scheduler (max mode): halve lr after `patience` is exceeded.
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-7
    plateau_counter: int = 0
    best_metric: float = field(default=-np.inf)

    @classmethod
    def for_parameters(cls, named_params: dict[str, Tensor], lr: float = 5e-5, **kwargs) -> "OptState":
        names = list(named_params)
        return cls(
            names=names,
            m=[np.zeros_like(named_params[n].data) for n in names],
            v=[np.zeros_like(named_params[n].data) for n in names],
            lr=float(lr),
            **kwargs,
        )


def adam_step(params: list[Tensor], state: OptState, grad_clip: float = 0.0) -> None:
    """One bias-corrected Adam update in place; a missing grad counts as zero.

    ``grad_clip > 0`` rescales the global gradient norm down to that value
    first (escape hatch for exploding steps; off by default).
    """
    if len(params) != len(state.m):
        raise ValueError(f"got {len(params)} params, state tracks {len(state.m)}")
    grads: list[Array] = []
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            name = state.names[i] if i < len(state.names) else f"param{i}"
            raise FloatingPointError(f"non-finite gradient for {name}")
        grads.append(g)
    if grad_clip > 0.0:
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if total > grad_clip:
            scale = grad_clip / total
            grads = [g * scale for g in grads]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def plateau_step(state: OptState, val_metric: float) -> bool:
    """Reduce-on-plateau (max mode) on a validation metric; returns True on decay.

    An epoch improves iff ``val_metric > best + min_delta``.  After more than
    ``patience`` consecutive non-improving epochs the lr is multiplied by
    ``factor`` (floored at ``min_lr``) and the stale counter resets.
    """
    if val_metric > state.best_metric + state.min_delta:
        state.best_metric = float(val_metric)
        state.plateau_counter = 0
        return False
    state.plateau_counter += 1
    if state.plateau_counter > state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.plateau_counter = 0
        return True
    return False
