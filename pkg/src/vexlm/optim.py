"""AdamW with decoupled decay, cosine warmup schedule, and the stage driver.

Moments are allocated per tensor but only the slices trainable under the
current stage mask are ever read or written; decoupled weight decay is
likewise applied only to trainable slices, so frozen parameters stay
bit-identical across any number of steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .model import ATTN_PROJ_NAMES, ModelConfig, ModelParams, attach_adapters, backward, merge_adapters, zero_grads
from .stages import FreezeMask, StagePlan, apply_mask, param_group_slices


@dataclass
class AdamWSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    """Adam moment accumulators; reset whenever the trainable set changes."""

    settings: AdamWSettings
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ValueError("need 0 <= floor_lr <= peak_lr")
        if self.warmup_steps < 0 or self.total_steps < self.warmup_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp to the peak over warmup, then cosine down to the floor."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.peak_lr
        return schedule.peak_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.floor_lr
    frac = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def _trainable_slices(name: str, base_size: int, mask: FreezeMask, adapter_only_attention: bool):
    if adapter_only_attention and any(name.endswith(p) for p in ATTN_PROJ_NAMES):
        return []
    return [rows for group, rows in param_group_slices(name, base_size) if mask.is_trainable(group)]


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    mask: FreezeMask,
    adapter_only_attention: bool = False,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected AdamW update over the trainable slices, in place."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    s = state.settings
    state.step += 1
    bc1 = 1.0 - s.beta1**state.step
    bc2 = 1.0 - s.beta2**state.step
    for name, theta in params.tensors.items():
        g_full = grads.get(name)
        if g_full is None:
            raise ValueError(f"missing gradient for {name}")
        if g_full.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g_full.shape} vs {theta.shape}")
        for rows in _trainable_slices(name, params.base_size, mask, adapter_only_attention):
            g = g_full[rows]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            if name not in state.m:
                state.m[name] = np.zeros_like(theta)
                state.v[name] = np.zeros_like(theta)
            m, v = state.m[name], state.v[name]
            m[rows] = s.beta1 * m[rows] + (1.0 - s.beta1) * g
            v[rows] = s.beta2 * v[rows] + (1.0 - s.beta2) * g * g
            update = (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + s.eps)
            theta[rows] -= lr * update + lr * s.weight_decay * theta[rows]
    return params, state


# -- stage driver ----------------------------------------------------------


@dataclass
class StageResult:
    params: ModelParams
    losses: list[float]
    lrs: list[float]
    stop_reason: str  # "cap" | "converged" | "data_exhausted"
    steps: int


def converged(losses: list[float], window: int, min_rel_improvement: float) -> bool:
    """Relative loss improvement across the trailing window fell below the bar."""
    if len(losses) < window:
        return False
    first = losses[-window]
    return (first - losses[-1]) / max(abs(first), 1e-12) < min_rel_improvement


def run_stage(
    params: ModelParams,
    config: ModelConfig,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    plan: StagePlan,
    accumulation: int = 1,
    opt_settings: AdamWSettings | None = None,
    warmup_steps: int = 10,
    floor_lr_frac: float = 0.1,
    rng: np.random.Generator | None = None,
) -> StageResult:
    """Train one stage under its freeze mask until convergence or the cap.

    One global step averages the gradients of ``accumulation`` micro-batch
    backward passes, masks them, and takes one AdamW step. Optimizer state
    is fresh per stage. With stage-6 adapters, adapters are attached at
    stage start, carry the attention update (base projections stay frozen),
    and are merged back into the base weights at stage end.
    """
    if plan.stage_id < 1:
        raise ValueError("run_stage requires a training stage (1..7)")
    if accumulation < 1:
        raise ValueError("accumulation must be >= 1")
    work = params.copy()
    if plan.use_low_rank_adapters:
        work = attach_adapters(work, config, plan.lora_rank, plan.lora_alpha, rng or np.random.default_rng(0))

    mask = plan.mask
    state = OptimizerState(settings=opt_settings or AdamWSettings())
    schedule = LrSchedule(
        peak_lr=plan.lr,
        warmup_steps=min(warmup_steps, plan.max_steps),
        total_steps=plan.max_steps,
        floor_lr=plan.lr * floor_lr_frac,
    )

    it: Iterator = iter(batches)
    losses: list[float] = []
    lrs: list[float] = []
    stop_reason = "cap"
    steps = 0
    for step in range(1, plan.max_steps + 1):
        accum = None
        micro_losses = []
        exhausted = False
        for _ in range(accumulation):
            try:
                ids, targets = next(it)
            except StopIteration:
                exhausted = True
                break
            loss_value, grads = backward(work, config, ids, targets)
            micro_losses.append(loss_value)
            if accum is None:
                accum = grads
            else:
                for k in accum:
                    accum[k] += grads[k]
        if exhausted or accum is None:
            if not losses and accum is None:
                raise ValueError("empty data stream")
            stop_reason = "data_exhausted"
            break
        for k in accum:
            accum[k] /= accumulation
        apply_mask(accum, mask, work.base_size, adapter_only_attention=plan.use_low_rank_adapters)
        lr = lr_at(schedule, step)
        adamw_step(work, accum, state, lr, mask, adapter_only_attention=plan.use_low_rank_adapters)
        losses.append(float(np.mean(micro_losses)))
        lrs.append(lr)
        steps = step
        if converged(losses, plan.convergence.window, plan.convergence.min_rel_improvement):
            stop_reason = "converged"
            break

    if plan.use_low_rank_adapters:
        work = merge_adapters(work)
    return StageResult(params=work, losses=losses, lrs=lrs, stop_reason=stop_reason, steps=steps)


# Named presets mirroring the two published training recipes.
TRAINING_PRESETS = {
    "large": {"seq_len": 4096, "accumulation": 4, "micro_batch": 8, "lr": 4e-5, "warmup_steps": 10, "max_steps": 400},
    "small": {"seq_len": 2048, "accumulation": 16, "micro_batch": 16, "lr": 2e-4, "warmup_steps": 10, "max_steps": 400},
}
