"""Freeze-mask schedule for the staged vocabulary-adaptation training.

Stage 0 is the untrained expanded baseline. Stages 1-7 progressively widen
the trainable set: new input embeddings, new output embeddings, both, all
output embeddings, then everything, and finally only the internal layers as
a cool-down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ATTN_PROJ_NAMES, ModelParams, ParamGroup, param_group_slices

_ALL_GROUPS = (
    ParamGroup.INPUT_EMBED_OLD,
    ParamGroup.INPUT_EMBED_NEW,
    ParamGroup.OUTPUT_EMBED_OLD,
    ParamGroup.OUTPUT_EMBED_NEW,
    ParamGroup.INTERNAL,
)

_STAGE_TABLE: dict[int, frozenset[ParamGroup]] = {
    0: frozenset(),
    1: frozenset({ParamGroup.INPUT_EMBED_NEW}),
    2: frozenset({ParamGroup.OUTPUT_EMBED_NEW}),
    3: frozenset({ParamGroup.INPUT_EMBED_NEW, ParamGroup.OUTPUT_EMBED_NEW}),
    4: frozenset({ParamGroup.OUTPUT_EMBED_OLD, ParamGroup.OUTPUT_EMBED_NEW}),
    5: frozenset({ParamGroup.INPUT_EMBED_NEW, ParamGroup.OUTPUT_EMBED_OLD, ParamGroup.OUTPUT_EMBED_NEW}),
    6: frozenset(_ALL_GROUPS),
    7: frozenset({ParamGroup.INTERNAL}),
}


@dataclass(frozen=True)
class FreezeMask:
    """Per-group trainability flags."""

    trainable: frozenset[ParamGroup]

    def is_trainable(self, group: ParamGroup) -> bool:
        return group in self.trainable


@dataclass
class ConvergenceSettings:
    window: int = 20
    min_rel_improvement: float = 1e-3

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class StagePlan:
    """One stage of the schedule: mask, budget, learning rate, stop rule."""

    stage_id: int
    max_steps: int = 400
    lr: float = 1e-3
    convergence: ConvergenceSettings = field(default_factory=ConvergenceSettings)
    use_low_rank_adapters: bool = False
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        if not 0 <= self.stage_id <= 7:
            raise ValueError("stage_id must be in 0..7")
        if self.stage_id >= 1 and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 for training stages")
        if self.use_low_rank_adapters and self.stage_id != 6:
            raise ValueError("low-rank adapters are only available in stage 6")
        if self.convergence.window > self.max_steps and self.stage_id >= 1:
            raise ValueError("convergence window exceeds max_steps")

    @property
    def mask(self) -> FreezeMask:
        return mask_for(self.stage_id)


def mask_for(stage_id: int) -> FreezeMask:
    """Trainable parameter groups for a stage id."""
    if stage_id not in _STAGE_TABLE:
        raise ValueError(f"stage_id {stage_id} out of range 0..7")
    return FreezeMask(trainable=_STAGE_TABLE[stage_id])


def apply_mask(grads: dict[str, np.ndarray], mask: FreezeMask, base_size: int, adapter_only_attention: bool = False) -> dict[str, np.ndarray]:
    """Zero gradients of frozen groups in place; trainable entries untouched.

    With ``adapter_only_attention`` the attention base projections are kept
    frozen even when the internal group trains (the adapters carry the
    update instead).
    """
    for name, g in grads.items():
        if adapter_only_attention and any(name.endswith(p) for p in ATTN_PROJ_NAMES):
            g[...] = 0.0
            continue
        for group, rows in param_group_slices(name, base_size):
            if not mask.is_trainable(group):
                g[rows] = 0.0
    return grads


def trainable_index_sets(params: ModelParams, mask: FreezeMask) -> set[tuple[str, int]]:
    """(tensor name, flat row index) pairs trainable under a mask.

    Rows of 1-D and higher tensors count as their leading index; used for
    asserting the stage-progression set relations.
    """
    out: set[tuple[str, int]] = set()
    for name, arr in params.tensors.items():
        for group, rows in param_group_slices(name, params.base_size):
            if mask.is_trainable(group):
                start, stop, _ = rows.indices(arr.shape[0])
                out.update((name, i) for i in range(start, stop))
    return out
