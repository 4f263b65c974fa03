"""Block removal with FinalMLP repair, single-block ablation and parameter accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from .model import Checkpoint, ModelConfig, block_manifest, glorot, manifest

__all__ = [
    "STRATEGIES",
    "ReductionPlan",
    "apply_plan",
    "reduce_blocks",
    "ablate_block",
    "param_count",
    "pruning_order",
]

STRATEGIES = ("sliced", "random")


@dataclass(frozen=True)
class ReductionPlan:
    strategy: str
    kept_blocks: tuple[int, ...]  # 0 is the embedding and is always kept

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        kept = self.kept_blocks
        if not kept or kept[0] != 0:
            raise ValueError("the embedding block (index 0) must be kept")
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise ValueError("kept blocks must be strictly ascending")

    @property
    def b_prime(self) -> int:
        return len(self.kept_blocks)


def _reinit_first_layer(config: ModelConfig, fan_in: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6C, fan_in]))
    return glorot(rng, (fan_in, config.d)), np.zeros(config.d)


def apply_plan(checkpoint: Checkpoint, plan: ReductionPlan, seed: int | None = None) -> Checkpoint:
    """Keep ``plan.kept_blocks`` in order, renumber them and repair the first FinalMLP layer."""
    cfg = checkpoint.config
    if plan.kept_blocks[-1] >= cfg.b:
        raise ValueError(f"block index {plan.kept_blocks[-1]} out of range for b={cfg.b}")
    if plan.b_prime < 2:
        raise ValueError("at least one interaction block must remain")
    new_cfg = replace(cfg, b=plan.b_prime)
    src = checkpoint.tensors
    d = cfg.d
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, _ in manifest(new_cfg):
        out[name] = None  # type: ignore[assignment]
    for name in list(out):
        if not name.startswith("block") and not name.startswith("mlp1."):
            out[name] = src[name].copy()
    for new_k, old_k in enumerate(plan.kept_blocks[1:], start=1):
        for (new_name, _), (old_name, _) in zip(block_manifest(new_cfg, new_k), block_manifest(cfg, old_k)):
            out[new_name] = src[old_name].copy()
    if plan.strategy == "sliced":
        rows = np.concatenate([np.arange(i * d, (i + 1) * d) for i in plan.kept_blocks])
        out["mlp1.weight"] = src["mlp1.weight"][rows].copy()
        out["mlp1.bias"] = src["mlp1.bias"].copy()
    else:
        w, bias = _reinit_first_layer(cfg, d * plan.b_prime, cfg.seed if seed is None else seed)
        out["mlp1.weight"], out["mlp1.bias"] = w, bias
    result = Checkpoint(new_cfg, out)
    result.validate()
    return result


def reduce_blocks(checkpoint: Checkpoint, b_prime: int, strategy: str = "sliced", seed: int | None = None) -> Checkpoint:
    """Drop the last b - b' blocks.  ``seed`` only matters for the random strategy."""
    b = checkpoint.config.b
    if b_prime >= b:
        raise ValueError(f"b' = {b_prime} must be smaller than b = {b}")
    if b_prime < 2:
        raise ValueError("b' must be >= 2 (embedding plus one interaction block)")
    return apply_plan(checkpoint, ReductionPlan(strategy, tuple(range(b_prime))), seed)


def ablate_block(checkpoint: Checkpoint, block_index: int, strategy: str = "sliced", seed: int | None = None) -> Checkpoint:
    """Remove one interaction block; the next block then consumes the previous block's output."""
    b = checkpoint.config.b
    if block_index == 0:
        raise ValueError("embedding block is not removable")
    if not 1 <= block_index <= b - 1:
        raise ValueError(f"block index must lie in 1..{b - 1}")
    if b - 1 < 2:
        raise ValueError("cannot ablate the only interaction block")
    kept = tuple(i for i in range(b) if i != block_index)
    return apply_plan(checkpoint, ReductionPlan(strategy, kept), seed)


def param_count(config_or_checkpoint) -> dict[str, int]:
    """Closed-form parameter counts per group, plus ``total``."""
    cfg = config_or_checkpoint.config if isinstance(config_or_checkpoint, Checkpoint) else config_or_checkpoint
    d, de, nr, s = cfg.d, cfg.d_e, cfg.n_rbf, cfg.species_count
    per_block = (de + 2 * d + nr) * de + de + de * de + de + de * d + d + d * d + d
    counts = {"embedding": s * d + (2 * d + nr) * de + de}
    for k in range(1, cfg.b):
        counts[f"block{k}"] = per_block
    counts["mlp1"] = d * cfg.b * d + d
    for i in range(2, cfg.m + 1):
        counts[f"mlp{i}"] = d * d + d
    counts["head"] = (d + 1) + (2 * d + de) * d + d + d + 1
    counts["total"] = sum(counts.values())
    return counts


def pruning_order(scores) -> list[int]:
    """Interaction-block indices from least to most relevant; ties go to the deeper block first."""
    scores = list(scores)
    return sorted(range(1, len(scores)), key=lambda i: (scores[i], -i))
