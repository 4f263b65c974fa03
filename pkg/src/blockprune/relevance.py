"""GradCAM relevance of every block's slice of the concatenated features."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import Checkpoint, LossWeights, as_tensors, collate, energy_force_loss, forward, make_graph

__all__ = [
    "BlockRelevance",
    "DegenerateRelevanceError",
    "relevance_map",
    "per_sample_raw_scores",
    "block_relevance",
    "combine",
    "relevance_report",
]


class DegenerateRelevanceError(ValueError):
    pass


@dataclass
class BlockRelevance:
    scores: list[float]  # index 0 is the embedding block
    raw_scores: list[float]
    sample_count: int

    @property
    def labels(self) -> list[str]:
        return [f"f{i + 1}" for i in range(len(self.scores))]


def relevance_map(features: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU(f * dL/df), elementwise."""
    return np.maximum(features * grad, 0.0)


def per_sample_raw_scores(checkpoint: Checkpoint, sample, loss_weights: LossWeights) -> np.ndarray:
    """Mean of the relevance map over atoms and features, separately for each block slice."""
    cfg = checkpoint.config
    batch = collate([make_graph(sample, cfg)])
    params = as_tensors(checkpoint)
    with T.Tape() as tape:
        pred = forward(cfg, params, batch, watch_features=True)
        loss, _, _ = energy_force_loss(pred, batch, loss_weights)
    f = pred.features.concatenated
    if not loss.requires_grad:
        # loss does not depend on f at all
        return np.zeros(cfg.b)
    tape.backward(loss)
    grad = f.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient with respect to the concatenated features")
    r = relevance_map(f.data, grad)
    n = r.shape[0]
    return r.reshape(n, cfg.b, cfg.d).mean(axis=(0, 2))


def _normalise(raw: list[float]) -> list[float]:
    total = math.fsum(raw)
    if not total > 0.0:
        raise DegenerateRelevanceError("all raw relevance scores are zero; normalisation is undefined")
    return [r / total for r in raw]


def block_relevance(checkpoint: Checkpoint, samples, loss_weights: LossWeights = LossWeights()) -> BlockRelevance:
    """Average per-sample block relevance over ``samples`` and normalise to sum to one."""
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    per_sample = np.stack([per_sample_raw_scores(checkpoint, s, loss_weights) for s in samples])
    # fsum is exact, so the average does not depend on sample order
    raw = [math.fsum(per_sample[:, i]) / len(samples) for i in range(per_sample.shape[1])]
    return BlockRelevance(_normalise(raw), raw, len(samples))


def combine(parts: list[BlockRelevance]) -> BlockRelevance:
    """Relevance over the union of batches: sample-weighted mean of raw scores."""
    total = sum(p.sample_count for p in parts)
    width = len(parts[0].raw_scores)
    raw = [math.fsum(p.raw_scores[i] * p.sample_count for p in parts) / total for i in range(width)]
    return BlockRelevance(_normalise(raw), raw, total)


def relevance_report(relevance: BlockRelevance, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_index", "label", "score"])
        for i, (label, score) in enumerate(zip(relevance.labels, relevance.scores)):
            w.writerow([i, label, f"{score:.6f}"])
