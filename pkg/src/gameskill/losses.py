"""Training objectives: cross-entropy, one-way KL alignment, pairwise ranking, pair generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import torch
import torch.nn.functional as F

from .manifest import RankSection

CE_EPS = 1e-12


@dataclass(frozen=True)
class RankingLossConfig:
    margin: float = 0.2
    pair_subsample: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0 < self.pair_subsample <= 1:
            raise ValueError("pair_subsample must be in (0, 1]")


@dataclass(frozen=True)
class KlLossConfig:
    scale: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("scale must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=dtype)


def cross_entropy(probs, labels, weights=None, reduction: str = "mean") -> torch.Tensor:
    """-log p[label], clamped at 1e-12, optionally scaled by per-class ``weights``.

    ``probs`` is [B, C] (or a single [C] vector with a scalar label).
    """
    probs = _as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    single = probs.ndim == 1
    if single:
        probs, labels = probs.unsqueeze(0), labels.reshape(1)
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    losses = -torch.log(picked.clamp_min(CE_EPS))
    if weights is not None:
        weights = torch.as_tensor(weights, dtype=losses.dtype)
        if (weights <= 0).any():
            raise ValueError("class weights must be positive")
        losses = losses * weights[labels]
    if single or reduction == "none":
        return losses[0] if single else losses
    return losses.sum() if reduction == "sum" else losses.mean()


def class_weighted_cross_entropy(probs, labels, weights, reduction: str = "mean") -> torch.Tensor:
    return cross_entropy(probs, labels, weights=weights, reduction=reduction)


def cross_entropy_from_logits(logits: torch.Tensor, labels, weights=None) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits); same quantity as ``cross_entropy`` without the clamp."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    losses = -F.log_softmax(logits, dim=-1).gather(1, labels[:, None]).squeeze(1)
    if weights is not None:
        losses = losses * torch.as_tensor(weights, dtype=losses.dtype)[labels]
    return losses.mean()


def inverse_frequency_weights(counts) -> np.ndarray:
    """Class weights proportional to 1 / count, normalized so the largest class has weight 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("every class needs at least one sample")
    return counts.max() / counts


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """sum_i p_i log(p_i / q_i) over the last axis."""
    return (p * (torch.log(p) - torch.log(q))).sum(dim=-1)


def kl_alignment_loss(v: torch.Tensor, a: torch.Tensor, config: KlLossConfig = KlLossConfig()) -> torch.Tensor:
    """KL(video || audio) between mean-pooled, softmaxed branch sequences.

    The video side is detached: no gradient reaches the video branch.
    ``v`` and ``a`` are [B, S, D] (or [S, D]); the batch is averaged.
    """
    if v.shape != a.shape:
        raise ValueError(f"branch outputs differ in shape: {tuple(v.shape)} vs {tuple(a.shape)}")
    p = F.softmax(v.detach().mean(dim=-2) / config.temperature, dim=-1)
    log_q = F.log_softmax(a.mean(dim=-2) / config.temperature, dim=-1)
    kl = (p * (torch.log(p) - log_q)).sum(dim=-1)
    return config.scale * kl.mean()


def pairwise_ranking_loss(s1, s2, y, m: float = 0.2):
    """max(0, -y * (s1 - s2) + m); works on floats or tensors."""
    if isinstance(s1, torch.Tensor) or isinstance(s2, torch.Tensor):
        diff = s1 - s2
        y = torch.as_tensor(y, dtype=diff.dtype)
        return torch.clamp(-y * diff + m, min=0)
    return max(0.0, -y * (s1 - s2) + m)


@dataclass(frozen=True)
class PairBatch:
    """(first, second, y) triples; y = +1 for same section, -1 otherwise."""

    pairs: tuple[tuple[str, str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        for a, b, y in self.pairs:
            if a == b:
                raise ValueError(f"self-pair for {a!r}")
            if y not in (1, -1):
                raise ValueError("pair labels must be +1 or -1")

    def __len__(self) -> int:
        return len(self.pairs)


def generate_pairs(samples, config: RankingLossConfig = RankingLossConfig()) -> PairBatch:
    """Seeded subsample of all unordered pairs of ``samples`` ((sample_id, rank) items).

    Callers pass the TRAIN subset only. Different-section pairs are ordered
    (lower section, higher section) so that y = -1 asks the better-ranked clip
    to score at least ``margin`` above the other; same-section pairs get a
    seeded random order.
    """
    items = sorted((str(sid), RankSection.parse(r)) for sid, r in samples)
    if len(items) < 2:
        return PairBatch(())
    rng = np.random.default_rng(config.seed)
    all_pairs = list(combinations(range(len(items)), 2))
    n_keep = len(all_pairs) if config.pair_subsample >= 1 else max(1, math.floor(len(all_pairs) * config.pair_subsample + 0.5))
    keep = np.sort(rng.choice(len(all_pairs), size=n_keep, replace=False))
    flips = rng.random(n_keep) < 0.5
    pairs = []
    for k, flip in zip(keep, flips):
        i, j = all_pairs[k]
        (id1, r1), (id2, r2) = items[i], items[j]
        if r1 == r2:
            first, second = ((id2, id1) if flip else (id1, id2))
            pairs.append((first, second, 1))
        else:
            # RankSection A=0 is best: put the worse (larger index) sample first
            worse, better = ((id1, id2) if r1 > r2 else (id2, id1))
            pairs.append((worse, better, -1))
    return PairBatch(tuple(pairs))


def pair_ordering_accuracy(scores: dict[str, float], pairs: PairBatch) -> float:
    """Fraction of different-section pairs whose better-ranked member scores higher."""
    diff = [(a, b) for a, b, y in pairs.pairs if y == -1]
    if not diff:
        return float("nan")
    return float(np.mean([scores[b] > scores[a] for a, b in diff]))
