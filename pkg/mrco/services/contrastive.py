"""
Weight-dependent contrastive learning.

Each class k owns a lifetime-weight priority queue of key-encoder
representations of low-weight augmented samples. Queries of class k are
contrasted against their high-weight, same-origin augmented positives and the
class-k queue only.
"""
from dataclasses import dataclass, field
from heapq import heappush, heappop
from typing import Dict, List, Optional, Sequence, Tuple
import copy
import logging
import math

import pandas as pd
import torch

from ..exceptions import ConfigurationError, MRCoError, ShapeError, ValidationError
from . import autodiff as ad
from .encoder import TextEncoder

logger = logging.getLogger(__name__)


@dataclass
class QueueEntry:
    repr: torch.Tensor = field(repr=False)
    weight: float    # P_W
    lifetime: int    # P_T
    seq: int         # insertion order; older entries have smaller seq


class ClassQueue:
    """Negative-sample queue of one class, bounded by `capacity` (N_Neg)."""

    def __init__(self, class_id: int, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"Queue capacity must be >= 1, got {capacity}")
        self.class_id = class_id
        self.capacity = capacity
        self._entries: Dict[int, QueueEntry] = {}    # insertion ordered
        self._heap: List[Tuple[float, int]] = []     # (-P_W, seq), lazily pruned
        self._next_seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def is_full(self) -> bool:
        return len(self._entries) >= self.capacity

    @property
    def entries(self) -> List[QueueEntry]:
        return list(self._entries.values())

    def tick(self) -> int:
        """Decrement every lifetime and drop expired entries; returns how many expired"""
        expired = []
        for seq, entry in self._entries.items():
            entry.lifetime -= 1
            if entry.lifetime <= 0:
                expired.append(seq)
        for seq in expired:
            del self._entries[seq]
        return len(expired)

    def push(self, representation: torch.Tensor, weight: float, tau: int) -> QueueEntry:
        if self.is_full:
            raise QueueError(f"Queue of class {self.class_id} is full ({self.capacity})")
        entry = QueueEntry(representation.detach(), float(weight), int(tau), self._next_seq)
        self._entries[entry.seq] = entry
        heappush(self._heap, (-entry.weight, entry.seq))
        self._next_seq += 1
        return entry

    def _prune(self) -> None:
        while self._heap and self._heap[0][1] not in self._entries:
            heappop(self._heap)

    def max_weight(self) -> Optional[float]:
        self._prune()
        return -self._heap[0][0] if self._heap else None

    def pop_largest_above(self, weight: float) -> Optional[QueueEntry]:
        """Remove the largest-P_W entry if its P_W exceeds `weight` (ties: oldest first)"""
        self._prune()
        if not self._heap or -self._heap[0][0] <= weight:
            return None
        _, seq = heappop(self._heap)
        return self._entries.pop(seq)

    def pop_oldest(self) -> Optional[QueueEntry]:
        if not self._entries:
            return None
        seq = next(iter(self._entries))
        return self._entries.pop(seq)

    def reprs(self) -> Optional[torch.Tensor]:
        if not self._entries:
            return None
        return torch.stack([e.repr for e in self._entries.values()])

    def snapshot(self) -> List[Tuple[float, int]]:
        """(P_W, P_T) per stored entry, in insertion order"""
        return [(e.weight, e.lifetime) for e in self._entries.values()]


def _validate_batch(queues: Dict[int, ClassQueue], reprs, labels, weights) -> Tuple[List[int], List[float]]:
    labels = [int(y) for y in labels]
    weights = [float(w) for w in weights]
    if not (len(labels) == len(weights) == reprs.shape[0]):
        raise ValidationError(
            f"Queue update: misaligned batch ({reprs.shape[0]} reprs, {len(labels)} labels, {len(weights)} weights)")
    for w in weights:
        if not 0.0 < w < 1.0:
            raise ValidationError(f"Queue update: weight {w} outside (0, 1)")
    for y in labels:
        if y not in queues:
            raise QueueError(f"Queue update: unknown class {y}")
    return labels, weights


def lasw_update(
    queues: Dict[int, ClassQueue],
    batch_reprs: torch.Tensor,
    batch_labels: Sequence[int],
    batch_weights: Sequence[float],
    tau: int
) -> Dict[int, ClassQueue]:
    """Lifetime-aware, small-weight dequeue-enqueue over every class queue"""
    labels, weights = _validate_batch(queues, batch_reprs, batch_labels, batch_weights)
    batch_reprs = batch_reprs.detach()

    for k in sorted(queues):
        queue = queues[k]
        candidates = sorted((i for i, y in enumerate(labels) if y == k), key=lambda i: (weights[i], i))

        # lifetime-aware dequeue-enqueue
        n_expired = queue.tick()
        for i in candidates[:n_expired]:
            queue.push(batch_reprs[i], weights[i], tau)

        # cold start: free slots take the smallest remaining candidates
        remaining = candidates[n_expired:]
        n_free = queue.capacity - len(queue)
        for i in remaining[:n_free]:
            queue.push(batch_reprs[i], weights[i], tau)

        # small-weight dequeue-enqueue, in batch order
        for i in sorted(remaining[n_free:]):
            if queue.pop_largest_above(weights[i]) is not None:
                queue.push(batch_reprs[i], weights[i], tau)
    return queues


def fifo_update(
    queues: Dict[int, ClassQueue],
    batch_reprs: torch.Tensor,
    batch_labels: Sequence[int],
    batch_weights: Sequence[float],
    tau: int
) -> Dict[int, ClassQueue]:
    """First-in-first-out replacement (the queue policy without LASW)"""
    labels, weights = _validate_batch(queues, batch_reprs, batch_labels, batch_weights)
    batch_reprs = batch_reprs.detach()

    for k in sorted(queues):
        queue = queues[k]
        queue.tick()
        for i, y in enumerate(labels):
            if y != k:
                continue
            if queue.is_full:
                queue.pop_oldest()
            queue.push(batch_reprs[i], weights[i], tau)
    return queues


def momentum_update(key: TextEncoder, query: TextEncoder, gamma: float) -> TextEncoder:
    """theta_key <- gamma * theta_key + (1 - gamma) * theta_query, in place"""
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"momentum_update: gamma must lie in [0, 1], got {gamma}")
    key_params = dict(key.named_parameters())
    query_params = dict(query.named_parameters())
    if key_params.keys() != query_params.keys():
        raise ShapeError('momentum_update', (len(key_params),), (len(query_params),))
    for name, p in key_params.items():
        if p.shape != query_params[name].shape:
            raise ShapeError('momentum_update', p.shape, query_params[name].shape)
    with torch.no_grad():
        for name, p in key_params.items():
            p.mul_(gamma).add_(query_params[name], alpha=1.0 - gamma)
    return key


def top_weight_mask(weights: torch.Tensor, rho: float) -> torch.Tensor:
    """Mask of the ceil(rho * B) highest-weight samples of the mini-batch"""
    if not 0.0 <= rho <= 1.0:
        raise ValidationError(f"rho must lie in [0, 1], got {rho}")
    values = [float(w) for w in weights]
    n_keep = min(len(values), max(0, math.ceil(rho * len(values) - 1e-9)))
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    mask = torch.zeros(len(values), dtype=torch.bool)
    mask[order[:n_keep]] = True
    return mask


def select_positives(
    weights: torch.Tensor,
    origin_ids: Sequence[str],
    labels: Sequence[int],
    key_reprs: torch.Tensor,
    query_origin: str,
    query_class: int,
    rho: float,
    mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Key representations of the top-rho augmented samples generated from the query"""
    if mask is None:
        mask = top_weight_mask(weights, rho)
    idx = [i for i in range(len(origin_ids))
           if bool(mask[i]) and origin_ids[i] == query_origin and int(labels[i]) == query_class]
    if not idx:
        return key_reprs.new_zeros((0, key_reprs.shape[-1]))
    return key_reprs[idx].detach()


def contrastive_loss(
    query_reprs: torch.Tensor,
    query_labels: Sequence[int],
    positives: Sequence[torch.Tensor],
    queues: Dict[int, ClassQueue],
    temperature: float = 1.0,
    normalize: bool = False
) -> torch.Tensor:
    """Mean over qualifying queries of -mean_p log P_Contrast"""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    losses = []
    for i, pos in enumerate(positives):
        if pos.shape[0] == 0:
            continue
        k = int(query_labels[i])
        if k not in queues:
            raise QueueError(f"No queue for class {k}")
        neg = queues[k].reprs()
        if neg is None:
            continue
        q = query_reprs[i]
        pos, neg = pos.detach(), neg.detach()
        if normalize:
            q, pos, neg = ad.l2_normalize(q), ad.l2_normalize(pos), ad.l2_normalize(neg)
        pos_logits = ad.matmul(pos, q) / temperature                 # (P,)
        neg_logits = ad.matmul(neg, q) / temperature                 # (N,)
        candidates = ad.concat(
            [pos_logits.unsqueeze(1), neg_logits.unsqueeze(0).expand(pos.shape[0], -1)], dim=1)
        log_p = pos_logits - torch.logsumexp(candidates, dim=1)
        losses.append(-log_p.mean())
    if not losses:
        return query_reprs.new_zeros(())
    return torch.stack(losses).mean()


@dataclass
class ContrastiveState:
    queues: Dict[int, ClassQueue]
    key_encoder: TextEncoder
    gamma: float
    tau: int
    rho: float
    temperature: float = 1.0
    normalize: bool = True
    use_lasw: bool = True

    @classmethod
    def create(
        cls,
        encoder: TextEncoder,
        n_classes: int,
        n_neg: int,
        gamma: float,
        tau: int,
        rho: float,
        temperature: float = 1.0,
        normalize: bool = True,
        use_lasw: bool = True
    ) -> 'ContrastiveState':
        """Fresh queues plus a detached deep copy of the main encoder as key encoder"""
        if not 0.0 <= gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
        if not 0.0 <= rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {rho}")
        if tau < 1:
            raise ConfigurationError(f"tau must be >= 1, got {tau}")
        if temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {temperature}")
        key_encoder = copy.deepcopy(encoder)
        for p in key_encoder.parameters():
            p.requires_grad_(False)
        queues = {k: ClassQueue(k, n_neg) for k in range(n_classes)}
        return cls(queues, key_encoder, gamma, tau, rho, temperature, normalize, use_lasw)

    def encode_keys(self, tokens: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.key_encoder.encode(tokens, train_mode=False)

    def update_queues(self, reprs: torch.Tensor, labels: Sequence[int], weights: Sequence[float]) -> None:
        policy = lasw_update if self.use_lasw else fifo_update
        policy(self.queues, reprs, labels, weights, self.tau)

    def queue_sizes(self) -> Dict[int, int]:
        return {k: len(q) for k, q in self.queues.items()}


def dump_queues(queues: Dict[int, ClassQueue], path: str) -> None:
    """One row per stored entry: class, weight and remaining lifetime"""
    rows = [{'class_id': k, 'P_W': w, 'P_T': t}
            for k in sorted(queues) for w, t in queues[k].snapshot()]
    pd.DataFrame(rows, columns=['class_id', 'P_W', 'P_T']).to_csv(path, index=False)


class ContrastiveError(MRCoError):
    """Base exception for contrastive module errors"""
    pass

class QueueError(ContrastiveError):
    """Raised when a queue operation references an unknown class or overflows"""
    pass
