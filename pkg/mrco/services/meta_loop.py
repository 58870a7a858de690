"""
Bilevel optimization engine.

One training iteration:
  1. weights W of the augmented batch and the reweighted task loss
  2-3. virtual SGD step theta*_M = theta_M - alpha * grad L_Task, kept differentiable in theta_A
  4-5. meta loss on the held-out batch under theta*_M, Adam step on theta_A
then W is recomputed, L_Final = L_Task + lambda * L_Contrast drives a real Adam
step on theta_M, the key encoder follows by momentum and the queues update.
"""
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence
import logging

import pandas as pd
import torch
from torch.func import functional_call

from ..exceptions import ConfigurationError, GradientError, ValidationError
from . import autodiff as ad
from .contrastive import ContrastiveState, contrastive_loss, momentum_update, select_positives, top_weight_mask
from .encoder import TextEncoder
from .reweighter import ReweightNet, compute_weights

logger = logging.getLogger(__name__)


@dataclass
class LabeledBatch:
    """Token batch with labels; augmented batches also carry their origin ids."""
    tokens: torch.Tensor
    labels: torch.Tensor
    ids: List[str]
    origin_ids: Optional[List[str]] = None
    corrupted: Optional[List[bool]] = None

    def __post_init__(self):
        if self.origin_ids is None:
            self.origin_ids = list(self.ids)
        n = len(self.ids)
        if self.tokens.shape[0] != n or self.labels.shape[0] != n or len(self.origin_ids) != n:
            raise ValidationError(
                f"Batch fields disagree on size: tokens {tuple(self.tokens.shape)}, "
                f"labels {tuple(self.labels.shape)}, {n} ids")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MetaBatch:
    task_raw: LabeledBatch
    task_aug: LabeledBatch
    meta_raw: LabeledBatch


@dataclass
class OptimizerState:
    main_lr: float
    meta_lr: float
    reweight_lr: float
    main_optimizer: torch.optim.Optimizer
    reweight_optimizer: torch.optim.Optimizer

    @classmethod
    def create(
        cls,
        model: TextEncoder,
        reweight_net: ReweightNet,
        main_lr: float,
        meta_lr: float,
        reweight_lr: float
    ) -> 'OptimizerState':
        # meta_lr == 0 is accepted here: it is the no-pathway degenerate case
        if main_lr <= 0 or reweight_lr <= 0 or meta_lr < 0:
            raise ConfigurationError(
                f"Learning rates must be positive (main {main_lr}, meta {meta_lr}, reweight {reweight_lr})")
        return cls(
            main_lr, meta_lr, reweight_lr,
            torch.optim.Adam(model.parameters(), lr=main_lr),
            torch.optim.Adam(reweight_net.parameters(), lr=reweight_lr)
        )


@dataclass
class MetaStepResult:
    task_loss: float
    meta_loss: float
    weights: torch.Tensor
    reweight_grad_norm: float


@dataclass
class IterationMetrics:
    iteration: int
    task_loss: float
    meta_loss: float
    contrastive_loss: float
    w_mean: float
    w_min: float
    w_max: float


def _forward(model: TextEncoder, tokens: torch.Tensor, train_mode: bool,
             params: Optional[Dict[str, torch.Tensor]] = None):
    if params is None:
        return model(tokens, train_mode=train_mode)
    return functional_call(model, params, (tokens,), {'train_mode': train_mode})


def weighted_task_loss(
    raw_logits: torch.Tensor,
    raw_labels: torch.Tensor,
    aug_logits: Optional[torch.Tensor],
    aug_labels: torch.Tensor,
    W: torch.Tensor
) -> torch.Tensor:
    """Mean raw cross-entropy plus the mean of W-weighted unreduced augmented losses"""
    if raw_labels.shape[0] == 0:
        raise ValidationError("task_loss: the raw batch is empty")
    if W.dim() != 1 or W.shape[0] != aug_labels.shape[0]:
        raise ValidationError(
            f"task_loss: {tuple(W.shape)} weights for {aug_labels.shape[0]} augmented samples")
    if W.numel() and (float(W.min()) < 0.0 or float(W.max()) > 1.0):
        raise ValidationError("task_loss: weights must lie in [0, 1]")

    loss = ad.softmax_cross_entropy(raw_logits, raw_labels, reduction='mean')
    if aug_logits is None or aug_labels.shape[0] == 0:
        return loss
    aug_losses = ad.softmax_cross_entropy(aug_logits, aug_labels, reduction='none')
    return ad.add(loss, ad.sum_rows(ad.mul(W, aug_losses)) / aug_labels.shape[0])


def task_loss(
    task_raw: LabeledBatch,
    task_aug: LabeledBatch,
    W: torch.Tensor,
    model: TextEncoder,
    params: Optional[Dict[str, torch.Tensor]] = None,
    train_mode: bool = True
) -> torch.Tensor:
    """Reweighted task loss L_Task of the main module (optionally under virtual parameters)"""
    if len(task_raw) == 0:
        raise ValidationError("task_loss: the raw batch is empty")
    _, raw_logits = _forward(model, task_raw.tokens, train_mode, params)
    aug_logits = None
    if len(task_aug):
        _, aug_logits = _forward(model, task_aug.tokens, train_mode, params)
    return weighted_task_loss(raw_logits, task_raw.labels, aug_logits, task_aug.labels, W)


def virtual_update(model: TextEncoder, L_task: torch.Tensor, meta_lr: float) -> Dict[str, torch.Tensor]:
    """theta*_M = theta_M - alpha * grad L_Task, differentiable w.r.t. whatever L_Task depends on"""
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    try:
        grads = ad.backward(L_task, params, create_graph=True, retain_graph=True)
    except GradientError as e:
        logger.error(f"Virtual update aborted: {e} {e.details}")
        raise GradientError(f"Virtual update aborted: {e}", details=e.details)
    return {name: p - meta_lr * g for name, p, g in zip(names, params, grads)}


def meta_loss(
    model: TextEncoder,
    meta_raw: LabeledBatch,
    params: Optional[Dict[str, torch.Tensor]] = None,
    train_mode: bool = True
) -> torch.Tensor:
    """Plain mean cross-entropy on the held-out meta batch"""
    if len(meta_raw) == 0:
        raise ValidationError("meta_loss: the meta batch is empty")
    _, logits = _forward(model, meta_raw.tokens, train_mode, params)
    return ad.softmax_cross_entropy(logits, meta_raw.labels, reduction='mean')


def meta_step(
    batch: MetaBatch,
    model: TextEncoder,
    reweight_net: ReweightNet,
    opt: OptimizerState,
    train_mode: bool = True
) -> MetaStepResult:
    """Update theta_A with the gradient of L_Meta(theta*_M(theta_A)); theta_M stays untouched"""
    if len(batch.meta_raw) == 0:
        raise ValidationError("meta_step: the meta batch is empty")

    aug = batch.task_aug
    H_hat = model.encode(aug.tokens, train_mode).detach() if len(aug) else None
    if H_hat is None:
        W = torch.zeros(0, dtype=torch.float64)
    else:
        W = compute_weights(H_hat, aug.labels, reweight_net, train_mode)
    L_task = task_loss(batch.task_raw, aug, W, model, train_mode=train_mode)
    fast_weights = virtual_update(model, L_task, opt.meta_lr)
    L_meta = meta_loss(model, batch.meta_raw, params=fast_weights, train_mode=train_mode)

    reweight_params = list(reweight_net.parameters())
    grads = ad.backward(L_meta, reweight_params)
    opt.reweight_optimizer.zero_grad(set_to_none=True)
    for p, g in zip(reweight_params, grads):
        p.grad = g.detach()
    opt.reweight_optimizer.step()

    grad_norm = float(torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)))
    logger.debug(f"meta step: L_task {float(L_task):.4f} L_meta {float(L_meta):.4f} |grad| {grad_norm:.3e}")
    return MetaStepResult(float(L_task.detach()), float(L_meta.detach()), W.detach(), grad_norm)


def train_iteration(
    batch: MetaBatch,
    model: TextEncoder,
    reweight_net: ReweightNet,
    contrastive_state: Optional[ContrastiveState],
    opt: OptimizerState,
    lam: float,
    iteration: int = 0,
    post_meta_weights: bool = True
) -> IterationMetrics:
    """Full iteration: meta step, real update of theta_M on L_Final, momentum and queue updates"""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    meta = meta_step(batch, model, reweight_net, opt)

    raw, aug = batch.task_raw, batch.task_aug
    h_raw, raw_logits = model(raw.tokens, train_mode=True)
    aug_logits = None
    W = meta.weights
    if len(aug):
        h_aug, aug_logits = model(aug.tokens, train_mode=True)
        if post_meta_weights:
            with torch.no_grad():
                W = compute_weights(h_aug.detach(), aug.labels, reweight_net, train_mode=False)
    W = W.detach()
    L_task = weighted_task_loss(raw_logits, raw.labels, aug_logits, aug.labels, W)

    L_final = L_task
    L_contrast = torch.zeros((), dtype=L_task.dtype)
    use_contrast = lam > 0 and contrastive_state is not None and len(aug) > 0
    if use_contrast:
        key_reprs = contrastive_state.encode_keys(aug.tokens)
        mask = top_weight_mask(W, contrastive_state.rho)
        positives = [
            select_positives(W, aug.origin_ids, aug.labels, key_reprs,
                             raw.ids[i], int(raw.labels[i]), contrastive_state.rho, mask=mask)
            for i in range(len(raw))
        ]
        L_contrast = contrastive_loss(h_raw, raw.labels, positives, contrastive_state.queues,
                                      contrastive_state.temperature, contrastive_state.normalize)
        L_final = ad.add(L_task, lam * L_contrast)

    opt.main_optimizer.zero_grad(set_to_none=True)
    ad.backward(L_final, create_graph=False)
    opt.main_optimizer.step()
    # the real step must not leak into theta_A
    reweight_net.zero_grad(set_to_none=True)

    if use_contrast:
        momentum_update(contrastive_state.key_encoder, model, contrastive_state.gamma)
        contrastive_state.update_queues(key_reprs, aug.labels, W)

    return IterationMetrics(
        iteration=iteration,
        task_loss=float(L_task.detach()),
        meta_loss=meta.meta_loss,
        contrastive_loss=float(L_contrast.detach()),
        w_mean=float(W.mean()) if W.numel() else float('nan'),
        w_min=float(W.min()) if W.numel() else float('nan'),
        w_max=float(W.max()) if W.numel() else float('nan'),
    )


def fixed_weight_iteration(
    raw: LabeledBatch,
    aug: Optional[LabeledBatch],
    model: TextEncoder,
    optimizer: torch.optim.Optimizer,
    iteration: int = 0
) -> IterationMetrics:
    """Baseline step: task loss with every augmented weight fixed to 1 (or raw only)"""
    _, raw_logits = model(raw.tokens, train_mode=True)
    if aug is not None and len(aug):
        _, aug_logits = model(aug.tokens, train_mode=True)
        W = torch.ones(len(aug), dtype=raw_logits.dtype)
        L_task = weighted_task_loss(raw_logits, raw.labels, aug_logits, aug.labels, W)
        w = 1.0
    else:
        L_task = weighted_task_loss(raw_logits, raw.labels, None, raw.labels[:0],
                                    raw_logits.new_zeros(0))
        w = float('nan')
    optimizer.zero_grad(set_to_none=True)
    ad.backward(L_task, create_graph=False)
    optimizer.step()
    return IterationMetrics(iteration, float(L_task.detach()), float('nan'), 0.0, w, w, w)


def joint_minimization(
    batch: MetaBatch,
    model: TextEncoder,
    reweight_net: ReweightNet,
    steps: int,
    lr: float = 1e-2
) -> List[float]:
    """Minimize L_Task directly over theta_M and theta_A together; returns mean(W) per step.

    Without the held-out meta objective the cheapest way to lower the weighted
    loss is to shrink every weight, so mean(W) heads to 0. Steps use Adam at
    `lr`.
    """
    if len(batch.task_aug) == 0:
        raise ValidationError("joint_minimization needs augmented samples")
    params = list(model.parameters()) + list(reweight_net.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    aug = batch.task_aug
    trajectory = []
    for _ in range(steps):
        H_hat = model.encode(aug.tokens, train_mode=False).detach()
        W = compute_weights(H_hat, aug.labels, reweight_net, train_mode=False)
        L = task_loss(batch.task_raw, aug, W, model, train_mode=False)
        optimizer.zero_grad(set_to_none=True)
        ad.backward(L, create_graph=False)
        optimizer.step()
        trajectory.append(float(W.detach().mean()))
    return trajectory


def bilevel_minimization(
    batch: MetaBatch,
    model: TextEncoder,
    reweight_net: ReweightNet,
    opt: OptimizerState,
    steps: int
) -> List[float]:
    """Repeated deterministic train iterations on one fixed batch; returns mean(W) per step"""
    trajectory = []
    for step in range(steps):
        meta = meta_step(batch, model, reweight_net, opt, train_mode=False)
        _, raw_logits = model(batch.task_raw.tokens, train_mode=False)
        _, aug_logits = model(batch.task_aug.tokens, train_mode=False)
        with torch.no_grad():
            H_hat = model.encode(batch.task_aug.tokens).detach()
            W = compute_weights(H_hat, batch.task_aug.labels, reweight_net, train_mode=False)
        L = weighted_task_loss(raw_logits, batch.task_raw.labels, aug_logits, batch.task_aug.labels, W)
        opt.main_optimizer.zero_grad(set_to_none=True)
        ad.backward(L, create_graph=False)
        opt.main_optimizer.step()
        reweight_net.zero_grad(set_to_none=True)
        trajectory.append(float(meta.weights.mean()))
    return trajectory


def write_metrics_csv(path: str, rows: Sequence[IterationMetrics]) -> None:
    """One row per iteration: iteration, L_Task, L_Meta, L_Contrast, mean/min/max W"""
    columns = ['iteration', 'task_loss', 'meta_loss', 'contrastive_loss', 'w_mean', 'w_min', 'w_max']
    pd.DataFrame([asdict(r) for r in rows], columns=columns).to_csv(path, index=False, float_format='%.10g')
