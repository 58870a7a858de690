from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence
import logging
import os

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import accuracy_score, matthews_corrcoef
from tqdm import tqdm

from ..config import Config, ExperimentConfig
from ..exceptions import ValidationError
from . import autodiff as ad
from .augment import AugmentedExample, filter_augmented
from .checkpoint import save_checkpoint
from .contrastive import ContrastiveState, dump_queues
from .dataset import Dataset, split_meta
from .encoder import build_encoder, TextEncoder, tokenize, Vocabulary
from .meta_loop import (
    fixed_weight_iteration, IterationMetrics, LabeledBatch, MetaBatch, OptimizerState,
    train_iteration, write_metrics_csv
)
from .reweighter import compute_weights, ReweightNet

logger = logging.getLogger(__name__)

MRCO_METHODS = ('mrco', 'mrco_no_contrastive', 'mrco_fifo')
EVAL_BATCH = 256


def encode_texts(texts_a: Sequence[str], texts_b: Sequence[Optional[str]],
                 vocab: Vocabulary, max_len: int) -> torch.Tensor:
    rows = [tokenize(a, vocab, max_len, b).ids for a, b in zip(texts_a, texts_b)]
    if not rows:
        return torch.zeros((0, max_len), dtype=torch.long)
    return torch.tensor(rows, dtype=torch.long)


def predict(model: TextEncoder, tokens: torch.Tensor) -> np.ndarray:
    """Argmax class per row, evaluation mode"""
    preds = []
    with torch.no_grad():
        for start in range(0, tokens.shape[0], EVAL_BATCH):
            _, logits = model(tokens[start:start + EVAL_BATCH], train_mode=False)
            preds.append(logits.argmax(dim=-1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def score(labels: Sequence[int], preds: Sequence[int], metric: str) -> float:
    if metric == 'accuracy':
        return float(accuracy_score(labels, preds))
    if metric == 'mcc':
        # sklearn returns 0 when the denominator vanishes
        return float(matthews_corrcoef(labels, preds))
    raise ValidationError(f"Unsupported metric: {metric}")


@dataclass
class SeedResult:
    method: str
    seed: int
    # metric name -> value per epoch, index 0 = untrained model
    trajectory: Dict[str, List[float]] = field(default_factory=dict)
    iterations: List[IterationMetrics] = field(default_factory=list)
    weights: Optional[pd.DataFrame] = None

    def final(self, metric: str) -> float:
        return self.trajectory[metric][-1]


class ExperimentTrainer:
    """Trains and evaluates one (method, seed) pair."""

    def __init__(
        self,
        config: ExperimentConfig,
        train: Dataset,
        dev: Dataset,
        augmented: Sequence[AugmentedExample],
        method: Optional[str] = None,
        seed: int = 0,
        out_dir: Optional[str] = None,
        progress: bool = True
    ):
        self.config = config
        self.method = method or config.method
        if self.method not in Config.HARNESS['methods']:
            raise ValidationError(f"Unsupported method: {self.method}")
        self.train = train
        self.dev = dev
        self.augmented = list(augmented)
        self.seed = seed
        self.out_dir = out_dir
        self.progress = progress
        self.n_classes = train.n_classes

    @property
    def is_mrco(self) -> bool:
        return self.method in MRCO_METHODS

    @property
    def lam(self) -> float:
        return 0.0 if self.method == 'mrco_no_contrastive' else self.config.lam

    def _select_data(self):
        """Raw training set, meta set and augmented pool of the method"""
        if self.method == 'plain':
            return self.train, None, []
        if self.method == 'aug':
            return self.train, None, self.augmented
        if self.method == 'aug_filter':
            kept = filter_augmented(self.augmented, self.config.lower_limit, self.config.upper_limit)
            return self.train, None, kept
        task, meta = split_meta(self.train, self.config.meta_fraction, self.seed)
        task_ids = {e.id for e in task}
        # augmentations of held-out examples stay out of training
        return task, meta, [a for a in self.augmented if a.origin_id in task_ids]

    def _raw_batch(self, dataset: Dataset, tokens: torch.Tensor, idx: Sequence[int]) -> LabeledBatch:
        idx = list(idx)
        return LabeledBatch(
            tokens[idx],
            torch.tensor([dataset.examples[i].label for i in idx], dtype=torch.long),
            [dataset.examples[i].id for i in idx]
        )

    def _aug_batch(self, pool: Sequence[AugmentedExample], tokens: torch.Tensor, idx: Sequence[int]) -> LabeledBatch:
        idx = list(idx)
        return LabeledBatch(
            tokens[idx] if idx else tokens[:0],
            torch.tensor([pool[i].label for i in idx], dtype=torch.long),
            [pool[i].id for i in idx],
            origin_ids=[pool[i].origin_id for i in idx],
            corrupted=[pool[i].corrupted for i in idx]
        )

    def evaluate(self, model: TextEncoder, tokens: torch.Tensor) -> Dict[str, float]:
        preds = predict(model, tokens)
        return {m: score(self.dev.labels, preds, m) for m in Config.HARNESS['metrics']}

    def run(self) -> SeedResult:
        cfg = self.config
        ad.seed_everything(self.seed)
        rng = np.random.default_rng(self.seed)

        task, meta, pool = self._select_data()
        vocab = Vocabulary.build(self.train.texts + [a.text for a in self.augmented], cfg.min_frequency)
        task_tokens = encode_texts([e.text_a for e in task], [e.text_b for e in task], vocab, cfg.max_len)
        dev_tokens = encode_texts([e.text_a for e in self.dev], [e.text_b for e in self.dev], vocab, cfg.max_len)
        pool_tokens = encode_texts([a.text for a in pool], [None] * len(pool), vocab, cfg.max_len)
        meta_tokens = None
        if meta is not None:
            meta_tokens = encode_texts([e.text_a for e in meta], [e.text_b for e in meta], vocab, cfg.max_len)

        by_origin: Dict[str, List[int]] = {}
        for i, a in enumerate(pool):
            by_origin.setdefault(a.origin_id, []).append(i)

        model = build_encoder(
            cfg.encoder_variant, len(vocab), self.n_classes, d_emb=cfg.d_emb, d_h=cfg.d_h,
            n_filters=cfg.n_filters, filter_widths=Config.ENCODER['filter_widths'],
            dropout=cfg.encoder_dropout
        )
        result = SeedResult(self.method, self.seed)
        for name, value in self.evaluate(model, dev_tokens).items():
            result.trajectory[name] = [value]

        reweight_net = opt = state = None
        main_optimizer = None
        if self.is_mrco:
            reweight_net = ReweightNet(model.d_h, self.n_classes, cfg.d_label, cfg.reweight_hidden,
                                       cfg.reweight_dropout)
            opt = OptimizerState.create(model, reweight_net, cfg.main_lr, cfg.meta_lr, cfg.reweight_lr)
            state = ContrastiveState.create(
                model, self.n_classes, cfg.n_neg, cfg.gamma, cfg.tau, cfg.rho,
                cfg.temperature, cfg.normalize, use_lasw=self.method != 'mrco_fifo')
        else:
            main_optimizer = torch.optim.Adam(model.parameters(), lr=cfg.main_lr)

        meta_size = cfg.effective_meta_batch_size
        meta_order: List[int] = []
        iteration = 0
        epochs = tqdm(range(1, cfg.epochs + 1), desc=f"{self.method} seed {self.seed}",
                      disable=not self.progress, leave=False)
        for epoch in epochs:
            order = rng.permutation(len(task)).tolist()
            for start in range(0, len(order), cfg.batch_size):
                raw_idx = order[start:start + cfg.batch_size]
                raw = self._raw_batch(task, task_tokens, raw_idx)
                aug_idx = [j for i in raw_idx for j in by_origin.get(task.examples[i].id, [])]
                if len(aug_idx) > cfg.aug_batch_size:
                    aug_idx = sorted(rng.choice(aug_idx, size=cfg.aug_batch_size, replace=False).tolist())
                aug = self._aug_batch(pool, pool_tokens, aug_idx)

                if self.is_mrco:
                    while len(meta_order) < meta_size:
                        meta_order.extend(rng.permutation(len(meta)).tolist())
                    meta_idx, meta_order = meta_order[:meta_size], meta_order[meta_size:]
                    batch = MetaBatch(raw, aug, self._raw_batch(meta, meta_tokens, meta_idx))
                    metrics = train_iteration(batch, model, reweight_net, state, opt, self.lam,
                                              iteration, cfg.post_meta_weights)
                else:
                    metrics = fixed_weight_iteration(raw, aug if len(aug) else None, model,
                                                     main_optimizer, iteration)
                result.iterations.append(metrics)
                iteration += 1

            scores = self.evaluate(model, dev_tokens)
            for name, value in scores.items():
                result.trajectory[name].append(value)
            logger.debug(f"{self.method} seed {self.seed} epoch {epoch}: {scores}")

        if self.is_mrco:
            result.weights = self.weight_table(model, reweight_net, pool, pool_tokens)
        if self.out_dir:
            self.save_artifacts(result, model, vocab, state)
        return result

    def weight_table(self, model: TextEncoder, reweight_net: ReweightNet,
                     pool: Sequence[AugmentedExample], tokens: torch.Tensor) -> pd.DataFrame:
        """Final weight of every augmented training sample, evaluation mode"""
        weights = []
        with torch.no_grad():
            for start in range(0, len(pool), EVAL_BATCH):
                chunk = tokens[start:start + EVAL_BATCH]
                labels = torch.tensor([a.label for a in pool[start:start + EVAL_BATCH]], dtype=torch.long)
                H_hat = model.encode(chunk, train_mode=False)
                weights.extend(compute_weights(H_hat, labels, reweight_net, train_mode=False).tolist())
        return pd.DataFrame({
            'id': [a.id for a in pool],
            'origin_id': [a.origin_id for a in pool],
            'label': [a.label for a in pool],
            'augmenter': [a.augmenter for a in pool],
            'corrupted': [a.corrupted for a in pool],
            'weight': weights,
        })

    def save_artifacts(self, result: SeedResult, model: TextEncoder, vocab: Vocabulary,
                       state: Optional[ContrastiveState] = None) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        write_metrics_csv(os.path.join(self.out_dir, f"metrics_seed{self.seed}.csv"), result.iterations)
        if result.weights is not None:
            result.weights.to_csv(os.path.join(self.out_dir, f"weights_seed{self.seed}.csv"),
                                  index=False, float_format='%.10g')
        if state is not None:
            dump_queues(state.queues, os.path.join(self.out_dir, f"queues_seed{self.seed}.csv"))
        vocab.save(os.path.join(self.out_dir, f"vocab_seed{self.seed}.txt"))
        save_checkpoint(
            os.path.join(self.out_dir, f"checkpoint_seed{self.seed}.bin"),
            model,
            {'method': self.method, 'seed': self.seed, 'label_set': list(self.train.label_set),
             'max_len': self.config.max_len}
        )
