"""
Experiment orchestration: data preparation, per-seed runs of every method,
result aggregation and the analysis exports (weight histograms, dev curves,
hyperparameter sweeps).
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import copy
import itertools
import logging
import os

import numpy as np
import pandas as pd
import torch

from ..config import ExperimentConfig
from ..exceptions import ConfigurationError, ExperimentError, MRCoError, ValidationError
from .augment import (
    AugmentedExample, build_augmented_dataset, build_augmenters, corrupt_labels, load_augmented,
    save_augmented, SynonymLexicon
)
from .checkpoint import restore_encoder
from .dataset import Dataset, Example, load_dataset, save_dataset, split_meta
from .encoder import TextEncoder, Vocabulary
from .synthetic import SyntheticTaskGenerator
from .trainer import encode_texts, ExperimentTrainer, MRCO_METHODS, predict, score, SeedResult

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ['method', 'seed', 'metric_name', 'value', 'epoch']
HISTOGRAM_COLUMNS = ['bin_low', 'bin_high', 'count']
SWEEP_KEYS = {'n_neg', 'tau', 'lam', 'rho', 'filter_lower', 'filter_upper'}

__all__ = [
    'Dataset', 'Example', 'load_dataset', 'save_dataset', 'split_meta', 'evaluate',
    'RunResult', 'PreparedData', 'prepare_data', 'weight_histogram', 'write_results_csv', 'run_experiment',
    'expand_grid', 'sweep', 'evaluate_checkpoint', 'rank_methods',
]


@dataclass
class RunResult:
    method: str
    metric: str
    per_seed: Dict[int, float]
    trajectories: Dict[int, List[float]] = field(default_factory=dict)
    histogram: Optional[List[Tuple[float, float, int]]] = None
    # seed -> (mean weight of clean samples, mean weight of flipped samples)
    weight_separation: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    mean: float = 0.0
    std: float = 0.0

    def __post_init__(self):
        values = np.array([self.per_seed[s] for s in sorted(self.per_seed)], dtype=np.float64)
        if values.size == 0:
            raise ValidationError(f"RunResult for {self.method} has no seeds")
        self.mean = float(values.mean())
        # sample standard deviation; a single seed has none
        self.std = float(values.std(ddof=1)) if values.size > 1 else 0.0

    def summary(self) -> Dict[str, Any]:
        return {'method': self.method, 'metric': self.metric, 'mean': self.mean, 'std': self.std,
                'seeds': len(self.per_seed)}


@dataclass
class PreparedData:
    train: Dataset
    dev: Dataset
    augmented: List[AugmentedExample]
    lexicon: SynonymLexicon


def atomic_write_csv(frame: pd.DataFrame, path: str) -> None:
    """Write to a temporary file, then rename over the target"""
    tmp_path = f"{path}.tmp"
    frame.to_csv(tmp_path, index=False, float_format='%.10g', lineterminator='\n')
    os.replace(tmp_path, path)


def evaluate(model: TextEncoder, dataset: Dataset, metric: str, vocab: Vocabulary, max_len: int) -> float:
    """Accuracy or MCC of the model's argmax predictions on a dataset"""
    if len(dataset) == 0:
        raise ValidationError("evaluate: the dataset is empty")
    tokens = encode_texts([e.text_a for e in dataset], [e.text_b for e in dataset], vocab, max_len)
    return score(dataset.labels, predict(model, tokens), metric)


def weight_histogram(weights: Sequence[float], bins: int = 20) -> List[Tuple[float, float, int]]:
    """Counts of weights in `bins` equal-width bins over [0, 1]"""
    counts, edges = np.histogram(np.asarray(weights, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_results_csv(path: str, results: Sequence[SeedResult]) -> None:
    """Long format: method, seed, metric_name, value, epoch"""
    rows = [
        [r.method, r.seed, name, value, epoch]
        for r in results
        for name in sorted(r.trajectory)
        for epoch, value in enumerate(r.trajectory[name])
    ]
    atomic_write_csv(pd.DataFrame(rows, columns=RESULT_COLUMNS), path)


def prepare_data(config: ExperimentConfig, data_dir: Optional[str] = None) -> PreparedData:
    """Load (or generate) train/dev data and the augmented set the config describes"""
    data_dir = data_dir or os.path.join(config.out_dir, 'data')
    os.makedirs(data_dir, exist_ok=True)
    lexicon = SynonymLexicon.load(config.lexicon_path)

    if config.train_path is None:
        generator = SyntheticTaskGenerator(
            seed=config.data_seed, signal_tokens=config.signal_tokens, sentence_length=config.sentence_length)
        train, dev = generator.generate(config.n_train, config.n_dev)
        lexicon = lexicon.merge(generator.lexicon())
        save_dataset(train, os.path.join(data_dir, 'train.tsv'))
        save_dataset(dev, os.path.join(data_dir, 'dev.tsv'))
    else:
        train = load_dataset(config.train_path, split='train')
        if config.dev_path is None:
            raise ConfigurationError("dev_path is required with a custom train_path")
        dev = load_dataset(config.dev_path, split='dev', label_set=train.label_set)

    if config.aug_path is not None:
        augmented = load_augmented(config.aug_path)
        known = {e.id for e in train}
        orphans = [a.id for a in augmented if a.origin_id not in known]
        if orphans:
            raise ValidationError(f"{len(orphans)} augmented samples reference unknown raw ids, e.g. {orphans[0]}")
    else:
        augmenters = build_augmenters(config.augmenters, lexicon, config)
        augmented = build_augmented_dataset(train, augmenters, config.per_example_count, config.data_seed)
        if config.train_path is None and config.corruption_rate > 0:
            augmented = corrupt_labels(augmented, config.corruption_rate, train.n_classes, config.data_seed)
        save_augmented(augmented, os.path.join(data_dir, 'augmented.tsv'))
    return PreparedData(train, dev, augmented, lexicon)


def _run_seed(args) -> SeedResult:
    config, data, method, seed, out_dir, progress = args
    torch.set_num_threads(1)
    trainer = ExperimentTrainer(config, data.train, data.dev, data.augmented, method, seed, out_dir, progress)
    return trainer.run()


def run_experiment(
    config: ExperimentConfig,
    data: Optional[PreparedData] = None,
    methods: Optional[Sequence[str]] = None,
    progress: bool = True
) -> Dict[str, RunResult]:
    """Run each method over the seed list and write its results under <out_dir>/<method>/"""
    config.validate()
    data = data or prepare_data(config)
    results: Dict[str, RunResult] = {}

    for method in methods or [config.method]:
        method_dir = os.path.join(config.out_dir, method)
        os.makedirs(method_dir, exist_ok=True)
        jobs = [(config, data, method, seed, method_dir, progress) for seed in config.seeds]
        seed_results: List[SeedResult] = []
        try:
            if config.workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=config.workers) as pool:
                    for seed_result in pool.map(_run_seed, jobs):
                        seed_results.append(seed_result)
            else:
                for job in jobs:
                    seed_results.append(_run_seed(job))
        except ValidationError:
            raise
        except Exception as e:
            if seed_results:
                write_results_csv(os.path.join(method_dir, 'results.csv'), seed_results)
            logger.error(f"{method} failed after {len(seed_results)} seed(s): {e}")
            raise ExperimentError(f"Failed to run {method}: {str(e)}", partial_path=method_dir)

        write_results_csv(os.path.join(method_dir, 'results.csv'), seed_results)
        result = RunResult(
            method, config.metric,
            {r.seed: r.final(config.metric) for r in seed_results},
            trajectories={r.seed: r.trajectory[config.metric] for r in seed_results}
        )
        if method in MRCO_METHODS:
            weights = pd.concat([r.weights for r in seed_results if r.weights is not None])
            result.histogram = weight_histogram(weights['weight'], config.histogram_bins)
            atomic_write_csv(pd.DataFrame(result.histogram, columns=HISTOGRAM_COLUMNS),
                             os.path.join(method_dir, 'histogram.csv'))
            for r in seed_results:
                table = r.weights
                if table is not None and table['corrupted'].any() and (~table['corrupted']).any():
                    result.weight_separation[r.seed] = (
                        float(table.loc[~table['corrupted'], 'weight'].mean()),
                        float(table.loc[table['corrupted'], 'weight'].mean()))
        logger.info(f"{method}: {config.metric} {result.mean:.4f} +/- {result.std:.4f} "
                    f"over {len(config.seeds)} seed(s)")
        results[method] = result
    if len(results) > 1:
        logger.info("Ranking: " + " >= ".join(f"{m} {mean:.4f}" for m, mean in rank_methods(results)))
    return results


def rank_methods(results: Dict[str, RunResult]) -> List[Tuple[str, float]]:
    """Methods by descending mean metric; ties keep run order"""
    return sorted(((method, r.mean) for method, r in results.items()), key=lambda item: -item[1])


def expand_grid(grid: Dict[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of the grid, keys in sorted order"""
    if not grid:
        raise ConfigurationError("Sweep grid is empty")
    keys = sorted(grid)
    resolved = [ExperimentConfig.ALIASES.get(k, k) for k in keys]
    unknown = [k for k, r in zip(keys, resolved) if r not in SWEEP_KEYS]
    if unknown:
        raise ConfigurationError(f"Unsupported sweep key(s): {', '.join(unknown)}")
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise ConfigurationError(f"Sweep values for {k} must be a non-empty list")
    return [dict(zip(resolved, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(
    config: ExperimentConfig,
    grid: Dict[str, Sequence[Any]],
    progress: bool = True
) -> pd.DataFrame:
    """One run_experiment per grid point; consolidated into <out_dir>/sweep.csv"""
    points = expand_grid(grid)
    config.validate()
    data = prepare_data(config)
    rows = []
    for index, point in enumerate(points):
        point_config = copy.deepcopy(config)
        for key, value in point.items():
            point_config.set(key, value)
        point_config.out_dir = os.path.join(config.out_dir, f"point{index:03d}")
        point_config.validate()
        try:
            result = run_experiment(point_config, data, progress=progress)[point_config.method]
        except MRCoError:
            if rows:
                atomic_write_csv(pd.DataFrame(rows), os.path.join(config.out_dir, 'sweep.csv'))
            raise
        rows.append({**point, **result.summary()})
        logger.info(f"Sweep point {index + 1}/{len(points)} {point}: {result.mean:.4f}")

    frame = pd.DataFrame(rows)
    atomic_write_csv(frame, os.path.join(config.out_dir, 'sweep.csv'))
    return frame


def evaluate_checkpoint(checkpoint_path: str, vocab_path: str, data_path: str,
                        metrics: Sequence[str] = ('accuracy', 'mcc')) -> Dict[str, float]:
    """Score a saved encoder on a dataset file"""
    model, metadata = restore_encoder(checkpoint_path)
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != model.vocab_size:
        raise ValidationError(f"Vocabulary has {len(vocab)} tokens, checkpoint expects {model.vocab_size}")
    dataset = load_dataset(data_path, split='dev', label_set=metadata.get('label_set'))
    return {m: evaluate(model, dataset, m, vocab, metadata.get('max_len', 64)) for m in metrics}
