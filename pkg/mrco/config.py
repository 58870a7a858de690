from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, get_args, get_origin, List, Optional, Union
import json
import os

from dotenv import load_dotenv

from .exceptions import ConfigurationError

load_dotenv()


def _matches(value: Any, annotation: Any) -> bool:
    """isinstance against a field annotation; ints pass as reals, bools never pass as numbers"""
    origin = get_origin(annotation)
    if origin is Union:
        return any(_matches(value, a) for a in get_args(annotation))
    if origin is list:
        (item,) = get_args(annotation)
        return isinstance(value, list) and all(_matches(v, item) for v in value)
    if origin is dict:
        key, item = get_args(annotation)
        return isinstance(value, dict) and all(_matches(k, key) and _matches(v, item) for k, v in value.items())
    if annotation is type(None):
        return value is None
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, annotation)


def _type_name(annotation: Any) -> str:
    if get_origin(annotation) is None:
        return annotation.__name__
    return str(annotation).replace('typing.', '')


class Config:
    # Base paths
    BASE_DIR = os.path.abspath(os.path.dirname(__file__))
    DATA_DIR = os.path.join(BASE_DIR, 'data')
    LEXICON_PATH = os.path.join(DATA_DIR, 'lexicon.tsv')
    OUT_DIR = os.environ.get('MRK_OUT_DIR') or 'runs'

    # Main module M
    ENCODER = {
        'variant': 'textcnn',
        'supported_variants': ['embed_mean_mlp', 'textcnn'],
        'd_emb': 64,
        'd_h': 64,
        'n_filters': 32,
        'filter_widths': [3, 4, 5],
        'max_len': 64,
        'dropout': 0.1,
        'min_frequency': 1,
    }

    # Meta reweighting plug-in
    REWEIGHTER = {
        'd_label': 16,
        'hidden': [64],
        'dropout': 0.1,
        'max_hidden_layers': 2,
    }

    # Bilevel optimization
    META = {
        'main_lr': 1e-3,
        'meta_lr': 1e-1,  # alpha of the one-step virtual update
        'reweight_lr': 1e-3,
        'post_meta_weights': True,
    }

    # Contrastive module
    CONTRASTIVE = {
        'rho': 0.9,
        'n_neg': 128,
        'tau': 5,
        'lam': 0.1,
        'gamma': 0.99,
        'temperature': 1.0,
        'normalize': True,
    }

    AUGMENT = {
        'augmenters': ['easydata', 'synonym', 'charswap'],
        'per_example_count': 6,
        'replace_prob': 0.3,
        'easydata_probs': {'replace': 0.5, 'insert': 0.5, 'swap': 0.5, 'delete': 0.5},
        'easydata_alpha': 0.1,
        'charswap_probs': {'insert': 0.05, 'swap': 0.05, 'delete': 0.05, 'replace': 0.05},
        # None means unbounded; (None, None) reproduces plain +Aug
        'filter_lower': None,
        'filter_upper': None,
    }

    HARNESS = {
        'methods': ['plain', 'aug', 'aug_filter', 'mrco', 'mrco_no_contrastive', 'mrco_fifo'],
        'metrics': ['accuracy', 'mcc'],
        'method': 'mrco',
        'metric': 'accuracy',
        'epochs': 5,
        'batch_size': 32,
        'aug_batch_size': 64,
        'meta_batch_size': None,  # defaults to batch_size
        'meta_fraction': 0.1,
        'seeds': [0, 1, 2, 3, 4],
        'data_seed': 0,  # synthetic data, augmentation and corruption
        'histogram_bins': 20,
        'workers': 1,
        'gradcheck_trials': 100,
    }

    # Desk-scale benchmark
    SYNTHETIC = {
        'synthetic': True,
        'n_train': 500,
        'n_dev': 200,
        'corruption_rate': 0.3,
        'signal_tokens': 3,
        'sentence_length': 12,
    }


@dataclass
class ExperimentConfig:
    """Every hyperparameter and run descriptor of one experiment."""
    # data
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    aug_path: Optional[str] = None
    lexicon_path: str = Config.LEXICON_PATH
    out_dir: str = field(default_factory=lambda: os.environ.get('MRK_OUT_DIR') or Config.OUT_DIR)
    # run
    method: str = Config.HARNESS['method']
    metric: str = Config.HARNESS['metric']
    epochs: int = Config.HARNESS['epochs']
    batch_size: int = Config.HARNESS['batch_size']
    aug_batch_size: int = Config.HARNESS['aug_batch_size']
    meta_batch_size: Optional[int] = Config.HARNESS['meta_batch_size']
    meta_fraction: float = Config.HARNESS['meta_fraction']
    seeds: List[int] = field(default_factory=lambda: list(Config.HARNESS['seeds']))
    data_seed: int = Config.HARNESS['data_seed']
    histogram_bins: int = Config.HARNESS['histogram_bins']
    workers: int = Config.HARNESS['workers']
    gradcheck_trials: int = Config.HARNESS['gradcheck_trials']
    # encoder
    encoder_variant: str = Config.ENCODER['variant']
    d_emb: int = Config.ENCODER['d_emb']
    d_h: int = Config.ENCODER['d_h']
    n_filters: int = Config.ENCODER['n_filters']
    max_len: int = Config.ENCODER['max_len']
    encoder_dropout: float = Config.ENCODER['dropout']
    min_frequency: int = Config.ENCODER['min_frequency']
    # reweighter
    d_label: int = Config.REWEIGHTER['d_label']
    reweight_hidden: List[int] = field(default_factory=lambda: list(Config.REWEIGHTER['hidden']))
    reweight_dropout: float = Config.REWEIGHTER['dropout']
    # meta loop
    main_lr: float = Config.META['main_lr']
    meta_lr: float = Config.META['meta_lr']
    reweight_lr: float = Config.META['reweight_lr']
    post_meta_weights: bool = Config.META['post_meta_weights']
    # contrastive (Table I plus momentum and temperature)
    rho: float = Config.CONTRASTIVE['rho']
    n_neg: int = Config.CONTRASTIVE['n_neg']
    tau: int = Config.CONTRASTIVE['tau']
    lam: float = Config.CONTRASTIVE['lam']
    gamma: float = Config.CONTRASTIVE['gamma']
    temperature: float = Config.CONTRASTIVE['temperature']
    normalize: bool = Config.CONTRASTIVE['normalize']
    # augmentation
    augmenters: List[str] = field(default_factory=lambda: list(Config.AUGMENT['augmenters']))
    per_example_count: int = Config.AUGMENT['per_example_count']
    replace_prob: float = Config.AUGMENT['replace_prob']
    easydata_probs: Dict[str, float] = field(
        default_factory=lambda: dict(Config.AUGMENT['easydata_probs']))
    easydata_alpha: float = Config.AUGMENT['easydata_alpha']
    charswap_probs: Dict[str, float] = field(
        default_factory=lambda: dict(Config.AUGMENT['charswap_probs']))
    filter_lower: Optional[float] = Config.AUGMENT['filter_lower']
    filter_upper: Optional[float] = Config.AUGMENT['filter_upper']
    # synthetic benchmark
    synthetic: bool = Config.SYNTHETIC['synthetic']
    n_train: int = Config.SYNTHETIC['n_train']
    n_dev: int = Config.SYNTHETIC['n_dev']
    corruption_rate: float = Config.SYNTHETIC['corruption_rate']
    signal_tokens: int = Config.SYNTHETIC['signal_tokens']
    sentence_length: int = Config.SYNTHETIC['sentence_length']

    ALIASES = {
        'lambda': 'lam',
        'N_Neg': 'n_neg',
        'alpha': 'meta_lr',
        'variant': 'encoder_variant',
    }

    @property
    def effective_meta_batch_size(self) -> int:
        return self.meta_batch_size or self.batch_size

    @property
    def lower_limit(self) -> float:
        return float('-inf') if self.filter_lower is None else float(self.filter_lower)

    @property
    def upper_limit(self) -> float:
        return float('inf') if self.filter_upper is None else float(self.filter_upper)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """Build a config from a (possibly partial) dict of field values"""
        config = cls()
        for key, value in data.items():
            if key.startswith('_'):
                continue  # provenance fields of a saved effective config
            config.set(key, value)
        return config

    @classmethod
    def from_json(cls, path: str) -> 'ExperimentConfig':
        """Load a config from a JSON file"""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in {path}: {str(e)}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def set(self, key: str, value: Any) -> None:
        """Set one field, resolving aliases"""
        name = self.ALIASES.get(key, key)
        if name not in {f.name for f in fields(self)}:
            raise ConfigurationError(f"Unknown config key: {key}")
        setattr(self, name, value)

    def apply_override(self, assignment: str) -> None:
        """Apply a `key=value` override; the value is parsed as JSON when possible"""
        if '=' not in assignment:
            raise ConfigurationError(f"Override must look like key=value: {assignment}")
        key, raw = assignment.split('=', 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set(key.strip(), value)

    def validate(self) -> 'ExperimentConfig':
        """Reject every invariant violation before any computation starts"""
        mistyped = [
            f"{f.name} must be {_type_name(f.type)}, got {getattr(self, f.name)!r}"
            for f in fields(self) if not _matches(getattr(self, f.name), f.type)
        ]
        if mistyped:
            raise ConfigurationError("; ".join(mistyped))

        errors = []

        def check(condition: bool, message: str):
            if not condition:
                errors.append(message)

        check(self.method in Config.HARNESS['methods'], f"Unsupported method: {self.method}")
        check(self.metric in Config.HARNESS['metrics'], f"Unsupported metric: {self.metric}")
        check(self.encoder_variant in Config.ENCODER['supported_variants'],
              f"Unsupported encoder variant: {self.encoder_variant}")
        check(0.0 <= self.rho <= 1.0, f"rho must lie in [0, 1], got {self.rho}")
        check(self.n_neg >= 1, f"n_neg must be >= 1, got {self.n_neg}")
        check(self.tau >= 1, f"tau must be >= 1, got {self.tau}")
        check(self.lam >= 0.0, f"lambda must be >= 0, got {self.lam}")
        check(0.0 <= self.gamma <= 1.0, f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ('main_lr', 'meta_lr', 'reweight_lr'):
            check(getattr(self, name) > 0, f"{name} must be > 0, got {getattr(self, name)}")
        check(self.temperature > 0, f"temperature must be > 0, got {self.temperature}")
        check(0.0 < self.meta_fraction < 1.0,
              f"meta_fraction must lie in (0, 1), got {self.meta_fraction}")
        check(self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}")
        check(self.data_seed >= 0, f"data_seed must be >= 0, got {self.data_seed}")
        for name in ('batch_size', 'aug_batch_size', 'per_example_count', 'histogram_bins',
                     'workers', 'max_len', 'd_emb', 'd_h', 'n_filters', 'd_label',
                     'gradcheck_trials', 'min_frequency'):
            check(getattr(self, name) >= 1, f"{name} must be >= 1, got {getattr(self, name)}")
        check(self.meta_batch_size is None or self.meta_batch_size >= 1,
              f"meta_batch_size must be >= 1, got {self.meta_batch_size}")
        check(isinstance(self.seeds, list) and len(self.seeds) > 0
              and all(isinstance(s, int) for s in self.seeds),
              f"seeds must be a non-empty list of integers, got {self.seeds}")
        check(self.lower_limit <= self.upper_limit,
              f"filter_lower {self.filter_lower} exceeds filter_upper {self.filter_upper}")
        check(len(self.reweight_hidden) <= Config.REWEIGHTER['max_hidden_layers'],
              f"reweight net must stay shallow (< 3 hidden layers), got {self.reweight_hidden}")
        check(0.0 <= self.reweight_dropout < 1.0, "reweight_dropout must lie in [0, 1)")
        check(0.0 <= self.encoder_dropout < 1.0, "encoder_dropout must lie in [0, 1)")
        check(0.0 <= self.replace_prob <= 1.0, "replace_prob must lie in [0, 1]")
        check(0.0 <= self.corruption_rate <= 1.0, "corruption_rate must lie in [0, 1]")
        for group in ('easydata_probs', 'charswap_probs'):
            for op, p in getattr(self, group).items():
                check(0.0 <= p <= 1.0, f"{group}.{op} must lie in [0, 1], got {p}")
        check(sum(self.charswap_probs.values()) <= 1.0, "charswap_probs must sum to <= 1")
        if self.encoder_variant == 'textcnn':
            widest = max(Config.ENCODER['filter_widths'])
            check(self.max_len >= widest,
                  f"max_len must be >= {widest} for the textcnn encoder, got {self.max_len}")
        check(self.synthetic or self.train_path is not None,
              "train_path is required when synthetic data is disabled")

        if errors:
            raise ConfigurationError("; ".join(errors))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str, overrides: Optional[List[str]] = None) -> None:
        """Write the fully resolved config (and the applied overrides) as JSON"""
        payload = self.to_dict()
        payload['_overrides'] = list(overrides or [])
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
