from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import csv
import logging

import pandas as pd
from sklearn.model_selection import train_test_split

from ..exceptions import DataFormatError, ValidationError
from .encoder import join_pair

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ['id', 'label', 'text_a', 'text_b']


@dataclass(frozen=True)
class Example:
    id: str
    label: int
    text_a: str
    text_b: Optional[str] = None

    @property
    def text(self) -> str:
        return join_pair(self.text_a, self.text_b)


@dataclass
class Dataset:
    name: str
    examples: List[Example]
    label_set: List[int] = field(default_factory=list)
    split: str = 'train'

    def __post_init__(self):
        if not self.label_set:
            top = max((e.label for e in self.examples), default=1)
            self.label_set = list(range(max(top, 1) + 1))
        if len(self.label_set) < 2:
            raise ValidationError(f"{self.name}: at least two labels are required")
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"{self.name}: example ids are not unique")
        allowed = set(self.label_set)
        for e in self.examples:
            if e.label not in allowed:
                raise ValidationError(f"{self.name}: label {e.label} of {e.id} not in {self.label_set}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    @property
    def n_classes(self) -> int:
        return len(self.label_set)

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.examples]

    @property
    def texts(self) -> List[str]:
        return [e.text for e in self.examples]

    def by_id(self) -> Dict[str, Example]:
        return {e.id: e for e in self.examples}

    def subset(self, ids: Sequence[str], name: Optional[str] = None) -> 'Dataset':
        """Examples with the given ids, in dataset order"""
        wanted = set(ids)
        return Dataset(name or self.name, [e for e in self.examples if e.id in wanted],
                       list(self.label_set), self.split)


def load_dataset(
    path: str,
    name: Optional[str] = None,
    split: str = 'train',
    label_set: Optional[List[int]] = None
) -> Dataset:
    """Parse a TSV with header `id label text_a [text_b]`"""
    try:
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE)
    except FileNotFoundError:
        raise DataFormatError(f"Dataset file not found: {path}")
    except Exception as e:
        raise DataFormatError(f"{path}: unreadable dataset: {e}")
    columns = list(frame.columns)
    if columns not in (DATASET_COLUMNS[:3], DATASET_COLUMNS):
        raise DataFormatError(f"{path}: expected header id, label, text_a[, text_b]", 1)

    examples = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        record = {k: (v if isinstance(v, str) else '') for k, v in row._asdict().items()}
        if not record['id'] or not record['text_a']:
            raise DataFormatError(f"{path}: missing column value", line)
        try:
            label = int(record['label'])
        except ValueError:
            raise DataFormatError(f"{path}: label '{record['label']}' is not an integer", line)
        if label < 0 or (label_set is not None and label not in label_set):
            raise DataFormatError(f"{path}: unknown label {label}", line)
        examples.append(Example(record['id'], label, record['text_a'], record.get('text_b') or None))

    dataset = Dataset(name or path, examples, list(label_set or []), split)
    logger.info(f"Loaded {len(dataset)} {split} examples from {path}")
    return dataset


def save_dataset(dataset: Dataset, path: str) -> None:
    has_pairs = any(e.text_b for e in dataset.examples)
    columns = DATASET_COLUMNS if has_pairs else DATASET_COLUMNS[:3]
    rows = [[e.id, e.label, e.text_a] + ([e.text_b or ''] if has_pairs else []) for e in dataset.examples]
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, sep='\t', index=False, lineterminator='\n', quoting=csv.QUOTE_NONE)


def split_meta(train: Dataset, meta_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified hold-out of the meta set; returns (task, meta)"""
    if not 0.0 < meta_fraction < 1.0:
        raise ValidationError(f"meta_fraction must lie in (0, 1), got {meta_fraction}")
    counts: Dict[int, int] = {}
    for label in train.labels:
        counts[label] = counts.get(label, 0) + 1
    small = sorted(k for k, c in counts.items() if c < 2)
    if small:
        raise ValidationError(f"Cannot stratify: classes {small} have fewer than 2 examples")

    ids = [e.id for e in train.examples]
    try:
        task_ids, meta_ids = train_test_split(
            ids, test_size=meta_fraction, stratify=train.labels, random_state=seed)
    except ValueError as e:
        raise ValidationError(f"Cannot split {len(ids)} examples with meta_fraction {meta_fraction}: {e}")
    task = train.subset(task_ids, f"{train.name}/task")
    meta = train.subset(meta_ids, f"{train.name}/meta")
    logger.info(f"Split {len(train)} examples into {len(task)} task / {len(meta)} meta")
    return task, meta
