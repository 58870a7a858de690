"""
Black-box text augmenters and the readability filter.

Augmenters are pure functions of (text, parameters, rng); every raw example
gets its own `random.Random` seeded from the global seed and the example id,
so the augmented set does not depend on processing order.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Type
import csv
import logging
import random
import re
import string

import pandas as pd

from ..exceptions import DataFormatError, ValidationError
from .encoder import join_pair, SEP_TOKEN

logger = logging.getLogger(__name__)

AUGMENTED_COLUMNS = ['id', 'origin_id', 'label', 'augmenter', 'text']
FLIP_SUFFIX = '+flip'
EASYDATA_OPS = ('replace', 'insert', 'swap', 'delete')
CHARSWAP_OPS = ('insert', 'swap', 'delete', 'replace')


@dataclass
class AugmentedExample:
    id: str
    origin_id: str
    text: str
    label: int
    augmenter: str
    seed: int = 0

    @property
    def corrupted(self) -> bool:
        """True for deliberate label flips of the corruption benchmark"""
        return self.augmenter.endswith(FLIP_SUFFIX)


class SynonymLexicon:
    """Case-insensitive word -> synonyms map."""

    def __init__(self, entries: Optional[Dict[str, List[str]]] = None):
        self.entries: Dict[str, List[str]] = {}
        for word, synonyms in (entries or {}).items():
            if not synonyms:
                raise ValidationError(f"Lexicon entry '{word}' has no synonyms")
            self.entries[word.lower()] = [s.lower() for s in synonyms]

    @classmethod
    def load(cls, path: str) -> 'SynonymLexicon':
        """Read `word<TAB>syn1,syn2,...` lines; multi-word synonyms are skipped"""
        entries: Dict[str, List[str]] = {}
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip('\n')
                if not line.strip() or line.startswith('#'):
                    continue
                if '\t' not in line:
                    raise DataFormatError(f"{path}: expected word<TAB>synonyms", line_no)
                word, raw = line.split('\t', 1)
                synonyms = [s.strip().lower() for s in raw.split(',') if s.strip()]
                if not word.strip() or not synonyms:
                    raise DataFormatError(f"{path}: empty lexicon entry", line_no)
                single = [s for s in synonyms if len(s.split()) == 1 and s != word.lower()]
                if not single:
                    logger.warning(f"{path}:{line_no}: no single-token synonym for '{word}', skipped")
                    continue
                entries.setdefault(word.strip().lower(), []).extend(single)
        logger.info(f"Loaded {len(entries)} lexicon entries from {path}")
        return cls(entries)

    def save(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for word in sorted(self.entries):
                f.write(f"{word}\t{','.join(self.entries[word])}\n")

    def merge(self, other: 'SynonymLexicon') -> 'SynonymLexicon':
        """Union of both maps; synonym lists are concatenated without duplicates"""
        entries = {word: list(synonyms) for word, synonyms in self.entries.items()}
        for word, synonyms in other.entries.items():
            merged = entries.setdefault(word, [])
            merged.extend(s for s in synonyms if s not in merged)
        return SynonymLexicon(entries)

    def synonyms(self, word: str) -> List[str]:
        return self.entries.get(word.lower(), [])

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def _check_prob(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {p}")


def augment_synonym(text: str, lexicon: SynonymLexicon, replace_prob: float, rng: random.Random) -> str:
    """Replace each lexicon word with a random synonym with probability replace_prob"""
    _check_prob('replace_prob', replace_prob)
    tokens = text.split()
    out = []
    for token in tokens:
        synonyms = lexicon.synonyms(token)
        if synonyms and rng.random() < replace_prob:
            out.append(rng.choice(synonyms))
        else:
            out.append(token)
    return ' '.join(out)


def _replace_words(words: List[str], lexicon: SynonymLexicon, n: int, rng: random.Random) -> List[str]:
    candidates = [i for i, w in enumerate(words) if w in lexicon]
    rng.shuffle(candidates)
    new_words = list(words)
    for i in candidates[:n]:
        new_words[i] = rng.choice(lexicon.synonyms(words[i]))
    return new_words


def _insert_words(words: List[str], lexicon: SynonymLexicon, n: int, rng: random.Random) -> List[str]:
    new_words = list(words)
    for _ in range(n):
        synonyms: List[str] = []
        for _attempt in range(10):
            synonyms = lexicon.synonyms(rng.choice(new_words))
            if synonyms:
                break
        if not synonyms:
            return new_words
        new_words.insert(rng.randint(0, len(new_words)), rng.choice(synonyms))
    return new_words


def _swap_words(words: List[str], n: int, rng: random.Random) -> List[str]:
    new_words = list(words)
    if len(new_words) < 2:
        return new_words
    for _ in range(n):
        i, j = rng.sample(range(len(new_words)), 2)
        new_words[i], new_words[j] = new_words[j], new_words[i]
    return new_words


def _delete_words(words: List[str], n: int, rng: random.Random) -> List[str]:
    # never removes the last remaining token
    n = min(n, len(words) - 1)
    if n <= 0:
        return list(words)
    dropped = set(rng.sample(range(len(words)), n))
    return [w for i, w in enumerate(words) if i not in dropped]


def augment_easydata(
    text: str,
    lexicon: SynonymLexicon,
    ops_prob: Dict[str, float],
    rng: random.Random,
    alpha: float = 0.1
) -> str:
    """Replace, insert, swap and delete, in that order, each gated by its probability"""
    words = text.split()
    if not words:
        raise AugmentationError("easydata: cannot augment empty text")
    for op in EASYDATA_OPS:
        _check_prob(f"easydata {op}", ops_prob.get(op, 0.0))
    n = max(1, round(alpha * len(words)))

    if rng.random() < ops_prob.get('replace', 0.0):
        words = _replace_words(words, lexicon, n, rng)
    if rng.random() < ops_prob.get('insert', 0.0):
        words = _insert_words(words, lexicon, n, rng)
    if rng.random() < ops_prob.get('swap', 0.0):
        words = _swap_words(words, n, rng)
    if rng.random() < ops_prob.get('delete', 0.0):
        words = _delete_words(words, n, rng)
    return ' '.join(words)


def _charswap_token(token: str, op: str, rng: random.Random) -> str:
    if op in ('swap', 'delete') and len(token) < 2:
        return token
    if op == 'insert':
        pos = rng.randint(0, len(token))
        return token[:pos] + rng.choice(string.ascii_lowercase) + token[pos:]
    if op == 'swap':
        pos = rng.randint(0, len(token) - 2)
        return token[:pos] + token[pos + 1] + token[pos] + token[pos + 2:]
    if op == 'delete':
        pos = rng.randrange(len(token))
        return token[:pos] + token[pos + 1:]
    pos = rng.randrange(len(token))
    return token[:pos] + rng.choice(string.ascii_lowercase) + token[pos + 1:]


def augment_charswap(text: str, ops_prob: Dict[str, float], rng: random.Random) -> str:
    """Character noise: per token at most one of insert/swap/delete/replace"""
    tokens = text.split()
    if not tokens:
        raise AugmentationError("charswap: cannot augment empty text")
    total = sum(ops_prob.get(op, 0.0) for op in CHARSWAP_OPS)
    if total > 1.0 + 1e-12:
        raise ValidationError(f"charswap probabilities must sum to <= 1, got {total}")
    out = []
    for token in tokens:
        u = rng.random()
        cumulative = 0.0
        chosen = None
        for op in CHARSWAP_OPS:
            cumulative += ops_prob.get(op, 0.0)
            if u < cumulative:
                chosen = op
                break
        out.append(token if chosen is None else _charswap_token(token, chosen, rng))
    return ' '.join(out)


_WORD_RE = re.compile(r"[a-z]+(?:'[a-z]+)*")
_VOWEL_GROUP_RE = re.compile(r"[aeiouy]+")
_SENTENCE_END_RE = re.compile(r"[.!?]+")


def count_syllables(word: str) -> int:
    """Vowel groups, minus a silent final e (but not -le), at least 1"""
    word = word.lower()
    count = len(_VOWEL_GROUP_RE.findall(word))
    if word.endswith('e') and not word.endswith('le') and count > 1:
        count -= 1
    return max(1, count)


def flesch_score(text: str) -> float:
    """Flesch Reading Ease: 206.835 - 1.015 (words/sentences) - 84.6 (syllables/words)"""
    words = _WORD_RE.findall(text.lower())
    sentences = [s for s in _SENTENCE_END_RE.split(text) if _WORD_RE.search(s.lower())]
    n_words = max(1, len(words))
    n_sentences = max(1, len(sentences))
    n_syllables = sum(count_syllables(w) for w in words) if words else 1
    return 206.835 - 1.015 * (n_words / n_sentences) - 84.6 * (n_syllables / n_words)


def filter_augmented(
    examples: Sequence[AugmentedExample],
    lower: float = float('-inf'),
    upper: float = float('inf')
) -> List[AugmentedExample]:
    """Keep exactly the examples whose readability score lies in [lower, upper]"""
    lower = float('-inf') if lower is None else lower
    upper = float('inf') if upper is None else upper
    if lower > upper:
        raise ValidationError(f"filter_augmented: lower limit {lower} exceeds upper limit {upper}")
    # the separator is not prose
    kept = [e for e in examples if lower <= flesch_score(e.text.replace(SEP_TOKEN, ' ')) <= upper]
    logger.info(f"Readability filter [{lower}, {upper}] kept {len(kept)}/{len(examples)} augmented samples")
    return kept


class Augmenter:
    """Base class: a named, pure text transformation driven by an external rng."""

    name = 'base'

    def __call__(self, text: str, rng: random.Random) -> str:
        raise NotImplementedError

    @classmethod
    def from_config(cls, lexicon: SynonymLexicon, config) -> 'Augmenter':
        raise NotImplementedError


_REGISTRY: Dict[str, Type[Augmenter]] = {}


def register_augmenter(name: str) -> Callable[[Type[Augmenter]], Type[Augmenter]]:
    """Class decorator adding an augmenter to the name registry"""
    def decorator(cls: Type[Augmenter]) -> Type[Augmenter]:
        if name in _REGISTRY:
            raise ValidationError(f"Augmenter already registered: {name}")
        cls.name = name
        _REGISTRY[name] = cls
        return cls
    return decorator


def registered_augmenters() -> List[str]:
    return sorted(_REGISTRY)


@register_augmenter('synonym')
class SynonymAugmenter(Augmenter):
    def __init__(self, lexicon: SynonymLexicon, replace_prob: float = 0.3):
        _check_prob('replace_prob', replace_prob)
        self.lexicon = lexicon
        self.replace_prob = replace_prob

    def __call__(self, text: str, rng: random.Random) -> str:
        return augment_synonym(text, self.lexicon, self.replace_prob, rng)

    @classmethod
    def from_config(cls, lexicon, config):
        return cls(lexicon, config.replace_prob)


@register_augmenter('easydata')
class EasyDataAugmenter(Augmenter):
    def __init__(self, lexicon: SynonymLexicon, ops_prob: Dict[str, float], alpha: float = 0.1):
        self.lexicon = lexicon
        self.ops_prob = dict(ops_prob)
        self.alpha = alpha

    def __call__(self, text: str, rng: random.Random) -> str:
        return augment_easydata(text, self.lexicon, self.ops_prob, rng, self.alpha)

    @classmethod
    def from_config(cls, lexicon, config):
        return cls(lexicon, config.easydata_probs, config.easydata_alpha)


@register_augmenter('charswap')
class CharSwapAugmenter(Augmenter):
    def __init__(self, ops_prob: Dict[str, float]):
        self.ops_prob = dict(ops_prob)

    def __call__(self, text: str, rng: random.Random) -> str:
        return augment_charswap(text, self.ops_prob, rng)

    @classmethod
    def from_config(cls, lexicon, config):
        return cls(config.charswap_probs)


def build_augmenters(names: Sequence[str], lexicon: SynonymLexicon, config) -> List[Augmenter]:
    """Instantiate registered augmenters by name, in the given order"""
    unknown = [n for n in names if n not in _REGISTRY]
    if unknown:
        raise ValidationError(f"Unknown augmenter(s): {', '.join(unknown)}")
    if not names:
        raise ValidationError("At least one augmenter is required")
    return [_REGISTRY[n].from_config(lexicon, config) for n in names]


def _augment_example(example, augmenters: Sequence[Augmenter], per_example_count: int,
                     seed: int) -> List[AugmentedExample]:
    rng = random.Random(f"{seed}:{example.id}")
    raw_text = join_pair(example.text_a, example.text_b)
    seen = {raw_text}
    out = []
    for j in range(per_example_count):
        augmenter = augmenters[j % len(augmenters)]
        text_a = augmenter(example.text_a, rng)
        text_b = augmenter(example.text_b, rng) if example.text_b else None
        text = join_pair(text_a, text_b)
        if text in seen:
            continue
        seen.add(text)
        out.append(AugmentedExample(f"{example.id}-a{len(out)}", example.id, text,
                                    example.label, augmenter.name, seed))
    return out


def _augment_chunk(args) -> List[AugmentedExample]:
    chunk, augmenters, per_example_count, seed = args
    return [a for ex in chunk for a in _augment_example(ex, augmenters, per_example_count, seed)]


def build_augmented_dataset(
    raw: Iterable,
    augmenters: Sequence[Augmenter],
    per_example_count: int,
    seed: int,
    workers: int = 1
) -> List[AugmentedExample]:
    """Up to per_example_count distinct augmentations per raw example, cycling through augmenters"""
    if per_example_count < 1:
        raise ValidationError(f"per_example_count must be >= 1, got {per_example_count}")
    if not augmenters:
        raise ValidationError("At least one augmenter is required")
    examples = list(getattr(raw, 'examples', raw))
    try:
        if workers > 1 and len(examples) > workers:
            size = -(-len(examples) // workers)
            chunks = [examples[i:i + size] for i in range(0, len(examples), size)]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = pool.map(_augment_chunk,
                                 [(c, augmenters, per_example_count, seed) for c in chunks])
                out = [a for part in parts for a in part]
        else:
            out = _augment_chunk((examples, augmenters, per_example_count, seed))
    except ValidationError:
        raise
    except Exception as e:
        logger.error(f"Augmentation failed: {e}")
        raise AugmentationError(f"Failed to build augmented dataset: {str(e)}")

    # canonical order: by origin, generation order within an origin
    out.sort(key=lambda a: a.origin_id)
    ratio = len(out) / max(1, len(examples))
    logger.info(f"Generated {len(out)} augmented samples from {len(examples)} raw (ratio {ratio:.2f})")
    return out


def corrupt_labels(
    examples: Sequence[AugmentedExample],
    rate: float,
    n_classes: int,
    seed: int
) -> List[AugmentedExample]:
    """Flip the label of round(rate * n) randomly chosen samples to a different class"""
    _check_prob('corruption rate', rate)
    if n_classes < 2:
        raise ValidationError("Label corruption needs at least two classes")
    rng = random.Random(f"corrupt:{seed}")
    n_flip = round(rate * len(examples))
    flipped = set(rng.sample(range(len(examples)), n_flip))
    out = []
    for i, example in enumerate(examples):
        if i in flipped:
            new_label = rng.choice([k for k in range(n_classes) if k != example.label])
            example = replace(example, label=new_label, augmenter=example.augmenter + FLIP_SUFFIX)
        out.append(example)
    return out


def save_augmented(examples: Sequence[AugmentedExample], path: str) -> None:
    """TSV with header id, origin_id, label, augmenter, text"""
    frame = pd.DataFrame(
        [[e.id, e.origin_id, e.label, e.augmenter, e.text] for e in examples],
        columns=AUGMENTED_COLUMNS
    )
    frame.to_csv(path, sep='\t', index=False, lineterminator='\n', quoting=csv.QUOTE_NONE)


def load_augmented(path: str, seed: int = 0) -> List[AugmentedExample]:
    try:
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataFormatError(f"{path}: unreadable augmented dataset: {e}")
    if list(frame.columns) != AUGMENTED_COLUMNS:
        raise DataFormatError(f"{path}: expected header {' '.join(AUGMENTED_COLUMNS)}", 1)
    out = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        if not row.id or not row.origin_id or not row.text:
            raise DataFormatError(f"{path}: missing field", line)
        try:
            label = int(row.label)
        except ValueError:
            raise DataFormatError(f"{path}: label '{row.label}' is not an integer", line)
        out.append(AugmentedExample(row.id, row.origin_id, row.text, label, row.augmenter, seed))
    return out


class AugmentationError(ValidationError):
    """Raised when an augmenter cannot process its input"""
    pass
