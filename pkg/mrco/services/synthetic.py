import logging
import random
from typing import Dict, List, Optional, Tuple

from faker import Faker

from ..exceptions import ConfigurationError
from .augment import SynonymLexicon
from .dataset import Dataset, Example

logger = logging.getLogger(__name__)


class SyntheticTaskGenerator:
    def __init__(
        self,
        seed: Optional[int] = None,
        signal_tokens: int = 3,
        sentence_length: int = 12,
        signal_purity: float = 0.8
    ):
        """
        Initialize the generator with an optional random seed.

        Each sentence mixes `signal_tokens` class-indicative words into Faker
        filler; every signal word is drawn from its own class with probability
        `signal_purity`, so the task is learnable but not trivially so.
        """
        if signal_tokens < 1 or sentence_length <= signal_tokens:
            raise ConfigurationError(
                f"Need 1 <= signal_tokens < sentence_length, got {signal_tokens}, {sentence_length}")
        self.seed = seed
        self.fake = Faker()
        self.fake.seed_instance(seed)
        self.rng = random.Random(seed)
        self.signal_tokens = signal_tokens
        self.sentence_length = sentence_length
        self.signal_purity = signal_purity

        # Class-indicative words, grouped with their synonyms
        self.signal_words: Dict[int, List[List[str]]] = {
            0: [
                ["good", "fine", "nice"],
                ["great", "superb", "grand"],
                ["happy", "glad", "cheerful"],
                ["love", "adore", "cherish"],
                ["bright", "sunny", "vivid"],
            ],
            1: [
                ["bad", "poor", "awful"],
                ["terrible", "dreadful", "horrible"],
                ["sad", "unhappy", "gloomy"],
                ["hate", "despise", "loathe"],
                ["dark", "dim", "murky"],
            ],
        }

        # Neutral words that carry synonyms too, so augmenters touch filler
        self.neutral_words = [
            ["house", "home", "dwelling"],
            ["car", "auto", "vehicle"],
            ["road", "street", "lane"],
            ["city", "town", "borough"],
            ["quick", "fast", "rapid"],
            ["big", "large", "huge"],
        ]

    @property
    def n_classes(self) -> int:
        return len(self.signal_words)

    def lexicon(self) -> SynonymLexicon:
        """Synonym map covering every word group the generator uses"""
        entries = {}
        groups = [g for groups in self.signal_words.values() for g in groups] + self.neutral_words
        for group in groups:
            for word in group:
                entries[word] = [w for w in group if w != word]
        return SynonymLexicon(entries)

    def generate_sentence(self, label: int) -> str:
        """
        Generate one sentence whose signal words mostly indicate `label`
        """
        words = [w.lower() for w in self.fake.words(self.sentence_length - self.signal_tokens)]
        if self.rng.random() < 0.5:
            words[self.rng.randrange(len(words))] = self.rng.choice(self.rng.choice(self.neutral_words))
        for _ in range(self.signal_tokens):
            source = label
            if self.rng.random() >= self.signal_purity:
                source = self.rng.choice([k for k in self.signal_words if k != label])
            group = self.rng.choice(self.signal_words[source])
            words.insert(self.rng.randint(0, len(words)), self.rng.choice(group))
        return ' '.join(words) + ' .'

    def generate_dataset(self, n: int, split: str = 'train') -> Dataset:
        """
        Generate a class-balanced dataset of `n` examples
        """
        examples = [
            Example(f"{split}-{i:05d}", i % self.n_classes, self.generate_sentence(i % self.n_classes))
            for i in range(n)
        ]
        self.rng.shuffle(examples)
        return Dataset(f"synthetic-{split}", examples, list(range(self.n_classes)), split)

    def generate(self, n_train: int, n_dev: int) -> Tuple[Dataset, Dataset]:
        train = self.generate_dataset(n_train, 'train')
        dev = self.generate_dataset(n_dev, 'dev')
        logger.info(f"Generated synthetic benchmark: {len(train)} train, {len(dev)} dev")
        return train, dev
