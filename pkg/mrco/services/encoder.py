from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence
import logging

import torch
import torch.nn as nn

from .. import DTYPE
from ..exceptions import ConfigurationError, DataFormatError, ValidationError
from . import autodiff as ad

logger = logging.getLogger(__name__)

PAD, UNK, SEP = 0, 1, 2
PAD_TOKEN, UNK_TOKEN, SEP_TOKEN = '[pad]', '[unk]', '[sep]'
SPECIAL_TOKENS = [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN]


def normalize(text: str) -> List[str]:
    """Lowercase and whitespace-split"""
    return text.lower().split()


def join_pair(text_a: str, text_b: Optional[str] = None) -> str:
    """Join a sentence pair around the separator token"""
    if text_b is None:
        return text_a
    return f"{text_a} {SEP_TOKEN} {text_b}"


@dataclass
class Vocabulary:
    token_to_id: Dict[str, int] = field(default_factory=dict)
    id_to_token: List[str] = field(default_factory=list)
    min_frequency: int = 1

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = list(SPECIAL_TOKENS)
            self.token_to_id = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        if self.id_to_token[:3] != SPECIAL_TOKENS:
            raise ValidationError("Vocabulary must start with the pad, unk and sep tokens")
        if any(self.token_to_id.get(t) != i for i, t in enumerate(self.id_to_token)) \
                or len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("Vocabulary maps are not mutual inverses")

    @classmethod
    def build(cls, texts: Iterable[str], min_frequency: int = 1) -> 'Vocabulary':
        """Build a vocabulary from raw texts, most frequent tokens first"""
        counts = Counter(tok for text in texts for tok in normalize(text))
        id_to_token = list(SPECIAL_TOKENS)
        for token, count in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            if count >= min_frequency and token not in SPECIAL_TOKENS:
                id_to_token.append(token)
        vocab = cls({t: i for i, t in enumerate(id_to_token)}, id_to_token, min_frequency)
        logger.info(f"Built vocabulary of {len(vocab)} tokens (min_frequency={min_frequency})")
        return vocab

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path: str) -> None:
        """One token per line, line number = id"""
        with open(path, 'w', encoding='utf-8') as f:
            for token in self.id_to_token:
                f.write(f"{token}\n")

    @classmethod
    def load(cls, path: str) -> 'Vocabulary':
        with open(path, 'r', encoding='utf-8') as f:
            tokens = [line.rstrip('\n') for line in f]
        for line_no, token in enumerate(tokens[:3], start=1):
            if token != SPECIAL_TOKENS[line_no - 1]:
                raise DataFormatError(f"{path}: expected {SPECIAL_TOKENS[line_no - 1]}", line_no)
        return cls({t: i for i, t in enumerate(tokens)}, tokens)


@dataclass
class TokenizedText:
    ids: List[int]
    empty: bool = False


def tokenize(
    text: str,
    vocab: Vocabulary,
    max_len: int,
    text_b: Optional[str] = None
) -> TokenizedText:
    """Map text (or a sentence pair) to a padded, truncated id sequence"""
    if max_len < 1:
        raise ValidationError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.lookup(tok) for tok in normalize(join_pair(text, text_b))][:max_len]
    empty = not ids
    return TokenizedText(ids + [PAD] * (max_len - len(ids)), empty)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> torch.Tensor:
    return torch.tensor([tokenize(t, vocab, max_len).ids for t in texts], dtype=torch.long)


class TextEncoder(nn.Module):
    """Main module M: token ids -> hidden representation h -> class logits."""

    variant = 'base'

    def __init__(self, vocab_size: int, n_classes: int, d_emb: int, d_h: int, dropout: float = 0.1):
        super().__init__()
        if n_classes < 2:
            raise ConfigurationError(f"At least two classes are required, got {n_classes}")
        self.vocab_size = vocab_size
        self.n_classes = n_classes
        self.d_emb = d_emb
        self.d_h = d_h
        self.dropout = dropout
        self.embedding = nn.Parameter(torch.empty(vocab_size, d_emb, dtype=DTYPE))
        self.classifier_weight = nn.Parameter(torch.empty(d_h, n_classes, dtype=DTYPE))
        self.classifier_bias = nn.Parameter(torch.zeros(n_classes, dtype=DTYPE))

    def reset_parameters(self) -> None:
        """Xavier-uniform matrices, zero biases, zero pad embedding"""
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    nn.init.xavier_uniform_(p)
                else:
                    p.zero_()
            self.embedding[PAD].zero_()

    def _embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and int(tokens.max()) >= self.vocab_size:
            raise ValidationError(f"Token id {int(tokens.max())} out of range for {self.vocab_size} tokens")
        return ad.embedding(tokens, self.embedding, padding_idx=PAD)

    def encode(self, tokens: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        raise NotImplementedError

    def logits(self, h: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        h = ad.dropout(h, self.dropout, train_mode)
        return ad.add(ad.matmul(h, self.classifier_weight), self.classifier_bias)

    def classify(self, h: torch.Tensor) -> torch.Tensor:
        return ad.softmax(self.logits(h))

    def forward(self, tokens: torch.Tensor, train_mode: bool = False):
        h = self.encode(tokens, train_mode)
        return h, self.logits(h, train_mode)


class EmbedMeanMLPEncoder(TextEncoder):
    """Mean of non-pad embeddings through a one-layer tanh MLP."""

    variant = 'embed_mean_mlp'

    def __init__(self, vocab_size: int, n_classes: int, d_emb: int = 64, d_h: int = 64,
                 dropout: float = 0.1):
        super().__init__(vocab_size, n_classes, d_emb, d_h, dropout)
        self.mlp_weight = nn.Parameter(torch.empty(d_emb, d_h, dtype=DTYPE))
        self.mlp_bias = nn.Parameter(torch.zeros(d_h, dtype=DTYPE))
        self.reset_parameters()

    def encode(self, tokens: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        single = tokens.dim() == 1
        if single:
            tokens = tokens.unsqueeze(0)
        mean = ad.mean_rows(self._embed(tokens), mask=tokens != PAD)
        h = ad.tanh(ad.add(ad.matmul(mean, self.mlp_weight), self.mlp_bias))
        return h[0] if single else h


class TextCNNEncoder(TextEncoder):
    """Kim-style CNN: per-width convolution, ReLU, max-over-time pooling, concatenation."""

    variant = 'textcnn'

    def __init__(self, vocab_size: int, n_classes: int, d_emb: int = 64, n_filters: int = 32,
                 filter_widths: Sequence[int] = (3, 4, 5), dropout: float = 0.1):
        super().__init__(vocab_size, n_classes, d_emb, n_filters * len(filter_widths), dropout)
        self.filter_widths = list(filter_widths)
        self.n_filters = n_filters
        for k in self.filter_widths:
            setattr(self, f'conv{k}_weight', nn.Parameter(torch.empty(n_filters, d_emb, k, dtype=DTYPE)))
            setattr(self, f'conv{k}_bias', nn.Parameter(torch.zeros(n_filters, dtype=DTYPE)))
        self.reset_parameters()

    def encode(self, tokens: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        single = tokens.dim() == 1
        if single:
            tokens = tokens.unsqueeze(0)
        # pad positions contribute zero vectors to every window
        keep = (tokens != PAD).to(DTYPE).unsqueeze(-1)
        embedded = ad.mul(self._embed(tokens), keep).transpose(1, 2)  # (B, d_emb, L)
        pooled = []
        for k in self.filter_widths:
            conv = ad.conv1d(embedded, getattr(self, f'conv{k}_weight'), getattr(self, f'conv{k}_bias'))
            pooled.append(ad.max_over_time(ad.relu(conv)))
        h = ad.concat(pooled, dim=-1)
        return h[0] if single else h


def build_encoder(
    variant: str,
    vocab_size: int,
    n_classes: int,
    d_emb: int = 64,
    d_h: int = 64,
    n_filters: int = 32,
    filter_widths: Sequence[int] = (3, 4, 5),
    dropout: float = 0.1
) -> TextEncoder:
    """Construct an encoder by variant name"""
    if variant == EmbedMeanMLPEncoder.variant:
        return EmbedMeanMLPEncoder(vocab_size, n_classes, d_emb, d_h, dropout)
    if variant == TextCNNEncoder.variant:
        return TextCNNEncoder(vocab_size, n_classes, d_emb, n_filters, filter_widths, dropout)
    raise ConfigurationError(f"Unsupported encoder variant: {variant}")


def encode(tokens: torch.Tensor, params: TextEncoder, train_mode: bool = False) -> torch.Tensor:
    """Hidden representation h of a token sequence (or batch)"""
    return params.encode(tokens, train_mode)


def classify(h: torch.Tensor, params: TextEncoder) -> torch.Tensor:
    """Class probabilities p(y) = softmax(linear(h))"""
    if h.shape[-1] != params.d_h:
        raise ValidationError(f"classify: expected width {params.d_h}, got {h.shape[-1]}")
    return params.classify(h)
