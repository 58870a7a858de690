import pytest
import torch

from mrco.config import ExperimentConfig
from mrco.services.augment import SynonymLexicon
from mrco.services.encoder import EmbedMeanMLPEncoder, TextCNNEncoder, Vocabulary
from mrco.services.meta_loop import LabeledBatch, MetaBatch
from mrco.services.reweighter import ReweightNet
from mrco.services.synthetic import SyntheticTaskGenerator


def make_batch(rows, labels, prefix='r', origin_ids=None):
    """Build a LabeledBatch from lists of token ids"""
    tokens = torch.tensor(rows, dtype=torch.long)
    ids = [f"{prefix}{i}" for i in range(len(rows))]
    return LabeledBatch(tokens, torch.tensor(labels, dtype=torch.long), ids, origin_ids=origin_ids)


@pytest.fixture
def vocab():
    """Small vocabulary over a few sentences"""
    return Vocabulary.build(['good movie', 'bad movie', 'fine film', 'awful film'])


@pytest.fixture
def tiny_encoder():
    """Embed-mean-MLP encoder over an 8-token vocabulary, no dropout"""
    torch.manual_seed(0)
    return EmbedMeanMLPEncoder(vocab_size=8, n_classes=2, d_emb=4, d_h=4, dropout=0.0)


@pytest.fixture
def cnn_encoder():
    """TextCNN encoder with small filter banks"""
    torch.manual_seed(0)
    return TextCNNEncoder(vocab_size=8, n_classes=2, d_emb=4, n_filters=3, filter_widths=(2, 3), dropout=0.0)


@pytest.fixture
def reweight_net():
    """Reweighter matching the tiny encoder"""
    torch.manual_seed(1)
    return ReweightNet(d_h=4, n_classes=2, d_label=2, hidden=[4], dropout=0.0)


@pytest.fixture
def meta_batch():
    """Task raw, task augmented and meta batches over token ids 3..7"""
    raw = make_batch([[3, 4, 0, 0], [5, 6, 7, 0]], [0, 1], 'r')
    aug = make_batch([[3, 4, 4, 0], [3, 0, 0, 0], [5, 6, 0, 0], [6, 7, 0, 0]], [0, 0, 1, 1], 'a',
                     origin_ids=['r0', 'r0', 'r1', 'r1'])
    meta = make_batch([[3, 3, 0, 0], [7, 6, 0, 0]], [0, 1], 'm')
    return MetaBatch(raw, aug, meta)


@pytest.fixture
def lexicon():
    """Hand-built synonym lexicon"""
    return SynonymLexicon({'good': ['fine'], 'movie': ['film', 'picture'], 'bad': ['poor']})


@pytest.fixture
def synthetic_data():
    """Seeded synthetic train/dev split"""
    return SyntheticTaskGenerator(seed=0).generate(60, 20)


@pytest.fixture
def tiny_config(tmp_path):
    """Experiment config small enough to train in seconds"""
    return ExperimentConfig.from_dict({
        'out_dir': str(tmp_path / 'runs'),
        'encoder_variant': 'embed_mean_mlp',
        'd_emb': 8,
        'd_h': 8,
        'max_len': 16,
        'd_label': 4,
        'reweight_hidden': [8],
        'epochs': 1,
        'batch_size': 8,
        'aug_batch_size': 16,
        'n_neg': 8,
        'tau': 2,
        'per_example_count': 2,
        'n_train': 40,
        'n_dev': 20,
        'seeds': [0],
    }).validate()
