import struct

import pytest
import torch

from mrco.exceptions import CheckpointError
from mrco.services.checkpoint import (
    decode_checkpoint, encode_checkpoint, load_checkpoint, MAGIC, restore_encoder, save_checkpoint
)


def _assert_same_parameters(a, b):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    for name in pa:
        assert torch.equal(pa[name], pb[name])


def test_encoder_round_trip(tmp_path, tiny_encoder):
    """Test a saved encoder restores with identical parameters and metadata"""
    path = str(tmp_path / 'model.bin')
    save_checkpoint(path, tiny_encoder, {'method': 'mrco', 'seed': 3})
    model, metadata = restore_encoder(path)
    _assert_same_parameters(model, tiny_encoder)
    assert metadata['seed'] == 3
    assert metadata['variant'] == 'embed_mean_mlp'
    assert metadata['vocab_size'] == 8


def test_textcnn_round_trip(tmp_path, cnn_encoder):
    """Test filter banks survive the round trip"""
    path = str(tmp_path / 'cnn.bin')
    save_checkpoint(path, cnn_encoder, {})
    model, metadata = restore_encoder(path)
    _assert_same_parameters(model, cnn_encoder)
    assert metadata['filter_widths'] == [2, 3]
    assert model.filter_widths == [2, 3]


def test_scalar_and_empty_metadata():
    """Test zero-dimensional tensors encode and decode"""
    payload = encode_checkpoint({'t': torch.tensor(2.5, dtype=torch.float64)}, {})
    metadata, tensors = decode_checkpoint(payload)
    assert metadata == {}
    assert float(tensors['t']) == 2.5
    assert tensors['t'].shape == ()


def test_corrupt_payloads_rejected(tiny_encoder):
    """Test bad magic, unknown version, truncation and trailing bytes"""
    payload = encode_checkpoint(dict(tiny_encoder.named_parameters()), {'seed': 0})
    with pytest.raises(CheckpointError):
        decode_checkpoint(b'NOTACKPT' + payload[len(MAGIC):])
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload[:len(MAGIC)] + struct.pack('<I', 2) + payload[len(MAGIC) + 4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload + b'\x00')


def test_missing_file(tmp_path):
    """Test reading a checkpoint that does not exist"""
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'absent.bin'))


def test_mismatched_tensors_rejected(tmp_path, tiny_encoder):
    """Test metadata that describes a different architecture"""
    path = tmp_path / 'model.bin'
    params = dict(tiny_encoder.named_parameters())
    params.pop('mlp_bias')
    metadata = {'variant': 'embed_mean_mlp', 'vocab_size': 8, 'n_classes': 2, 'd_emb': 4, 'd_h': 4,
                'dropout': 0.0}
    path.write_bytes(encode_checkpoint(params, metadata))
    with pytest.raises(CheckpointError):
        restore_encoder(str(path))
