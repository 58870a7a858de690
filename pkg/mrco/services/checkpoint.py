"""
Versioned binary checkpoint container.

Layout (all integers little-endian):
  b"MRCOCKPT"  u32 version  u32 metadata length  UTF-8 JSON metadata
  u32 tensor count, then per tensor:
  u16 name length  UTF-8 name  u8 ndim  u32 dims...  float64 values
"""
from typing import Any, Dict, Tuple
import json
import logging
import os
import struct

import numpy as np
import torch

from .. import DTYPE
from ..exceptions import CheckpointError
from .encoder import build_encoder, TextEncoder

logger = logging.getLogger(__name__)

MAGIC = b"MRCOCKPT"
FORMAT_VERSION = 1


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(payload)
    os.replace(tmp_path, path)


def encode_checkpoint(tensors: Dict[str, torch.Tensor], metadata: Dict[str, Any]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode('utf-8')
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(meta)), meta,
              struct.pack('<I', len(tensors))]
    for name, tensor in tensors.items():
        raw_name = name.encode('utf-8')
        values = tensor.detach().cpu().to(DTYPE).numpy()
        chunks.append(struct.pack('<H', len(raw_name)) + raw_name)
        chunks.append(struct.pack('<B', values.ndim))
        chunks.append(struct.pack(f'<{values.ndim}I', *values.shape))
        chunks.append(values.astype('<f8').tobytes())
    return b''.join(chunks)


def decode_checkpoint(payload: bytes) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    view = memoryview(payload)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError(f"Truncated checkpoint at byte {offset}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("Not an MRCo checkpoint (bad magic header)")
    version, meta_len = struct.unpack('<II', take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    try:
        metadata = json.loads(bytes(take(meta_len)).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint metadata: {e}")

    (count,) = struct.unpack('<I', take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<H', take(2))
        name = bytes(take(name_len)).decode('utf-8')
        (ndim,) = struct.unpack('<B', take(1))
        shape = struct.unpack(f'<{ndim}I', take(4 * ndim))
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(bytes(take(8 * n_values)), dtype='<f8').reshape(shape)
        tensors[name] = torch.from_numpy(values.astype(np.float64))
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after the last tensor")
    return metadata, tensors


def save_checkpoint(path: str, model: TextEncoder, metadata: Dict[str, Any]) -> None:
    """Write the encoder parameters plus descriptive metadata"""
    meta = dict(metadata)
    meta.update({
        'variant': model.variant,
        'vocab_size': model.vocab_size,
        'n_classes': model.n_classes,
        'd_emb': model.d_emb,
        'd_h': model.d_h,
        'dropout': model.dropout,
    })
    if hasattr(model, 'filter_widths'):
        meta['n_filters'] = model.n_filters
        meta['filter_widths'] = list(model.filter_widths)
    try:
        _atomic_write_bytes(path, encode_checkpoint(dict(model.named_parameters()), meta))
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {str(e)}")
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {str(e)}")
    return decode_checkpoint(payload)


def restore_encoder(path: str) -> Tuple[TextEncoder, Dict[str, Any]]:
    """Rebuild the encoder described by a checkpoint and load its parameters"""
    metadata, tensors = load_checkpoint(path)
    try:
        model = build_encoder(
            metadata['variant'],
            metadata['vocab_size'],
            metadata['n_classes'],
            d_emb=metadata['d_emb'],
            d_h=metadata['d_h'],
            n_filters=metadata.get('n_filters', 32),
            filter_widths=metadata.get('filter_widths', (3, 4, 5)),
            dropout=metadata['dropout']
        )
    except KeyError as e:
        raise CheckpointError(f"Checkpoint metadata lacks {e}")
    params = dict(model.named_parameters())
    if params.keys() != tensors.keys():
        raise CheckpointError(
            f"Checkpoint tensors {sorted(tensors)} do not match the {metadata['variant']} encoder")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != tuple(tensors[name].shape):
                raise CheckpointError(f"Tensor {name}: shape {tuple(tensors[name].shape)} != {tuple(p.shape)}")
            p.copy_(tensors[name])
    return model, metadata
