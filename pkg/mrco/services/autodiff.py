"""
Checked tensor primitives and gradient utilities on top of torch autograd.

Every primitive the models use goes through `apply_primitive`, which validates
shapes (raising `ShapeError` naming the primitive and the shapes involved),
rejects non-finite outputs and, inside an active `Tape`, records the call.
Tensors are 64-bit; differentiating through a computed gradient works by
passing `create_graph=True` to `backward`.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import random

import numpy as np
import torch
import torch.nn.functional as F

from .. import DTYPE
from ..exceptions import GradientError, ShapeError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class TapeNode:
    index: int
    op: str
    parents: List[int]
    shape: Tuple[int, ...]


class Tape:
    """Ordered record of primitive applications.

    Torch builds the differentiable graph itself; the tape mirrors it as a
    flat list whose node parents always precede the node.
    """

    _active: List['Tape'] = []

    def __init__(self, second_order_capable: bool = False):
        self.nodes: List[TapeNode] = []
        self.second_order_capable = second_order_capable
        self._index_of: Dict[int, int] = {}
        self._outputs: List[torch.Tensor] = []  # keeps ids stable

    def __enter__(self) -> 'Tape':
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    @classmethod
    def current(cls) -> Optional['Tape']:
        return cls._active[-1] if cls._active else None

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> TapeNode:
        parents = [self._index_of[id(t)] for t in inputs if id(t) in self._index_of]
        node = TapeNode(len(self.nodes), op, parents, tuple(output.shape))
        self.nodes.append(node)
        self._index_of[id(output)] = node.index
        self._outputs.append(output)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


def _require_dims(op: str, tensor: torch.Tensor, min_dim: int) -> None:
    if tensor.dim() < min_dim:
        raise ShapeError(op, tensor.shape)


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape)


def _matmul(a, b):
    _require_dims('matmul', a, 1)
    _require_dims('matmul', b, 1)
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError('matmul', a.shape, b.shape)
    return torch.matmul(a, b)


def _add(a, b):
    _broadcast('add', a, b)
    return a + b


def _mul(a, b):
    _broadcast('mul', a, b)
    return a * b


def _concat(*tensors, dim: int = -1):
    if not tensors:
        raise ValidationError("concat: at least one input is required")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim():
            raise ShapeError('concat', ref.shape, t.shape)
        axis = dim % ref.dim()
        if any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != axis):
            raise ShapeError('concat', ref.shape, t.shape)
    return torch.cat(tensors, dim=dim)


def _dropout(x, p: float = 0.0, training: bool = False):
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout: p must lie in [0, 1), got {p}")
    # inverted dropout: identity at evaluation time
    return F.dropout(x, p=p, training=training)


def _embedding(ids, table, padding_idx: Optional[int] = None):
    _require_dims('embedding', table, 2)
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise ShapeError('embedding', ids.shape, table.shape)
    return F.embedding(ids, table, padding_idx=padding_idx)


def _mean_rows(x, mask=None):
    _require_dims('mean_rows', x, 2)
    if mask is None:
        return x.mean(dim=-2)
    if mask.shape != x.shape[:-1]:
        raise ShapeError('mean_rows', x.shape, mask.shape)
    mask = mask.to(x.dtype).unsqueeze(-1)
    count = mask.sum(dim=-2).clamp(min=1.0)
    return (x * mask).sum(dim=-2) / count


def _sum_rows(x):
    _require_dims('sum_rows', x, 1)
    return x.sum(dim=-1)


def _dot(a, b):
    _require_dims('dot', a, 1)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError('dot', a.shape, b.shape)
    _broadcast('dot', a, b)
    return (a * b).sum(dim=-1)


def _softmax_cross_entropy(logits, targets, reduction: str = 'none'):
    _require_dims('softmax_cross_entropy', logits, 2)
    if targets.dim() != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError('softmax_cross_entropy', logits.shape, targets.shape)
    if targets.numel() and int(targets.max()) >= logits.shape[1]:
        raise ValidationError(
            f"softmax_cross_entropy: label {int(targets.max())} out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, targets, reduction=reduction)


def _conv1d(x, weight, bias=None):
    _require_dims('conv1d', x, 3)
    _require_dims('conv1d', weight, 3)
    if x.shape[1] != weight.shape[1] or x.shape[2] < weight.shape[2]:
        raise ShapeError('conv1d', x.shape, weight.shape)
    return F.conv1d(x, weight, bias)


def _max_over_time(x):
    _require_dims('max_over_time', x, 3)
    return x.max(dim=-1).values


PRIMITIVES: Dict[str, Callable[..., torch.Tensor]] = {
    'matmul': _matmul,
    'add': _add,
    'mul': _mul,
    'concat': _concat,
    'sigmoid': torch.sigmoid,
    'tanh': torch.tanh,
    'relu': torch.relu,
    'dropout': _dropout,
    'embedding': _embedding,
    'mean_rows': _mean_rows,
    'sum_rows': _sum_rows,
    'dot': _dot,
    'exp': torch.exp,
    'log': torch.log,
    'softmax': lambda x: torch.softmax(x, dim=-1),
    'log_softmax': lambda x: torch.log_softmax(x, dim=-1),
    'softmax_cross_entropy': _softmax_cross_entropy,
    'conv1d': _conv1d,
    'max_over_time': _max_over_time,
    'l2_normalize': lambda x: F.normalize(x, dim=-1),
}


def apply_primitive(op: str, inputs: Sequence[torch.Tensor], **kwargs) -> torch.Tensor:
    """Apply a registered primitive, validating shapes and recording it on the active tape"""
    if op not in PRIMITIVES:
        raise ValidationError(f"Unknown primitive: {op}")
    output = PRIMITIVES[op](*inputs, **kwargs)
    if output.is_floating_point() and not bool(torch.isfinite(output).all()):
        raise ValidationError(f"{op}: produced non-finite values")
    tape = Tape.current()
    if tape is not None:
        tape.record(op, inputs, output)
    return output


def matmul(a, b):
    return apply_primitive('matmul', [a, b])

def add(a, b):
    return apply_primitive('add', [a, b])

def mul(a, b):
    return apply_primitive('mul', [a, b])

def concat(tensors, dim: int = -1):
    return apply_primitive('concat', list(tensors), dim=dim)

def sigmoid(x):
    return apply_primitive('sigmoid', [x])

def tanh(x):
    return apply_primitive('tanh', [x])

def relu(x):
    return apply_primitive('relu', [x])

def dropout(x, p: float, training: bool):
    return apply_primitive('dropout', [x], p=p, training=training)

def embedding(ids, table, padding_idx: Optional[int] = None):
    return apply_primitive('embedding', [ids, table], padding_idx=padding_idx)

def mean_rows(x, mask=None):
    return apply_primitive('mean_rows', [x], mask=mask)

def sum_rows(x):
    return apply_primitive('sum_rows', [x])

def dot(a, b):
    return apply_primitive('dot', [a, b])

def exp(x):
    return apply_primitive('exp', [x])

def log(x):
    return apply_primitive('log', [x])

def softmax(x):
    return apply_primitive('softmax', [x])

def log_softmax(x):
    return apply_primitive('log_softmax', [x])

def softmax_cross_entropy(logits, targets, reduction: str = 'none'):
    return apply_primitive('softmax_cross_entropy', [logits, targets], reduction=reduction)

def conv1d(x, weight, bias=None):
    inputs = [x, weight] if bias is None else [x, weight, bias]
    return apply_primitive('conv1d', inputs)

def max_over_time(x):
    return apply_primitive('max_over_time', [x])

def l2_normalize(x):
    return apply_primitive('l2_normalize', [x])


def backward(
    loss: torch.Tensor,
    inputs: Optional[Sequence[torch.Tensor]] = None,
    create_graph: Optional[bool] = None,
    retain_graph: Optional[bool] = None
) -> Optional[Tuple[torch.Tensor, ...]]:
    """Differentiate a scalar loss.

    With `inputs`, returns d loss / d input for each (zeros for inputs the loss
    does not depend on). Without, accumulates `.grad` on every leaf. With
    `create_graph` the returned gradients are themselves differentiable.
    """
    if loss.numel() != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GradientError("backward: loss is detached from the graph")
    if create_graph is None:
        tape = Tape.current()
        create_graph = bool(tape is not None and tape.second_order_capable)

    if inputs is None:
        loss.reshape(()).backward(create_graph=create_graph, retain_graph=retain_graph)
        return None

    inputs = list(inputs)
    grads = torch.autograd.grad(
        loss.reshape(()),
        inputs,
        create_graph=create_graph,
        retain_graph=retain_graph,
        allow_unused=True
    )
    grads = tuple(torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads))
    bad = [i for i, g in enumerate(grads) if not bool(torch.isfinite(g).all())]
    if bad:
        raise GradientError(
            "backward: non-finite gradient",
            details={'inputs': bad, 'loss': float(loss.detach())}
        )
    return grads


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    analytic: torch.Tensor = field(repr=False)
    numeric: torch.Tensor = field(repr=False)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    name: str = 'f',
    floor: float = 1e-6
) -> GradCheckReport:
    """Compare the analytic gradient of scalar `f` at `point` with central differences"""
    if step <= 0:
        raise ValidationError(f"grad_check: step must be > 0, got {step}")

    x = point.detach().clone().to(DTYPE).requires_grad_(True)
    value = f(x)
    if value.numel() != 1:
        raise GradientError(f"grad_check: {name} must be scalar-valued, got shape {tuple(value.shape)}")
    if not bool(torch.isfinite(value).all()):
        raise GradientError(f"grad_check: {name} is not finite at the check point")
    if value.requires_grad:
        (analytic,) = backward(value, [x])
    else:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach()

    base = point.detach().clone().to(DTYPE)
    numeric = torch.zeros_like(base)
    flat_numeric = numeric.view(-1)
    for i in range(base.numel()):
        shifted = base.clone()
        shifted.view(-1)[i] += step
        f_plus = float(f(shifted).detach())
        shifted.view(-1)[i] -= 2 * step
        f_minus = float(f(shifted).detach())
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradientError(
                f"grad_check: {name} evaluated to a non-finite value",
                details={'coordinate': i}
            )
        flat_numeric[i] = (f_plus - f_minus) / (2 * step)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(numeric, floor))
    rel = ((analytic - numeric).abs() / denom)
    max_rel = float(rel.max()) if rel.numel() else 0.0
    report = GradCheckReport(name, max_rel, tolerance, max_rel <= tolerance, analytic, numeric)
    logger.debug(f"grad_check {name}: max rel error {max_rel:.3e} (tol {tolerance:.0e})")
    return report


def flatten_params(params: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Concatenate named tensors into one flat vector (in dict order)"""
    return torch.cat([p.reshape(-1) for p in params.values()])


def unflatten_params(flat: torch.Tensor, template: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Split a flat vector back into tensors shaped like `template` (differentiably)"""
    total = sum(p.numel() for p in template.values())
    if flat.numel() != total:
        raise ShapeError('unflatten_params', flat.shape, (total,))
    out, offset = {}, 0
    for name, p in template.items():
        out[name] = flat[offset:offset + p.numel()].view_as(p)
        offset += p.numel()
    return out


def seed_everything(seed: int) -> None:
    """Seed every random source so initializations and dropout masks reproduce"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
