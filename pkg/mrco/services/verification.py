"""
Finite-difference verification of every primitive, the composed losses and
the meta gradient d L_Meta(theta*_M(theta_A)) / d theta_A.
"""
from dataclasses import dataclass
from typing import Callable, List, Tuple
import logging
import time

import torch
from torch.func import functional_call

from .. import DTYPE
from . import autodiff as ad
from .contrastive import ClassQueue, contrastive_loss
from .encoder import EmbedMeanMLPEncoder, PAD, TextCNNEncoder
from .meta_loop import LabeledBatch, meta_loss, task_loss, virtual_update
from .reweighter import ReweightNet

logger = logging.getLogger(__name__)

PRIMITIVE_TOLERANCE = 1e-4
META_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float
    passed: bool
    seconds: float


def _randn(g: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=g, dtype=DTYPE)


def _dims(g: torch.Generator, low: int = 2, high: int = 5) -> int:
    return int(torch.randint(low, high + 1, (1,), generator=g))


def _away_from_zero(x: torch.Tensor) -> torch.Tensor:
    return x + 0.1 * torch.sign(x)


def _primitive_case(op: str, g: torch.Generator) -> Tuple[Callable[[torch.Tensor], torch.Tensor], torch.Tensor]:
    """A tensor-valued function of one random input exercising `op`, plus the check point"""
    n, m, k = _dims(g), _dims(g), _dims(g)

    if op == 'matmul':
        b = _randn(g, k, m)
        return (lambda x: ad.matmul(x, b)), _randn(g, n, k)
    if op in ('add', 'mul'):
        b = _randn(g, m)
        fn = ad.add if op == 'add' else ad.mul
        return (lambda x: fn(x, b)), _randn(g, n, m)
    if op == 'concat':
        b = _randn(g, n, 1)
        return (lambda x: ad.concat([x, b], dim=-1)), _randn(g, n, m)
    if op == 'relu':
        return ad.relu, _away_from_zero(_randn(g, n, m))
    if op in ('sigmoid', 'tanh', 'exp', 'softmax', 'log_softmax', 'l2_normalize'):
        return getattr(ad, op), _randn(g, n, m)
    if op == 'log':
        return ad.log, torch.rand(n, m, generator=g, dtype=DTYPE) + 0.5
    if op == 'dropout':
        seed = int(torch.randint(0, 2 ** 31, (1,), generator=g))

        def f(x):
            torch.manual_seed(seed)  # identical mask on every evaluation
            return ad.dropout(x, 0.3, True)
        return f, _randn(g, n, m)
    if op == 'embedding':
        ids = torch.randint(0, n, (k,), generator=g)
        return (lambda table: ad.embedding(ids, table)), _randn(g, n, m)
    if op == 'mean_rows':
        mask = torch.rand(k, n, generator=g) > 0.3
        return (lambda x: ad.mean_rows(x, mask)), _randn(g, k, n, m)
    if op == 'sum_rows':
        return ad.sum_rows, _randn(g, n, m)
    if op == 'dot':
        b = _randn(g, n, m)
        return (lambda x: ad.dot(x, b)), _randn(g, n, m)
    if op == 'softmax_cross_entropy':
        targets = torch.randint(0, m, (n,), generator=g)
        return (lambda x: ad.softmax_cross_entropy(x, targets, reduction='mean')), _randn(g, n, m)
    if op == 'conv1d':
        weight = _randn(g, 3, m, 2)
        return (lambda x: ad.conv1d(x, weight)), _randn(g, n, m, k + 2)
    if op == 'max_over_time':
        # well separated values so the argmax is stable under the finite-difference step
        spread = torch.stack([torch.randperm(k, generator=g) for _ in range(n * m)]).to(DTYPE)
        noise = 0.1 * torch.rand(n * m, k, generator=g, dtype=DTYPE)
        return ad.max_over_time, (spread + noise).view(n, m, k)
    raise KeyError(op)


def _scalarize(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor,
               g: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    """Fixed random projection of a tensor-valued function onto a scalar"""
    with torch.no_grad():
        shape = fn(point).shape
    coeff = _randn(g, *shape)
    return lambda x: (fn(x) * coeff).sum()


def check_primitives(trials: int = 100, seed: int = 0) -> List[CheckResult]:
    results = []
    for op in ad.PRIMITIVES:
        g = torch.Generator().manual_seed(seed)
        started = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            fn, point = _primitive_case(op, g)
            f = _scalarize(fn, point, g)
            worst = max(worst, ad.grad_check(f, point, name=op).max_rel_error)
        results.append(CheckResult(op, trials, worst, PRIMITIVE_TOLERANCE, worst <= PRIMITIVE_TOLERANCE,
                                   time.perf_counter() - started))
    return results


def _tiny_models(seed: int) -> Tuple[EmbedMeanMLPEncoder, ReweightNet]:
    """Main module plus reweighter with under 200 parameters in total"""
    torch.manual_seed(seed)
    model = EmbedMeanMLPEncoder(vocab_size=6, n_classes=2, d_emb=4, d_h=4, dropout=0.0)
    reweight_net = ReweightNet(d_h=4, n_classes=2, d_label=2, hidden=[], dropout=0.0)
    return model, reweight_net


def _tiny_batch(g: torch.Generator, size: int, prefix: str) -> LabeledBatch:
    tokens = torch.randint(PAD + 3, 6, (size, 5), generator=g)
    tokens[:, 4] = PAD
    labels = torch.randint(0, 2, (size,), generator=g)
    ids = [f"{prefix}{i}" for i in range(size)]
    return LabeledBatch(tokens, labels, ids)


def _check(name: str, trials: int, tolerance: float,
           make_case: Callable[[torch.Generator], Tuple[Callable, torch.Tensor]], seed: int) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        f, point = make_case(g)
        worst = max(worst, ad.grad_check(f, point, tolerance=tolerance, name=name).max_rel_error)
    return CheckResult(name, trials, worst, tolerance, worst <= tolerance, time.perf_counter() - started)


def check_composed(trials: int = 10, seed: int = 0) -> List[CheckResult]:
    model, reweight_net = _tiny_models(seed)
    reweight_template = dict(reweight_net.named_parameters())
    model_template = {k: v.detach() for k, v in model.named_parameters()}

    def reweight_case(g):
        H = _randn(g, 6, 4)
        Y = torch.randint(0, 2, (6,), generator=g)
        c = _randn(g, 6)

        def f(flat):
            params = ad.unflatten_params(flat, reweight_template)
            return (functional_call(reweight_net, params, (H, Y)) * c).sum()
        return f, ad.flatten_params({k: v.detach() for k, v in reweight_template.items()})

    def task_case(g):
        raw, aug = _tiny_batch(g, 4, 'r'), _tiny_batch(g, 6, 'a')
        W = torch.rand(6, generator=g, dtype=DTYPE)

        def f(flat):
            return task_loss(raw, aug, W, model, params=ad.unflatten_params(flat, model_template),
                             train_mode=False)
        flat = ad.flatten_params(model_template)
        return f, flat + 0.1 * _randn(g, flat.numel())

    torch.manual_seed(seed)
    cnn = TextCNNEncoder(vocab_size=6, n_classes=2, d_emb=3, n_filters=2, filter_widths=(2, 3), dropout=0.0)

    def textcnn_case(g):
        batch = _tiny_batch(g, 4, 'r')

        def f(table):
            _, logits = functional_call(cnn, {'embedding': table}, (batch.tokens,), {'train_mode': False})
            return ad.softmax_cross_entropy(logits, batch.labels, reduction='mean')
        table = cnn.embedding.detach()
        return f, table + 0.1 * _randn(g, *table.shape)

    def contrastive_case(g):
        queues = {0: ClassQueue(0, 5), 1: ClassQueue(1, 5)}
        for k in (0, 1):
            for _ in range(int(torch.randint(1, 6, (1,), generator=g))):
                queues[k].push(_randn(g, 4), 0.5, 3)
        labels = [0, 1, 1]
        positives = [_randn(g, 2, 4), _randn(g, 1, 4), _randn(g, 0, 4)]

        def f(q):
            return contrastive_loss(q, labels, positives, queues, temperature=0.7, normalize=True)
        return f, _randn(g, 3, 4)

    return [
        _check('reweight_net', trials, PRIMITIVE_TOLERANCE, reweight_case, seed),
        _check('task_loss', trials, PRIMITIVE_TOLERANCE, task_case, seed),
        _check('textcnn_embedding', trials, PRIMITIVE_TOLERANCE, textcnn_case, seed),
        _check('contrastive_loss', trials, PRIMITIVE_TOLERANCE, contrastive_case, seed),
    ]


def meta_objective(model, reweight_net, task_raw, task_aug, meta_raw, meta_lr: float):
    """L_Meta(theta*_M(theta_A)) as a function of the flattened reweighter parameters"""
    template = dict(reweight_net.named_parameters())

    def f(flat: torch.Tensor) -> torch.Tensor:
        params = ad.unflatten_params(flat, template)
        H_hat = model.encode(task_aug.tokens).detach()
        W = functional_call(reweight_net, params, (H_hat, task_aug.labels))
        L_task = task_loss(task_raw, task_aug, W, model, train_mode=False)
        fast_weights = virtual_update(model, L_task, meta_lr)
        return meta_loss(model, meta_raw, params=fast_weights, train_mode=False)
    return f, ad.flatten_params({k: v.detach() for k, v in template.items()})


def check_meta_gradient(trials: int = 3, seed: int = 0, meta_lr: float = 0.5) -> CheckResult:
    model, reweight_net = _tiny_models(seed)
    n_params = sum(p.numel() for p in model.parameters()) + sum(p.numel() for p in reweight_net.parameters())
    logger.debug(f"meta-gradient oracle on {n_params} parameters")

    def case(g):
        return meta_objective(model, reweight_net, _tiny_batch(g, 4, 'r'), _tiny_batch(g, 6, 'a'),
                              _tiny_batch(g, 4, 'm'), meta_lr)
    return _check('meta_gradient', trials, META_TOLERANCE, case, seed)


def run_gradcheck_suite(trials: int = 100, seed: int = 0) -> List[CheckResult]:
    """Primitives, composed losses and the meta-gradient oracle"""
    logger.info(f"Running gradient checks ({trials} trials per primitive)")
    results = check_primitives(trials, seed)
    results += check_composed(trials, seed)
    results.append(check_meta_gradient(max(1, trials // 10), seed))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"Gradient checks failed: {', '.join(failed)}")
    return results


def format_table(results: List[CheckResult]) -> str:
    header = f"{'check':<24}{'trials':>8}{'max rel err':>14}{'tol':>10}{'time s':>9}  result"
    lines = [header, '-' * len(header)]
    for r in results:
        lines.append(f"{r.name:<24}{r.trials:>8}{r.max_rel_error:>14.3e}{r.tolerance:>10.0e}"
                     f"{r.seconds:>9.2f}  {'PASS' if r.passed else 'FAIL'}")
    return '\n'.join(lines)
