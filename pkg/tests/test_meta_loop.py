import math

import pandas as pd
import pytest
import torch
import torch.nn.functional as F

from conftest import make_batch
from mrco.exceptions import ConfigurationError, ValidationError
from mrco.services import autodiff as ad
from mrco.services.contrastive import ContrastiveState
from mrco.services.encoder import EmbedMeanMLPEncoder
from mrco.services.meta_loop import (
    bilevel_minimization, fixed_weight_iteration, joint_minimization, LabeledBatch, meta_loss, meta_step, MetaBatch,
    OptimizerState, task_loss, train_iteration, virtual_update, write_metrics_csv
)
from mrco.services.reweighter import compute_weights, ReweightNet


def _snapshot(module):
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def _unchanged(module, snapshot):
    return all(torch.equal(p, snapshot[n]) for n, p in module.named_parameters())


def _logits(model, batch):
    return model(batch.tokens, train_mode=False)[1]


def test_task_loss_with_zero_weights_is_raw_loss(tiny_encoder, meta_batch):
    """Test W = 0 reduces the task loss to the raw cross-entropy"""
    W = torch.zeros(4, dtype=torch.float64)
    loss = task_loss(meta_batch.task_raw, meta_batch.task_aug, W, tiny_encoder, train_mode=False)
    expected = F.cross_entropy(_logits(tiny_encoder, meta_batch.task_raw), meta_batch.task_raw.labels)
    assert torch.allclose(loss, expected)


def test_task_loss_with_unit_weights_adds_augmented_mean(tiny_encoder, meta_batch):
    """Test W = 1 gives the raw mean plus the augmented mean"""
    W = torch.ones(4, dtype=torch.float64)
    loss = task_loss(meta_batch.task_raw, meta_batch.task_aug, W, tiny_encoder, train_mode=False)
    expected = (F.cross_entropy(_logits(tiny_encoder, meta_batch.task_raw), meta_batch.task_raw.labels)
                + F.cross_entropy(_logits(tiny_encoder, meta_batch.task_aug), meta_batch.task_aug.labels))
    assert torch.allclose(loss, expected)


def test_task_loss_weighted_by_hand(tiny_encoder, meta_batch):
    """Test arbitrary weights against a per-sample negative log-likelihood"""
    W = torch.tensor([0.1, 0.9, 0.5, 0.25], dtype=torch.float64)
    loss = task_loss(meta_batch.task_raw, meta_batch.task_aug, W, tiny_encoder, train_mode=False)

    def nll(batch):
        log_p = torch.log_softmax(_logits(tiny_encoder, batch), dim=-1)
        return -log_p[torch.arange(len(batch)), batch.labels]
    expected = nll(meta_batch.task_raw).mean() + (W * nll(meta_batch.task_aug)).sum() / 4
    assert abs(float(loss) - float(expected)) < 1e-12


def test_task_loss_validation(tiny_encoder, meta_batch):
    """Test empty raw batches and malformed weights are rejected"""
    empty = LabeledBatch(torch.zeros((0, 4), dtype=torch.long), torch.zeros(0, dtype=torch.long), [])
    with pytest.raises(ValidationError):
        task_loss(empty, meta_batch.task_aug, torch.zeros(4, dtype=torch.float64), tiny_encoder)
    with pytest.raises(ValidationError):
        task_loss(meta_batch.task_raw, meta_batch.task_aug, torch.zeros(3, dtype=torch.float64), tiny_encoder)
    with pytest.raises(ValidationError):
        task_loss(meta_batch.task_raw, meta_batch.task_aug, torch.full((4,), 1.5, dtype=torch.float64),
                  tiny_encoder)


def test_batch_fields_must_agree():
    """Test a batch whose labels and tokens disagree on size"""
    with pytest.raises(ValidationError):
        make_batch([[3, 4], [4, 5]], [0])


def test_virtual_update_with_zero_step_is_identity(tiny_encoder, meta_batch):
    """Test alpha = 0 leaves the fast weights equal to the parameters"""
    W = torch.full((4,), 0.5, dtype=torch.float64)
    L = task_loss(meta_batch.task_raw, meta_batch.task_aug, W, tiny_encoder, train_mode=False)
    fast = virtual_update(tiny_encoder, L, 0.0)
    for name, p in tiny_encoder.named_parameters():
        assert torch.equal(fast[name], p)


def test_virtual_update_on_quadratic(tiny_encoder):
    """Test L = 0.5 |theta|^2 gives theta* = (1 - alpha) theta"""
    L = 0.5 * sum((p * p).sum() for p in tiny_encoder.parameters())
    fast = virtual_update(tiny_encoder, L, 0.1)
    for name, p in tiny_encoder.named_parameters():
        assert torch.allclose(fast[name], 0.9 * p.detach())


def test_meta_step_updates_only_reweighter(tiny_encoder, reweight_net, meta_batch):
    """Test the meta step changes theta_A and never theta_M"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.1, 1e-2)
    model_before, reweight_before = _snapshot(tiny_encoder), _snapshot(reweight_net)
    result = meta_step(meta_batch, tiny_encoder, reweight_net, opt)
    assert _unchanged(tiny_encoder, model_before)
    assert not _unchanged(reweight_net, reweight_before)
    assert result.weights.shape == (4,)
    assert result.reweight_grad_norm > 0


def test_zero_meta_learning_rate_gives_zero_meta_gradient(tiny_encoder, reweight_net, meta_batch):
    """Test alpha = 0 cuts the pathway from theta_A to the meta loss"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.0, 1e-2)
    before = _snapshot(reweight_net)
    result = meta_step(meta_batch, tiny_encoder, reweight_net, opt)
    assert result.reweight_grad_norm == 0.0
    assert _unchanged(reweight_net, before)


def test_optimizer_state_rejects_bad_rates(tiny_encoder, reweight_net):
    """Test learning rates are validated"""
    with pytest.raises(ConfigurationError):
        OptimizerState.create(tiny_encoder, reweight_net, 0.0, 0.1, 1e-3)
    with pytest.raises(ConfigurationError):
        OptimizerState.create(tiny_encoder, reweight_net, 1e-3, -0.1, 1e-3)


def test_meta_loss_rejects_empty_batch(tiny_encoder):
    """Test the meta loss needs at least one held-out example"""
    empty = LabeledBatch(torch.zeros((0, 4), dtype=torch.long), torch.zeros(0, dtype=torch.long), [])
    with pytest.raises(ValidationError):
        meta_loss(tiny_encoder, empty)


def _label_noise_batch():
    # the clean and the corrupted augmented sample share tokens and differ only in label
    raw = make_batch([[3, 3, 0, 0]], [0], 'r')
    aug = make_batch([[4, 4, 0, 0], [4, 4, 0, 0]], [1, 0], 'a', origin_ids=['r0', 'r0'])
    meta = make_batch([[4, 4, 0, 0], [4, 0, 0, 0]], [1, 1], 'm')
    return MetaBatch(raw, aug, meta)


def test_meta_gradient_sign_flags_corrupted_sample(tiny_encoder):
    """Test raising a mislabeled sample's weight raises the meta loss"""
    batch = _label_noise_batch()
    W = torch.full((2,), 0.5, dtype=torch.float64, requires_grad=True)
    L_task = task_loss(batch.task_raw, batch.task_aug, W, tiny_encoder, train_mode=False)
    fast = virtual_update(tiny_encoder, L_task, 0.1)
    L_meta = meta_loss(tiny_encoder, batch.meta_raw, params=fast, train_mode=False)
    (g,) = ad.backward(L_meta, [W])
    assert float(g[0]) < 0.0 < float(g[1])


def test_meta_steps_lower_corrupted_weight(tiny_encoder):
    """Test repeated meta steps push the mislabeled sample below the clean one"""
    torch.manual_seed(2)
    net = ReweightNet(d_h=4, n_classes=2, d_label=2, hidden=[], dropout=0.0)
    batch = _label_noise_batch()
    opt = OptimizerState.create(tiny_encoder, net, 1e-3, 0.1, 5e-2)

    def weights():
        H = tiny_encoder.encode(batch.task_aug.tokens).detach()
        return compute_weights(H, batch.task_aug.labels, net).detach()
    before = weights()
    for _ in range(100):
        meta_step(batch, tiny_encoder, net, opt, train_mode=False)
    after = weights()
    assert float(after[1] - after[0]) < float(before[1] - before[0])
    assert float(after[1]) < float(after[0])


def test_meta_gradient_matches_finite_differences():
    """Test the second-order meta gradient against central differences"""
    from mrco.services.verification import check_meta_gradient
    result = check_meta_gradient(trials=1, seed=5)
    assert result.passed, result.max_rel_error


def _contrastive_state(model, n_neg=8, gamma=0.9):
    return ContrastiveState.create(model, 2, n_neg, gamma, tau=3, rho=0.5, temperature=1.0, normalize=True)


def test_train_iteration_updates_everything(tiny_encoder, reweight_net, meta_batch):
    """Test one iteration moves theta_M, theta_A, the key encoder and the queues"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.1, 1e-2)
    state = _contrastive_state(tiny_encoder)
    model_before, reweight_before = _snapshot(tiny_encoder), _snapshot(reweight_net)
    key_before = _snapshot(state.key_encoder)

    metrics = train_iteration(meta_batch, tiny_encoder, reweight_net, state, opt, lam=0.5)
    assert not _unchanged(tiny_encoder, model_before)
    assert not _unchanged(reweight_net, reweight_before)
    for name, p in state.key_encoder.named_parameters():
        expected = 0.9 * key_before[name] + 0.1 * dict(tiny_encoder.named_parameters())[name].detach()
        assert torch.allclose(p, expected, rtol=0, atol=1e-14)
    assert sum(state.queue_sizes().values()) == 4
    assert 0.0 < metrics.w_min <= metrics.w_mean <= metrics.w_max < 1.0
    assert reweight_net.layer0_weight.grad is None


def test_zero_lambda_skips_contrastive_path(tiny_encoder, reweight_net, meta_batch):
    """Test lambda = 0 leaves queues empty and the key encoder fixed"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.1, 1e-2)
    state = _contrastive_state(tiny_encoder)
    key_before = _snapshot(state.key_encoder)
    metrics = train_iteration(meta_batch, tiny_encoder, reweight_net, state, opt, lam=0.0)
    assert metrics.contrastive_loss == 0.0
    assert state.queue_sizes() == {0: 0, 1: 0}
    assert _unchanged(state.key_encoder, key_before)
    with pytest.raises(ValidationError):
        train_iteration(meta_batch, tiny_encoder, reweight_net, state, opt, lam=-1.0)


def test_contrastive_loss_appears_once_queues_fill(tiny_encoder, reweight_net, meta_batch):
    """Test the second iteration contrasts against the negatives queued by the first"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.1, 1e-2)
    state = _contrastive_state(tiny_encoder)
    first = train_iteration(meta_batch, tiny_encoder, reweight_net, state, opt, lam=0.5, iteration=0)
    second = train_iteration(meta_batch, tiny_encoder, reweight_net, state, opt, lam=0.5, iteration=1)
    assert first.contrastive_loss == 0.0
    assert second.contrastive_loss > 0.0
    assert second.iteration == 1


def test_fixed_weight_iteration(tiny_encoder, meta_batch):
    """Test the baseline step uses unit weights or raw data only"""
    optimizer = torch.optim.Adam(tiny_encoder.parameters(), lr=1e-2)
    with_aug = fixed_weight_iteration(meta_batch.task_raw, meta_batch.task_aug, tiny_encoder, optimizer)
    assert with_aug.w_mean == 1.0
    raw_only = fixed_weight_iteration(meta_batch.task_raw, None, tiny_encoder, optimizer, iteration=1)
    assert math.isnan(raw_only.w_mean)
    assert raw_only.contrastive_loss == 0.0


def test_joint_minimization_collapses_weights(tiny_encoder, reweight_net, meta_batch):
    """Test minimizing L_Task over both parameter sets drives mean(W) to zero"""
    trajectory = joint_minimization(meta_batch, tiny_encoder, reweight_net, steps=2000)
    assert len(trajectory) == 2000
    assert trajectory[-1] < 0.05
    assert all(b <= a for a, b in zip(trajectory, trajectory[1:]))


def test_bilevel_minimization_keeps_weights(tiny_encoder, reweight_net, meta_batch):
    """Test the bilevel scheme does not collapse the weights of clean samples"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.1, 1e-2)
    trajectory = bilevel_minimization(meta_batch, tiny_encoder, reweight_net, opt, steps=200)
    assert min(trajectory) >= 0.2


def test_joint_minimization_is_reproducible(meta_batch):
    """Test seeded joint minimizations produce identical trajectories"""
    def run():
        torch.manual_seed(0)
        model = EmbedMeanMLPEncoder(8, 2, 4, 4, dropout=0.0)
        net = ReweightNet(4, 2, 2, [4], dropout=0.0)
        return joint_minimization(meta_batch, model, net, steps=20)
    assert run() == run()


def test_write_metrics_csv(tmp_path, tiny_encoder, reweight_net, meta_batch):
    """Test the per-iteration metrics table"""
    opt = OptimizerState.create(tiny_encoder, reweight_net, 1e-2, 0.1, 1e-2)
    rows = [train_iteration(meta_batch, tiny_encoder, reweight_net, None, opt, lam=0.0, iteration=i)
            for i in range(3)]
    path = tmp_path / 'metrics.csv'
    write_metrics_csv(str(path), rows)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ['iteration', 'task_loss', 'meta_loss', 'contrastive_loss',
                                   'w_mean', 'w_min', 'w_max']
    assert frame['iteration'].tolist() == [0, 1, 2]


def test_key_encoder_is_detached_copy(tiny_encoder):
    """Test the key encoder starts equal to the main encoder but holds no gradients"""
    state = _contrastive_state(tiny_encoder)
    for (name, key), query in zip(state.key_encoder.named_parameters(), tiny_encoder.parameters()):
        assert torch.equal(key, query)
        assert key is not query
        assert not key.requires_grad
    assert state.queue_sizes() == {0: 0, 1: 0}
