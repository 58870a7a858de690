from typing import Sequence
import logging

import torch
import torch.nn as nn

from .. import DTYPE
from ..config import Config
from ..exceptions import ConfigurationError, ValidationError
from . import autodiff as ad

logger = logging.getLogger(__name__)

WEIGHT_EPS = 1e-12


class ReweightNet(nn.Module):
    """Meta reweighting plug-in: w_j = sigmoid(MLP([h_j ; E(y_j)]))."""

    def __init__(
        self,
        d_h: int,
        n_classes: int,
        d_label: int = 16,
        hidden: Sequence[int] = (64,),
        dropout: float = 0.1
    ):
        super().__init__()
        hidden = list(hidden)
        if len(hidden) > Config.REWEIGHTER['max_hidden_layers']:
            raise ConfigurationError(f"Reweight net must stay shallow (< 3 hidden layers), got {hidden}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError(f"Reweight dropout must lie in [0, 1), got {dropout}")
        self.d_h = d_h
        self.n_classes = n_classes
        self.d_label = d_label
        self.hidden = hidden
        self.dropout = dropout
        self.label_embedding = nn.Parameter(torch.empty(n_classes, d_label, dtype=DTYPE))

        widths = [d_h + d_label] + hidden + [1]
        self.n_layers = len(widths) - 1
        for i in range(self.n_layers):
            setattr(self, f'layer{i}_weight', nn.Parameter(torch.empty(widths[i], widths[i + 1], dtype=DTYPE)))
            setattr(self, f'layer{i}_bias', nn.Parameter(torch.zeros(widths[i + 1], dtype=DTYPE)))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Xavier-uniform matrices; zero biases so initial weights sit near 0.5"""
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    nn.init.xavier_uniform_(p)
                else:
                    p.zero_()

    def forward(self, H_hat: torch.Tensor, Y_hat: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        x = ad.concat([H_hat, ad.embedding(Y_hat, self.label_embedding)], dim=-1)
        for i in range(self.n_layers):
            x = ad.add(ad.matmul(x, getattr(self, f'layer{i}_weight')), getattr(self, f'layer{i}_bias'))
            if i < self.n_layers - 1:
                x = ad.dropout(ad.tanh(x), self.dropout, train_mode)
        # float64 sigmoid rounds to exactly 1.0 past x ~ 37; keep weights strictly inside (0, 1)
        return ad.sigmoid(x).squeeze(-1).clamp(WEIGHT_EPS, 1.0 - WEIGHT_EPS)


def compute_weights(
    H_hat: torch.Tensor,
    Y_hat: torch.Tensor,
    net: ReweightNet,
    train_mode: bool = False
) -> torch.Tensor:
    """Quality weight in (0, 1) for every augmented sample"""
    if H_hat.dim() != 2 or Y_hat.dim() != 1 or H_hat.shape[0] != Y_hat.shape[0]:
        raise ValidationError(
            f"compute_weights: batch sizes differ, H_hat {tuple(H_hat.shape)} vs Y_hat {tuple(Y_hat.shape)}")
    if Y_hat.numel() and (int(Y_hat.max()) >= net.n_classes or int(Y_hat.min()) < 0):
        raise ValidationError(f"compute_weights: label out of range for {net.n_classes} classes")
    return net(H_hat, Y_hat, train_mode)
