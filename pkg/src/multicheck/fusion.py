"""Relational fusion of claim/document representations and the classifier head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class GELUFunction(torch.autograd.Function):
    """Exact GELU, x * Phi(x), with a hand-written derivative.

    d/dx = Phi(x) + x * phi(x). The backward is explicit so that gradient
    checks exercise it rather than autograd's built-in rule.
    """

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return 0.5 * x * (1.0 + torch.erf(x * _INV_SQRT2))

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        cdf = 0.5 * (1.0 + torch.erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * torch.exp(-0.5 * x * x)
        return grad_out * (cdf + x * pdf)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return GELUFunction.apply(x)


class GELU(nn.Module):
    function = GELUFunction

    def forward(self, x):
        return self.function.apply(x)


@dataclass
class FusedBatch:
    v_diff: torch.Tensor
    v_prod: torch.Tensor
    v_fused: torch.Tensor
    v_final: torch.Tensor | None = None
    logits: torch.Tensor | None = None


def relational_fuse(claim_repr: torch.Tensor, doc_repr: torch.Tensor):
    """Return ``(|c - d|, c * d, [|c - d|, c * d, c, d])``.

    The abs subgradient at zero is 0 (``torch.abs`` backward uses sign).
    """
    assert claim_repr.shape == doc_repr.shape, (tuple(claim_repr.shape), tuple(doc_repr.shape))
    v_diff = torch.abs(claim_repr - doc_repr)
    v_prod = claim_repr * doc_repr
    v_fused = torch.cat([v_diff, v_prod, claim_repr, doc_repr], dim=-1)
    return v_diff, v_prod, v_fused


class FusionFFN(nn.Module):
    """8h -> 2h -> h: affine, GELU, dropout, affine."""

    def __init__(self, h: int, dropout: float = 0.1, hidden: int | None = None):
        super().__init__()
        self.h = h
        hidden = hidden or 2 * h
        self.fc1 = nn.Linear(8 * h, hidden)
        self.act = GELU()
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, h)

    def forward(self, v_fused: torch.Tensor) -> torch.Tensor:
        assert v_fused.shape[-1] == 8 * self.h, f"expected width {8 * self.h}, got {v_fused.shape[-1]}"
        return self.fc2(self.drop(self.act(self.fc1(v_fused))))


class Classifier(nn.Module):
    def __init__(self, h: int, n_classes: int = 5):
        super().__init__()
        self.linear = nn.Linear(h, n_classes)

    def forward(self, v_final):
        return self.linear(v_final)


def predict_labels(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. the smallest class id on ties
    return torch.argmax(logits, dim=-1)
