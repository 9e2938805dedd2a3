"""Contrastive projection head, symmetric InfoNCE, cross-entropy, joint loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InputError, NumericError

NORM_EPS = 1e-12


class ProjectionHead(nn.Module):
    """Shared bottleneck 2h -> h -> h: W2 ReLU(W1 v + B1) + B2."""

    def __init__(self, h: int):
        super().__init__()
        self.h = h
        self.fc1 = nn.Linear(2 * h, h)
        self.fc2 = nn.Linear(h, h)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        assert v.shape[-1] == 2 * self.h, f"expected width {2 * self.h}, got {v.shape[-1]}"
        return self.fc2(torch.relu(self.fc1(v)))


def project(v: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(v)


def l2_normalize(z: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    return z / z.norm(dim=-1, keepdim=True).clamp_min(eps)


def similarity_matrix(z_claim: torch.Tensor, z_doc: torch.Tensor) -> torch.Tensor:
    return z_claim @ z_doc.T


def _lse(x: torch.Tensor, dim: int) -> torch.Tensor:
    m = x.max(dim=dim, keepdim=True).values.detach()
    return (m + torch.log(torch.exp(x - m).sum(dim=dim, keepdim=True))).squeeze(dim)


def info_nce_symmetric(S: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Mean of the claim->doc (row) and doc->claim (column) InfoNCE terms."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not torch.isfinite(S).all():
        raise NumericError("similarity matrix contains non-finite entries")
    logits = S / tau
    diag = torch.diagonal(logits)
    claim_to_doc = (_lse(logits, dim=1) - diag).mean()
    doc_to_claim = (_lse(logits, dim=0) - diag).mean()
    return 0.5 * (claim_to_doc + doc_to_claim)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    n_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    picked = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return (_lse(logits, dim=1) - picked).mean()


@dataclass
class LossBundle:
    ce: torch.Tensor
    contrastive: torch.Tensor | None
    total: torch.Tensor
    lam: float = 0.1
    tau: float = 0.1

    def as_floats(self) -> dict:
        return {
            "ce": self.ce.item(),
            "contrastive": None if self.contrastive is None else self.contrastive.item(),
            "total": self.total.item(),
        }


def total_loss(ce, contrastive, lam: float = 0.1):
    """``ce + lam * contrastive``; a disabled head (``None``) contributes nothing."""
    if contrastive is None:
        return ce
    return ce + lam * contrastive
