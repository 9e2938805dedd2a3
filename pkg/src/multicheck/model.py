"""Assembly of encoders, fusion, classifier and projection head."""

from __future__ import annotations

import hashlib
import math
import json
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .data import NUM_CLASSES, EncodedBatch
from .errors import ConfigError
from .encoders import PairRepresentation, TextEncoder, build_pair_representations, make_image_encoder
from .fusion import Classifier, FusedBatch, FusionFFN, relational_fuse
from .objectives import (
    LossBundle,
    ProjectionHead,
    cross_entropy,
    info_nce_symmetric,
    l2_normalize,
    similarity_matrix,
    total_loss,
)


INIT_SCHEMES = ("fan_in", "trunc_normal")


@dataclass
class ModelConfig:
    h: int = 128
    d_text: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_ffn: int = 128
    text_encoder: str = "tiny-transformer"
    image_encoder: str = "conv"
    dropout: float = 0.1
    init_std: float = 0.02
    init_scheme: str = "fan_in"


@dataclass
class ForwardOutput:
    pair: PairRepresentation
    fused: FusedBatch
    z_claim: torch.Tensor
    z_doc: torch.Tensor

    @property
    def logits(self) -> torch.Tensor:
        return self.fused.logits


class MultiCheckModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int, max_len: int, image_shape: tuple[int, int, int]):
        super().__init__()
        if config.text_encoder != "tiny-transformer":
            raise ConfigError(f"unknown text encoder {config.text_encoder!r}")
        if config.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init_scheme {config.init_scheme!r}; expected one of {INIT_SCHEMES}")
        self.config = config
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.image_shape = tuple(int(x) for x in image_shape)
        h = config.h
        self.text_encoder = TextEncoder(
            vocab_size, max_len, h, config.d_text, config.n_layers, config.n_heads, config.text_ffn, config.dropout
        )
        self.image_encoder = make_image_encoder(config.image_encoder, self.image_shape, h, config.dropout)
        self.fusion_ffn = FusionFFN(h, config.dropout)
        self.classifier = Classifier(h, NUM_CLASSES)
        # built even when the contrastive loss is off so both arms share init
        self.projection = ProjectionHead(h)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        std = self.config.init_std
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                # fan-in scaling; sigma=0.02 stacks vanish through the conv layers
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)
            elif isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        if hasattr(self.image_encoder, "pos_emb"):
            nn.init.trunc_normal_(self.image_encoder.pos_emb, std=std, a=-2 * std, b=2 * std)
        if self.config.init_scheme == "fan_in":
            heads = [self.text_encoder.proj, self.fusion_ffn, self.classifier, self.projection]
            if hasattr(self.image_encoder, "proj"):
                heads.append(self.image_encoder.proj)
            for head in heads:
                for module in head.modules():
                    if isinstance(module, nn.Linear):
                        s = 1.0 / math.sqrt(module.in_features)
                        nn.init.trunc_normal_(module.weight, std=s, a=-2 * s, b=2 * s)

    def fingerprint(self) -> str:
        payload = {
            "model": asdict(self.config),
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "image_shape": list(self.image_shape),
            "n_classes": NUM_CLASSES,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def pair_representations(self, batch: EncodedBatch) -> PairRepresentation:
        # one batched pass per encoder: claim rows first, doc rows second
        b = len(batch)
        ids = torch.cat([batch.claim_ids, batch.doc_ids])
        mask = torch.cat([batch.claim_mask, batch.doc_mask])
        # columns past the longest sequence are padding for every row; masked
        # keys get zero attention weight, so dropping them is exact
        width = max(int(mask.sum(dim=1).max()), 1) if mask.numel() else 1
        text = self.text_encoder(ids[:, :width], mask[:, :width])
        img = self.image_encoder(torch.cat([batch.claim_image, batch.doc_image]))
        return build_pair_representations(text[:b], img[:b], text[b:], img[b:])

    def forward(self, batch: EncodedBatch) -> ForwardOutput:
        pair = self.pair_representations(batch)
        v_diff, v_prod, v_fused = relational_fuse(pair.claim_repr, pair.doc_repr)
        v_final = self.fusion_ffn(v_fused)
        logits = self.classifier(v_final)
        fused = FusedBatch(v_diff, v_prod, v_fused, v_final, logits)
        return ForwardOutput(
            pair=pair,
            fused=fused,
            z_claim=self.projection(pair.claim_repr),
            z_doc=self.projection(pair.doc_repr),
        )

    def logits(self, batch: EncodedBatch) -> torch.Tensor:
        pair = self.pair_representations(batch)
        _, _, v_fused = relational_fuse(pair.claim_repr, pair.doc_repr)
        return self.classifier(self.fusion_ffn(v_fused))


def compute_losses(
    out: ForwardOutput, labels: torch.Tensor, tau: float = 0.1, lam: float = 0.1, contrastive: bool = True
) -> LossBundle:
    """Joint objective. The contrastive term is skipped (not zeroed) when
    disabled or when the batch has a single row (no in-batch negatives)."""
    ce = cross_entropy(out.logits, labels)
    con = None
    if contrastive and out.z_claim.shape[0] > 1:
        S = similarity_matrix(l2_normalize(out.z_claim), l2_normalize(out.z_doc))
        con = info_nce_symmetric(S, tau)
    return LossBundle(ce=ce, contrastive=con, total=total_loss(ce, con, lam), lam=lam, tau=tau)
