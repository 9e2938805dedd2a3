"""Text and image encoders projecting into the shared latent space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import InputError
from .fusion import GELU


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, L, d = x.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(x).view(b, L, 3, self.n_heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(key_mask[:, None, None, :] == 0, torch.finfo(scores.dtype).min)
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, L, d))


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: attention and a GELU feed-forward, each residual."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ffn_dim), GELU(), nn.Linear(ffn_dim, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        x = x + self.drop(self.attn(self.ln1(x), key_mask))
        return x + self.drop(self.ff(self.ln2(x)))


class TextEncoder(nn.Module):
    """Small transformer over OCR-augmented token ids.

    The position-0 ([CLS]) hidden state is projected affinely to ``h``. One
    instance encodes both claim and document text.
    """

    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        h: int,
        d_text: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        ffn_dim: int = 128,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token_emb = nn.Embedding(vocab_size, d_text)
        self.pos_emb = nn.Embedding(max_len, d_text)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(TransformerBlock(d_text, n_heads, ffn_dim, dropout) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_text)
        self.proj = nn.Linear(d_text, h)

    def cls_hidden(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.dim() != 2 or ids.shape[1] > self.max_len:
            raise InputError(f"token ids must be [b, L<= {self.max_len}], got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise InputError(f"token id out of range [0, {self.vocab_size})")
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.drop(self.token_emb(ids) + self.pos_emb(pos))
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)[:, 0]

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.proj(self.cls_hidden(ids, mask))


class _ImageEncoderBase(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int]):
        super().__init__()
        self.image_shape = tuple(image_shape)

    def _check(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or tuple(images.shape[1:]) != self.image_shape:
            raise InputError(f"expected images [b, {self.image_shape}], got {tuple(images.shape)}")


class ConvImageEncoder(_ImageEncoderBase):
    """Three stride-2 convolutions, global average pool, affine projection."""

    def __init__(self, image_shape, h: int, channels=(8, 16, 32), dropout: float = 0.1):
        super().__init__(image_shape)
        layers = []
        c_in = image_shape[0]
        for c_out in channels:
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.d_img = c_in
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Linear(self.d_img, h)

    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        self._check(images)
        return self.features(images).mean(dim=(2, 3))

    def forward(self, images):
        return self.proj(self.drop(self.image_features(images)))


class PatchImageEncoder(_ImageEncoderBase):
    """ViT-style variant: patch embedding, one transformer block, mean pool."""

    def __init__(self, image_shape, h: int, patch: int = 8, d_img: int = 32, n_heads: int = 4, dropout: float = 0.1):
        super().__init__(image_shape)
        c, height, width = image_shape
        if height % patch or width % patch:
            raise ValueError(f"image {height}x{width} not divisible into {patch}px patches")
        n_patches = (height // patch) * (width // patch)
        self.d_img = d_img
        self.patchify = nn.Conv2d(c, d_img, kernel_size=patch, stride=patch)
        self.pos_emb = nn.Parameter(torch.zeros(1, n_patches, d_img))
        self.block = TransformerBlock(d_img, n_heads, 2 * d_img, dropout)
        self.ln_f = nn.LayerNorm(d_img)
        self.proj = nn.Linear(d_img, h)

    def image_features(self, images):
        self._check(images)
        x = self.patchify(images).flatten(2).transpose(1, 2) + self.pos_emb
        return self.ln_f(self.block(x)).mean(dim=1)

    def forward(self, images):
        return self.proj(self.image_features(images))


class NullImageEncoder(_ImageEncoderBase):
    """Text-only ablation: the image latent is identically zero."""

    def __init__(self, image_shape, h: int):
        super().__init__(image_shape)
        self.h = h

    def forward(self, images):
        self._check(images)
        return images.new_zeros(images.shape[0], self.h)


IMAGE_ENCODERS = ("conv", "patch", "none")


def make_image_encoder(kind: str, image_shape, h: int, dropout: float = 0.1) -> nn.Module:
    if kind == "conv":
        return ConvImageEncoder(image_shape, h, dropout=dropout)
    if kind == "patch":
        return PatchImageEncoder(image_shape, h, dropout=dropout)
    if kind == "none":
        return NullImageEncoder(image_shape, h)
    raise ValueError(f"unknown image encoder {kind!r}; expected one of {IMAGE_ENCODERS}")


@dataclass
class PairRepresentation:
    claim_repr: torch.Tensor  # [b, 2h]: text latent then image latent
    doc_repr: torch.Tensor


def build_pair_representations(
    claim_text: torch.Tensor, claim_img: torch.Tensor, doc_text: torch.Tensor, doc_img: torch.Tensor
) -> PairRepresentation:
    h = claim_text.shape[-1]
    assert all(t.shape == claim_text.shape for t in (claim_img, doc_text, doc_img)), (
        "all four latents must share shape [b, h]",
        [tuple(t.shape) for t in (claim_text, claim_img, doc_text, doc_img)],
    )
    claim = torch.cat([claim_text, claim_img], dim=-1)
    doc = torch.cat([doc_text, doc_img], dim=-1)
    assert claim.shape[-1] == 2 * h
    return PairRepresentation(claim_repr=claim, doc_repr=doc)
