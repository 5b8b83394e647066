"""Embedding extractors mapping feature maps/vectors to d-dim embeddings."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from .errors import ModelError


class FreezableModule(nn.Module):
    """nn.Module whose parameters and norm statistics can be locked.

    While frozen, ``train()`` is a no-op so batch-norm running statistics
    stay fixed and ``requires_grad`` stays off.
    """

    def __init__(self):
        super().__init__()
        self.frozen = False

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)


def set_frozen(module: FreezableModule, flag: bool) -> FreezableModule:
    """Toggle gradient and normalization-statistic updates. Idempotent."""
    module.frozen = flag
    for p in module.parameters():
        p.requires_grad_(not flag)
    if flag:
        module.eval()
    return module


def param_digest(module: nn.Module) -> str:
    """sha256 over the state dict (parameters and buffers, key-sorted)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class IdentityEmbedder(FreezableModule):
    """Pass-through backbone: the (flattened) input is the embedding.

    Used as the sanity path on synthetic vector data where the cluster
    geometry itself should suffice.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.d:
            raise ModelError(f"identity backbone expects dim {self.d}, got {flat.shape[1]}")
        return flat


class ConvEmbedder(FreezableModule):
    """Desk-scale CNN: 3x (3x3 conv, batch norm, ReLU, 2x2 max pool), then
    global average pooling. Output dim equals the last channel count."""

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        self.channels = tuple(channels)
        blocks = []
        in_ch = 1
        for out_ch in self.channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(),
                    nn.MaxPool2d(2),
                )
            )
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.d = self.channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3:
            raise ModelError(f"expected [batch, frames, bins] input, got shape {tuple(x.shape)}")
        min_extent = 2 ** len(self.blocks)
        if x.shape[1] < min_extent or x.shape[2] < min_extent:
            raise ModelError(
                f"feature map {tuple(x.shape[1:])} too small for {len(self.blocks)} "
                f"pooling stages (needs >= {min_extent} per axis)"
            )
        out = x.unsqueeze(1)
        for block in self.blocks:
            out = block(out)
        return out.mean(dim=(2, 3))


def module_dtype(module: nn.Module) -> torch.dtype:
    for p in module.parameters():
        return p.dtype
    for b in module.buffers():
        return b.dtype
    return torch.get_default_dtype()


def embed(
    backbone: FreezableModule,
    features: np.ndarray | torch.Tensor,
    *,
    train_mode: bool = False,
) -> torch.Tensor:
    """Embed one sample or a batch; eval mode is a pure function of input."""
    x = torch.as_tensor(features).to(module_dtype(backbone))
    single = (isinstance(backbone, ConvEmbedder) and x.ndim == 2) or (
        isinstance(backbone, IdentityEmbedder) and x.ndim == 1
    )
    if single:
        x = x.unsqueeze(0)
    backbone.train(train_mode)
    if train_mode:
        out = backbone(x)
    else:
        with torch.no_grad():
            out = backbone(x)
    return out[0] if single else out
