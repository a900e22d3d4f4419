#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Building blocks shared by the encoders, the language model and the acoustic model.

All modules take batch-first tensors ``[B x T x d]`` and a boolean ``mask`` ``[B x T]``
that is True on valid (non-padded) positions.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from semalignvc.errors import TrainingDivergedError

__all__ = ['lengths_to_mask', 'causal_mask', 'sinusoidal_encoding', 'timestep_embedding',
           'SinusoidalPositionalEncoding', 'FeedForward', 'ConformerBlock', 'ConformerEncoder',
           'TransformerBlock', 'TransformerStack', 'warmup_cosine_schedule', 'sample_batch', 'check_finite']


def lengths_to_mask(lengths, max_len=None):
    """Boolean [B x max_len] mask, True where the position is below the length."""
    lengths = torch.as_tensor(lengths)
    max_len = int(lengths.max()) if max_len is None else int(max_len)
    return torch.arange(max_len, device=lengths.device).unsqueeze(0) < lengths.unsqueeze(1)


def causal_mask(size, device=None):
    """Boolean [size x size] attention mask, True above the diagonal (positions not attended)."""
    return torch.triu(torch.ones((size, size), dtype=torch.bool, device=device), diagonal=1)


def sinusoidal_encoding(positions, d):
    """Sinusoidal features [..., d] of (possibly fractional) positions."""
    half = d // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=positions.device) / half)
    args = positions.float().unsqueeze(-1) * freqs
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if d % 2:
        enc = F.pad(enc, (0, 1))
    return enc


def timestep_embedding(t, d, scale=1000.0):
    """Sinusoidal embedding [B x d] of flow times ``t`` in [0, 1]."""
    return sinusoidal_encoding(t * scale, d)


class SinusoidalPositionalEncoding(nn.Module):
    """Adds fixed sinusoidal position features."""

    def __init__(self, d, max_len=4096):
        super(SinusoidalPositionalEncoding, self).__init__()
        self.register_buffer('table', sinusoidal_encoding(torch.arange(max_len), d), persistent=False)

    def forward(self, x, offset=0):
        end = offset + x.shape[1]
        if end > self.table.shape[0]:
            raise ValueError("sequence of {} positions exceeds the maximum of {}".format(end, self.table.shape[0]))
        return x + self.table[offset:end].unsqueeze(0).to(x.dtype)


class FeedForward(nn.Module):

    def __init__(self, d, mult=4, dropout=0.0):
        super(FeedForward, self).__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(d),
            nn.Linear(d, d * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(d * mult, d),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class _ConvModule(nn.Module):
    """Pointwise conv + GLU, depthwise conv, norm, SiLU, pointwise conv."""

    def __init__(self, d, kernel_size, dropout=0.0):
        super(_ConvModule, self).__init__()
        if kernel_size % 2 == 0:
            raise ValueError("conv kernel size should be odd, got {}".format(kernel_size))
        self.norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Conv1d(d, 2 * d, 1)
        self.depthwise = nn.Conv1d(d, d, kernel_size, padding=kernel_size // 2, groups=d)
        self.mid_norm = nn.LayerNorm(d)
        self.pointwise_out = nn.Conv1d(d, d, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        y = F.glu(self.pointwise_in(self.norm(x).transpose(1, 2)), dim=1)
        if mask is not None:
            # padded frames must read as zeros to the depthwise conv
            y = y.masked_fill(~mask.unsqueeze(1), 0.0)
        y = self.depthwise(y).transpose(1, 2)
        y = F.silu(self.mid_norm(y))
        y = self.pointwise_out(y.transpose(1, 2)).transpose(1, 2)
        return self.dropout(y)


class ConformerBlock(nn.Module):
    """Macaron feed-forward, self-attention, convolution, feed-forward, final norm."""

    def __init__(self, d, heads, conv_kernel=7, dropout=0.0):
        super(ConformerBlock, self).__init__()
        if d % heads:
            raise ValueError("model width {} is not divisible by {} heads".format(d, heads))
        self.ff1 = FeedForward(d, dropout=dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(dropout)
        self.conv = _ConvModule(d, conv_kernel, dropout=dropout)
        self.ff2 = FeedForward(d, dropout=dropout)
        self.out_norm = nn.LayerNorm(d)

    def forward(self, x, mask=None):
        x = x + 0.5 * self.ff1(x)
        y = self.attn_norm(x)
        y, _ = self.attn(y, y, y, key_padding_mask=None if mask is None else ~mask, need_weights=False)
        x = x + self.attn_dropout(y)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class ConformerEncoder(nn.Module):

    def __init__(self, layers, d, heads, conv_kernel=7, dropout=0.0, max_len=4096):
        super(ConformerEncoder, self).__init__()
        if layers < 1:
            raise ValueError("need at least one conformer layer")
        self.pos = SinusoidalPositionalEncoding(d, max_len)
        self.dropout = nn.Dropout(dropout)
        self.blocks = nn.ModuleList([ConformerBlock(d, heads, conv_kernel, dropout) for _ in range(layers)])

    def forward(self, x, mask=None):
        x = self.dropout(self.pos(x))
        for block in self.blocks:
            x = block(x, mask)
        return x


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d, heads, dropout=0.0):
        super(TransformerBlock, self).__init__()
        if d % heads:
            raise ValueError("model width {} is not divisible by {} heads".format(d, heads))
        self.norm = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.dropout = nn.Dropout(dropout)
        self.ff = FeedForward(d, dropout=dropout)

    def forward(self, x, mask=None, attn_mask=None):
        y = self.norm(x)
        y, _ = self.attn(y, y, y, attn_mask=attn_mask, key_padding_mask=None if mask is None else ~mask,
                         need_weights=False)
        x = x + self.dropout(y)
        return x + self.ff(x)

    def step(self, x, cache):
        """Self-attention of the new positions `x` [B x n x d] over the cached keys and values plus their own.

        `cache` is a dict updated in place; an empty one starts a causal prefix.
        """
        attn = self.attn
        b, n, d = x.shape
        h = attn.num_heads
        q, k, v = F.linear(self.norm(x), attn.in_proj_weight, attn.in_proj_bias).chunk(3, dim=-1)
        q, k, v = [t.reshape(b, n, h, d // h).transpose(1, 2) for t in (q, k, v)]
        if cache:
            if n > 1:
                raise ValueError("a cached step takes one new position at a time, got {}".format(n))
            k = torch.cat([cache['k'], k], dim=2)
            v = torch.cat([cache['v'], v], dim=2)
        cache['k'], cache['v'] = k, v
        y = F.scaled_dot_product_attention(q, k, v, is_causal=n > 1)
        x = x + attn.out_proj(y.transpose(1, 2).reshape(b, n, d))
        return x + self.ff(x)


class TransformerStack(nn.Module):
    """Stack of :class:`TransformerBlock`, optionally causal, with a final norm."""

    def __init__(self, layers, d, heads, dropout=0.0, causal=False):
        super(TransformerStack, self).__init__()
        self.causal = causal
        self.blocks = nn.ModuleList([TransformerBlock(d, heads, dropout) for _ in range(layers)])
        self.norm = nn.LayerNorm(d)

    def forward(self, x, mask=None):
        attn_mask = causal_mask(x.shape[1], x.device) if self.causal else None
        for block in self.blocks:
            x = block(x, mask, attn_mask)
        return self.norm(x)

    def step(self, x, caches):
        """Incremental causal decoding; `caches` holds one dict per block."""
        if not self.causal:
            raise ValueError("incremental decoding needs a causal stack")
        for block, cache in zip(self.blocks, caches):
            x = block.step(x, cache)
        return self.norm(x)


def warmup_cosine_schedule(optimizer, warmup, total_steps, floor=0.1):
    """Linear warmup to the peak learning rate, then cosine decay to ``floor * peak``."""
    warmup = max(1, int(warmup))
    total_steps = max(warmup + 1, int(total_steps))

    def factor(step):
        if step < warmup:
            return float(step + 1) / warmup
        progress = min(1.0, float(step - warmup) / (total_steps - warmup))
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def sample_batch(n_items, batch_size, generator):
    """Indices of one random batch (without replacement) drawn with a torch generator."""
    return torch.randperm(n_items, generator=generator)[:min(batch_size, n_items)].tolist()


def check_finite(losses, batch_ids):
    """Raise TrainingDivergedError when a loss component is not finite."""
    bad = [name for name, value in losses.items() if not torch.isfinite(torch.as_tensor(value)).all()]
    if bad:
        raise TrainingDivergedError("non-finite loss ({})".format(', '.join(bad)), batch_ids=batch_ids,
                                    losses=dict((k, float(v)) for k, v in losses.items()))
