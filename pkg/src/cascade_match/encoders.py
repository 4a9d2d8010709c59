"""Text encoders: a CNN with word attention for the selector, a small
transformer for the matcher."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from . import numerics as nx
from .graphstore import Document


def pad_batch(docs: Sequence[Document] | Sequence[Sequence[int]],
              length: int | None = None) -> torch.Tensor:
    """Stack token sequences into a (B, L) LongTensor padded with 0."""
    seqs = [d.tokens if isinstance(d, Document) else tuple(d) for d in docs]
    L = length or max((len(s) for s in seqs), default=1)
    out = torch.zeros((len(seqs), max(L, 1)), dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def _check_vocab(tokens: torch.Tensor, vocab_size: int) -> None:
    if tokens.numel() and (int(tokens.max()) >= vocab_size or int(tokens.min()) < 0):
        raise IndexError(f"token id out of vocabulary (size {vocab_size})")


class LightEncoder(nn.Module):
    """Embedding -> zero-padded conv (window 2k+1) -> ReLU -> word attention."""

    def __init__(self, vocab_size: int, dim: int = 64, window: int = 3,
                 dtype: torch.dtype = torch.float32, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.vocab_size, self.dim, self.window = vocab_size, dim, window

        def init(*shape, scale):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=dtype) * scale)

        self.embedding = init(vocab_size, dim, scale=1.0 / math.sqrt(dim))
        self.conv_weight = init(dim, dim, window, scale=1.0 / math.sqrt(dim * window))
        self.conv_bias = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.att_query = init(dim, scale=1.0)
        self.att_weight = init(dim, dim, scale=1.0 / math.sqrt(dim))
        self.att_bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, tokens: torch.Tensor, return_attention: bool = False):
        _check_vocab(tokens, self.vocab_size)
        mask = tokens > 0
        v = self.embedding[tokens] * mask.unsqueeze(-1).to(self.embedding.dtype)
        c = nx.relu(nx.conv1d_same(v, self.conv_weight, self.conv_bias, self.window))
        key = nx.tanh(nx.affine(self.att_query, self.att_weight, self.att_bias))
        logits = (c * key).sum(-1).masked_fill(~mask, float("-inf"))
        alpha = nx.softmax(logits, dim=-1)
        r = (alpha.unsqueeze(-1) * c).sum(1)
        return (r, alpha, c) if return_attention else r


class HeavyEncoder(nn.Module):
    """Pre-norm transformer; the summary token's last-layer state is the output."""

    def __init__(self, vocab_size: int, dim: int = 64, layers: int = 2, heads: int = 4,
                 max_len: int = 32, ffn_mult: int = 4,
                 dtype: torch.dtype = torch.float32, seed: int = 0):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one layer")
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        g = torch.Generator().manual_seed(seed)
        self.vocab_size, self.dim, self.heads, self.max_len = vocab_size, dim, heads, max_len

        def init(*shape, scale):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=dtype) * scale)

        s = 1.0 / math.sqrt(dim)
        self.embedding = init(vocab_size, dim, scale=s)
        self.positions = init(max_len + 1, dim, scale=s)
        self.summary = init(dim, scale=s)
        self.blocks = nn.ModuleList()
        for _ in range(layers):
            blk = nn.Module()
            blk.ln1_w = nn.Parameter(torch.ones(dim, dtype=dtype))
            blk.ln1_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
            blk.qkv_w = init(3 * dim, dim, scale=s)
            blk.qkv_b = nn.Parameter(torch.zeros(3 * dim, dtype=dtype))
            blk.out_w = init(dim, dim, scale=s)
            blk.out_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
            blk.ln2_w = nn.Parameter(torch.ones(dim, dtype=dtype))
            blk.ln2_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
            blk.ff1_w = init(ffn_mult * dim, dim, scale=s)
            blk.ff1_b = nn.Parameter(torch.zeros(ffn_mult * dim, dtype=dtype))
            blk.ff2_w = init(dim, ffn_mult * dim, scale=1.0 / math.sqrt(ffn_mult * dim))
            blk.ff2_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
            self.blocks.append(blk)
        self.lnf_w = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.lnf_b = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        _check_vocab(tokens, self.vocab_size)
        B, L = tokens.shape
        if L > self.max_len:
            raise nx.DimensionError(f"encode_heavy: length {L} exceeds positional table {self.max_len}")
        d, h = self.dim, self.heads
        mask = torch.cat([torch.ones(B, 1, dtype=torch.bool), tokens > 0], dim=1)
        x = torch.cat([self.summary.expand(B, 1, d), self.embedding[tokens]], dim=1)
        x = x + self.positions[:L + 1]
        bias = torch.zeros(B, 1, 1, L + 1, dtype=x.dtype).masked_fill(
            ~mask[:, None, None, :], float("-inf"))
        for blk in self.blocks:
            y = nn.functional.layer_norm(x, (d,), blk.ln1_w, blk.ln1_b)
            q, k, v = nx.affine(y, blk.qkv_w, blk.qkv_b).split(d, dim=-1)
            q, k, v = (t.view(B, L + 1, h, d // h).transpose(1, 2) for t in (q, k, v))
            att = nx.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h) + bias, dim=-1)
            y = (att @ v).transpose(1, 2).reshape(B, L + 1, d)
            x = x + nx.affine(y, blk.out_w, blk.out_b)
            y = nn.functional.layer_norm(x, (d,), blk.ln2_w, blk.ln2_b)
            y = nx.affine(nn.functional.gelu(nx.affine(y, blk.ff1_w, blk.ff1_b)),
                          blk.ff2_w, blk.ff2_b)
            x = x + y
        x = nn.functional.layer_norm(x, (d,), self.lnf_w, self.lnf_b)
        return x[:, 0]


def encode_light(doc: Document, params: LightEncoder) -> torch.Tensor:
    return params(pad_batch([doc]))[0]


def encode_heavy(doc: Document, params: HeavyEncoder) -> torch.Tensor:
    if len(doc.tokens) > params.max_len:
        raise nx.DimensionError(
            f"encode_heavy: length {len(doc.tokens)} exceeds positional table {params.max_len}")
    return params(pad_batch([doc]))[0]


def encode_many(docs: Sequence[Document], encoder: nn.Module,
                batch_size: int = 1024) -> torch.Tensor:
    """Encode documents in padded batches; returns (len(docs), dim)."""
    if not docs:
        return torch.zeros((0, encoder.dim), dtype=encoder.embedding.dtype)
    outs = [encoder(pad_batch(docs[i:i + batch_size]))
            for i in range(0, len(docs), batch_size)]
    return torch.cat(outs, 0)
