"""Attention building blocks shared by the aligner, prompter and decoder."""
from __future__ import annotations

import torch
import torch.nn as nn


class CrossAttention(nn.Module):
    """Multi-head attention with separate query and key/value inputs.

    ``kv_dim`` lets the memory live in a different width than the queries;
    it is projected to ``dim`` by the key/value projections directly.
    """

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None, zero_init_out: bool = False):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.kv_dim = kv_dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        if zero_init_out:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != self.dim:
            raise ValueError(f"query dim {query.shape[-1]} != {self.dim}")
        if memory.shape[-1] != self.kv_dim:
            raise ValueError(f"memory dim {memory.shape[-1]} != {self.kv_dim}")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.dim)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, in_dim if out_dim is None else out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))
