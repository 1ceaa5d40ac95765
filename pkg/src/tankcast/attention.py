"""Pre-normalised multi-head attention over vehicle embeddings."""
from __future__ import annotations

import csv
import math
from typing import Iterable, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import EmptyContext, InvalidArgument


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with LayerNorm applied to the query and
    key/value inputs ahead of their projections; no residual, no post-norm."""

    def __init__(self, dim: int, n_heads: int = 4, kv_dim: Optional[int] = None):
        super().__init__()
        if dim % n_heads:
            raise InvalidArgument(f"model dim {dim} not divisible by {n_heads} heads")
        kv_dim = kv_dim or dim
        self.dim, self.n_heads, self.head_dim = dim, n_heads, dim // n_heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v, key_mask=None) -> Tuple[torch.Tensor, torch.Tensor]:
        """q (B, Lq, D), k/v (B, Lk, Dkv), key_mask (B, Lk) bool with True = keep.

        Returns the (B, Lq, D) output and (B, heads, Lq, Lk) weights. Query
        rows whose keys are all masked get zero weights and a zero output.
        """
        if k.shape[1] != v.shape[1]:
            raise InvalidArgument("keys and values need the same length")
        if k.shape[1] == 0:
            raise EmptyContext("attention over an empty key/value set")
        b, lq, _ = q.shape
        lk = k.shape[1]
        qh = self.q(self.norm_q(q)).view(b, lq, self.n_heads, self.head_dim).transpose(1, 2)
        kh = self.k(self.norm_kv(k)).view(b, lk, self.n_heads, self.head_dim).transpose(1, 2)
        vh = self.v(self.norm_kv(v)).view(b, lk, self.n_heads, self.head_dim).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            keep = key_mask[:, None, None, :].to(torch.bool)
            scores = scores.masked_fill(~keep, float("-inf"))
            any_key = keep.any(dim=-1, keepdim=True)
            scores = torch.where(any_key, scores, torch.zeros_like(scores))
            weights = torch.softmax(scores, dim=-1) * any_key
        else:
            weights = torch.softmax(scores, dim=-1)
        heads = (weights @ vh).transpose(1, 2).reshape(b, lq, self.dim)
        out = self.out(heads)
        if key_mask is not None:
            out = out * key_mask.any(dim=-1).to(out.dtype)[:, None, None]
        return out, weights


def multi_head_attention(q, k, v, attn: MultiHeadAttention, key_mask=None):
    return attn(q, k, v, key_mask)


def self_attend_vehicles(Z, attn: MultiHeadAttention, mask=None):
    """Z (B, N, D) -> (B, N, D); an empty vehicle set passes through unchanged."""
    if Z.shape[1] == 0:
        return Z
    out, _ = attn(Z, Z, Z, mask)
    if mask is not None:
        out = out * mask[..., None].to(out.dtype)
    return out


def cross_attend_target(z_target, Z_attn, attn: MultiHeadAttention, mask=None):
    """z_target (B, D), Z_attn (B, N, D) -> z_cross (B, D) and head-averaged
    weights (B, N). No context vehicles -> zero vector and empty weights."""
    b, n = Z_attn.shape[0], Z_attn.shape[1]
    if n == 0:
        return z_target.new_zeros(z_target.shape), z_target.new_zeros((b, 0))
    out, w = attn(z_target[:, None, :], Z_attn, Z_attn, mask)
    return out[:, 0], w.mean(dim=1)[:, 0]


def attention_arrows(target_id: int, vehicle_ids: Sequence[int], weights) -> list:
    """(target_id, vehicle_id, weight) records for one sample."""
    w = [float(x) for x in weights]
    if len(w) != len(vehicle_ids):
        raise InvalidArgument("one weight per context vehicle expected")
    return [(int(target_id), int(v), x) for v, x in zip(vehicle_ids, w)]


def write_arrows_csv(path, rows: Iterable[Tuple[int, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["target_id", "vehicle_id", "weight"])
        for t, v, w in rows:
            out.writerow([t, v, f"{w:.6f}"])


def read_arrows_csv(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["target_id"]), int(r["vehicle_id"]), float(r["weight"]))
                for r in csv.DictReader(fh)]
