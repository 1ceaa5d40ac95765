"""Numerical-categorical encoders, sinusoidal time encoding and the final fusion layer."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument

TIME_BASE = 10000.0
HORIZON_BASE = 6.0
TIME_DIM = 8
UNKNOWN = "<unk>"


def positional_encode(pos, dim: int = TIME_DIM, base: float = TIME_BASE):
    """Sinusoidal encoding: slot 2i = sin(pos / base**(2i/dim)), slot 2i+1 = cos(...).

    Accepts a scalar (returns a numpy vector) or a tensor of shape (B,)
    (returns a (B, dim) tensor on the same device / dtype).
    """
    if dim <= 0 or dim % 2:
        raise InvalidArgument(f"encoding dim must be even and positive, got {dim}")
    if not base > 0:
        raise InvalidArgument("encoding base must be positive")
    if isinstance(pos, torch.Tensor):
        i = torch.arange(0, dim, 2, dtype=pos.dtype, device=pos.device)
        angle = pos.reshape(-1, 1) / base ** (i / dim)
        out = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1)
        return out.reshape(pos.shape[0] if pos.dim() else 1, dim)
    pos = float(pos)
    if not np.isfinite(pos):
        raise InvalidArgument("position must be finite")
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / base ** (i / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


class CategoricalVocab:
    """Per-feature token tables; index 0 of every table is the unknown token."""

    def __init__(self, tables: Optional[Mapping[str, Sequence[str]]] = None):
        self.tables: Dict[str, Dict[str, int]] = {}
        for feat, tokens in (tables or {}).items():
            self.tables[feat] = {UNKNOWN: 0}
            for tok in tokens:
                self.add(feat, tok)

    def add(self, feature: str, token: str) -> int:
        table = self.tables.setdefault(feature, {UNKNOWN: 0})
        if token not in table:
            table[token] = len(table)
        return table[token]

    def index(self, feature: str, token: str) -> int:
        return self.tables.get(feature, {}).get(token, 0)

    def cardinality(self, feature: str) -> int:
        return len(self.tables.get(feature, {UNKNOWN: 0}))

    def encode(self, features: Sequence[str], tokens: Mapping[str, str]) -> List[int]:
        return [self.index(f, tokens[f]) for f in features]

    def save(self, path) -> None:
        lines = [f"{feat}\t{idx}\t{tok}" for feat, table in sorted(self.tables.items())
                 for tok, idx in sorted(table.items(), key=lambda kv: kv[1])]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CategoricalVocab":
        vocab = cls()
        for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            feat, idx, tok = line.split("\t", 2)
            table = vocab.tables.setdefault(feat, {})
            if int(idx) != len(table):
                raise InvalidArgument(f"{path}:{n}: indices must be dense and ordered")
            table[tok] = int(idx)
        return vocab

    def __eq__(self, other):
        return isinstance(other, CategoricalVocab) and self.tables == other.tables


class NumericalCategoricalEncoder(nn.Module):
    """Numeric branch + categorical embeddings + time encoding -> one embedding.

    With ``n_dynamic > 0`` a GRU runs over the history series from a hidden
    state projected from the static embedding, and its final state is added
    back onto that embedding.
    """

    def __init__(self, n_numeric: int, cardinalities: Sequence[int], embed_dim: int = 128,
                 cat_dim: int = 8, n_dynamic: int = 0, time_dim: int = TIME_DIM,
                 time_base: float = TIME_BASE):
        super().__init__()
        self.n_numeric = n_numeric
        self.cardinalities = list(cardinalities)
        self.embed_dim = embed_dim
        self.time_dim = time_dim
        self.time_base = time_base
        self.numeric = nn.Linear(n_numeric, embed_dim)
        self.numeric_norm = nn.BatchNorm1d(embed_dim, momentum=0.1)
        self.embeddings = nn.ModuleList(nn.Embedding(c, cat_dim) for c in self.cardinalities)
        fused_in = embed_dim + cat_dim * len(self.cardinalities) + time_dim
        self.fuse = nn.Linear(fused_in, embed_dim)
        self.fuse_norm = nn.BatchNorm1d(embed_dim, momentum=0.1)
        self.n_dynamic = n_dynamic
        if n_dynamic:
            self.init_proj = nn.Linear(embed_dim, embed_dim)
            self.gru = nn.GRU(n_dynamic, embed_dim, batch_first=True)

    def static(self, numeric: torch.Tensor, cats: torch.Tensor, time_s: torch.Tensor):
        if numeric.shape[-1] != self.n_numeric:
            raise InvalidArgument(f"expected {self.n_numeric} numeric features, got {numeric.shape[-1]}")
        parts = [self.numeric_norm(self.numeric(numeric))]
        for j, emb in enumerate(self.embeddings):
            col = cats[:, j]
            if col.numel() and (int(col.min()) < 0 or int(col.max()) >= emb.num_embeddings):
                raise InvalidArgument(f"categorical feature {j}: index out of range")
            parts.append(emb(col))
        parts.append(positional_encode(time_s.to(numeric.dtype), self.time_dim, self.time_base))
        return F.relu(self.fuse_norm(self.fuse(torch.cat(parts, dim=-1))))

    def forward(self, numeric, cats, time_s, series=None, lengths=None):
        """numeric (B, n), cats (B, k) long, time_s (B,), series (B, T, F), lengths (B,)."""
        h = self.static(numeric, cats, time_s)
        if series is None or not self.n_dynamic or series.shape[1] == 0:
            return h
        if torch.isnan(series).any():
            raise InvalidArgument("NaN in dynamic series")
        if lengths is None:
            lengths = torch.full((series.shape[0],), series.shape[1], dtype=torch.long)
        lengths = lengths.to("cpu", torch.long)
        has = lengths > 0
        if not bool(has.any()):
            return h
        h0 = self.init_proj(h[has]).unsqueeze(0)
        packed = nn.utils.rnn.pack_padded_sequence(series[has], lengths[has],
                                                   batch_first=True, enforce_sorted=False)
        _, h_last = self.gru(packed, h0)
        rec = torch.zeros_like(h)
        rec[has] = h_last[0]
        return h + rec


class FinalFusion(nn.Module):
    """relu([z_cross, z_global, PE(horizon)] W + b)."""

    def __init__(self, embed_dim: int, time_dim: int = TIME_DIM, max_horizon: int = 6):
        super().__init__()
        self.time_dim = time_dim
        self.max_horizon = max_horizon
        self.linear = nn.Linear(2 * embed_dim + time_dim, embed_dim)

    def forward(self, z_cross, z_global, horizon):
        horizon = torch.as_tensor(horizon)
        if bool(((horizon < 1) | (horizon > self.max_horizon)).any()):
            raise InvalidArgument(f"horizon must lie in [1, {self.max_horizon}]")
        pe = positional_encode(horizon.to(z_cross.dtype).reshape(-1), self.time_dim,
                               HORIZON_BASE)
        return F.relu(self.linear(torch.cat([z_cross, z_global, pe], dim=-1)))


def fuse_final(z_cross, z_global, horizon_steps, fusion: FinalFusion):
    return fusion(z_cross, z_global, horizon_steps)


def build_vocab(examples: Iterable, vehicle_tokens: Sequence[str],
                global_tokens: Sequence[str]) -> CategoricalVocab:
    vocab = CategoricalVocab({f: [] for f in list(vehicle_tokens) + list(global_tokens)})
    for ex in examples:
        for f in global_tokens:
            vocab.add(f, ex.global_tokens[f])
        for veh in [ex.target] + list(ex.context):
            for f in vehicle_tokens:
                vocab.add(f, veh.tokens[f])
    return vocab
