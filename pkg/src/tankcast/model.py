"""Full endpoint predictor: encoders, vehicle attention, fusion and the conditioned backbone."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .attention import MultiHeadAttention, cross_attend_target, self_attend_vehicles
from .backbone import BackboneConfig, NestedUNet
from .battle import (GLOBAL_TOKENS, N_GLOBAL_NUMERIC, N_HISTORY, N_VEHICLE_NUMERIC,
                     VEHICLE_TOKENS, TrainingExample)
from .encoder import CategoricalVocab, FinalFusion, NumericalCategoricalEncoder
from .errors import InvalidArgument

ABLATIONS = ("none", "global", "target", "full")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 6
    base_width: int = 16
    depth: int = 3
    nested: bool = True
    n_conditioned: int = 1
    embed_dim: int = 128
    target_dim: Optional[int] = None     # defaults to embed_dim
    heads: int = 4
    cat_dim: int = 8
    ablation: str = "full"
    cardinalities: Dict[str, int] = None

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise InvalidArgument(f"ablation must be one of {ABLATIONS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _cards(config: ModelConfig, feats: Sequence[str]) -> List[int]:
    cards = config.cardinalities or {}
    return [int(cards.get(f, 1)) for f in feats]


class EndpointPredictor(nn.Module):
    """Maps a collated batch to (B, H, W) heatmap logits.

    Ablations: ``none`` feeds a zero conditioning vector and builds no
    encoders; ``global`` adds the global encoder and horizon fusion;
    ``target`` adds the target encoder (its embedding stands in for the
    attention output); ``full`` adds context vehicles and both attention
    stages.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        ab = config.ablation
        self.backbone = NestedUNet(
            BackboneConfig(config.in_channels, config.base_width, config.depth, config.nested,
                           config.n_conditioned, config.heads), cond_dim=d)
        if ab != "none":
            self.global_enc = NumericalCategoricalEncoder(
                N_GLOBAL_NUMERIC, _cards(config, GLOBAL_TOKENS), d, config.cat_dim)
            self.fusion = FinalFusion(d)
        if ab in ("target", "full"):
            td = config.target_dim or d
            self.target_enc = NumericalCategoricalEncoder(
                N_VEHICLE_NUMERIC, _cards(config, VEHICLE_TOKENS), td, config.cat_dim, N_HISTORY)
            self.target_proj = nn.Identity() if td == d else nn.Linear(td, d)
        if ab == "full":
            self.vehicle_enc = NumericalCategoricalEncoder(
                N_VEHICLE_NUMERIC, _cards(config, VEHICLE_TOKENS), d, config.cat_dim, N_HISTORY)
            self.self_attn = MultiHeadAttention(d, config.heads)
            self.cross_attn = MultiHeadAttention(d, config.heads)

    def condition(self, batch: Dict[str, torch.Tensor]):
        """z_final (B, D) and head-averaged cross-attention weights (B, N) or None."""
        ab = self.config.ablation
        b = batch["image"].shape[0]
        d = self.config.embed_dim
        if ab == "none":
            return batch["image"].new_zeros((b, d)), None
        z_global = self.global_enc(batch["g_num"], batch["g_cat"], batch["g_time"])
        weights = None
        if ab == "global":
            z_cross = z_global.new_zeros((b, d))
        else:
            z_target = self.target_proj(self.target_enc(
                batch["t_num"], batch["t_cat"], batch["t_time"], batch["t_hist"],
                batch["t_len"]))
            if ab == "target":
                z_cross = z_target
            else:
                Z, mask = self.encode_context(batch)
                Z = self_attend_vehicles(Z, self.self_attn, mask)
                z_cross, weights = cross_attend_target(z_target, Z, self.cross_attn, mask)
        return self.fusion(z_cross, z_global, batch["horizon"]), weights

    def encode_context(self, batch):
        mask = batch["c_mask"]
        b, n = mask.shape
        d = self.config.embed_dim
        Z = batch["image"].new_zeros((b, n, d))
        if n == 0 or not bool(mask.any()):
            return Z, mask
        sel = mask.reshape(-1)
        flat = lambda t: t.reshape((b * n,) + t.shape[2:])[sel]
        z = self.vehicle_enc(flat(batch["c_num"]), flat(batch["c_cat"]), flat(batch["c_time"]),
                             flat(batch["c_hist"]), flat(batch["c_len"]))
        Z = Z.reshape(b * n, d).index_put((sel.nonzero()[:, 0],), z).reshape(b, n, d)
        return Z, mask

    def forward(self, batch):
        z, weights = self.condition(batch)
        return self.backbone(batch["image"], z), weights


def encode_entities(model: EndpointPredictor, batch):
    """(z_global, z_target, Z, mask) of a full-context model, for inspection."""
    z_global = model.global_enc(batch["g_num"], batch["g_cat"], batch["g_time"])
    z_target = model.target_enc(batch["t_num"], batch["t_cat"], batch["t_time"],
                                batch["t_hist"], batch["t_len"])
    Z, mask = model.encode_context(batch)
    return z_global, z_target, Z, mask


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def collate(examples: Sequence[TrainingExample], vocab: CategoricalVocab,
            dtype=torch.float32) -> Dict[str, torch.Tensor]:
    """Stack examples into padded tensors (context vehicles padded to the batch max)."""
    if not examples:
        raise InvalidArgument("cannot collate an empty batch")
    b = len(examples)
    n = max(len(ex.context) for ex in examples)
    t_max = max([ex.target.history.shape[0] for ex in examples]
                + [c.history.shape[0] for ex in examples for c in ex.context] + [1])
    f = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)

    def hist(h):
        out = np.zeros((t_max, N_HISTORY), dtype=np.float32)
        out[:len(h)] = h
        return out

    batch = {
        "image": f(np.stack([ex.image for ex in examples])),
        "target": f(np.stack([ex.target_heatmap for ex in examples])),
        "mask": torch.as_tensor(np.stack([ex.mask for ex in examples])),
        "horizon": torch.tensor([ex.horizon for ex in examples], dtype=torch.long),
        "g_num": f(np.stack([ex.global_numeric for ex in examples])),
        "g_cat": torch.tensor([vocab.encode(GLOBAL_TOKENS, ex.global_tokens) for ex in examples],
                              dtype=torch.long),
        "g_time": f([ex.global_time_s for ex in examples]),
        "t_num": f(np.stack([ex.target.numeric for ex in examples])),
        "t_cat": torch.tensor([vocab.encode(VEHICLE_TOKENS, ex.target.tokens) for ex in examples],
                              dtype=torch.long),
        "t_time": f([ex.target.time_s for ex in examples]),
        "t_hist": f(np.stack([hist(ex.target.history) for ex in examples])),
        "t_len": torch.tensor([len(ex.target.history) for ex in examples], dtype=torch.long),
    }
    c_num = np.zeros((b, n, N_VEHICLE_NUMERIC), dtype=np.float32)
    c_cat = np.zeros((b, n, len(VEHICLE_TOKENS)), dtype=np.int64)
    c_time = np.zeros((b, n), dtype=np.float32)
    c_hist = np.zeros((b, n, t_max, N_HISTORY), dtype=np.float32)
    c_len = np.zeros((b, n), dtype=np.int64)
    c_mask = np.zeros((b, n), dtype=bool)
    c_ids = np.full((b, n), -1, dtype=np.int64)
    for i, ex in enumerate(examples):
        for j, c in enumerate(ex.context):
            c_num[i, j] = c.numeric
            c_cat[i, j] = vocab.encode(VEHICLE_TOKENS, c.tokens)
            c_time[i, j] = c.time_s
            c_hist[i, j, :len(c.history)] = c.history
            c_len[i, j] = len(c.history)
            c_mask[i, j] = True
            c_ids[i, j] = c.vid
    batch.update(c_num=f(c_num), c_cat=torch.as_tensor(c_cat), c_time=f(c_time),
                 c_hist=f(c_hist), c_len=torch.as_tensor(c_len), c_mask=torch.as_tensor(c_mask),
                 c_ids=torch.as_tensor(c_ids))
    return batch
