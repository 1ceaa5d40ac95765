"""Training, evaluation and inference drivers."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import LOSS_KINDS, heatmap_activation
from .battle import (GLOBAL_TOKENS, PRESETS, VEHICLE_TOKENS, Battle, ScenarioConfig,
                     TrainingExample, build_example, make_examples, split_battles, synth_battle)
from .checkpoint import load_archive, load_into, save_archive, state_dict_to_arrays
from .encoder import CategoricalVocab, build_vocab
from .endpoints import (ClusterConfig, EndpointSet, MetricsReport, SampleScore, aggregate,
                        dbscan_endpoints, score_heatmap)
from .errors import InvalidArgument, TrainingDiverged
from .geometry import (GridGeometry, KernelSpec, input_channel_count, make_velocity_kernel,
                       stamp_kernel)
from .losses import objective
from .model import ABLATIONS, EndpointPredictor, ModelConfig, collate, count_parameters

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # optimisation
    loss: str = "kldiv"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0
    # model
    ablation: str = "full"
    mode: str = "a2"
    base_width: int = 16
    depth: int = 3
    nested: bool = True
    n_conditioned: int = 1
    embed_dim: int = 128
    heads: int = 4
    # data
    grid: int = 128
    n_battles: int = 200
    n_train: int = 2000
    n_eval: int = 200
    data_seed: int = 0
    preset: Optional[str] = None          # None cycles through all presets
    context_sensitive: bool = False
    split: Tuple[float, float, float] = (0.9, 0.05, 0.05)
    out: str = "runs/default"

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise InvalidArgument(f"loss must be one of {LOSS_KINDS}")
        if self.ablation not in ABLATIONS:
            raise InvalidArgument(f"ablation must be one of {ABLATIONS}")
        input_channel_count(self.mode)
        if self.steps < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidArgument("steps >= 1, batch_size >= 1 and lr > 0 required")
        if self.preset is not None and self.preset not in PRESETS:
            raise InvalidArgument(f"preset must be one of {PRESETS}")
        self.split = tuple(float(f) for f in self.split)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(1000.0, self.grid, self.grid)

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec.for_geometry(self.geometry)


# -- data ------------------------------------------------------------------

def synth_battles(cfg: TrainConfig) -> List[Battle]:
    out = []
    for i in range(cfg.n_battles):
        preset = cfg.preset or PRESETS[i % len(PRESETS)]
        scenario = ScenarioConfig(preset=preset, context_sensitive=cfg.context_sensitive)
        out.append(synth_battle(cfg.data_seed * 1_000_003 + i, scenario))
    return out


def build_datasets(cfg: TrainConfig, battles: Optional[Sequence[Battle]] = None
                   ) -> Tuple[List[TrainingExample], List[TrainingExample]]:
    """Train and evaluation examples from a battle-level split.

    Evaluation draws from the held-out test battles (validation battles too
    when the test split is empty).
    """
    battles = list(battles) if battles is not None else synth_battles(cfg)
    train_b, val_b, test_b = split_battles(battles, cfg.data_seed, cfg.split)
    held_out = test_b or val_b
    if not train_b or not held_out:
        raise InvalidArgument("split leaves no training or evaluation battles")
    geo, spec = cfg.geometry, cfg.kernel
    train = make_examples(train_b, cfg.n_train, cfg.data_seed, geo, spec, cfg.mode)
    evals = make_examples(held_out, cfg.n_eval, cfg.data_seed + 1, geo, spec, cfg.mode)
    return train, evals


def example_geometry(ex: TrainingExample) -> GridGeometry:
    h, w = ex.target_heatmap.shape
    return GridGeometry(float(ex.meta["extent_m"]), h, w)


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: EndpointPredictor
    vocab: CategoricalVocab
    losses: List[float]
    checkpoint: Optional[Path] = None
    loss_curve: Optional[Path] = None


def model_config(cfg: TrainConfig, vocab: CategoricalVocab, in_channels: int) -> ModelConfig:
    cards = {f: vocab.cardinality(f) for f in VEHICLE_TOKENS + GLOBAL_TOKENS}
    return ModelConfig(in_channels=in_channels, base_width=cfg.base_width, depth=cfg.depth,
                       nested=cfg.nested, n_conditioned=cfg.n_conditioned,
                       embed_dim=cfg.embed_dim, heads=cfg.heads, ablation=cfg.ablation,
                       cardinalities=cards)


def _take(batch: Dict[str, torch.Tensor], idx) -> Dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in batch.items()}


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> List[np.ndarray]:
    """Index batches from seeded per-epoch shuffles."""
    rng = np.random.default_rng(seed)
    bs = min(batch_size, n)
    out, order = [], np.zeros(0, dtype=int)
    while len(out) < steps:
        if len(order) < bs:
            order = rng.permutation(n)
        out.append(order[:bs])
        order = order[bs:]
    return out


def train(cfg: TrainConfig, examples: Sequence[TrainingExample],
          vocab: Optional[CategoricalVocab] = None, out_dir=None,
          log_every: int = 100) -> TrainResult:
    """Adam on the chosen heatmap objective; deterministic for a fixed seed."""
    if not examples:
        raise InvalidArgument("empty training set")
    torch.manual_seed(cfg.seed)
    vocab = vocab or build_vocab(examples, VEHICLE_TOKENS, GLOBAL_TOKENS)
    model = EndpointPredictor(model_config(cfg, vocab, examples[0].image.shape[0]))
    data = collate(examples, vocab)
    loss_fn = objective(cfg.loss)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model.train()
    losses: List[float] = []
    for step, idx in enumerate(batch_schedule(len(examples), cfg.batch_size, cfg.steps, cfg.seed)):
        batch = _take(data, torch.as_tensor(idx))
        logits, _ = model(batch)
        loss = loss_fn(logits, batch["target"])
        if not torch.isfinite(loss):
            dump = (out or Path(".")) / f"diverged_step{step}.npz"
            np.savez(dump, **{k: v.numpy() for k, v in batch.items()}, indices=idx)
            raise TrainingDiverged(f"non-finite loss at step {step}", dump)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, losses[-1])
    result = TrainResult(model.eval(), vocab, losses)
    if out is not None:
        result.loss_curve = write_loss_curve(out / "loss_curve.csv", losses)
        result.checkpoint = save_checkpoint(out / "model.ntar", model, vocab, cfg)
    return result


def write_loss_curve(path, losses: Sequence[float]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(losses))
    return Path(path)


def vocab_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".vocab.txt")


def save_checkpoint(path, model: EndpointPredictor, vocab: CategoricalVocab,
                    cfg: TrainConfig) -> Path:
    meta = {"model_config": model.config.to_dict(), "train_config": cfg.to_dict()}
    save_archive(path, state_dict_to_arrays(model), meta)
    vocab.save(vocab_path(path))
    return Path(path)


def load_checkpoint(path) -> Tuple[EndpointPredictor, CategoricalVocab, TrainConfig]:
    tensors, meta = load_archive(path)
    model = EndpointPredictor(ModelConfig(**meta["model_config"]))
    load_into(model, tensors)
    vocab = CategoricalVocab.load(vocab_path(path))
    return model.eval(), vocab, TrainConfig.from_dict(meta["train_config"])


# -- evaluation ------------------------------------------------------------

@torch.no_grad()
def predict_heatmaps(model: EndpointPredictor, vocab: CategoricalVocab,
                     examples: Sequence[TrainingExample], loss_kind: str,
                     batch_size: int = 32) -> Tuple[np.ndarray, List[Optional[np.ndarray]]]:
    """Activated (N, H, W) heatmaps and per-example cross-attention weights."""
    model.eval()
    maps, weights = [], []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        batch = collate(chunk, vocab)
        logits, w = model(batch)
        maps.append(heatmap_activation(logits, loss_kind).numpy())
        for i, ex in enumerate(chunk):
            weights.append(None if w is None else w[i, :len(ex.context)].numpy())
    return np.concatenate(maps), weights


def score_examples(heatmaps: np.ndarray, examples: Sequence[TrainingExample],
                   cluster: ClusterConfig = ClusterConfig()) -> List[SampleScore]:
    return [score_heatmap(i, hm, ex.meta["current_xy"], ex.meta["future_xy"],
                          example_geometry(ex), cluster, ex.meta["vtype"], ex.meta["preset"])
            for i, (hm, ex) in enumerate(zip(heatmaps, examples))]


def evaluate(model: EndpointPredictor, vocab: CategoricalVocab,
             examples: Sequence[TrainingExample], loss_kind: str,
             cluster: ClusterConfig = ClusterConfig(), split: str = "eval"
             ) -> Tuple[MetricsReport, List[SampleScore]]:
    if not examples:
        raise InvalidArgument("empty evaluation set")
    heatmaps, _ = predict_heatmaps(model, vocab, examples, loss_kind)
    scores = score_examples(heatmaps, examples, cluster)
    return aggregate(scores, split, count_parameters(model)), scores


def evaluate_checkpoint(path, examples: Sequence[TrainingExample],
                        cluster: ClusterConfig = ClusterConfig()):
    model, vocab, cfg = load_checkpoint(path)
    return evaluate(model, vocab, examples, cfg.loss, cluster)


def _point_heatmap(ex: TrainingExample, xy, spec: Optional[KernelSpec]) -> np.ndarray:
    geo = example_geometry(ex)
    spec = spec or KernelSpec.for_geometry(geo)
    canvas = np.zeros(geo.shape, dtype=np.float64)
    return stamp_kernel(canvas, make_velocity_kernel(spec, 0.0, 0.0), geo.world_to_index(*xy))


def stay_put_heatmaps(examples: Sequence[TrainingExample],
                      spec: Optional[KernelSpec] = None) -> np.ndarray:
    """Oracle that predicts the current position."""
    return np.stack([_point_heatmap(ex, ex.meta["current_xy"], spec) for ex in examples])


def perfect_heatmaps(examples: Sequence[TrainingExample],
                     spec: Optional[KernelSpec] = None) -> np.ndarray:
    """Oracle that predicts the true future position."""
    return np.stack([_point_heatmap(ex, ex.meta["future_xy"], spec) for ex in examples])


# -- inference -------------------------------------------------------------

@dataclass
class PredictionResult:
    heatmap: np.ndarray
    endpoints: EndpointSet
    attention: Dict[int, float] = field(default_factory=dict)
    target_id: int = -1
    horizon: int = 0
    t_index: int = 0


def predict(model: EndpointPredictor, vocab: CategoricalVocab, cfg: TrainConfig,
            battle: Battle, t_index: int, target_id: int, horizon: int,
            cluster: ClusterConfig = ClusterConfig()) -> PredictionResult:
    if not 1 <= horizon <= 6:
        raise InvalidArgument(f"horizon must be in 1..6, got {horizon}")
    ex = build_example(battle, t_index, horizon, target_id, cfg.geometry, cfg.kernel, cfg.mode)
    maps, weights = predict_heatmaps(model, vocab, [ex], cfg.loss)
    hm = maps[0]
    att = {}
    if weights[0] is not None:
        att = {c.vid: float(w) for c, w in zip(ex.context, weights[0])}
    return PredictionResult(hm, dbscan_endpoints(hm, cfg.geometry, cluster), att, target_id,
                            horizon, t_index)


def predict_checkpoint(path, battle: Battle, t_index: int, target_id: int, horizon: int,
                       cluster: ClusterConfig = ClusterConfig()) -> PredictionResult:
    model, vocab, cfg = load_checkpoint(path)
    return predict(model, vocab, cfg, battle, t_index, target_id, horizon, cluster)


def in_footprint(target_heatmap: np.ndarray, pixel: Tuple[int, int]) -> bool:
    """True when ``pixel`` lies inside the stamped (unmasked) target kernel."""
    return bool(target_heatmap[pixel] > 0)
