"""PNG overlays of predictions on the map."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .geometry import ALLY_COLOR, ENEMY_COLOR, GridGeometry, resample_nearest
from .schema import Battle

SCALE = 4                 # output pixels per grid pixel
ARROW_MIN_WEIGHT = 0.01   # arrows below this weight are skipped
ARROW_MAX_WIDTH = 12
HEAT_COLOR = (255, 40, 0)


def _base_image(map_rgb: np.ndarray, geometry: GridGeometry) -> Image.Image:
    rgb = resample_nearest(np.asarray(map_rgb, dtype=np.float64), geometry.shape)
    arr = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(arr, "RGB")
    return img.resize((geometry.grid_w * SCALE, geometry.grid_h * SCALE), Image.NEAREST)


def to_canvas(geometry: GridGeometry, x: float, y: float) -> Tuple[float, float]:
    """World metres to output-image (u, v) pixel coordinates."""
    r, c = geometry.world_to_pixel(x, y)
    return ((c + 0.5) * SCALE, (r + 0.5) * SCALE)


def heatmap_overlay(map_rgb: np.ndarray, heatmap: np.ndarray, geometry: GridGeometry,
                    endpoints: Sequence[Tuple[float, float]] = (),
                    max_alpha: float = 0.75) -> Image.Image:
    """Heatmap alpha-composited over the map, endpoints as ringed circles."""
    base = _base_image(map_rgb, geometry)
    hm = np.nan_to_num(np.asarray(heatmap, dtype=np.float64), nan=0.0).clip(min=0)
    peak = hm.max()
    norm = hm / peak if peak > 0 else hm
    alpha = np.round(norm * max_alpha * 255).astype(np.uint8)
    layer = np.zeros(hm.shape + (4,), dtype=np.uint8)
    layer[..., :3] = HEAT_COLOR
    layer[..., 3] = alpha
    over = Image.fromarray(layer, "RGBA").resize(base.size, Image.NEAREST)
    img = Image.alpha_composite(base.convert("RGBA"), over)
    draw = ImageDraw.Draw(img)
    rad = 2 * SCALE
    for rank, (x, y) in enumerate(endpoints):
        u, v = to_canvas(geometry, x, y)
        outline = (255, 255, 255, 255) if rank == 0 else (255, 230, 0, 255)
        draw.ellipse([u - rad, v - rad, u + rad, v + rad], outline=outline, width=2)
    return img.convert("RGB")


def arrow_overlay(map_rgb: np.ndarray, geometry: GridGeometry, target_xy: Tuple[float, float],
                  others: Dict[int, Tuple[float, float, bool]],
                  weights: Dict[int, float]) -> Image.Image:
    """Arrows from the target to each vehicle; width scales with attention weight.

    ``others`` maps vehicle id to (x, y, is_ally).
    """
    img = _base_image(map_rgb, geometry)
    draw = ImageDraw.Draw(img)
    tu, tv = to_canvas(geometry, *target_xy)
    for vid in sorted(others):
        x, y, ally = others[vid]
        u, v = to_canvas(geometry, x, y)
        color = tuple(int(round(255 * c)) for c in (ALLY_COLOR if ally else ENEMY_COLOR))
        draw.ellipse([u - SCALE, v - SCALE, u + SCALE, v + SCALE], fill=color)
        w = float(weights.get(vid, 0.0))
        if w < ARROW_MIN_WEIGHT:
            continue
        width = max(1, int(round(w * ARROW_MAX_WIDTH)))
        draw.line([(tu, tv), (u, v)], fill=(255, 255, 255), width=width)
        ang = math.atan2(v - tv, u - tu)
        head = 3 * SCALE
        left = (u - head * math.cos(ang - 0.4), v - head * math.sin(ang - 0.4))
        right = (u - head * math.cos(ang + 0.4), v - head * math.sin(ang + 0.4))
        draw.polygon([(u, v), left, right], fill=(255, 255, 255))
    draw.ellipse([tu - 1.5 * SCALE, tv - 1.5 * SCALE, tu + 1.5 * SCALE, tv + 1.5 * SCALE],
                 fill=(255, 255, 0))
    return img


def render_overlay(battle: Battle, result, geometry: GridGeometry, out_dir,
                   stem: Optional[str] = None) -> Tuple[Path, Path]:
    """Write ``<stem>_heatmap.png`` and ``<stem>_attention.png``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{battle.battle_id}_t{result.t_index}_v{result.target_id}_h{result.horizon}"
    state = battle.states[result.t_index].by_id()
    target_team = battle.info(result.target_id).team
    tgt = state[result.target_id]
    others = {v.id: (state[v.id].x, state[v.id].y, v.team == target_team)
              for v in battle.roster if v.id != result.target_id}
    heat = heatmap_overlay(battle.map_rgb, result.heatmap, geometry, result.endpoints.points)
    arrows = arrow_overlay(battle.map_rgb, geometry, (tgt.x, tgt.y), others, result.attention)
    p1, p2 = out / f"{stem}_heatmap.png", out / f"{stem}_attention.png"
    heat.save(p1, format="PNG", optimize=False)
    arrows.save(p2, format="PNG", optimize=False)
    return p1, p2
