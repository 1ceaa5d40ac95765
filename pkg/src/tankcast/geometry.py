"""Velocity-stretched Gaussian kernels and the multi-channel input image."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import InvalidArgument
from .schema import VEHICLE_TYPES, Battle, VehicleRecord, future_state

log = logging.getLogger(__name__)

KERNEL_EPS = 1e-6
INPUT_MODES = ("a1", "a2", "none")
ALLY_COLOR = (0.15, 0.85, 0.2)
ENEMY_COLOR = (0.9, 0.15, 0.15)


@dataclass(frozen=True)
class GridGeometry:
    """Square world extent rasterised onto a grid_h x grid_w pixel grid.

    Row index follows world y, column index world x. Pixel (0, 0) covers
    [origin, origin + pixel size) on both axes.
    """

    map_extent: float = 1000.0
    grid_h: int = 128
    grid_w: int = 128
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.grid_h <= 0 or self.grid_w <= 0 or not self.map_extent > 0:
            raise InvalidArgument("grid sizes and map extent must be positive")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.grid_h, self.grid_w)

    @property
    def pixel_size(self) -> Tuple[float, float]:
        """World size of one pixel as (along x, along y)."""
        return (self.map_extent / self.grid_w, self.map_extent / self.grid_h)

    @property
    def half_pixel_m(self) -> float:
        return 0.5 * max(self.pixel_size)

    def world_to_pixel(self, x: float, y: float) -> Tuple[float, float]:
        """Continuous (row, col) with pixel centres on integers."""
        sx, sy = self.pixel_size
        return ((y - self.origin[1]) / sy - 0.5, (x - self.origin[0]) / sx - 0.5)

    def world_to_index(self, x: float, y: float) -> Tuple[int, int]:
        r, c = self.world_to_pixel(x, y)
        r = min(max(int(round(r)), 0), self.grid_h - 1)
        c = min(max(int(round(c)), 0), self.grid_w - 1)
        return r, c

    def pixel_to_world(self, row: float, col: float) -> Tuple[float, float]:
        sx, sy = self.pixel_size
        return (self.origin[0] + (col + 0.5) * sx, self.origin[1] + (row + 0.5) * sy)

    def contains(self, x: float, y: float) -> bool:
        return (self.origin[0] <= x <= self.origin[0] + self.map_extent
                and self.origin[1] <= y <= self.origin[1] + self.map_extent)


@dataclass(frozen=True)
class KernelSpec:
    """Shape parameters of the position/velocity kernel, in pixels.

    ``y_mod=None`` selects the speed-dependent ramp length
    (stretch_k * speed_fraction * sigma_y, at least one pixel).
    """

    size: int = 25
    sigma_x: float = 4.0
    sigma_y: float = 4.0
    stretch_k: float = 2.0
    y_mod: Optional[float] = None
    epsilon: float = KERNEL_EPS
    literal_attenuation: bool = False

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise InvalidArgument(f"kernel size must be odd and >= 3, got {self.size}")
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise InvalidArgument("kernel sigmas must be positive")
        if self.stretch_k < 0 or self.epsilon <= 0:
            raise InvalidArgument("stretch_k must be >= 0 and epsilon > 0")
        if self.y_mod is not None and not self.y_mod > 0:
            raise InvalidArgument("y_mod must be positive")

    @classmethod
    def for_geometry(cls, geometry: GridGeometry, **kw) -> "KernelSpec":
        """Default world-scale kernel (about 31 m sigma) at any grid resolution."""
        scale = geometry.grid_w / 128.0
        sigma = max(1.0, 4.0 * scale)
        half = max(1, int(round(12 * scale)))
        kw.setdefault("size", 2 * half + 1)
        kw.setdefault("sigma_x", sigma)
        kw.setdefault("sigma_y", sigma)
        return cls(**kw)


@dataclass(frozen=True)
class KernelPatch:
    values: np.ndarray
    heading: float

    @property
    def size(self) -> int:
        return self.values.shape[0]


def speed_fraction(speed: float, max_speed: float, eps: float = KERNEL_EPS) -> float:
    return min(1.0, max(0.0, speed / (max_speed + eps)))


def effective_sigmas(spec: KernelSpec, speed_frac: float) -> Tuple[float, float]:
    """(cross-track sigma, along-track sigma) for a normalised speed."""
    return spec.sigma_x, spec.sigma_y * (1.0 + spec.stretch_k * speed_frac)


def make_velocity_kernel(spec: KernelSpec, speed_frac: float, heading: float) -> KernelPatch:
    """Gaussian stretched along ``heading`` by the normalised speed, max-normalised.

    The patch is evaluated directly in the rotated frame, so a heading change
    is an exact rotation of the sampled function. The forward end of the
    stretched patch is attenuated by a cubic ramp.
    """
    if not (math.isfinite(speed_frac) and math.isfinite(heading)):
        raise InvalidArgument("speed fraction and heading must be finite")
    s = min(1.0, max(0.0, speed_frac))
    sig_v, sig_u = effective_sigmas(spec, s)
    half = (spec.size - 1) // 2
    half_long = int(round(half * (1.0 + spec.stretch_k * s)))

    offs = np.arange(-half_long, half_long + 1, dtype=np.float64)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    cos_h, sin_h = math.cos(heading), math.sin(heading)
    u = dx * cos_h + dy * sin_h          # along motion
    v = -dx * sin_h + dy * cos_h         # across motion
    values = np.exp(-u ** 2 / (2 * sig_u ** 2)) * np.exp(-v ** 2 / (2 * sig_v ** 2))
    if s > 0:
        values *= _attenuation(u, spec, s, half_long)
    values = np.clip(values, 0.0, None)
    peak = values.max()
    if peak <= 0:
        raise InvalidArgument("degenerate kernel")
    return KernelPatch(values / peak, float(heading))


def _attenuation(u: np.ndarray, spec: KernelSpec, s: float, half_long: int) -> np.ndarray:
    y_mod = spec.y_mod if spec.y_mod is not None else max(1.0, spec.stretch_k * s * spec.sigma_y)
    if spec.literal_attenuation:
        m = np.where(np.abs(u) < y_mod, (u / y_mod) ** 3, 1.0)
        return np.clip(m, 0.0, None)
    dist = half_long + 0.5 - u           # distance to the forward patch edge
    ramp = np.clip(dist / y_mod, 0.0, 1.0) ** 3
    return np.where(u > 0, ramp, 1.0)


def stamp_kernel(canvas: np.ndarray, patch: KernelPatch, center_px: Tuple[int, int],
                 combine: str = "sum", weight: float = 1.0) -> np.ndarray:
    """Return a copy of ``canvas`` with ``weight * patch`` stamped at ``center_px``."""
    out = np.array(canvas, dtype=np.float64, copy=True)
    _stamp_into(out, patch.values * weight, center_px, combine)
    return out


def _stamp_into(out: np.ndarray, values: np.ndarray, center_px, combine: str) -> None:
    if combine not in ("sum", "max"):
        raise InvalidArgument(f"unknown combine mode {combine!r}")
    h, w = out.shape
    r, c = int(center_px[0]), int(center_px[1])
    if not (0 <= r < h and 0 <= c < w):
        raise InvalidArgument(f"stamp centre {center_px} outside {h}x{w} grid")
    half = values.shape[0] // 2
    r0, r1 = max(0, r - half), min(h, r + half + 1)
    c0, c1 = max(0, c - half), min(w, c + half + 1)
    src = values[r0 - (r - half):r1 - (r - half), c0 - (c - half):c1 - (c - half)]
    if combine == "sum":
        out[r0:r1, c0:c1] += src
    else:
        np.maximum(out[r0:r1, c0:c1], src, out=out[r0:r1, c0:c1])


def apply_accessibility_mask(heatmap: np.ndarray, mask: np.ndarray) -> np.ndarray:
    heatmap = np.asarray(heatmap)
    mask = np.asarray(mask, dtype=bool)
    if heatmap.shape != mask.shape:
        raise InvalidArgument(f"mask shape {mask.shape} != heatmap shape {heatmap.shape}")
    return np.where(mask, heatmap, 0.0).astype(heatmap.dtype, copy=False)


def resample_nearest(raster: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an (R, R[, C]) raster to ``shape``."""
    h, w = shape
    if raster.shape[:2] == (h, w):
        return raster
    rows = ((np.arange(h) + 0.5) * raster.shape[0] / h).astype(int)
    cols = ((np.arange(w) + 0.5) * raster.shape[1] / w).astype(int)
    return raster[rows][:, cols]


def grid_mask(battle: Battle, geometry: GridGeometry) -> np.ndarray:
    return resample_nearest(np.asarray(battle.mask, dtype=bool), geometry.shape)


def vehicle_kernel(rec, spec: KernelSpec) -> KernelPatch:
    return make_velocity_kernel(spec, speed_fraction(rec.speed, rec.max_speed, spec.epsilon),
                                rec.heading)


def render_target_heatmap(battle: Battle, t_index: int, target_id: int, horizon_steps: int,
                          geometry: GridGeometry, spec: KernelSpec,
                          mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Max-normalised kernel at the target's position ``horizon_steps`` ahead.

    Uses the future speed and heading. A target destroyed before the horizon
    is placed where it was destroyed, with zero speed.
    """
    if horizon_steps < 1:
        raise InvalidArgument("horizon must be at least one step")
    try:
        fut, _ = future_state(battle, t_index, horizon_steps, target_id)
    except KeyError:
        raise InvalidArgument(f"target {target_id} not in battle") from None
    except IndexError as exc:
        raise InvalidArgument(str(exc)) from None
    info = battle.info(target_id)
    patch = make_velocity_kernel(spec, speed_fraction(fut.speed, info.max_speed, spec.epsilon),
                                 fut.heading)
    centre = geometry.world_to_index(fut.x, fut.y)
    canvas = np.zeros(geometry.shape)
    _stamp_into(canvas, patch.values, centre, "sum")
    if mask is None:
        mask = grid_mask(battle, geometry)
    if not mask[centre]:
        log.warning("battle %s t=%d vehicle %d: future position falls on a masked pixel",
                    battle.battle_id, t_index, target_id)
    out = apply_accessibility_mask(canvas, mask)
    if not out.any():
        # a label with no mass cannot be trained on; keep the unmasked kernel
        log.warning("battle %s t=%d vehicle %d: kernel fully masked, left unmasked",
                    battle.battle_id, t_index, target_id)
        return canvas
    return out


# -- glyphs ---------------------------------------------------------------

def _glyph_shape(vtype: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = (yy - c) / (c + 0.5), (xx - c) / (c + 0.5)
    if vtype == "heavy":        # square
        m = (np.abs(dx) <= 0.8) & (np.abs(dy) <= 0.8)
    elif vtype == "medium":     # triangle, apex up
        m = (dy <= 0.8) & (np.abs(dx) <= (dy + 0.9) / 1.7 * 0.9)
    elif vtype == "light":      # diamond
        m = np.abs(dx) + np.abs(dy) <= 0.9
    elif vtype == "td":         # chevron
        band = (dy - 0.9 * np.abs(dx))
        m = (band >= -0.55) & (band <= 0.05) & (np.abs(dx) <= 0.9)
    elif vtype == "artillery":  # circle
        m = dx ** 2 + dy ** 2 <= 0.8
    else:
        raise InvalidArgument(f"unknown vehicle type {vtype!r}")
    return m.astype(np.float64)


def render_glyph(vehicle, color: Sequence[float] = ALLY_COLOR, size: int = 7) -> np.ndarray:
    """(size, size, 4) RGBA icon for a vehicle.

    The top ``floor((1 - health) * size)`` rows are colour-inverted and the
    whole icon is drawn at half opacity when the vehicle is not visible.
    """
    health = float(vehicle.health)
    if not 0.0 <= health <= 1.0:
        raise InvalidArgument(f"health fraction {health} outside [0, 1]")
    shape = _glyph_shape(vehicle.vtype, size)
    rgba = np.zeros((size, size, 4))
    rgba[..., :3] = np.asarray(color, dtype=np.float64)
    n_inv = int(math.floor((1.0 - health) * size + 1e-9))
    rgba[:n_inv, :, :3] = 1.0 - rgba[:n_inv, :, :3]
    rgba[..., 3] = shape * (1.0 if vehicle.visible else 0.5)
    return rgba


def _composite(rgb: np.ndarray, glyph: np.ndarray, center_px) -> None:
    h, w = rgb.shape[1:]
    g = glyph.shape[0]
    half = g // 2
    r, c = center_px
    r0, r1 = max(0, r - half), min(h, r + half + 1)
    c0, c1 = max(0, c - half), min(w, c + half + 1)
    src = glyph[r0 - (r - half):r1 - (r - half), c0 - (c - half):c1 - (c - half)]
    a = src[..., 3]
    for ch in range(3):
        dst = rgb[ch, r0:r1, c0:c1]
        rgb[ch, r0:r1, c0:c1] = dst * (1 - a) + src[..., ch] * a


# -- input image ----------------------------------------------------------

def input_channel_count(mode: str) -> int:
    if mode not in INPUT_MODES:
        raise InvalidArgument(f"unknown input mode {mode!r}")
    return 9 if mode == "a1" else 6


def render_input_image(map_rgb: np.ndarray, records: Iterable[VehicleRecord], target_id: int,
                       geometry: GridGeometry, mode: str, spec: KernelSpec,
                       glyph_size: Optional[int] = None) -> np.ndarray:
    """(C, H, W) float32 image: map RGB, then target / ally / enemy kernel maps.

    Mode ``a1`` appends type, health and visibility kernel maps; mode ``a2``
    draws vehicle glyphs over the RGB channels; mode ``none`` does neither.
    """
    n_ch = input_channel_count(mode)
    records = list(records)
    target = next((r for r in records if r.id == target_id), None)
    if target is None:
        raise InvalidArgument(f"target {target_id} not among the vehicles")
    rgb = resample_nearest(np.asarray(map_rgb, dtype=np.float64), geometry.shape)
    img = np.zeros((n_ch,) + geometry.shape)
    img[:3] = np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1)
    if glyph_size is None:
        glyph_size = max(3, int(round(7 * geometry.grid_w / 128)) | 1)

    for rec in records:
        patch = vehicle_kernel(rec, spec).values
        centre = geometry.world_to_index(rec.x, rec.y)
        if rec.id == target_id:
            ch = 3
        else:
            ch = 4 if rec.team == target.team else 5
        _stamp_into(img[ch], patch, centre, "sum")
        if mode == "a1":
            type_level = (VEHICLE_TYPES.index(rec.vtype) + 1) / len(VEHICLE_TYPES)
            _stamp_into(img[6], patch * type_level, centre, "sum")
            _stamp_into(img[7], patch * rec.health, centre, "sum")
            _stamp_into(img[8], patch * (1.0 if rec.visible else 0.0), centre, "sum")
        elif mode == "a2":
            color = ALLY_COLOR if rec.team == target.team else ENEMY_COLOR
            _composite(img[:3], render_glyph(rec, color, glyph_size), centre)
    return img.astype(np.float32)


# -- export ---------------------------------------------------------------

EHMP_MAGIC = b"EHMP"


def write_planes(path, planes: np.ndarray) -> None:
    """Raw little-endian float32 planes behind a 16-byte EHMP header."""
    arr = np.asarray(planes, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise InvalidArgument("planes must be (H, W) or (C, H, W)")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(EHMP_MAGIC + struct.pack("<III", c, h, w))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_planes(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != EHMP_MAGIC:
        raise InvalidArgument(f"{path}: not an EHMP file")
    c, h, w = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != c * h * w:
        raise InvalidArgument(f"{path}: truncated payload")
    return body.reshape(c, h, w).astype(np.float32)


def to_png(planes: np.ndarray, path) -> None:
    """8-bit PNG: one plane as grayscale (scaled by its max), three as RGB in [0, 1]."""
    arr = np.asarray(planes, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        peak = arr.max()
        arr = arr / peak if peak > 0 else arr
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), "L").save(path)
    elif arr.ndim == 3 and arr.shape[0] == 3:
        img = np.round(np.clip(arr.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(path)
    else:
        raise InvalidArgument("PNG export takes an (H, W), (1, H, W) or (3, H, W) array")
