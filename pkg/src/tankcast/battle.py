"""Battle replays, synthetic battle generation and training-sample assembly."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from skimage.graph import route_through_array

from .errors import InvalidArgument, ReplayParseError, ReplayValidationError, ScenarioError
from .geometry import (GridGeometry, KernelSpec, grid_mask, render_input_image,
                       render_target_heatmap)
from .schema import (VEHICLE_TYPES, Battle, GameState, VehicleInfo, VehicleState,
                     future_state, ordered_roster, round_up_hundred)

SCHEMA_VERSION = 1
HISTORY_STEPS = 15
MAX_HORIZON = 6
PRESETS = ("urban", "mixed", "rural")

# -- replay files ---------------------------------------------------------

_HEADER_KEYS = ("schema_version", "map_id", "game_mode", "extent_m", "step_s", "vehicles")
_ROSTER_KEYS = ("id", "team", "type", "role", "name", "max_speed", "rating", "battles")
_STATE_KEYS = ("id", "x", "y", "speed", "heading", "turret", "health", "damage", "visible",
               "last_seen_s")


def save_replay(battle: Battle, path) -> Path:
    """Write ``battle`` as line-delimited JSON plus two PNG side-files."""
    path = Path(path)
    stem = path.name[:-len(".jsonl")] if path.name.endswith(".jsonl") else path.stem
    map_png, mask_png = f"{stem}.map.png", f"{stem}.mask.png"
    rgb = np.round(np.clip(battle.map_rgb, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path.parent / map_png)
    Image.fromarray(battle.mask.astype(np.uint8) * 255, "L").save(path.parent / mask_png)
    header = {
        "schema_version": SCHEMA_VERSION,
        "map_id": battle.map_id,
        "game_mode": battle.game_mode,
        "extent_m": battle.extent_m,
        "step_s": battle.step_s,
        "battle_id": battle.battle_id,
        "preset": battle.preset,
        "map_png": map_png,
        "mask_png": mask_png,
        "vehicles": [{"id": v.id, "team": v.team, "type": v.vtype, "role": v.role,
                      "name": v.name, "max_speed": v.max_speed, "rating": v.rating,
                      "battles": v.battles} for v in battle.roster],
    }
    if battle.extras:
        header["extras"] = battle.extras
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for st in battle.states:
            row = {"t": st.t, "vehicles": [
                {"id": v.id, "x": v.x, "y": v.y, "speed": v.speed, "heading": v.heading,
                 "turret": v.turret, "health": v.health, "damage": v.damage,
                 "visible": v.visible, "last_seen_s": v.last_seen_s} for v in st.vehicles]}
            fh.write(json.dumps(row) + "\n")
    return path


def _require(obj, keys, lineno, what):
    if not isinstance(obj, dict):
        raise ReplayParseError(f"{what} must be a JSON object", lineno)
    missing = [k for k in keys if k not in obj]
    if missing:
        raise ReplayParseError(f"{what} missing keys {missing}", lineno)


def load_replay(path) -> Battle:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ReplayParseError("empty replay file", 1)
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ReplayParseError(f"invalid JSON: {exc.msg}", lineno) from None

    lineno, header = rows[0]
    _require(header, _HEADER_KEYS, lineno, "header")
    if header["schema_version"] != SCHEMA_VERSION:
        raise ReplayParseError(f"unsupported schema_version {header['schema_version']}", lineno)
    roster = []
    for v in header["vehicles"]:
        _require(v, _ROSTER_KEYS, lineno, "roster entry")
        roster.append(VehicleInfo(id=int(v["id"]), team=int(v["team"]), vtype=v["type"],
                                  role=v["role"], name=v["name"],
                                  max_speed=float(v["max_speed"]),
                                  rating=int(v["rating"]), battles=int(v["battles"])))
    known = {v.id for v in roster}

    states = []
    for lineno, row in rows[1:]:
        _require(row, ("t", "vehicles"), lineno, "state")
        vs = []
        for v in row["vehicles"]:
            _require(v, _STATE_KEYS, lineno, "vehicle state")
            if v["id"] not in known:
                raise ReplayValidationError(f"line {lineno}: unknown vehicle id {v['id']}")
            vs.append(VehicleState(id=int(v["id"]), x=float(v["x"]), y=float(v["y"]),
                                   speed=float(v["speed"]), heading=float(v["heading"]),
                                   turret=float(v["turret"]), health=float(v["health"]),
                                   damage=float(v["damage"]), visible=bool(v["visible"]),
                                   last_seen_s=float(v["last_seen_s"])))
        states.append(GameState(t=float(row["t"]), vehicles=tuple(vs)))

    map_rgb, mask = _load_rasters(path.parent, header)
    battle = Battle(map_id=header["map_id"], game_mode=header["game_mode"],
                    extent_m=float(header["extent_m"]), step_s=float(header["step_s"]),
                    roster=tuple(roster), map_rgb=map_rgb, mask=mask, states=tuple(states),
                    preset=header.get("preset", ""), battle_id=header.get("battle_id", ""),
                    extras=header.get("extras", {}))
    return battle.validate()


def _load_rasters(folder: Path, header) -> Tuple[np.ndarray, np.ndarray]:
    if "map_png" in header:
        rgb = np.asarray(Image.open(folder / header["map_png"]).convert("RGB"), dtype=np.float64)
        rgb = rgb / 255.0
    else:
        rgb = np.full((128, 128, 3), 0.5)
    if "mask_png" in header:
        mask = np.asarray(Image.open(folder / header["mask_png"]).convert("L")) > 127
    else:
        mask = np.ones(rgb.shape[:2], dtype=bool)
    return rgb, mask


# -- synthetic battles ----------------------------------------------------

MAX_SPEED = {"heavy": 10.0, "medium": 14.0, "light": 18.0, "td": 12.0, "artillery": 9.0}
TYPE_ROLE = {"heavy": "assault", "medium": "support", "light": "scout", "td": "sniper",
             "artillery": "support"}
NAMES = {t: [f"{t}_{k}" for k in range(3)] for t in VEHICLE_TYPES}
OBSTACLES = {"urban": 22, "mixed": 10, "rural": 3}
VIEW_RANGE_M = 350.0
FIRE_RANGE_M = 300.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs for :func:`synth_battle`.

    ``context_sensitive`` builds the flank scenario: the enemy team comes down
    one flank and every mobile vehicle heads for that flank, so a target's
    destination can only be read off the enemy positions. ``enemy_flank``
    pins the flank ("west" / "east"); None draws it from the seed.
    """

    preset: str = "mixed"
    team_size: int = 5
    n_states: int = 20
    step_s: float = 15.0
    extent_m: float = 1000.0
    raster: int = 128
    context_sensitive: bool = False
    enemy_flank: Optional[str] = None
    game_mode: str = "standard"
    spawn_margin_m: float = 60.0


def make_map(rng: np.random.Generator, preset: str, raster: int, extent: float,
             keep_clear: Sequence[Tuple[float, float, float, float]] = ()):
    """Procedural obstacle field: (rgb, mask) at ``raster`` resolution."""
    if preset not in PRESETS:
        raise ScenarioError(f"unknown preset {preset!r}")
    px = raster / extent
    rgb = np.empty((raster, raster, 3))
    rgb[...] = (0.42, 0.58, 0.30)
    rgb += rng.normal(0, 0.02, size=(raster, raster, 1))
    mask = np.ones((raster, raster), dtype=bool)
    # foliage patches: passable, darker
    for _ in range(6):
        cy, cx = rng.uniform(0, raster, 2)
        rad = rng.uniform(4, 12) * raster / 128
        yy, xx = np.ogrid[:raster, :raster]
        rgb[(yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2] = (0.22, 0.40, 0.18)
    placed = 0
    tries = 0
    while placed < OBSTACLES[preset] and tries < 500:
        tries += 1
        w, h = rng.uniform(30, 100, 2)
        x0, y0 = rng.uniform(0, extent - w), rng.uniform(0, extent - h)
        if any(x0 < bx1 and x0 + w > bx0 and y0 < by1 and y0 + h > by0
               for bx0, by0, bx1, by1 in keep_clear):
            continue
        r0, r1 = int(y0 * px), int(math.ceil((y0 + h) * px))
        c0, c1 = int(x0 * px), int(math.ceil((x0 + w) * px))
        mask[r0:r1, c0:c1] = False
        rgb[r0:r1, c0:c1] = (0.55, 0.53, 0.52)
        placed += 1
    rgb = np.round(np.clip(rgb, 0, 1) * 255) / 255.0
    return rgb, mask


@dataclass
class _Agent:
    info: VehicleInfo
    x: float
    y: float
    heading: float
    cruise: float
    health: float = 1.0
    damage: float = 0.0
    speed: float = 0.0
    turret: float = 0.0
    path: List[Tuple[float, float]] = field(default_factory=list)
    hold_until: float = 0.0
    last_seen: float = -1.0
    visible: bool = False
    final_goal: bool = False


class _Planner:
    def __init__(self, mask: np.ndarray, extent: float):
        self.mask = mask
        self.extent = extent
        self.px = mask.shape[0] / extent
        self.cost = np.where(mask, 1.0, np.inf)

    def cell(self, x, y):
        n = self.mask.shape[0]
        return (min(n - 1, max(0, int(y * self.px))), min(n - 1, max(0, int(x * self.px))))

    def free(self, x, y) -> bool:
        return bool(self.mask[self.cell(x, y)])

    def route(self, x0, y0, x1, y1) -> List[Tuple[float, float]]:
        try:
            cells, _ = route_through_array(self.cost, self.cell(x0, y0), self.cell(x1, y1),
                                           fully_connected=True, geometric=True)
        except ValueError:   # goal unreachable from here
            return []
        pts = [((c + 0.5) / self.px, (r + 0.5) / self.px) for r, c in cells[1:]]
        if pts:
            pts[-1] = (x1, y1)
        return pts

    def sample_free(self, rng, x_range, y_range, tries=200):
        for _ in range(tries):
            x, y = rng.uniform(*x_range), rng.uniform(*y_range)
            if self.free(x, y):
                return x, y
        raise ScenarioError(f"no accessible point in x{x_range} y{y_range}")


def _team_types(team_size: int) -> List[str]:
    return [VEHICLE_TYPES[i % len(VEHICLE_TYPES)] for i in range(team_size)]


def synth_battle(seed: int, scenario: ScenarioConfig = ScenarioConfig()) -> Battle:
    """Deterministic scripted battle for ``seed``."""
    rng = np.random.default_rng(seed)
    ext = scenario.extent_m
    flank = scenario.enemy_flank
    if scenario.context_sensitive and flank is None:
        flank = "west" if rng.random() < 0.5 else "east"
    if flank not in (None, "west", "east"):
        raise ScenarioError(f"enemy_flank must be 'west' or 'east', got {flank!r}")

    # spawn zones (x0, y0, x1, y1) in metres
    if scenario.context_sensitive:
        fx = (0.1 * ext, 0.35 * ext) if flank == "west" else (0.65 * ext, 0.9 * ext)
        zones = {0: (0.4 * ext, 0.06 * ext, 0.6 * ext, 0.22 * ext),
                 1: (fx[0], 0.78 * ext, fx[1], 0.94 * ext)}
    else:
        zones = {0: (0.15 * ext, 0.05 * ext, 0.85 * ext, 0.2 * ext),
                 1: (0.15 * ext, 0.8 * ext, 0.85 * ext, 0.95 * ext)}
    # the map draw never depends on the flank, so flipping it keeps the terrain
    map_rng = np.random.default_rng([seed, 7])
    clear = [(0.0, 0.0, ext, 0.25 * ext), (0.0, 0.75 * ext, ext, ext)]
    rgb, mask = make_map(map_rng, scenario.preset, scenario.raster, ext, clear)
    planner = _Planner(mask, ext)

    agents: List[_Agent] = []
    vid = 0
    for team in (0, 1):
        zx0, zy0, zx1, zy1 = zones[team]
        for vtype in _team_types(scenario.team_size):
            x, y = planner.sample_free(rng, (zx0, zx1), (zy0, zy1))
            info = VehicleInfo(
                id=vid, team=team, vtype=vtype, role=TYPE_ROLE[vtype],
                name=str(rng.choice(NAMES[vtype])), max_speed=MAX_SPEED[vtype],
                rating=round_up_hundred(rng.uniform(800, 3200)),
                battles=round_up_hundred(rng.uniform(50, 25000)))
            heading = math.pi / 2 if team == 0 else -math.pi / 2
            cruise = MAX_SPEED[vtype] * rng.uniform(0.55, 0.85)
            a = _Agent(info=info, x=x, y=y, heading=heading, cruise=cruise, turret=heading)
            a.hold_until = rng.uniform(0, 60) if vtype != "artillery" else rng.uniform(30, 150)
            agents.append(a)
            vid += 1

    def next_goal(a: _Agent, now: float):
        if a.info.vtype == "artillery":
            if rng.random() < 0.35:
                gx, gy = planner.sample_free(
                    rng, (max(0, a.x - 80), min(ext, a.x + 80)),
                    (max(0, a.y - 80), min(ext, a.y + 80)))
                return (gx, gy), rng.uniform(60, 150)
            return None, rng.uniform(60, 150)
        if scenario.context_sensitive:
            if a.final_goal:
                return None, 1e9
            a.final_goal = True
            fxr = (0.08 * ext, 0.32 * ext) if flank == "west" else (0.68 * ext, 0.92 * ext)
            yr = (0.38 * ext, 0.62 * ext) if a.info.team == 0 else (0.45 * ext, 0.7 * ext)
            return planner.sample_free(rng, fxr, yr), 1e9
        dist = rng.uniform(100, 400)
        ang = rng.uniform(0, 2 * math.pi)
        # drift toward the map centre
        cx, cy = a.x + 0.3 * (ext / 2 - a.x), a.y + 0.3 * (ext / 2 - a.y)
        gx = min(ext - 20, max(20, cx + dist * math.cos(ang)))
        gy = min(ext - 20, max(20, cy + dist * math.sin(ang)))
        if not planner.free(gx, gy):
            gx, gy = planner.sample_free(rng, (max(20, gx - 100), min(ext - 20, gx + 100)),
                                         (max(20, gy - 100), min(ext - 20, gy + 100)))
        return (gx, gy), rng.uniform(15, 75)

    states: List[GameState] = []
    total_s = (scenario.n_states - 1) * scenario.step_s
    now = 0.0
    dt = 1.0
    next_record = 0.0
    pending_hold: Dict[int, float] = {}
    while True:
        if now + 1e-9 >= next_record:
            _update_visibility(agents, now)
            states.append(_snapshot(agents, now))
            next_record += scenario.step_s
            if len(states) == scenario.n_states:
                break
        for a in agents:
            if a.health <= 0:
                a.speed = 0.0
                continue
            if not a.path and now >= a.hold_until:
                goal, hold = next_goal(a, now)
                if goal is not None:
                    a.path = planner.route(a.x, a.y, *goal)
                    if a.path:
                        pending_hold[a.info.id] = hold
                    else:        # re-plan shortly with a fresh goal
                        a.final_goal = False
                        a.hold_until = now + 5.0
                else:
                    a.hold_until = now + hold
            _advance(a, dt, rng)
            if not a.path and a.info.id in pending_hold:
                a.hold_until = now + pending_hold.pop(a.info.id)
        _combat(agents, dt, rng)
        now += dt
        if now > total_s + scenario.step_s:
            break

    battle = Battle(map_id=f"synth_{scenario.preset}_{seed}", game_mode=scenario.game_mode,
                    extent_m=ext, step_s=scenario.step_s,
                    roster=tuple(a.info for a in agents), map_rgb=rgb, mask=mask,
                    states=tuple(states), preset=scenario.preset, battle_id=f"b{seed}",
                    extras={"context_sensitive": scenario.context_sensitive,
                            "enemy_flank": flank or ""})
    return battle.validate()


def _advance(a: _Agent, dt: float, rng) -> None:
    budget = a.cruise * dt * rng.uniform(0.85, 1.1) if a.path else 0.0
    moved = 0.0
    x0, y0 = a.x, a.y
    while a.path and budget > 1e-9:
        tx, ty = a.path[0]
        d = math.hypot(tx - a.x, ty - a.y)
        if d <= budget:
            a.x, a.y = tx, ty
            budget -= d
            moved += d
            a.path.pop(0)
        else:
            a.x += (tx - a.x) * budget / d
            a.y += (ty - a.y) * budget / d
            moved += budget
            budget = 0.0
    if moved > 1e-6:
        a.heading = math.atan2(a.y - y0, a.x - x0)
    a.speed = moved / dt


def _combat(agents: List[_Agent], dt: float, rng) -> None:
    alive = [a for a in agents if a.health > 0]
    for a in alive:
        foes = [(math.hypot(b.x - a.x, b.y - a.y), b) for b in alive
                if b.info.team != a.info.team and b.health > 0]
        if not foes:
            a.turret = a.heading
            continue
        dist, near = min(foes, key=lambda p: p[0])
        a.turret = math.atan2(near.y - a.y, near.x - a.x) if dist < 500 else a.heading
        fire_range = 900.0 if a.info.vtype == "artillery" else FIRE_RANGE_M
        rate = 0.004 if a.info.vtype == "artillery" else 0.012
        in_range = [b for d, b in foes if d <= fire_range]
        if in_range and rng.random() < rate * dt:
            b = in_range[int(rng.integers(len(in_range)))]
            dealt = min(b.health, rng.uniform(0.08, 0.3))
            b.health = max(0.0, b.health - dealt)
            a.damage += round(dealt * 1000.0)
            if b.health <= 1e-9:
                b.health = 0.0
                b.path = []
                b.speed = 0.0


def _update_visibility(agents: List[_Agent], now: float) -> None:
    for a in agents:
        seen = any(b.health > 0 and b.info.team != a.info.team
                   and math.hypot(b.x - a.x, b.y - a.y) <= VIEW_RANGE_M for b in agents)
        a.visible = seen
        if seen:
            a.last_seen = now


def _snapshot(agents: List[_Agent], now: float) -> GameState:
    vs = []
    for a in agents:
        vs.append(VehicleState(
            id=a.info.id, x=float(a.x), y=float(a.y), speed=float(a.speed),
            heading=float(a.heading), turret=float(a.turret), health=float(a.health),
            damage=float(a.damage), visible=bool(a.visible),
            last_seen_s=float(now - a.last_seen if a.last_seen >= 0 else now)))
    return GameState(t=float(now), vehicles=tuple(vs))


# -- training samples -----------------------------------------------------

@dataclass(frozen=True)
class SamplingPolicy:
    min_move_fraction: float = 0.06
    random_vehicle_prob: float = 0.1
    max_horizon: int = MAX_HORIZON


@dataclass(frozen=True)
class SampleKey:
    t_index: int
    horizon: int
    target_id: int
    branch: str  # "moving" | "random" | "fallback"


def displacement(battle: Battle, t_index: int, horizon: int, vid: int) -> float:
    a = battle.states[t_index].by_id()[vid]
    b = battle.states[t_index + horizon].by_id()[vid]
    return math.hypot(b.x - a.x, b.y - a.y)


def movers(battle: Battle, t_index: int, horizon: int, min_fraction: float = 0.06) -> List[int]:
    """Vehicles whose mean displacement rate over the horizon reaches
    ``min_fraction`` of their max speed."""
    span = horizon * battle.step_s
    return [v.id for v in battle.roster
            if displacement(battle, t_index, horizon, v.id) >= min_fraction * v.max_speed * span]


def sample_key(battle: Battle, rng: np.random.Generator,
               policy: SamplingPolicy = SamplingPolicy()) -> SampleKey:
    if battle.n_states < 2:
        raise InvalidArgument("battle too short for a one-step horizon")
    horizon = int(rng.integers(1, policy.max_horizon + 1))
    horizon = min(horizon, battle.n_states - 1)
    t_index = int(rng.integers(0, battle.n_states - horizon))
    ids = [v.id for v in battle.roster]
    if rng.random() >= policy.random_vehicle_prob:
        cands = movers(battle, t_index, horizon, policy.min_move_fraction)
        if cands:
            return SampleKey(t_index, horizon, int(cands[int(rng.integers(len(cands)))]), "moving")
        return SampleKey(t_index, horizon, int(ids[int(rng.integers(len(ids)))]), "fallback")
    return SampleKey(t_index, horizon, int(ids[int(rng.integers(len(ids)))]), "random")


@dataclass
class VehicleFeatures:
    vid: int
    numeric: np.ndarray          # (N_VEHICLE_NUMERIC,)
    tokens: Dict[str, str]       # team / vtype / role / name
    time_s: float                # time since last visible
    history: np.ndarray          # (T, N_HISTORY), oldest first, T <= 15


@dataclass
class TrainingExample:
    image: np.ndarray            # (C, H, W) float32
    target_heatmap: np.ndarray   # (H, W) float32, max-normalised, masked
    mask: np.ndarray             # (H, W) bool
    global_numeric: np.ndarray   # (N_GLOBAL_NUMERIC,)
    global_tokens: Dict[str, str]
    global_time_s: float
    target: VehicleFeatures
    context: List[VehicleFeatures]
    horizon: int
    meta: Dict[str, object]


N_VEHICLE_NUMERIC = 15
N_HISTORY = 7
N_GLOBAL_NUMERIC = 2 * 2 * len(VEHICLE_TYPES) + 1
VEHICLE_TOKENS = ("team", "vtype", "role", "name")
GLOBAL_TOKENS = ("map", "mode")


def global_aggregates(battle: Battle, t_index: int, ally_team: int) -> np.ndarray:
    """Team-wise mean health and damage per vehicle type, ally team first.

    Layout: [ally health x5, ally damage x5, enemy health x5, enemy damage x5,
    time]; types absent from a team give zeros.
    """
    recs = battle.records(t_index)
    out = []
    for team in (ally_team, 1 - ally_team):
        health, dmg = [], []
        for vt in VEHICLE_TYPES:
            sel = [r for r in recs if r.team == team and r.vtype == vt]
            health.append(np.mean([r.health for r in sel]) if sel else 0.0)
            dmg.append(np.mean([r.damage for r in sel]) / 1000.0 if sel else 0.0)
        out += health + dmg
    out.append(battle.states[t_index].t / 600.0)
    return np.asarray(out, dtype=np.float32)


def vehicle_features(battle: Battle, t_index: int, vid: int, target_id: int) -> VehicleFeatures:
    rec = battle.record(t_index, vid)
    tgt = battle.states[t_index].by_id()[target_id]
    ext = battle.extent_m
    target_team = battle.info(target_id).team
    numeric = np.array([
        rec.x / ext, rec.y / ext, rec.speed / 20.0, rec.max_speed / 20.0,
        math.sin(rec.heading), math.cos(rec.heading),
        math.sin(rec.turret), math.cos(rec.turret),
        rec.health, rec.damage / 1000.0,
        round_up_hundred(rec.rating) / 3000.0, round_up_hundred(rec.battles) / 20000.0,
        1.0 if rec.visible else 0.0,
        (rec.x - tgt.x) / ext, (rec.y - tgt.y) / ext,
    ], dtype=np.float32)
    tokens = {"team": "ally" if rec.team == target_team else "enemy", "vtype": rec.vtype,
              "role": rec.role, "name": rec.name}
    lo = max(0, t_index - HISTORY_STEPS + 1)
    hist = []
    for i in range(lo, t_index + 1):
        s = battle.states[i].by_id()[vid]
        hist.append([s.x / ext, s.y / ext, math.sin(s.heading), math.cos(s.heading),
                     math.sin(s.turret), math.cos(s.turret), s.health])
    return VehicleFeatures(vid, numeric, tokens, float(rec.last_seen_s),
                           np.asarray(hist, dtype=np.float32))


def build_example(battle: Battle, t_index: int, horizon: int, target_id: int,
                  geometry: GridGeometry, spec: KernelSpec, mode: str = "a2",
                  branch: str = "") -> TrainingExample:
    if target_id not in {v.id for v in battle.roster}:
        raise InvalidArgument(f"target {target_id} not in battle {battle.battle_id}")
    if not (1 <= horizon and t_index >= 0 and t_index + horizon < battle.n_states):
        raise InvalidArgument(f"t={t_index} + horizon={horizon} outside battle")
    mask = grid_mask(battle, geometry)
    image = render_input_image(battle.map_rgb, battle.records(t_index), target_id, geometry,
                               mode, spec)
    heat = render_target_heatmap(battle, t_index, target_id, horizon, geometry, spec, mask)
    info = battle.info(target_id)
    cur = battle.states[t_index].by_id()[target_id]
    fut, destroyed = future_state(battle, t_index, horizon, target_id)
    meta = {"battle_id": battle.battle_id, "map_id": battle.map_id, "preset": battle.preset,
            "t_index": t_index, "target_id": target_id, "vtype": info.vtype,
            "current_xy": (cur.x, cur.y), "future_xy": (fut.x, fut.y),
            "destroyed": destroyed, "branch": branch, "extent_m": battle.extent_m}
    return TrainingExample(
        image=image, target_heatmap=heat.astype(np.float32), mask=mask,
        global_numeric=global_aggregates(battle, t_index, info.team),
        global_tokens={"map": battle.map_id, "mode": battle.game_mode},
        global_time_s=float(battle.states[t_index].t),
        target=vehicle_features(battle, t_index, target_id, target_id),
        context=[vehicle_features(battle, t_index, v, target_id)
                 for v in ordered_roster(battle, target_id)],
        horizon=horizon, meta=meta)


def sample_training_example(battle: Battle, rng: np.random.Generator, geometry: GridGeometry,
                            spec: KernelSpec, policy: SamplingPolicy = SamplingPolicy(),
                            mode: str = "a2") -> TrainingExample:
    key = sample_key(battle, rng, policy)
    return build_example(battle, key.t_index, key.horizon, key.target_id, geometry, spec,
                         mode, key.branch)


def split_battles(battles: Sequence[Battle], seed: int,
                  fractions=(0.9, 0.05, 0.05)) -> Tuple[list, list, list]:
    """Seeded battle-level train / validation / test split."""
    order = np.random.default_rng(seed).permutation(len(battles))
    n_train = int(round(fractions[0] * len(battles)))
    n_val = int(round(fractions[1] * len(battles)))
    pick = lambda idx: [battles[i] for i in idx]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))


def make_examples(battles: Sequence[Battle], n: int, seed: int, geometry: GridGeometry,
                  spec: KernelSpec, mode: str = "a2",
                  policy: SamplingPolicy = SamplingPolicy()) -> List[TrainingExample]:
    """``n`` examples drawn round-robin over ``battles`` with a seeded sampler."""
    if not battles:
        raise InvalidArgument("no battles to sample from")
    rng = np.random.default_rng(seed)
    return [sample_training_example(battles[i % len(battles)], rng, geometry, spec, policy, mode)
            for i in range(n)]
