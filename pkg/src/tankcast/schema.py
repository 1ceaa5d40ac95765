"""Battle and game-state records shared by rendering, data and training code."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .errors import ReplayValidationError

VEHICLE_TYPES = ("heavy", "medium", "light", "td", "artillery")
ROLES = ("assault", "support", "sniper", "scout", "break")
GAME_MODES = ("standard", "encounter", "assault")


def round_up_hundred(value: float) -> int:
    return int(math.ceil(value / 100.0) * 100)


@dataclass(frozen=True)
class VehicleInfo:
    """Per-battle static attributes of one vehicle."""

    id: int
    team: int
    vtype: str
    role: str
    name: str
    max_speed: float
    rating: int
    battles: int


@dataclass(frozen=True)
class VehicleState:
    """Dynamic attributes of one vehicle at one game state."""

    id: int
    x: float
    y: float
    speed: float
    heading: float
    turret: float
    health: float
    damage: float
    visible: bool
    last_seen_s: float

    @property
    def alive(self) -> bool:
        return self.health > 0.0


@dataclass(frozen=True)
class VehicleRecord:
    info: VehicleInfo
    state: VehicleState

    def __getattr__(self, name):
        # flat access to both halves: rec.team, rec.x, ...
        for part in ("info", "state"):
            obj = object.__getattribute__(self, part)
            if hasattr(obj, name):
                return getattr(obj, name)
        raise AttributeError(name)

    @property
    def id(self) -> int:
        return self.info.id

    @property
    def speed_fraction(self) -> float:
        return min(1.0, max(0.0, self.state.speed / (self.info.max_speed + 1e-6)))


@dataclass(frozen=True)
class GameState:
    t: float
    vehicles: Tuple[VehicleState, ...]

    def by_id(self) -> Dict[int, VehicleState]:
        return {v.id: v for v in self.vehicles}


@dataclass(frozen=True, eq=False)
class Battle:
    """An immutable recorded (or generated) battle.

    ``map_rgb`` is an (R, R, 3) float array in [0, 1] covering the full square
    map, ``mask`` an (R, R) boolean array with True on reachable terrain.
    Row index grows with world y, column index with world x.
    """

    map_id: str
    game_mode: str
    extent_m: float
    step_s: float
    roster: Tuple[VehicleInfo, ...]
    map_rgb: np.ndarray
    mask: np.ndarray
    states: Tuple[GameState, ...]
    preset: str = ""
    battle_id: str = ""
    extras: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.map_rgb.setflags(write=False)
        self.mask.setflags(write=False)

    def validate(self) -> "Battle":
        if len(self.states) < 2:
            raise ReplayValidationError("a battle needs at least 2 states")
        if self.extent_m <= 0 or self.step_s <= 0:
            raise ReplayValidationError("extent and step must be positive")
        ids = [v.id for v in self.roster]
        if len(set(ids)) != len(ids):
            raise ReplayValidationError("duplicate vehicle id in roster")
        roster = set(ids)
        for i, st in enumerate(self.states):
            got = [v.id for v in st.vehicles]
            if set(got) != roster or len(got) != len(roster):
                extra = sorted(set(got) - roster)
                missing = sorted(roster - set(got))
                raise ReplayValidationError(
                    f"state {i}: roster mismatch (unknown {extra}, missing {missing})")
            for v in st.vehicles:
                if not 0.0 <= v.health <= 1.0:
                    raise ReplayValidationError(f"state {i}: vehicle {v.id} health {v.health}")
                if v.speed < 0:
                    raise ReplayValidationError(f"state {i}: vehicle {v.id} negative speed")
                if not (0.0 <= v.x <= self.extent_m and 0.0 <= v.y <= self.extent_m):
                    raise ReplayValidationError(f"state {i}: vehicle {v.id} outside map")
        for a, b in zip(self.states, self.states[1:]):
            if not math.isclose(b.t - a.t, self.step_s, rel_tol=1e-6, abs_tol=1e-6):
                raise ReplayValidationError(f"non-constant step between t={a.t} and t={b.t}")
        if self.map_rgb.ndim != 3 or self.map_rgb.shape[2] != 3:
            raise ReplayValidationError("map raster must be (R, R, 3)")
        if self.mask.shape != self.map_rgb.shape[:2]:
            raise ReplayValidationError("mask and map raster shapes differ")
        for info in self.roster:
            if info.vtype not in VEHICLE_TYPES:
                raise ReplayValidationError(f"vehicle {info.id}: unknown type {info.vtype!r}")
        return self

    @property
    def n_states(self) -> int:
        return len(self.states)

    def info(self, vid: int) -> VehicleInfo:
        for v in self.roster:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def record(self, t_index: int, vid: int) -> VehicleRecord:
        return VehicleRecord(self.info(vid), self.states[t_index].by_id()[vid])

    def records(self, t_index: int) -> Tuple[VehicleRecord, ...]:
        infos = {v.id: v for v in self.roster}
        return tuple(VehicleRecord(infos[s.id], s) for s in self.states[t_index].vehicles)


def ordered_roster(battle: Battle, target_id: int) -> Tuple[int, ...]:
    """Context vehicle ids: every roster vehicle except the target, roster order."""
    return tuple(v.id for v in battle.roster if v.id != target_id)


def future_state(battle: Battle, t_index: int, horizon: int, vid: int) -> Tuple[VehicleState, bool]:
    """State of ``vid`` at ``t_index + horizon``.

    A vehicle destroyed on the way is reported at the position where it died
    with zero speed; the flag tells whether that happened.
    """
    end = t_index + horizon
    if end >= battle.n_states:
        raise IndexError("horizon runs past the end of the battle")
    for i in range(t_index + 1, end + 1):
        st = battle.states[i].by_id()[vid]
        if not st.alive:
            return replace(st, speed=0.0), True
    return battle.states[end].by_id()[vid], False

