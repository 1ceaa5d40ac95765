import dataclasses
import json
import math

import numpy as np
import pytest

from oracles import make_battle, make_info
from tankcast.battle import (N_GLOBAL_NUMERIC, PRESETS, SamplingPolicy, ScenarioConfig,
                             build_example, global_aggregates, load_replay, make_examples,
                             movers, sample_key, sample_training_example, save_replay,
                             split_battles, synth_battle, vehicle_features)
from tankcast.errors import (InvalidArgument, ReplayParseError, ReplayValidationError,
                             ScenarioError)
from tankcast.geometry import GridGeometry, KernelSpec
from tankcast.schema import VEHICLE_TYPES, future_state

GEO = GridGeometry(1000.0, 64, 64)
SPEC = KernelSpec.for_geometry(GEO)


def _same_battle(a, b):
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            assert np.array_equal(x, y), f.name
        else:
            assert x == y, f.name


# -- replay files ------------------------------------------------------------------

def test_minimal_fixture_round_trip(tmp_path):
    b = make_battle({0: [(10, 10, 0, 0), (20, 10, 1, 0)], 1: [(50, 50, 0, 1), (50, 50, 0, 1)]},
                    [make_info(0), make_info(1, 1)])
    loaded = load_replay(save_replay(b, tmp_path / "fx.jsonl"))
    assert loaded.n_states == 2
    _same_battle(b, loaded)


def test_synthetic_round_trip(tmp_path):
    b = synth_battle(3)
    _same_battle(b, load_replay(save_replay(b, tmp_path / "b3.jsonl")))


def test_parse_error_reports_line(tmp_path):
    path = save_replay(synth_battle(0), tmp_path / "b.jsonl")
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:-5]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayParseError) as err:
        load_replay(path)
    assert err.value.lineno == 3 and "line 3" in str(err.value)


def test_missing_key_is_parse_error(tmp_path):
    path = save_replay(synth_battle(0), tmp_path / "b.jsonl")
    lines = path.read_text().splitlines()
    row = json.loads(lines[1])
    del row["vehicles"][0]["heading"]
    lines[1] = json.dumps(row)
    path.write_text("\n".join(lines))
    with pytest.raises(ReplayParseError) as err:
        load_replay(path)
    assert err.value.lineno == 2


def test_unknown_vehicle_is_validation_error(tmp_path):
    path = save_replay(synth_battle(0), tmp_path / "b.jsonl")
    lines = path.read_text().splitlines()
    row = json.loads(lines[4])
    row["vehicles"][0]["id"] = 99
    lines[4] = json.dumps(row)
    path.write_text("\n".join(lines))
    with pytest.raises(ReplayValidationError):
        load_replay(path)


def test_battle_invariants_enforced():
    infos = [make_info(0)]
    with pytest.raises(ReplayValidationError):
        make_battle({0: [(10, 10, 0, 0)]}, infos)
    with pytest.raises(ReplayValidationError):
        make_battle({0: [(10, 10, 0, 0), (10, 10, 0, 0, 1.5)]}, infos)
    with pytest.raises(ReplayValidationError):
        make_battle({0: [(10, 10, 0, 0), (2000, 10, 0, 0)]}, infos)
    with pytest.raises(ReplayValidationError):
        make_battle({0: [(10, 10, -1, 0), (10, 10, 0, 0)]}, infos)


# -- synthesis -------------------------------------------------------------------------

def test_synthesis_is_deterministic():
    _same_battle(synth_battle(11), synth_battle(11))
    assert synth_battle(11).states != synth_battle(12).states


@pytest.mark.parametrize("preset", PRESETS)
def test_synthetic_battle_shape(preset):
    b = synth_battle(5, ScenarioConfig(preset=preset))
    assert b.n_states == 20 and len(b.roster) == 10
    assert all(math.isclose(s.t, 15.0 * i) for i, s in enumerate(b.states))
    for s in b.states:
        for v in s.vehicles:
            assert v.speed <= b.info(v.id).max_speed * 1.1 + 1e-9


def test_artillery_is_slowest_class():
    speeds = {t: [] for t in VEHICLE_TYPES}
    for seed in range(20):
        b = synth_battle(seed)
        for v in b.roster:
            speeds[v.vtype] += [s.by_id()[v.id].speed for s in b.states]
    mean = {t: np.mean(v) for t, v in speeds.items()}
    assert min(mean, key=mean.get) == "artillery"
    assert mean["artillery"] < 0.25 * min(m for t, m in mean.items() if t != "artillery")


@pytest.mark.parametrize("seed", range(6))
def test_flipping_enemy_flank_flips_destinations(seed):
    sides = {}
    for flank in ("west", "east"):
        b = synth_battle(seed, ScenarioConfig(context_sensitive=True, enemy_flank=flank))
        last = b.states[-1].by_id()
        sides[flank] = [last[v.id].x for v in b.roster if v.team == 0 and v.vtype != "artillery"]
        assert b.extras["enemy_flank"] == flank
    assert all(x < 500 for x in sides["west"])
    assert all(x > 500 for x in sides["east"])


def test_bad_scenarios():
    with pytest.raises(ScenarioError):
        synth_battle(0, ScenarioConfig(preset="desert"))
    with pytest.raises(ScenarioError):
        synth_battle(0, ScenarioConfig(context_sensitive=True, enemy_flank="north"))


# -- sampling ----------------------------------------------------------------------------------

def _still_battle(n_states=4):
    infos = [make_info(i, i % 2) for i in range(3)]
    return make_battle({i: [(100 + 200 * i, 300, 0, 0)] * n_states for i in range(3)}, infos)


def test_all_stationary_falls_back():
    b = _still_battle()
    rng = np.random.default_rng(0)
    branches = {sample_key(b, rng).branch for _ in range(200)}
    assert branches == {"fallback", "random"}
    ex = sample_training_example(b, np.random.default_rng(1), GEO, SPEC)
    assert ex.target_heatmap.max() == pytest.approx(1.0)


def test_moving_fraction_monte_carlo():
    b = synth_battle(2)
    rng = np.random.default_rng(0)
    keys = [sample_key(b, rng) for _ in range(10_000)]
    with_movers = [k for k in keys if movers(b, k.t_index, k.horizon)]
    assert len(with_movers) > 5000
    frac = np.mean([k.branch == "moving" for k in with_movers])
    assert abs(frac - 0.9) <= 0.02


def test_mover_filter_matches_raw_displacement():
    b = synth_battle(4)
    for t in range(0, 14, 3):
        for h in (1, 3, 6):
            expect = []
            for v in b.roster:
                p0 = b.states[t].by_id()[v.id]
                p1 = b.states[t + h].by_id()[v.id]
                rate = math.hypot(p1.x - p0.x, p1.y - p0.y) / (h * 15.0)
                if rate >= 0.06 * v.max_speed:
                    expect.append(v.id)
            assert movers(b, t, h) == expect


def test_horizon_clipped_to_battle_length():
    b = _still_battle(n_states=3)
    rng = np.random.default_rng(3)
    for _ in range(300):
        k = sample_key(b, rng)
        assert 1 <= k.horizon <= 2 and k.t_index + k.horizon < b.n_states
    with pytest.raises(InvalidArgument):
        sample_key(dataclasses.replace(b, states=b.states[:1]), rng)


def test_sampled_time_covers_valid_range():
    b = synth_battle(1)
    rng = np.random.default_rng(5)
    ts = {}
    for _ in range(3000):
        k = sample_key(b, rng)
        ts.setdefault(k.horizon, set()).add(k.t_index)
    for h, seen in ts.items():
        assert seen == set(range(b.n_states - h))


# -- example assembly --------------------------------------------------------------------------

def _mixed_battle():
    # team 0 has no light tank; team 1 has one
    infos = [make_info(0, 0, "heavy"), make_info(1, 0, "td"), make_info(2, 1, "light"),
             make_info(3, 1, "heavy")]
    tracks = {0: [(100, 100, 5, 0, 0.8), (175, 100, 5, 0, 0.6), (250, 100, 5, 0, 0.6)],
              1: [(300, 300, 0, 0)] * 3,
              2: [(800, 800, 0, 0, 0.5)] * 3,
              3: [(700, 700, 0, 0)] * 3}
    return make_battle(tracks, infos)


def test_global_aggregates_layout_and_zero_fill():
    b = _mixed_battle()
    g = global_aggregates(b, 1, ally_team=0)
    assert g.shape == (N_GLOBAL_NUMERIC,) == (21,)
    li = VEHICLE_TYPES.index("light")
    assert g[li] == 0 and g[5 + li] == 0
    assert g[VEHICLE_TYPES.index("heavy")] == pytest.approx(0.6)
    assert g[10 + li] == pytest.approx(0.5)
    assert g[20] == pytest.approx(15.0 / 600.0)


def test_example_fields():
    b = _mixed_battle()
    ex = build_example(b, 0, 2, 0, GEO, SPEC, "a2")
    assert ex.global_numeric.shape == (21,)
    assert [c.vid for c in ex.context] == [1, 2, 3]
    assert [c.tokens["team"] for c in ex.context] == ["ally", "enemy", "enemy"]
    assert ex.target.history.shape == (1, 7)
    assert ex.meta["future_xy"] == (250.0, 100.0)
    assert ex.target_heatmap.max() == pytest.approx(1.0, abs=1e-6)
    later = vehicle_features(b, 2, 0, 0)
    assert later.history.shape == (3, 7)
    assert later.history[0, 0] == pytest.approx(0.1)
    with pytest.raises(InvalidArgument):
        build_example(b, 0, 1, 42, GEO, SPEC)
    with pytest.raises(InvalidArgument):
        build_example(b, 1, 2, 0, GEO, SPEC)


@pytest.mark.parametrize("seed", range(5))
def test_target_argmax_is_future_position(seed):
    b = synth_battle(seed)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        k = sample_key(b, rng)
        ex = build_example(b, k.t_index, k.horizon, k.target_id, GEO, SPEC)
        fut, _ = future_state(b, k.t_index, k.horizon, k.target_id)
        peak = np.unravel_index(np.argmax(ex.target_heatmap), ex.target_heatmap.shape)
        if ex.mask[GEO.world_to_index(fut.x, fut.y)]:
            assert peak == GEO.world_to_index(fut.x, fut.y)


def test_history_window_capped():
    b = synth_battle(0)
    assert vehicle_features(b, 19, 0, 0).history.shape == (15, 7)


def test_split_and_make_examples():
    battles = [synth_battle(s) for s in range(20)]
    tr, va, te = split_battles(battles, 0)
    assert (len(tr), len(va), len(te)) == (18, 1, 1)
    ids = [b.battle_id for b in tr + va + te]
    assert sorted(ids) == sorted(b.battle_id for b in battles)
    assert split_battles(battles, 0)[2][0].battle_id == te[0].battle_id
    a = make_examples(tr[:3], 6, 9, GEO, SPEC)
    c = make_examples(tr[:3], 6, 9, GEO, SPEC)
    assert [e.meta["target_id"] for e in a] == [e.meta["target_id"] for e in c]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, c))
    with pytest.raises(InvalidArgument):
        make_examples([], 1, 0, GEO, SPEC)


def test_policy_without_random_branch():
    b = synth_battle(2)
    rng = np.random.default_rng(1)
    pol = SamplingPolicy(random_vehicle_prob=0.0)
    assert all(sample_key(b, rng, pol).branch != "random" for _ in range(300))
