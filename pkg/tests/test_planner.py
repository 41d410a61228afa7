import json

import pytest
from hypothesis import given, strategies as st

from taskmod.model import Task
from taskmod.numerics import ContractError
from taskmod.planner import (
    CapacitySchedule,
    LayerMode,
    LayerType,
    PlanEntry,
    PruningPlan,
    Selection,
    build_plan,
    capacity_at,
    interleaved_layers,
    last_layers,
    matched_capacity,
    pruning_rate,
    select_layers,
    token_budget,
)
from taskmod.profiler import ARankProfile, ARankRecord


def profile(task, taus, seq_len=100):
    return ARankProfile(task, [ARankRecord(l, task, t, 10, seq_len, 1e-6) for l, t in enumerate(taus)])


def test_select_layers_lowest_and_ties():
    taus = {0: 5.0, 1: 3.0, 2: 3.0, 3: 9.0}
    assert select_layers(taus, 1) == [2]
    assert select_layers(taus, 2) == [1, 2]
    assert select_layers(taus, 1, Selection.HIGHEST_ARANK) == [3]


def test_build_plan_capacities_and_types():
    profs = {Task.T2I: profile(Task.T2I, [80, 50, 5, 60]), Task.MMU: profile(Task.MMU, [90, 20, 95, 30])}
    plan = build_plan(profs, 2)
    assert plan.provenance == "arank-derived"
    assert plan.routed_layers(Task.T2I) == [1, 2]
    assert plan.entry(1, Task.T2I).capacity == 0.5
    assert plan.entry(2, Task.T2I).capacity == 0.1  # 0.05 clamped to c_min
    assert plan.layer_type(1) == LayerType.SHARED_MOD
    assert plan.layer_type(2) == LayerType.T2I_MOD
    assert plan.layer_type(3) == LayerType.MMU_MOD
    assert plan.layer_type(0) == LayerType.DENSE


def test_build_plan_rejects_bad_k():
    with pytest.raises(ContractError):
        build_plan({Task.T2I: profile(Task.T2I, [1, 2])}, 3)


def test_plan_entry_validation():
    with pytest.raises(ContractError):
        PlanEntry(0, Task.T2I, LayerMode.ROUTED, 0.0)
    with pytest.raises(ContractError):
        PlanEntry(0, Task.T2I, LayerMode.DENSE, 0.5)
    with pytest.raises(ContractError):
        PruningPlan.from_routed(2, {Task.T2I: {5: 0.5}})


def test_plan_json_roundtrip(tmp_path):
    plan = PruningPlan.from_routed(6, {Task.T2I: {4: 0.8, 5: 0.8}, Task.MMU: {3: 0.2}}, shared_router=True)
    plan.save(tmp_path / "p.json")
    back = PruningPlan.load(tmp_path / "p.json")
    assert back.to_json() == plan.to_json()
    bare = PruningPlan.from_json(json.loads((tmp_path / "p.json").read_text())["entries"], 6)
    assert bare.entries == plan.entries


def test_dense_equivalence_flag():
    assert PruningPlan.from_routed(3, {Task.T2I: {1: 1.0}}).is_dense_equivalent()
    assert not PruningPlan.from_routed(3, {Task.T2I: {1: 0.9}}).is_dense_equivalent()


def test_layer_helpers():
    assert interleaved_layers(8) == [1, 3, 5, 7]
    assert last_layers(8, 3) == [5, 6, 7]


@given(st.floats(0.0, 0.45), st.integers(2, 24))
def test_matched_capacity_preserves_rate(rate, n):
    routed = list(range(0, n, 2))
    c = matched_capacity(rate, n, len(routed))
    plan = PruningPlan.from_routed(n, {Task.T2I: {l: c for l in routed}}) if c < 1 else PruningPlan.dense(n)
    assert pruning_rate(plan, Task.T2I) == pytest.approx(rate, abs=1e-12)


def test_matched_capacity_unreachable():
    with pytest.raises(ContractError):
        matched_capacity(0.9, 8, 2)


def test_schedule():
    s = CapacitySchedule(1.0, 0.2, 100)
    assert capacity_at(s, 0) == 1.0
    assert capacity_at(s, 50) == pytest.approx(0.6)
    assert capacity_at(s, 100) == 0.2 and capacity_at(s, 1000) == 0.2
    with pytest.raises(ContractError):
        CapacitySchedule(1.0, 0.0, 10)


def test_increasing_schedule_warns(caplog):
    CapacitySchedule(0.2, 0.8, 10)
    assert "increases" in caplog.text


@given(st.floats(1e-3, 1.0), st.integers(1, 5000))
def test_token_budget_is_ceiling(c, n):
    k = token_budget(c, n)
    assert 1 <= k <= n
    assert k >= c * n - 1e-6 and k - 1 < c * n
