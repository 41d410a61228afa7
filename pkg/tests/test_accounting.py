import time

import pytest
from hypothesis import given, strategies as st

from taskmod.accounting import (
    layer_flops,
    load_preset,
    model_flops,
    preset_flops,
    skip_flops,
    training_compute,
)
from taskmod.model import ModelConfig, Task
from taskmod.numerics import ContractError
from taskmod.planner import PruningPlan


def test_layer_flops_formula():
    c = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ffn=8, text_vocab=2, image_vocab=2, max_seq=8)
    assert layer_flops(c, 3) == 8 * 3 * 16 + 4 * 9 * 4 + 4 * 3 * 4 * 8
    assert layer_flops(c, 0) == 0
    with pytest.raises(ContractError):
        layer_flops(c, -1)


def test_dense_plan_ratio_is_one(small_config):
    rep = model_flops(small_config, PruningPlan.dense(small_config.n_layers), {Task.T2I: 20, Task.MMU: 10})
    assert rep.ratio == 1.0 and rep.ratio_for(Task.MMU) == 1.0


@given(st.integers(1, 200), st.floats(0.05, 1.0))
def test_routed_never_exceeds_dense(L, c):
    cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ffn=16, text_vocab=2, image_vocab=2, max_seq=256)
    plan = PruningPlan.from_routed(4, {Task.T2I: {2: c, 3: c}})
    assert model_flops(cfg, plan, {Task.T2I: L}).ratio <= 1.0


def test_emu3_preset_ratio():
    t = time.perf_counter()
    rep = preset_flops(load_preset("emu3"))["final"]
    assert abs(rep.ratio_for(Task.T2I) - 0.601) <= 0.03
    assert time.perf_counter() - t < 1.0


def test_showo_preset_ratios():
    reps = preset_flops(load_preset("showo"))
    assert abs(reps["final"].ratio_for(Task.T2I) - 0.898) <= 0.03
    assert reps["start"].ratio_for(Task.MMU) == reps["start"].ratio_for(Task.T2I) or \
        reps["start"].ratio_for(Task.MMU) > reps["final"].ratio_for(Task.MMU)


def test_training_compute_and_skip():
    assert training_compute(10.0, 10) == 300.0
    with pytest.raises(ContractError):
        training_compute(1.0, 0)
    cfg = ModelConfig(n_layers=8, d_model=8, n_heads=2, d_ffn=16, text_vocab=2, image_vocab=2, max_seq=32)
    assert skip_flops(cfg, 10, range(4)) * 2 == skip_flops(cfg, 10, range(8))


def test_report_json_has_training_compute():
    d = preset_flops(load_preset("emu3"), batch_size=10)["final"].to_json()
    assert d["training_compute"]["T2I"] == d["tasks"]["T2I"]["total"] * 30
    assert "convention" in d


def test_unknown_preset():
    with pytest.raises(FileNotFoundError):
        load_preset("nope")
