"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (8-10) run the shipped toy configuration and take
roughly 20 minutes together on one CPU core.
"""

import math
import time

import numpy as np
import pytest

import taskmod.numerics as nx
from taskmod import profiler
from taskmod.accounting import load_preset, preset_flops
from taskmod.harness import DataSettings, ExperimentConfig, gen_synthetic_batch, read_metrics, toy_config, train
from taskmod.harness.suite import accounted_ratio
from taskmod.harness.train import pretrained
from taskmod.model import (
    LayerActivations,
    ModelConfig,
    Task,
    ToyModel,
    attention_forward,
    ar_loss,
    block_forward,
    ffn_forward,
    layer_params,
    mtp_loss,
    ntp_loss,
)
from taskmod.numerics import RandomStream, Tensor
from taskmod.planner import LayerMode, PlanEntry
from taskmod.routing import (
    RouterParams,
    aux_capacity_loss,
    get_router,
    gumbel_layer_forward,
    gumbel_router_forward,
    init_routers,
    routed_layer_forward,
)

SEEDS = range(5)


@pytest.fixture
def criterion(record_property):
    def tag(number, title):
        record_property("criterion", number)
        record_property("title", title)
        print(f"\n[{number}] {title}")
    return tag


def _svd_rank(m, rel_tol=1e-6):
    s = np.linalg.svd(m, compute_uv=False)
    return int((s > rel_tol * s[0]).sum()) if s[0] > 0 else 0


def _rand_model(g, n_layers=2):
    heads = int(g.choice([1, 2, 4]))
    return ModelConfig(n_layers=n_layers, d_model=heads * int(g.integers(2, 5)), n_heads=heads,
                       d_ffn=int(g.integers(4, 12)), text_vocab=int(g.integers(3, 7)),
                       image_vocab=int(g.integers(7, 13)), max_seq=32)


def _rand_data(g, batch_size=None):
    n_text = int(g.integers(1, 5))
    return DataSettings(n_image=int(g.integers(n_text, 10)), n_text=n_text,
                        batch_size=batch_size or int(g.integers(1, 5)))


# ------------------------------------------------------------------ 1, 2
def test_c01_emu3_compute_ratio(criterion):
    criterion(1, "Emu3 preset compute ratio within 0.03 of 0.601")
    t = time.perf_counter()
    ratio = preset_flops(load_preset("emu3"))["final"].ratio_for(Task.T2I)
    elapsed = time.perf_counter() - t
    print(f"ratio {ratio:.4f} in {elapsed:.3f}s")
    assert abs(ratio - 53.5 / 89.0) <= 0.03 and elapsed < 1.0


def test_c02_showo_t2i_compute_ratio(criterion):
    criterion(2, "Show-o T2I preset compute ratio within 0.03 of 0.898")
    t = time.perf_counter()
    ratio = preset_flops(load_preset("showo"))["final"].ratio_for(Task.T2I)
    elapsed = time.perf_counter() - t
    print(f"ratio {ratio:.4f} in {elapsed:.3f}s")
    assert abs(ratio - 45.9 / 51.1) <= 0.03 and elapsed < 1.0


# --------------------------------------------------------------------- 3
def test_c03_routing_exactness(criterion):
    criterion(3, "routed layers process ceil(c*L) tokens, skipped tokens pass bit-exactly")
    g = np.random.default_rng(3)
    t = time.perf_counter()
    models = {}
    for i in range(1000):
        key = i % 10
        if key not in models:
            cfg = _rand_model(g)
            m = ToyModel.init(cfg, seed=key)
            init_routers(m.params, cfg.d_model, [0, 1], ["T2I", "MMU"], RandomStream(key, 4), "f32")
            models[key] = m
        model = models[key]
        cfg = model.config
        task = Task.T2I if g.random() < 0.5 else Task.MMU
        batch = gen_synthetic_batch(task, RandomStream(i), _rand_data(g), cfg)
        layer = int(g.integers(0, 2))
        c = float(g.choice([0.1, 0.2, 0.25, 0.5, 0.8, 1.0, g.uniform(0.01, 1.0)]))
        x = Tensor(RandomStream(i, 9).normal((batch.batch_size, batch.seq_len, cfg.d_model)).astype(np.float32))
        with nx.no_grad():
            acts, trace = routed_layer_forward(LayerActivations(x), batch, layer_params(model.params, layer),
                                               get_router(model.params, layer, task.value),
                                               PlanEntry(layer, task, LayerMode.ROUTED, c), cfg, layer_index=layer)
        L = batch.seq_len
        expected = max(1, math.ceil(round(c * L, 9)))
        assert np.all(trace.processed == expected), (c, L, trace.processed)
        for b, sel in enumerate(trace.selected):
            assert len(sel) == expected
            skipped = np.setdiff1d(np.arange(L), sel)
            assert acts.hidden.data[b, skipped].tobytes() == x.data[b, skipped].tobytes()
    elapsed = time.perf_counter() - t
    print(f"1000 batches in {elapsed:.1f}s")
    assert elapsed < 60


# --------------------------------------------------------------------- 4
def test_c04_dense_equivalence(criterion):
    criterion(4, "capacity 1 with R=1 matches the dense layer within 1e-10 (f64)")
    g = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        cfg = _rand_model(g, n_layers=1)
        model = ToyModel.init(cfg, seed=i, dtype="f64")
        task = Task.T2I if i % 2 else Task.MMU
        batch = gen_synthetic_batch(task, RandomStream(i), _rand_data(g), cfg)
        x = Tensor(RandomStream(i, 9).normal((batch.batch_size, batch.seq_len, cfg.d_model)))
        lp = layer_params(model.params, 0)
        with nx.no_grad():
            routed, _ = routed_layer_forward(LayerActivations(x), batch, lp, None,
                                             PlanEntry(0, task, LayerMode.ROUTED, 1.0), cfg, layer_index=0,
                                             bypass=True)
            dense = block_forward(x, batch.attn_mask, lp, cfg).hidden
        worst = max(worst, float(np.max(np.abs(routed.hidden.data - dense.data))))
    print(f"max abs diff {worst:.2e}")
    assert worst < 1e-10


# --------------------------------------------------------------------- 5
def _grad_cases():
    """(name, builder) pairs; builder(rng, i) -> (f, x) for finite_diff_check."""

    def small(g, i, family="showo"):
        cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ffn=6, text_vocab=3, image_vocab=4, max_seq=16,
                          family=family)
        data = DataSettings(n_image=4, n_text=2, batch_size=2)
        model = ToyModel.init(cfg, seed=i, dtype="f64")
        return cfg, data, model

    def attention(g, i):
        cfg, data, model = small(g, i)
        batch = gen_synthetic_batch(Task.MMU, RandomStream(i), data, cfg)
        lp = layer_params(model.params, 0)
        w = g.normal(size=(batch.batch_size, batch.seq_len, cfg.d_model))
        x = Tensor(g.normal(size=w.shape))
        if i % 2:
            return lambda t: (attention_forward(LayerActivations(t), batch.attn_mask, lp, cfg.n_heads).hidden
                              * w).sum(), x
        wq = lp["attn.wq"]
        return lambda t: (attention_forward(LayerActivations(x), batch.attn_mask, {**lp, "attn.wq": t},
                                            cfg.n_heads).hidden * w).sum(), Tensor(wq.data.copy())

    def ffn(g, i):
        cfg, data, model = small(g, i)
        lp = layer_params(model.params, 0)
        w = g.normal(size=(2, 5, cfg.d_model))
        x = Tensor(g.normal(size=w.shape))
        if i % 2:
            return lambda t: (ffn_forward(LayerActivations(t), lp).hidden * w).sum(), x
        return lambda t: (ffn_forward(LayerActivations(x), {**lp, "ffn.w1": t}).hidden * w).sum(), \
            Tensor(lp["ffn.w1"].data.copy())

    def loss(fn, task, family="showo"):
        def build(g, i):
            cfg, data, _ = small(g, i, family)
            batch = gen_synthetic_batch(task, RandomStream(i), data, cfg)
            return lambda t: fn(t, batch), Tensor(g.normal(size=(batch.batch_size, batch.seq_len, cfg.out_vocab)))
        return build

    def router(g, i):
        cfg, data, model = small(g, i)
        batch = gen_synthetic_batch(Task.T2I, RandomStream(i), data, cfg)
        lp = layer_params(model.params, 0)
        b = Tensor(np.array(g.normal()))
        x = Tensor(g.normal(size=(batch.batch_size, batch.seq_len, cfg.d_model)))
        w = g.normal(size=x.shape)
        entry = PlanEntry(0, Task.T2I, LayerMode.ROUTED, 0.5)

        def f(t):
            out, _ = routed_layer_forward(LayerActivations(x), batch, lp, RouterParams(t, b), entry, cfg,
                                          layer_index=0)
            return (out.hidden * w).sum()
        return f, Tensor(g.normal(size=cfg.d_model))

    def gumbel(g, i):
        cfg, data, model = small(g, i)
        batch = gen_synthetic_batch(Task.MMU, RandomStream(i), data, cfg)
        lp = layer_params(model.params, 0)
        x = Tensor(g.normal(size=(batch.batch_size, batch.seq_len, cfg.d_model)))
        noise = RandomStream(i, 2).gumbel((batch.batch_size, batch.seq_len, 2))
        rb = Tensor(np.array(g.normal()))
        w = g.normal(size=x.shape)
        if i % 2:
            # soft relaxation: the path the straight-through gradient follows
            wy = g.normal(size=noise.shape)
            return lambda t: (gumbel_router_forward(x, 0.7, None, RouterParams(t, rb), noise).y * wy).sum(), \
                Tensor(g.normal(size=cfg.d_model))
        r = RouterParams(Tensor(g.normal(size=cfg.d_model)), rb)

        def f(t):
            out, _, _ = gumbel_layer_forward(LayerActivations(x), batch, {**lp, "attn.wv": t}, r, cfg,
                                             layer_index=0, temperature=1.0, noise=noise)
            return (out.hidden * w).sum()
        return f, Tensor(lp["attn.wv"].data.copy())

    def aux(g, i):
        target = float(g.uniform(0.1, 0.9))
        return lambda t: aux_capacity_loss(t, target), Tensor(g.uniform(0, 1, size=int(g.integers(1, 9))))

    return [("attention", attention), ("ffn", ffn), ("ntp", loss(ntp_loss, Task.MMU)),
            ("mtp", loss(mtp_loss, Task.T2I)), ("ar", loss(ar_loss, Task.T2I, "emu3")), ("router", router),
            ("gumbel", gumbel), ("aux", aux)]


def test_c05_gradient_suite(criterion):
    criterion(5, "finite-difference gradient checks, rel err < 1e-4 (f64, 20 instances each)")
    g = np.random.default_rng(5)
    t = time.perf_counter()
    worst = {}
    for name, build in _grad_cases():
        errs = []
        for i in range(20):
            f, x = build(g, i)
            errs.append(nx.finite_diff_check(f, x))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t
    print(" ".join(f"{k}={v:.1e}" for k, v in worst.items()), f"({elapsed:.0f}s)")
    assert all(v < 1e-4 for v in worst.values()) and elapsed < 300


# --------------------------------------------------------------------- 6
def test_c06_arank_oracle(criterion, tmp_path):
    criterion(6, "ARank equals SVD rank on dumped maps; bound and scale invariance")
    g = np.random.default_rng(6)
    for case in range(50):
        cfg = _rand_model(g)
        data = _rand_data(g)
        model = ToyModel.init(cfg, seed=case, dtype="f64")
        task = Task.T2I if case % 2 else Task.MMU
        batch = gen_synthetic_batch(task, RandomStream(case), data, cfg)
        dump = tmp_path / f"case{case}"
        prof = profiler.compute_arank(model, [batch], task, dump_dir=dump)
        maps = nx.load_tensors(dump)
        inputs = profiler.layer_inputs(model, batch)
        for layer in range(cfg.n_layers):
            ranks = np.array([[_svd_rank(maps[f"layer{layer}.seq{b}.head{h}"]) for h in range(cfg.n_heads)]
                              for b in range(batch.batch_size)])
            ours = nx.numerical_ranks(profiler.attention_maps(model, inputs[layer], layer).reshape(
                -1, batch.seq_len, batch.seq_len)).reshape(ranks.shape)
            assert np.array_equal(ours, ranks)
            assert prof.taus()[layer] == ranks.mean()
            assert ranks.max() <= min(batch.seq_len, cfg.d_head)
            scale = float(g.choice([-3.0, 1e-3, 0.5, 1e3]))
            scaled = nx.numerical_ranks(profiler.attention_maps(model, inputs[layer] * scale, layer).reshape(
                -1, batch.seq_len, batch.seq_len)).reshape(ranks.shape)
            assert np.array_equal(scaled, ranks)


# --------------------------------------------------------------------- 7
def test_c07_aux_loss_stationarity(criterion):
    criterion(7, "aux loss gradient vanishes exactly at r_i = P; L_aux([1,0], 0.5) = 0.25")
    assert float(aux_capacity_loss([1.0, 0.0], 0.5).data) == 0.25
    g = np.random.default_rng(7)
    h = 1e-6
    for _ in range(50):
        P = float(g.uniform(0.05, 0.95))
        n = int(g.integers(1, 9))
        on = np.full(n, P)
        off = on.copy()
        off[g.integers(0, n)] += float(g.choice([-1, 1])) * g.uniform(0.01, 0.04)
        for point, stationary in ((on, True), (off, False)):
            fd = np.array([(float(aux_capacity_loss(point + h * e, P).data)
                            - float(aux_capacity_loss(point - h * e, P).data)) / (2 * h) for e in np.eye(n)])
            r = Tensor(point.copy(), requires_grad=True)
            aux_capacity_loss(r, P).backward()
            assert np.allclose(r.grad, fd, atol=1e-8)
            if stationary:
                assert np.all(r.grad == 0) and np.max(np.abs(fd)) < 1e-8
            else:
                assert np.max(np.abs(fd)) > 1e-4


# ----------------------------------------------------------------- 9, 10
@pytest.fixture(scope="module")
def toy_runs():
    t = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        for method in ("DENSE", "UNIMOD", "LAYERSKIP", "EARLYEXIT"):
            runs[seed, method] = train(toy_config(method=method, seed=seed))
    return runs, time.perf_counter() - t


def test_c09_unimod_efficiency_quality(criterion, toy_runs):
    criterion(9, "UNIMOD: FLOPs ratio <= 0.85 and eval loss within 10% of DENSE, majority of 5 seeds")
    runs, elapsed = toy_runs
    wins = 0
    for seed in SEEDS:
        dense, uni = runs[seed, "DENSE"].final_eval, runs[seed, "UNIMOD"]
        ratio = uni.cum_flops / runs[seed, "DENSE"].cum_flops
        rel = {t: uni.final_eval[t]["loss"] / dense[t]["loss"] - 1 for t in ("T2I", "MMU")}
        ok = ratio <= 0.85 and all(abs(v) <= 0.10 or v < 0 for v in rel.values())
        wins += ok
        print(f"seed {seed}: ratio {ratio:.3f} rel T2I {rel['T2I']:+.3f} MMU {rel['MMU']:+.3f} {'ok' if ok else 'miss'}")
    print(f"{wins}/5 seeds, shared runs took {elapsed / 60:.1f} min")
    assert wins >= 3 and elapsed < 30 * 60


def test_c10_baseline_separation(criterion, toy_runs):
    criterion(10, "LAYERSKIP/EARLYEXIT: exact accounted ratios, worse T2I than UNIMOD at <= compute")
    runs, _ = toy_runs
    cfg = toy_config(method="EARLYEXIT")
    assert accounted_ratio(toy_config(method="LAYERSKIP")) == 0.5
    assert accounted_ratio(cfg) == cfg.exit_layer / cfg.model.n_layers
    for method in ("LAYERSKIP", "EARLYEXIT"):
        wins = 0
        for seed in SEEDS:
            base, uni = runs[seed, method], runs[seed, "UNIMOD"]
            assert base.cum_flops <= uni.cum_flops
            wins += base.final_eval["T2I"]["loss"] > uni.final_eval["T2I"]["loss"]
        losses = [round(runs[s, method].final_eval["T2I"]["loss"], 4) for s in SEEDS]
        print(f"{method}: worse than UNIMOD on {wins}/5 seeds, T2I losses {losses}")
        assert wins >= 3


# --------------------------------------------------------------------- 8
def test_c08_competitive_keep_rate(criterion):
    criterion(8, "GUMBEL_COMPETITIVE (P=0.5): seed-averaged keep rate within 0.1 of 0.5 per layer")
    per_seed = []
    elapsed = 0.0
    for seed in SEEDS:
        cfg = toy_config(method="GUMBEL_COMPETITIVE", seed=seed, eval_every=1000)
        pretrained(cfg)  # shared dense starting point, reused from the runs above
        t = time.perf_counter()
        res = train(cfg)
        elapsed += time.perf_counter() - t
        tail = res.train_records()[-100:]  # realized rates over the last 100 steps
        per_seed.append(np.mean([r["keep_rate"][t] for r in tail for t in ("T2I", "MMU")], axis=0))
        print(f"seed {seed}: keep rate {np.round(per_seed[-1], 3)}")
    mean = np.mean(per_seed, axis=0)
    print(f"mean keep rate per layer {np.round(mean, 3)}; fine-tuning took {elapsed / 60:.1f} min")
    assert np.all(np.abs(mean - 0.5) <= 0.1) and elapsed < 10 * 60


# -------------------------------------------------------------------- 11
def test_c11_determinism_and_resume(criterion, tmp_path):
    criterion(11, "bit-identical metrics for equal seeds (f64); resume equals uninterrupted run")
    base = dict(model=dict(n_layers=4, d_model=16, n_heads=2, d_ffn=16, text_vocab=8, image_vocab=12, max_seq=16),
                data=dict(n_image=8, n_text=4, batch_size=4, noise=0.1), steps=40, eval_every=10, eval_batches=2,
                lr=0.3, precision="f64", checkpoint_every=10, pretrain_steps=6)
    for method, extra in (("DENSE", {}), ("UNIMOD", {"schedules": {"MMU": {"c_start": 1.0, "c_end": 0.2,
                                                                           "total_steps": 30}}}),
                          ("GUMBEL_COMPETITIVE", {})):
        cfg = ExperimentConfig.from_dict({**base, **extra, "method": method})
        a, b, r = tmp_path / f"{method}_a", tmp_path / f"{method}_b", tmp_path / f"{method}_r"
        train(cfg, a)
        train(cfg, b)
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        train(cfg, r, resume_from=a / "checkpoints" / "step_000020")
        assert (r / "metrics.jsonl").read_bytes() == (a / "metrics.jsonl").read_bytes()
        assert len(read_metrics(a / "metrics.jsonl")) > 40
